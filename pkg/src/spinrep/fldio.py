"""FLD1 field container format.

Text header followed by a blank line and a row-major little-endian binary64
payload::

    FLD1
    dims nx ny nz
    origin ox oy oz
    spacing hx hy hz
    kind scalar-real

    <payload>

Kinds: ``scalar-real``, ``scalar-complex``, ``vector3``, ``spin-matrix``,
``orbital-set N``.  Complex samples are interleaved re/im.  A spin-matrix
payload holds the four blocks rho_up, Re sigma, Im sigma, rho_dn.  An
orbital-set payload holds N consecutive spinor blocks, each phi_up then
phi_dn, both complex.  No timestamps: files are byte-reproducible.
"""

from __future__ import annotations

import io

import numpy as np

from .grid import ComplexField, ScalarField, UniformGrid, VectorField

MAGIC = "FLD1"

_F8 = np.dtype("<f8")


def _fmt_floats(vals) -> str:
    return " ".join(format(float(v), ".17g") for v in vals)


def _header(grid: UniformGrid, kind: str) -> bytes:
    lines = [
        MAGIC,
        "dims " + " ".join(str(n) for n in grid.dims),
        "origin " + _fmt_floats(grid.origin),
        "spacing " + _fmt_floats(grid.spacing),
        "kind " + kind,
        "",
    ]
    return ("\n".join(lines) + "\n").encode("ascii")


def _payload_of(obj) -> tuple[str, np.ndarray]:
    from .observables import OrbitalSet, SpinDensityField

    if isinstance(obj, ScalarField):
        return "scalar-real", obj.values.ravel()
    if isinstance(obj, ComplexField):
        v = obj.values.ravel()
        return "scalar-complex", np.column_stack([v.real, v.imag]).ravel()
    if isinstance(obj, VectorField):
        return "vector3", np.ascontiguousarray(obj.values).ravel()
    if isinstance(obj, SpinDensityField):
        blocks = [
            obj.rho_up.values.ravel(),
            obj.sigma.values.real.ravel(),
            obj.sigma.values.imag.ravel(),
            obj.rho_dn.values.ravel(),
        ]
        return "spin-matrix", np.concatenate(blocks)
    if isinstance(obj, OrbitalSet):
        blocks = []
        for orb in obj.orbitals:
            for comp in (orb.up.values, orb.down.values):
                v = comp.ravel()
                blocks.append(np.column_stack([v.real, v.imag]).ravel())
        return f"orbital-set {obj.count}", np.concatenate(blocks)
    raise TypeError(f"cannot serialize {type(obj).__name__} as FLD1")


def write_field(path, obj) -> None:
    """Write any field object to an FLD1 file."""
    kind, flat = _payload_of(obj)
    with open(path, "wb") as fh:
        fh.write(_header(obj.grid if hasattr(obj, "grid") else obj.orbitals[0].up.grid, kind))
        fh.write(np.ascontiguousarray(flat, dtype=_F8).tobytes())


def field_bytes(obj) -> bytes:
    """FLD1 serialization as bytes (used for determinism checks)."""
    buf = io.BytesIO()
    kind, flat = _payload_of(obj)
    buf.write(_header(obj.grid if hasattr(obj, "grid") else obj.orbitals[0].up.grid, kind))
    buf.write(np.ascontiguousarray(flat, dtype=_F8).tobytes())
    return buf.getvalue()


def _parse_header(raw: bytes):
    end = raw.find(b"\n\n")
    if end < 0:
        raise ValueError("FLD1: missing blank line after header")
    head = raw[:end].decode("ascii").splitlines()
    if not head or head[0] != MAGIC:
        raise ValueError("FLD1: bad magic")
    fields = {}
    for line in head[1:]:
        key, _, rest = line.partition(" ")
        fields[key] = rest
    dims = tuple(int(t) for t in fields["dims"].split())
    origin = tuple(float(t) for t in fields["origin"].split())
    spacing = tuple(float(t) for t in fields["spacing"].split())
    kind = fields["kind"]
    grid = UniformGrid(dims, origin, spacing)
    return grid, kind, raw[end + 2 :]


def read_field(path):
    """Read an FLD1 file back into the matching field object."""
    from .observables import OrbitalSet, SpinDensityField, SpinorOrbital

    with open(path, "rb") as fh:
        raw = fh.read()
    grid, kind, body = _parse_header(raw)
    data = np.frombuffer(body, dtype=_F8)
    n = grid.node_count

    def as_complex(flat):
        return flat[0::2] + 1j * flat[1::2]

    if kind == "scalar-real":
        _expect(data, n)
        return ScalarField(grid, data.reshape(grid.dims).copy())
    if kind == "scalar-complex":
        _expect(data, 2 * n)
        return ComplexField(grid, as_complex(data).reshape(grid.dims))
    if kind == "vector3":
        _expect(data, 3 * n)
        return VectorField(grid, data.reshape(grid.dims + (3,)).copy())
    if kind == "spin-matrix":
        _expect(data, 4 * n)
        b = data.reshape(4, *grid.dims)
        return SpinDensityField(
            rho_up=ScalarField(grid, b[0].copy()),
            rho_dn=ScalarField(grid, b[3].copy()),
            sigma=ComplexField(grid, b[1] + 1j * b[2]),
        )
    if kind.startswith("orbital-set"):
        count = int(kind.split()[1])
        _expect(data, count * 4 * n)
        per = 4 * n  # two complex components
        orbs = []
        for k in range(count):
            chunk = data[k * per : (k + 1) * per]
            up = as_complex(chunk[: 2 * n]).reshape(grid.dims)
            dn = as_complex(chunk[2 * n :]).reshape(grid.dims)
            orbs.append(SpinorOrbital(ComplexField(grid, up), ComplexField(grid, dn)))
        return OrbitalSet(orbs)
    raise ValueError(f"FLD1: unknown kind {kind!r}")


def _expect(data, count):
    if data.size != count:
        raise ValueError(f"FLD1: payload has {data.size} doubles, expected {count}")
