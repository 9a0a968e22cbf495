"""Representability condition checks on discrete (R, j) data.

Hard conditions (positivity, pointwise PSD, integer mass, curl-free fields,
null determinant) produce pass/fail entries.  Function-space conditions
(H^1, W^{1,3/2} membership, weighted L^1 lines) cannot fail on a finite grid;
their discrete norms are emitted as ``finite-reported`` values, optionally
compared against user thresholds.  Quotients by densities are masked to the
region where the denominator exceeds the relative floor, and the mask
coverage is reported.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import (
    EPS_FLOOR,
    ScalarField,
    VectorField,
    curl,
    gradient_values,
    integrate_values,
    interior_mask,
    masked_divide,
)
from .observables import CurrentField, SpinDensityField
from .report import FAIL, FINITE, PASS, RepresentabilityReport

DEFAULT_MASS_TOL = 1e-8
DEFAULT_TOL_DET = 1e-10
# curl tolerance is C * h^2; C calibrated on the analytic single-orbital
# refinement study (desk-scale fields have curvature of order one)
DEFAULT_CURL_C = 10.0


def tol_curl(h: float, C: float = DEFAULT_CURL_C) -> float:
    return C * h * h


@dataclass(frozen=True)
class CurrentAnalysis:
    """Velocity, both vorticity conventions and the weighted suprema."""

    velocity: VectorField
    vorticity_v: VectorField       # curl(j / rho)
    vorticity_rho2: VectorField    # curl(j / rho^2)
    weight_sup: float              # sup f^{(1+delta)/2} |w|
    weight_grad_sup: float         # sup f^{(1+delta)/2} |grad w|
    delta: float
    convention: str
    coverage: float


def _mass_tol(tol=None):
    return DEFAULT_MASS_TOL if tol is None else tol


def check_IN(rho: ScalarField, N: int, *, mass_tol=None) -> RepresentabilityReport:
    """Total-density representability: rho >= 0, mass N, finite sqrt(rho) H1."""
    rep = RepresentabilityReport(f"I_N membership (N={N})")
    vmax = float(np.max(np.abs(rho.values))) or 1.0
    floor = EPS_FLOOR * vmax
    worst = float(np.min(rho.values))
    rep.add("positivity", PASS if worst >= -floor else FAIL, value=worst, tolerance=-floor)

    mass = float(integrate_values(rho.grid, rho.values).real)
    tol = _mass_tol(mass_tol)
    rep.add("mass", PASS if abs(mass - N) <= tol else FAIL, value=mass, tolerance=tol,
            detail=f"target {N}")

    sq = np.sqrt(np.clip(rho.values, 0.0, None))
    h1 = float(integrate_values(rho.grid, np.sum(gradient_values(rho.grid, sq) ** 2, axis=-1)).real)
    rep.add("sqrt_rho_H1_seminorm_sq", FINITE, value=h1)
    return rep


def _w32_norm(grid, values) -> float:
    """Discrete W^{1,3/2} norm surrogate: (int |f|^{3/2} + |grad f|^{3/2})^{2/3}."""
    mag = np.abs(values) ** 1.5
    grad = gradient_values(grid, values)
    gmag = np.sum(np.abs(grad) ** 2, axis=-1) ** 0.75
    total = float(integrate_values(grid, mag + gmag).real)
    return total ** (2.0 / 3.0)


def check_CN(R: SpinDensityField, N: int, *, mass_tol=None,
             thresholds: dict | None = None) -> RepresentabilityReport:
    """Membership conditions for the admissible set of mass-N matrices.

    Pointwise lines (positivity, PSD, mass) are hard pass/fail; the Sobolev
    and weighted-L1 lines are discrete norms reported as finite values.
    """
    rep = RepresentabilityReport(f"C_N membership (N={N})")
    g = R.grid
    tr = R.trace()
    scale = float(np.max(tr)) or 1.0
    floor = EPS_FLOOR * scale

    worst_up = float(np.min(R.rho_up.values))
    worst_dn = float(np.min(R.rho_dn.values))
    rep.add("positivity_up", PASS if worst_up >= -floor else FAIL, value=worst_up, tolerance=-floor)
    rep.add("positivity_dn", PASS if worst_dn >= -floor else FAIL, value=worst_dn, tolerance=-floor)

    det = R.det()
    det_floor = EPS_FLOOR * scale * scale
    worst_det = float(np.min(det))
    rep.add("psd_det", PASS if worst_det >= -det_floor else FAIL,
            value=worst_det, tolerance=-det_floor)

    mass = R.mass()
    tol = _mass_tol(mass_tol)
    rep.add("mass", PASS if abs(mass - N) <= tol else FAIL, value=mass, tolerance=tol,
            detail=f"target {N}")

    # finite-reported Sobolev surrogates
    for label, dens in (("up", R.rho_up.values), ("dn", R.rho_dn.values)):
        sq = np.sqrt(np.clip(dens, 0.0, None))
        h1 = float(integrate_values(g, np.sum(gradient_values(g, sq) ** 2, axis=-1)).real)
        rep.add(f"sqrt_rho_{label}_H1_seminorm_sq", FINITE, value=h1)

    rep.add("sigma_W132_norm", FINITE, value=_w32_norm(g, R.sigma.values))
    sqrt_det = np.sqrt(np.clip(det, 0.0, None))
    rep.add("sqrt_det_W132_norm", FINITE, value=_w32_norm(g, sqrt_det))

    grad_sigma_sq = np.sum(np.abs(gradient_values(g, R.sigma.values)) ** 2, axis=-1)
    q, _, cov = masked_divide(grad_sigma_sq, tr, floor=floor)
    rep.add("grad_sigma_sq_over_rho", FINITE, value=float(integrate_values(g, q).real),
            detail=f"mask coverage {cov:.4f}")

    grad_sd_sq = np.sum(gradient_values(g, sqrt_det) ** 2, axis=-1)
    q2, _, _ = masked_divide(grad_sd_sq, tr, floor=floor)
    rep.add("grad_sqrt_det_sq_over_rho", FINITE, value=float(integrate_values(g, q2).real))

    if thresholds:
        for name, bound in thresholds.items():
            c = rep.get(name)
            if c.value is not None and c.value > bound:
                c.status = FAIL
                c.tolerance = bound
    return rep


def check_C0(R: SpinDensityField, *, tol_det: float = DEFAULT_TOL_DET) -> RepresentabilityReport:
    """Null-determinant test: max |det R| <= tol_det * max(tr R)^2."""
    rep = RepresentabilityReport("C_N^0 null determinant")
    scale = float(np.max(R.trace())) or 1.0
    worst = float(np.max(np.abs(R.det())))
    bound = tol_det * scale * scale
    rep.add("det_zero", PASS if worst <= bound else FAIL, value=worst, tolerance=bound)
    return rep


def check_current_necessary(R: SpinDensityField, j: CurrentField, *,
                            support_eps: float = 1e-8) -> RepresentabilityReport:
    """Necessary mixed-state conditions on the current.

    Reports the discrete value of int |j|^2 / rho (finite-reported) and flags
    a support violation when |j| is non-negligible where rho is floored.
    """
    rep = RepresentabilityReport("necessary current conditions")
    g = R.grid
    rho = R.trace()
    floor = EPS_FLOOR * (float(np.max(rho)) or 1.0)
    jsq = np.sum(j.j.values ** 2, axis=-1)
    q, mask, cov = masked_divide(jsq, rho, floor=floor)
    rep.add("j_sq_over_rho", FINITE, value=float(integrate_values(g, q).real),
            detail=f"mask coverage {cov:.4f}")

    jmax = float(np.sqrt(np.max(jsq))) or 0.0
    outside = np.sqrt(jsq[~mask]) if (~mask).any() else np.zeros(1)
    worst_out = float(np.max(outside)) if outside.size else 0.0
    ok = worst_out <= support_eps * max(jmax, 1e-300)
    rep.add("support", PASS if ok else FAIL, value=worst_out,
            tolerance=support_eps * jmax, detail="max |j| outside supp rho")
    return rep


def _condition_fields(R: SpinDensityField, j: CurrentField, floor):
    """The two single-orbital condition fields and their common mask."""
    g = R.grid
    rho = R.trace()
    im_sgs = np.imag(np.conj(R.sigma.values)[..., None] * gradient_values(g, R.sigma.values))
    mask = (R.rho_up.values > floor) & (R.rho_dn.values > floor) & (rho > floor)
    jn, _, _ = masked_divide(j.j.values, rho, floor=floor)
    a_den = rho * R.rho_dn.values
    b_den = rho * R.rho_up.values
    qa, _, _ = masked_divide(im_sgs, a_den, floor=floor * floor)
    qb, _, _ = masked_divide(im_sgs, b_den, floor=floor * floor)
    field_dn = np.where(mask[..., None], jn - qa, 0.0)
    field_up = np.where(mask[..., None], jn + qb, 0.0)
    return field_dn, field_up, mask


def check_curlfree_N1(R: SpinDensityField, j: CurrentField, *,
                      curl_C: float = DEFAULT_CURL_C,
                      warn=None) -> RepresentabilityReport:
    """Single-orbital curl-free conditions on the pair (R, j).

    Evaluates curl of j/rho -/+ Im(conj(sigma) grad sigma)/(rho rho_dn|up|)
    on the region where both spin densities exceed the floor; passes when the
    max interior curl magnitude of each field is below C * h^2.
    """
    rep = RepresentabilityReport("N=1 curl-free conditions")
    g = R.grid
    c0 = check_C0(R)
    if not c0.passed and warn is not False:
        rep.add("det_zero_warning", FINITE, value=c0.get("det_zero").value,
                detail="det R not null; conditions assume a rank-1 field")

    scale = float(np.max(R.trace())) or 1.0
    floor = EPS_FLOOR * scale
    f_dn, f_up, mask = _condition_fields(R, j, floor)
    core = interior_mask(mask, margin=2)
    h = max(g.spacing)
    bound = tol_curl(h, curl_C)
    for name, fv in (("curl_condition_dn", f_dn), ("curl_condition_up", f_up)):
        c = curl(VectorField(g, fv)).values
        mag = np.sqrt(np.sum(c * c, axis=-1))
        worst = float(np.max(mag[core])) if core.any() else 0.0
        rep.add(name, PASS if worst <= bound else FAIL, value=worst, tolerance=bound)
    rep.extra["mask_coverage"] = float(np.count_nonzero(mask)) / mask.size
    return rep


def curlfree_condition_maxima(R, j, *, margin=2):
    """Max interior |curl| of both condition fields (for refinement studies)."""
    scale = float(np.max(R.trace())) or 1.0
    floor = EPS_FLOOR * scale
    f_dn, f_up, mask = _condition_fields(R, j, floor)
    core = interior_mask(mask, margin=margin)
    out = []
    for fv in (f_dn, f_up):
        c = curl(VectorField(R.grid, fv)).values
        mag = np.sqrt(np.sum(c * c, axis=-1))
        out.append(float(np.max(mag[core])) if core.any() else 0.0)
    return tuple(out)


def analyze_current(R: SpinDensityField, j: CurrentField, delta: float,
                    *, convention: str = "velocity") -> CurrentAnalysis:
    """Vorticity diagnostics and the weighted suprema of the growth condition.

    ``convention`` selects which vorticity feeds the suprema: ``velocity``
    for curl(j/rho), ``rho2`` for curl(j/rho^2).  Both fields are always
    computed.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if convention not in ("velocity", "rho2"):
        raise ValueError("convention must be 'velocity' or 'rho2'")
    g = R.grid
    rho = R.trace()
    floor = EPS_FLOOR * (float(np.max(rho)) or 1.0)
    v, mask, cov = masked_divide(j.j.values, rho, floor=floor)
    v2, _, _ = masked_divide(j.j.values, rho * rho, floor=floor * floor)
    w_v = curl(VectorField(g, v))
    w_r2 = curl(VectorField(g, v2))

    w = w_v if convention == "velocity" else w_r2
    X, Y, Z = g.meshgrid()
    weight = ((1 + X ** 2) * (1 + Y ** 2) * (1 + Z ** 2)) ** (0.5 * (1 + delta))
    core = interior_mask(mask, margin=2)

    wmag = np.sqrt(np.sum(w.values ** 2, axis=-1))
    grad_w = np.stack([gradient_values(g, w.values[..., c]) for c in range(3)], axis=-1)
    gmag = np.sqrt(np.sum(grad_w ** 2, axis=(-1, -2)))
    sup_w = float(np.max((weight * wmag)[core])) if core.any() else 0.0
    sup_g = float(np.max((weight * gmag)[core])) if core.any() else 0.0
    return CurrentAnalysis(
        velocity=VectorField(g, v),
        vorticity_v=w_v,
        vorticity_rho2=w_r2,
        weight_sup=sup_w,
        weight_grad_sup=sup_g,
        delta=delta,
        convention=convention,
        coverage=cov,
    )


def check_mixed_tellgren(rho: ScalarField, j: CurrentField) -> RepresentabilityReport:
    """Weighted velocity-gradient integral (1+|r|^2) rho |grad(j/rho)|^2."""
    rep = RepresentabilityReport("mixed-state velocity-gradient condition")
    g = rho.grid
    floor = EPS_FLOOR * (float(np.max(rho.values)) or 1.0)
    v, mask, cov = masked_divide(j.j.values, rho.values, floor=floor)
    grad_v = np.stack([gradient_values(g, v[..., c]) for c in range(3)], axis=-1)
    gmag_sq = np.sum(grad_v ** 2, axis=(-1, -2))
    X, Y, Z = g.meshgrid()
    w = 1 + X ** 2 + Y ** 2 + Z ** 2
    core = interior_mask(mask, margin=2)
    integrand = np.where(core, w * rho.values * gmag_sq, 0.0)
    rep.add("weighted_velocity_gradient", FINITE,
            value=float(integrate_values(g, integrand).real),
            detail=f"mask coverage {cov:.4f}")
    return rep
