"""Physical observables of spinor orbital sets.

The spin-density matrix of a determinant built from orbitals
``Phi_k = (phi_up_k, phi_dn_k)`` is the pointwise sum of the rank-1 matrices
``Phi_k Phi_k^*`` with off-diagonal entry ``sigma = phi_up * conj(phi_dn)``.
The paramagnetic current is ``sum_k Im(conj(phi) grad phi)`` summed over both
spin components.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatch
from .grid import (
    ComplexField,
    ScalarField,
    UniformGrid,
    VectorField,
    gradient_values,
    integrate_values,
    require_same_grid,
)


@dataclass(frozen=True)
class SpinorOrbital:
    """Two-component complex spinor (phi_up, phi_dn) on one grid."""

    up: ComplexField
    down: ComplexField

    def __post_init__(self):
        require_same_grid(self.up, self.down)

    @property
    def grid(self) -> UniformGrid:
        return self.up.grid

    def norm_sq(self) -> float:
        dens = np.abs(self.up.values) ** 2 + np.abs(self.down.values) ** 2
        return float(integrate_values(self.grid, dens).real)

    def density(self) -> np.ndarray:
        return np.abs(self.up.values) ** 2 + np.abs(self.down.values) ** 2

    def scaled(self, factor) -> "SpinorOrbital":
        return SpinorOrbital(
            ComplexField(self.grid, self.up.values * factor),
            ComplexField(self.grid, self.down.values * factor),
        )

    def with_phase(self, phase_values: np.ndarray) -> "SpinorOrbital":
        """Multiply both components by exp(i * phase)."""
        f = np.exp(1j * phase_values)
        return self.scaled(f)


@dataclass(frozen=True)
class OrbitalSet:
    """Ordered list of spinor orbitals on a common grid."""

    orbitals: list

    def __post_init__(self):
        if not self.orbitals:
            raise ValueError("OrbitalSet needs at least one orbital")
        require_same_grid(*[o.up for o in self.orbitals])

    @property
    def count(self) -> int:
        return len(self.orbitals)

    @property
    def grid(self) -> UniformGrid:
        return self.orbitals[0].grid

    def __iter__(self):
        return iter(self.orbitals)

    def __getitem__(self, k):
        return self.orbitals[k]


@dataclass(frozen=True)
class SpinDensityField:
    """2x2 Hermitian matrix field [[rho_up, sigma], [conj(sigma), rho_dn]]."""

    rho_up: ScalarField
    rho_dn: ScalarField
    sigma: ComplexField

    def __post_init__(self):
        require_same_grid(self.rho_up, self.rho_dn, self.sigma)

    @property
    def grid(self) -> UniformGrid:
        return self.rho_up.grid

    def trace(self) -> np.ndarray:
        return self.rho_up.values + self.rho_dn.values

    def det(self) -> np.ndarray:
        return self.rho_up.values * self.rho_dn.values - np.abs(self.sigma.values) ** 2

    def mass(self) -> float:
        return float(integrate_values(self.grid, self.trace()).real)

    def scaled(self, w) -> "SpinDensityField":
        """Pointwise scaling by a scalar or sample array w >= 0."""
        return SpinDensityField(
            ScalarField(self.grid, self.rho_up.values * w),
            ScalarField(self.grid, self.rho_dn.values * w),
            ComplexField(self.grid, self.sigma.values * w),
        )

    def plus(self, other: "SpinDensityField") -> "SpinDensityField":
        require_same_grid(self.rho_up, other.rho_up)
        return SpinDensityField(
            ScalarField(self.grid, self.rho_up.values + other.rho_up.values),
            ScalarField(self.grid, self.rho_dn.values + other.rho_dn.values),
            ComplexField(self.grid, self.sigma.values + other.sigma.values),
        )


@dataclass(frozen=True)
class CurrentField:
    """Paramagnetic current sample field."""

    j: VectorField

    @property
    def grid(self) -> UniformGrid:
        return self.j.grid


def spin_density_from_orbitals(S: OrbitalSet) -> SpinDensityField:
    """Pointwise sum over orbitals of [[|up|^2, up*conj(dn)], [..., |dn|^2]]."""
    g = S.grid
    rho_up = np.zeros(g.dims)
    rho_dn = np.zeros(g.dims)
    sigma = np.zeros(g.dims, dtype=complex)
    for orb in S:
        rho_up += np.abs(orb.up.values) ** 2
        rho_dn += np.abs(orb.down.values) ** 2
        sigma += orb.up.values * np.conj(orb.down.values)
    return SpinDensityField(
        ScalarField(g, rho_up), ScalarField(g, rho_dn), ComplexField(g, sigma)
    )


def current_from_orbitals(S: OrbitalSet) -> CurrentField:
    """j = sum_k Im(conj(phi_up) grad phi_up + conj(phi_dn) grad phi_dn)."""
    g = S.grid
    j = np.zeros(g.dims + (3,))
    for orb in S:
        for comp in (orb.up.values, orb.down.values):
            grad = gradient_values(g, comp)
            j += np.imag(np.conj(comp)[..., None] * grad)
    return CurrentField(VectorField(g, j))


def magnetization(R: SpinDensityField) -> VectorField:
    """m = tr(sigma_Pauli R) = (2 Re sigma, -2 Im sigma, rho_up - rho_dn)."""
    g = R.grid
    m = np.stack(
        [
            2.0 * R.sigma.values.real,
            -2.0 * R.sigma.values.imag,
            R.rho_up.values - R.rho_dn.values,
        ],
        axis=-1,
    )
    return VectorField(g, m)


def overlap(a: SpinorOrbital, b: SpinorOrbital) -> complex:
    """Scalar product <a|b> = integral of conj(a_up) b_up + conj(a_dn) b_dn."""
    if not a.grid.same_as(b.grid):
        raise GridMismatch("orbital grids differ")
    integrand = np.conj(a.up.values) * b.up.values + np.conj(a.down.values) * b.down.values
    return complex(integrate_values(a.grid, integrand))


def overlap_integrand(a: SpinorOrbital, b: SpinorOrbital) -> np.ndarray:
    """Pointwise integrand of <a|b> (complex sample array)."""
    return np.conj(a.up.values) * b.up.values + np.conj(a.down.values) * b.down.values


def gram_matrix(S: OrbitalSet) -> np.ndarray:
    """Hermitian N x N matrix of orbital overlaps."""
    n = S.count
    G = np.zeros((n, n), dtype=complex)
    for i in range(n):
        for j in range(i, n):
            v = overlap(S[i], S[j])
            G[i, j] = v
            G[j, i] = np.conj(v)
    return G


def gram_deviation(S: OrbitalSet) -> float:
    """Max absolute entry of gram_matrix - identity."""
    G = gram_matrix(S)
    return float(np.max(np.abs(G - np.eye(S.count))))


def kinetic_energy(S: OrbitalSet) -> float:
    """sum_k integral |grad phi_up|^2 + |grad phi_dn|^2 (discrete surrogate)."""
    g = S.grid
    acc = np.zeros(g.dims)
    for orb in S:
        for comp in (orb.up.values, orb.down.values):
            grad = gradient_values(g, comp)
            acc += np.sum(np.abs(grad) ** 2, axis=-1)
    return float(integrate_values(g, acc).real)


def reconstruction_error(R_target: SpinDensityField, R_built: SpinDensityField) -> float:
    """Relative L1 error between two spin-density fields.

    Integrates |d rho_up| + |d rho_dn| + 2 |d sigma| against the target mass.
    """
    require_same_grid(R_target.rho_up, R_built.rho_up)
    g = R_target.grid
    diff = (
        np.abs(R_target.rho_up.values - R_built.rho_up.values)
        + np.abs(R_target.rho_dn.values - R_built.rho_dn.values)
        + 2.0 * np.abs(R_target.sigma.values - R_built.sigma.values)
    )
    num = float(integrate_values(g, diff).real)
    den = float(integrate_values(g, np.abs(R_target.trace())).real)
    return num / max(den, 1e-300)
