"""Constructive Slater representability of spin-density matrix fields.

``build_single`` realizes a null-determinant field by one spinor orbital via
the ratio-interpolated construction; ``build_two`` splits a mass-2 field
through the pointwise matrix square root into two rank-1 pieces and
recombines their orbitals with two Hobby-Rice phases; ``build_N`` peels off
one unit of mass per induction step and re-orthogonalizes with a phase-only
append.  Every builder certifies its output by independent recomputation of
the Gram matrix and the spin-density matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NotPSD, PreconditionFailed, ReconstructionFailed
from .grid import EPS_FLOOR, ComplexField, ScalarField
from .observables import (
    OrbitalSet,
    SpinDensityField,
    SpinorOrbital,
    gram_deviation,
    overlap_integrand,
    reconstruction_error,
    spin_density_from_orbitals,
)
from .phases import hobby_rice_phase, orthogonalize_append
from .repcheck import check_C0, check_CN

TOL_REC = 1e-8
EPS_MASS = 1e-10
# internal phase-solver target; leaves headroom under the 1e-8 certificates
TOL_HR_INTERNAL = 1e-9


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


@dataclass(frozen=True)
class SqrtDecomposition:
    """Pointwise 2x2 PSD square root and the two rank-1 summands.

    sqrt(R) = [[r_up, s], [conj(s), r_dn]]; R_up/R_dn are the rank-1
    matrices of the spinors (r_up, conj(s)) and (s, r_dn), summing to R.
    """

    r_up: ScalarField
    r_dn: ScalarField
    s: ComplexField
    R_up: SpinDensityField
    R_dn: SpinDensityField
    m_up: float
    m_dn: float

    @property
    def grid(self):
        return self.r_up.grid

    def f_up(self) -> np.ndarray:
        """Trace density of R_up."""
        return self.r_up.values ** 2 + np.abs(self.s.values) ** 2

    def f_dn(self) -> np.ndarray:
        return self.r_dn.values ** 2 + np.abs(self.s.values) ** 2


@dataclass(frozen=True)
class ConstructionTrace:
    """Per-node record of the single-orbital construction branches."""

    chi: ScalarField
    xi: ScalarField
    lambda1: ScalarField
    mu1: ScalarField
    lambda2: ScalarField
    mu2: ScalarField
    alpha_re: ScalarField
    beta_im: ScalarField
    region_labels: np.ndarray = field(repr=False)  # 0 void, 1 up, 2 band, 3 down


def matrix_sqrt(R: SpinDensityField, *, eps_floor: float = EPS_FLOOR) -> SqrtDecomposition:
    """Closed-form pointwise square root of a PSD 2x2 matrix field.

    sqrt(R) = (R + sqrt(det R) I) / sqrt(tr R + 2 sqrt(det R)) where the
    trace exceeds the floor, zero elsewhere.
    """
    g = R.grid
    tr = R.trace()
    det = R.det()
    scale = float(np.max(tr)) or 1.0
    if float(np.min(R.rho_up.values)) < -eps_floor * scale or \
       float(np.min(R.rho_dn.values)) < -eps_floor * scale:
        raise NotPSD("negative diagonal density beyond floor")
    if float(np.min(det)) < -eps_floor * scale * scale:
        raise NotPSD(f"det R dips to {np.min(det):.3e} beyond the PSD floor")

    sq = np.sqrt(np.clip(det, 0.0, None))
    live = tr > eps_floor * scale
    denom = np.where(live, np.sqrt(np.clip(tr + 2.0 * sq, 0.0, None)), 1.0)
    r_up = np.where(live, (np.clip(R.rho_up.values, 0.0, None) + sq) / denom, 0.0)
    r_dn = np.where(live, (np.clip(R.rho_dn.values, 0.0, None) + sq) / denom, 0.0)
    s = np.where(live, R.sigma.values / denom, 0.0)

    R_up = SpinDensityField(
        ScalarField(g, r_up * r_up),
        ScalarField(g, np.abs(s) ** 2),
        ComplexField(g, s * r_up),
    )
    R_dn = SpinDensityField(
        ScalarField(g, np.abs(s) ** 2),
        ScalarField(g, r_dn * r_dn),
        ComplexField(g, s * r_dn),
    )
    return SqrtDecomposition(
        r_up=ScalarField(g, r_up),
        r_dn=ScalarField(g, r_dn),
        s=ComplexField(g, s),
        R_up=R_up,
        R_dn=R_dn,
        m_up=R_up.mass(),
        m_dn=R_dn.mass(),
    )


def build_single(R: SpinDensityField, *, strict: bool = True,
                 tol_rec: float = TOL_REC):
    """One spinor orbital representing a null-determinant field R.

    The orbital is evaluated by branch to avoid 0/0: where rho_up dominates,
    Phi = (sqrt(rho_up), conj(sigma)/sqrt(rho_up)); where rho_dn dominates,
    Phi = (sigma/sqrt(rho_dn), sqrt(rho_dn)); in the transition band the
    interpolated lambda/mu forms, with phi_dn = conj(sigma) phi_up / rho_up
    so the off-diagonal of the rebuilt matrix lands on sigma.

    Returns (orbital, trace); raises ReconstructionFailed if the rebuilt
    matrix misses R in relative L1 by more than ``tol_rec``.
    """
    if strict:
        if not check_C0(R).passed:
            raise PreconditionFailed("det R is not pointwise null within tolerance")
        cn = check_CN(R, 1)
        bad = [c.name for c in cn.checks if c.status == "fail"]
        if bad:
            raise PreconditionFailed(f"C_1 membership failed: {bad}")

    g = R.grid
    ru = R.rho_up.values
    rd = R.rho_dn.values
    sig = R.sigma.values
    alpha = sig.real
    beta = sig.imag
    tr = ru + rd
    scale = float(np.max(tr)) or 1.0
    live = tr > EPS_FLOOR * scale

    region_up = live & (ru >= rd)
    region_dn = live & (2.0 * ru <= rd)
    region_band = live & ~region_up & ~region_dn

    phi_up = np.zeros(g.dims, dtype=complex)
    phi_dn = np.zeros(g.dims, dtype=complex)
    chi = np.zeros(g.dims)
    xi = np.zeros(g.dims)

    # dominant-up branch: chi = 1
    safe_ru = np.where(region_up, ru, 1.0)
    su = np.sqrt(np.where(region_up, ru, 0.0))
    phi_up[region_up] = su[region_up]
    phi_dn[region_up] = (np.conj(sig) / np.sqrt(safe_ru))[region_up]
    chi[region_up] = 1.0

    # dominant-down branch: chi = 0
    safe_rd = np.where(region_dn, rd, 1.0)
    sd = np.sqrt(np.where(region_dn, rd, 0.0))
    phi_dn[region_dn] = sd[region_dn]
    phi_up[region_dn] = (sig / np.sqrt(safe_rd))[region_dn]

    # transition band: raw lambda/mu with regularized denominators
    rb = np.where(region_band, rd, 1.0)
    ub = np.where(region_band, ru, 1.0)
    ratio = np.where(region_band, ru / rb, 1.0)
    chi_band = _smoothstep(2.0 * ratio - 1.0)
    chi[region_band] = chi_band[region_band]
    lam1 = np.sqrt(alpha * alpha + chi_band * chi_band * beta * beta) / np.sqrt(rb)
    mu1 = np.sqrt(np.clip(1.0 - chi_band * chi_band, 0.0, None)) * beta / np.sqrt(rb)
    up_band = lam1 + 1j * mu1
    dn_band = np.conj(sig) * up_band / ub
    phi_up[region_band] = up_band[region_band]
    phi_dn[region_band] = dn_band[region_band]

    # trace bookkeeping
    ratio_all = np.where(live, ru / np.where(rd > EPS_FLOOR * scale, rd, np.inf), 0.0)
    ratio_all = np.where(live & (rd <= EPS_FLOOR * scale), np.inf, ratio_all)
    with np.errstate(invalid="ignore"):
        xi = np.where(live, _smoothstep(np.where(np.isfinite(ratio_all), ratio_all, 2.0) - 1.0), 0.0)
    labels = np.zeros(g.dims, dtype=np.int8)
    labels[region_up] = 1
    labels[region_band] = 2
    labels[region_dn] = 3

    orb = SpinorOrbital(ComplexField(g, phi_up), ComplexField(g, phi_dn))
    trace = ConstructionTrace(
        chi=ScalarField(g, chi),
        xi=ScalarField(g, xi),
        lambda1=ScalarField(g, phi_up.real.copy()),
        mu1=ScalarField(g, phi_up.imag.copy()),
        lambda2=ScalarField(g, phi_dn.real.copy()),
        mu2=ScalarField(g, phi_dn.imag.copy()),
        alpha_re=ScalarField(g, alpha.copy()),
        beta_im=ScalarField(g, beta.copy()),
        region_labels=labels,
    )
    err = reconstruction_error(R, spin_density_from_orbitals(OrbitalSet([orb])))
    if err > tol_rec:
        raise ReconstructionFailed(
            f"single-orbital rebuild misses R by {err:.3e} (tol {tol_rec:.1e})",
            error=err,
        )
    return orb, trace


def _combine(a: SpinorOrbital, ca, b: SpinorOrbital, cb) -> SpinorOrbital:
    g = a.grid
    return SpinorOrbital(
        ComplexField(g, ca * a.up.values + cb * b.up.values),
        ComplexField(g, ca * a.down.values + cb * b.down.values),
    )


def _certify(R, S, tol_rec, gram_tol=TOL_REC):
    dev = gram_deviation(S)
    if dev > gram_tol:
        raise ReconstructionFailed(f"Gram deviation {dev:.3e} above {gram_tol:.1e}", error=dev)
    err = reconstruction_error(R, spin_density_from_orbitals(S))
    if err > tol_rec:
        raise ReconstructionFailed(f"R rebuild error {err:.3e} above {tol_rec:.1e}", error=err)
    return dev, err


def build_two(R: SpinDensityField, *, strict: bool = True, tol_rec: float = TOL_REC,
              axis: int = 0, seed: int = 0) -> OrbitalSet:
    """Two orthonormal orbitals representing a mass-2 field R.

    Splits through the matrix square root into rank-1 pieces, represents the
    normalized pieces as single orbitals, then enforces the normalization
    constraint (one phase u) and the four orthogonality relations (one phase
    v against three overlap integrands, the complex one counting twice).
    """
    if strict:
        cn = check_CN(R, 2)
        bad = [c.name for c in cn.checks if c.status == "fail"]
        if bad:
            raise PreconditionFailed(f"C_2 membership failed: {bad}")
    g = R.grid
    dec = matrix_sqrt(R)

    if dec.m_up < EPS_MASS or dec.m_dn < EPS_MASS:
        # degenerate: all mass in one rank-1 piece; split it across two phases
        piece = dec.R_up if dec.m_up >= dec.m_dn else dec.R_dn
        mass = piece.mass()
        orb, _ = build_single(piece.scaled(1.0 / mass), strict=False)
        dens = ComplexField(g, orb.density().astype(complex))
        w = hobby_rice_phase([dens], axis=axis, tol=TOL_HR_INTERNAL, seed=seed)
        twin = orb.with_phase(w.broadcast(g))
        S = OrbitalSet([orb, twin])
        _certify(R, S, tol_rec)
        return S

    tilde1, _ = build_single(dec.R_up.scaled(1.0 / dec.m_up), strict=False)
    tilde2, _ = build_single(dec.R_dn.scaled(1.0 / dec.m_dn), strict=False)

    f = ComplexField(g, overlap_integrand(tilde1, tilde2))
    u = hobby_rice_phase([f], axis=axis, tol=TOL_HR_INTERNAL, seed=seed)
    tilde2u = tilde2.with_phase(u.broadcast(g))

    # the v constraints see f e^{iu}, which oscillates along u's axis; solve
    # v along the next axis to keep its marginal measures smooth
    X = overlap_integrand(tilde1, tilde2u)
    rho1 = ComplexField(g, tilde1.density().astype(complex))
    rho2 = ComplexField(g, tilde2.density().astype(complex))
    v = hobby_rice_phase(
        [rho1, rho2, ComplexField(g, X.real.astype(complex)),
         ComplexField(g, X.imag.astype(complex))],
        axis=(axis + 1) % 3, tol=TOL_HR_INTERNAL, seed=seed + 1,
    )

    cu = np.sqrt(dec.m_up / 2.0)
    cd = np.sqrt(dec.m_dn / 2.0)
    phi1 = _combine(tilde1, cu, tilde2u, cd)
    phi2 = _combine(tilde1, cu, tilde2u, -cd).with_phase(v.broadcast(g))
    S = OrbitalSet([phi1, phi2])
    _certify(R, S, tol_rec)
    return S


def build_N(R: SpinDensityField, N: int, *, strict: bool = True,
            tol_rec: float = TOL_REC, axis: int = 0, seed: int = 0) -> OrbitalSet:
    """N orthonormal orbitals representing a mass-N field R (SDFT theorem).

    N = 1 and 2 dispatch to the dedicated builders.  For N >= 3 the matrix
    square root splits R into rank-1 pieces; the heavier piece donates one
    unit of mass as a normalized null-determinant field (built as a single
    orbital and phase-appended), the remainder recurses at N - 1.
    """
    if N < 1:
        raise PreconditionFailed("N must be >= 1")
    if strict:
        cn = check_CN(R, N)
        bad = [c.name for c in cn.checks if c.status == "fail"]
        if bad:
            raise PreconditionFailed(f"C_{N} membership failed: {bad}")
    if N == 1:
        orb, _ = build_single(R, strict=False, tol_rec=tol_rec)
        return OrbitalSet([orb])
    if N == 2:
        return build_two(R, strict=False, tol_rec=tol_rec, axis=axis, seed=seed)

    dec = matrix_sqrt(R)
    # without-loss swap: peel from whichever rank-1 piece carries mass >= 1
    if dec.m_up >= 1.0:
        peel, m_peel, other = dec.R_up, dec.m_up, dec.R_dn
    else:
        peel, m_peel, other = dec.R_dn, dec.m_dn, dec.R_up
    R1 = peel.scaled(1.0 / m_peel)
    R2 = peel.scaled(1.0 - 1.0 / m_peel).plus(other)

    rest = build_N(R2, N - 1, strict=False, tol_rec=tol_rec, axis=axis, seed=seed + N)
    candidate, _ = build_single(R1, strict=False, tol_rec=tol_rec)
    # rotate the phase axis per level so appended step phases do not stack
    # oscillations onto one marginal direction
    appended = orthogonalize_append(rest, candidate, axis=(axis + N) % 3,
                                    tol=TOL_HR_INTERNAL, seed=seed + 17 * N)
    S = OrbitalSet(list(rest.orbitals) + [appended])
    _certify(R, S, tol_rec)
    return S
