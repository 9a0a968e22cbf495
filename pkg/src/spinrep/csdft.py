"""Constructive current-spin representability for N >= 12.

Pipeline: pointwise matrix square root -> three-way cutoff split along one
axis (integer block masses, ordered supports) -> per-block unit-mass weight
partitions -> block orbitals carrying solved phases -> current-neutral
orthogonalization -> certificates recomputed from the built orbitals.

The three cutoff cases of the mass-splitting analysis all reduce to one
composition

    R_1 = (1 - Xi_1) U + Xi_2 D
    R_2 = Xi_1 (1 - Xi_3) U
    R_3 = Xi_3 U + (1 - Xi_2) D

with U the heavier rank-1 piece and D the lighter one: the window case uses
three genuine transitions, the case with the U-mass entirely to the right of
the window takes Xi_1 == 1, and its mirror takes Xi_3 == 0.  A vanishing
light piece degenerates to scalar weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq
from scipy.special import gamma, hyp2f1

from .errors import (
    InfeasibleSplit,
    InvariantViolation,
    MassNotInteger,
    OutOfGuaranteedRange,
    PreconditionFailed,
    TuningFailed,
)
from .grid import (
    EPS_FLOOR,
    ScalarField,
    UniformGrid,
    VectorField,
    axis_marginal,
    gradient_values,
    integrate_values,
    marginal_profile,
    masked_divide,
)
from .observables import (
    CurrentField,
    OrbitalSet,
    SpinDensityField,
    SpinorOrbital,
    current_from_orbitals,
    gram_deviation,
    reconstruction_error,
    spin_density_from_orbitals,
)
from .grid import ComplexField
from .phases import neutral_orthogonalize, solve_phase_system
from .repcheck import analyze_current, check_CN, check_current_necessary
from .report import FINITE, PASS, RepresentabilityReport
from .sdft import SqrtDecomposition, _smoothstep, matrix_sqrt

MIN_GUARANTEED_N = 12
MASS_TOL = 1e-8
MASS_HARD = 1e-6


@dataclass(frozen=True)
class CutoffProfile:
    """Three ordered monotone 1D switches distributing the rank-1 pieces.

    ``scalar_weights`` is set instead of genuine transitions when the light
    piece vanishes; ``swapped`` records that the roles of the two square-root
    pieces were exchanged so the lighter one always plays the F side.
    """

    axis: int
    knots: np.ndarray
    xi1: np.ndarray
    xi2: np.ndarray
    xi3: np.ndarray
    case: str                       # interior | g-right | g-left | degenerate
    swapped: bool
    targets: tuple[int, int, int]
    scalar_weights: tuple | None = None
    tuning: dict = field(default_factory=dict)

    def support_products(self):
        p1 = float(np.max(np.abs((1.0 - self.xi1) * self.xi2)))
        p2 = float(np.max(np.abs((1.0 - self.xi2) * self.xi3)))
        p3 = float(np.max(np.abs((1.0 - self.xi1) * self.xi3)))
        return p1, p2, p3

    def block_weights_1d(self):
        """Per-block (heavy, light) coefficient profiles."""
        if self.scalar_weights is not None:
            w = self.scalar_weights
            ones = np.ones_like(self.knots)
            return [(w[0] * ones, w[0] * ones),
                    (w[1] * ones, w[1] * ones),
                    (w[2] * ones, w[2] * ones)]
        return [
            (1.0 - self.xi1, self.xi2),
            (self.xi1 * (1.0 - self.xi3), np.zeros_like(self.knots)),
            (self.xi3, 1.0 - self.xi2),
        ]


@dataclass(frozen=True)
class WeightPartition:
    """Unit-mass orbital weights eta_k for one block."""

    etas: list
    block: int
    size: int
    tuning: tuple[float, float, float]
    mollifier_delta: float
    mollifier_norm: float

    @property
    def grid(self) -> UniformGrid:
        return self.etas[0].grid


@dataclass(frozen=True)
class BlockDecomposition:
    """The three spin-density blocks, matching currents and sizes."""

    R_blocks: tuple
    j_blocks: tuple
    sizes: tuple[int, int, int]
    weight_fields: tuple = field(repr=False, default=())   # 3D (heavy, light) pairs
    swapped: bool = False


def _smootherstep_1d(knots, a, b):
    """Quintic 0 -> 1 smoothstep over [a, b] sampled at the knots."""
    if b <= a:
        raise ValueError("degenerate smoothstep window")
    return _smoothstep((knots - a) / (b - a))


def _mass1d(w1d, xi, dens):
    return float(np.sum(w1d * xi * dens))


def _pick_targets(N, F_total, targets=None):
    if targets is not None:
        n1, n2, n3 = (int(t) for t in targets)
        if n1 + n2 + n3 != N or min(n1, n2, n3) < 4:
            raise PreconditionFailed(f"invalid block targets {targets} for N={N}")
        return n1, n2, n3
    base = N // 3
    n1 = n3 = max(4, base)
    n2 = N - n1 - n3
    while n2 < 4:
        n1 -= 1
        n3 = n1
        n2 = N - n1 - n3
    # the side blocks must jointly outweigh the light piece
    while F_total >= n1 + n3 - 1e-9 and n2 > 4:
        n2 -= 1
        n1 = (N - n2 + 1) // 2
        n3 = N - n2 - n1
    return n1, n2, n3


def build_cutoffs(dec: SqrtDecomposition, N: int, targets=None, *,
                  axis: int = 0, transition: float | None = None) -> CutoffProfile:
    """Ordered cutoff profiles giving integer block masses (N1, N2, N3).

    Builds the 1D marginals of the two rank-1 piece densities along the
    chosen axis, classifies the feasibility window, and dispatches one of the
    three constructions; every transition is a quintic smoothstep whose free
    endpoint is tuned by bracketed root finding until the block mass hits its
    integer within 1e-8.
    """
    if N < MIN_GUARANTEED_N:
        raise PreconditionFailed(f"cutoff synthesis requires N >= {MIN_GUARANTEED_N}")
    total = dec.m_up + dec.m_dn
    if abs(total - N) > MASS_TOL * max(1.0, N):
        raise PreconditionFailed(f"decomposition mass {total} != N={N}")

    g = dec.grid
    swapped = dec.m_dn > dec.m_up
    light = dec.f_up() if swapped else dec.f_dn()
    heavy = dec.f_dn() if swapped else dec.f_up()

    prof_f = marginal_profile(ScalarField(g, light), axis)
    prof_g = marginal_profile(ScalarField(g, heavy), axis)
    F_tot, G_tot = prof_f.total, prof_g.total
    knots = prof_f.knots
    w1d = g.axis_weights(axis)
    n1, n2, n3 = _pick_targets(N, F_tot, targets)

    if F_tot <= MASS_TOL:
        weights = (n1 / N, n2 / N, n3 / N)
        ones = np.ones_like(knots)
        return CutoffProfile(axis=axis, knots=knots, xi1=ones, xi2=ones,
                             xi3=np.zeros_like(knots), case="degenerate",
                             swapped=swapped, targets=(n1, n2, n3),
                             scalar_weights=weights,
                             tuning={"weights": list(weights)})

    F = prof_f.cumulative
    G = prof_g.cumulative
    fd = prof_f.density
    gd = prof_g.density
    h = g.spacing[axis]
    span = knots[-1] - knots[0]

    # classify on a fixed fine line so the construction (alpha0, eps) is
    # resolution independent up to the O(h^2) convergence of the profiles
    aline = np.linspace(knots[0], knots[-1], 4097)
    Fl = np.interp(aline, knots, F)
    Gl = np.interp(aline, knots, G)

    inside = (Fl > F_tot - n1) & (Fl < n3)
    if not inside.any():
        raise InfeasibleSplit("empty feasibility window for the cutoff axis",
                              profiles={"F": F, "G": G, "knots": knots})
    m_line = Fl + n1 - F_tot
    M_line = Fl + G_tot - n3
    margin_i = np.where(inside,
                        np.minimum.reduce([Gl - m_line, M_line - Gl,
                                           Fl - (F_tot - n1), n3 - Fl]),
                        -np.inf)

    def mass_case_deviation(xi1, xi2, xi3):
        m1 = _mass1d(w1d, 1.0 - xi1, gd) + _mass1d(w1d, xi2, fd)
        m2 = _mass1d(w1d, xi1 * (1.0 - xi3), gd)
        m3 = _mass1d(w1d, xi3, gd) + _mass1d(w1d, 1.0 - xi2, fd)
        return (m1, m2, m3)

    def finish(xi1, xi2, xi3, case, tuning):
        masses = mass_case_deviation(xi1, xi2, xi3)
        worst = max(abs(m - t) for m, t in zip(masses, (n1, n2, n3)))
        if worst > MASS_HARD:
            raise MassNotInteger(f"block masses {masses} miss {(n1, n2, n3)}")
        tuning = dict(tuning)
        tuning["masses"] = list(masses)
        return CutoffProfile(axis=axis, knots=knots, xi1=xi1, xi2=xi2, xi3=xi3,
                             case=case, swapped=swapped, targets=(n1, n2, n3),
                             tuning=tuning)

    def tune_start(end, dens, target, sign=1.0):
        """Smoothstep completing at ``end``; slide the start until
        sum w * xi * dens == target (sign=-1 tunes the complement)."""
        lo = end - 8.0 * max(span, 1.0)
        hi = end - 0.25 * h

        def val(a):
            xi = _smootherstep_1d(knots, a, end)
            got = _mass1d(w1d, xi if sign > 0 else (1.0 - xi), dens)
            return got - target

        if val(lo) * val(hi) > 0:
            raise TuningFailed(f"no bracket tuning transition start (target {target})")
        a = brentq(val, lo, hi, xtol=1e-13, rtol=8.9e-16, maxiter=200)
        return _smootherstep_1d(knots, a, end), a

    def tune_end(start, dens, target, sign=1.0):
        """Smoothstep rising from ``start``; slide the end until
        sum w * xi * dens == target."""
        lo = start + 0.25 * h
        hi = start + 8.0 * max(span, 1.0)

        def val(b):
            xi = _smootherstep_1d(knots, start, b)
            got = _mass1d(w1d, xi if sign > 0 else (1.0 - xi), dens)
            return got - target

        if val(lo) * val(hi) > 0:
            raise TuningFailed(f"no bracket tuning transition end (target {target})")
        b = brentq(val, lo, hi, xtol=1e-13, rtol=8.9e-16, maxiter=200)
        return _smootherstep_1d(knots, start, b), b

    if np.max(margin_i) > 1e-9:
        # window case: G passes strictly through the open strip
        i0 = int(np.argmax(margin_i))
        alpha0 = float(aline[i0])
        Fi, Gi = float(Fl[i0]), float(Gl[i0])

        def eps_margin(eps):
            Fe = float(np.interp(alpha0 + eps, knots, F))
            Ge = float(np.interp(alpha0 + eps, knots, G))
            return min(n3 - Fe, Fi + G_tot - Ge - n3, Gi + F_tot - Fe - n1)

        def sampled_feasible(eps):
            # the knot-sampled masses must leave both tunings a bracket
            xi2 = _smootherstep_1d(knots, alpha0, alpha0 + eps)
            t3 = n3 - _mass1d(w1d, 1.0 - xi2, fd)
            t1 = n1 - _mass1d(w1d, xi2, fd)
            res3 = _mass1d(w1d, _smootherstep_1d(knots, alpha0 + eps,
                                                 alpha0 + eps + 0.25 * h), gd)
            res1 = _mass1d(w1d, 1.0 - _smootherstep_1d(knots, alpha0 - 0.25 * h,
                                                       alpha0), gd)
            gap = 1e-7 * N
            return (t3 > gap and t1 > gap and res3 > t3 + gap and res1 > t1 + gap)

        if transition is not None:
            if eps_margin(transition) <= 1e-9 or not sampled_feasible(transition):
                raise InfeasibleSplit(
                    f"requested transition width {transition} infeasible",
                    profiles={"F": F, "G": G, "knots": knots})
            eps = float(transition)
        else:
            eps0 = span / 512.0
            base = eps_margin(eps0)
            if base <= 1e-9:
                raise InfeasibleSplit("window margin vanishes at the grid scale",
                                      profiles={"F": F, "G": G, "knots": knots})
            candidates = []
            eps = eps0
            while eps < 0.25 * span:
                if eps_margin(eps) >= 0.35 * base and sampled_feasible(eps):
                    candidates.append(eps)
                eps *= 2.0
            if not candidates:
                raise InfeasibleSplit("no sampled-feasible transition width",
                                      profiles={"F": F, "G": G, "knots": knots})
            eps = max(candidates)

        xi2 = _smootherstep_1d(knots, alpha0, alpha0 + eps)
        t3 = n3 - _mass1d(w1d, 1.0 - xi2, fd)
        xi3, b3 = tune_end(alpha0 + eps, gd, t3)
        t1 = n1 - _mass1d(w1d, xi2, fd)
        xi1, a1 = tune_start(alpha0, gd, t1, sign=-1.0)
        return finish(xi1, xi2, xi3, "interior",
                      {"alpha0": alpha0, "eps": eps, "xi1_start": a1, "xi3_end": b3})

    if np.min(np.where(inside, m_line - Gl, np.inf)) > 0:
        # heavy mass lies right of the window: Xi_1 == 1
        if F_tot <= n1 + 1e-9:
            raise InfeasibleSplit("light mass too small for the g-right case",
                                  profiles={"F": F, "G": G, "knots": knots})
        margin = np.where(inside, np.minimum.reduce(
            [Fl - (F_tot - n1), n3 - Fl, m_line - Gl]), -np.inf)
        i0 = int(np.argmax(margin))
        alpha0 = float(aline[i0])
        xi2, a2 = tune_start(alpha0, fd, float(n1))
        t3 = n3 - _mass1d(w1d, 1.0 - xi2, fd)
        xi3, b3 = tune_end(alpha0, gd, t3)
        xi1 = np.ones_like(knots)
        return finish(xi1, xi2, xi3, "g-right",
                      {"alpha0": alpha0, "xi2_start": a2, "xi3_end": b3})

    if np.min(np.where(inside, Gl - M_line, np.inf)) > 0:
        # heavy mass lies left of the window: Xi_3 == 0
        if F_tot <= n3 + 1e-9:
            raise InfeasibleSplit("light mass too small for the g-left case",
                                  profiles={"F": F, "G": G, "knots": knots})
        margin = np.where(inside, np.minimum.reduce(
            [Fl - (F_tot - n1), n3 - Fl, Gl - M_line]), -np.inf)
        i0 = int(np.argmax(margin))
        alpha0 = float(aline[i0])
        xi2, b2 = tune_end(alpha0, fd, float(n3), sign=-1.0)
        t1 = n1 - _mass1d(w1d, xi2, fd)
        xi1, a1 = tune_start(alpha0, gd, t1, sign=-1.0)
        xi3 = np.zeros_like(knots)
        return finish(xi1, xi2, xi3, "g-left",
                      {"alpha0": alpha0, "xi2_end": b2, "xi1_start": a1})

    raise InfeasibleSplit("cumulative profiles match no cutoff case",
                          profiles={"F": F, "G": G, "knots": knots})


def _piece_data(dec: SqrtDecomposition, swapped: bool):
    """(heavy, light) piece descriptors: matrix, spinor, density, current sign."""
    up = {
        "R": dec.R_up,
        "spinor": (dec.r_up.values.astype(complex), np.conj(dec.s.values)),
        "density": dec.f_up(),
        "sign": -1.0,
    }
    dn = {
        "R": dec.R_dn,
        "spinor": (dec.s.values.copy(), dec.r_dn.values.astype(complex)),
        "density": dec.f_dn(),
        "sign": +1.0,
    }
    return (dn, up) if swapped else (up, dn)


def _broadcast_axis(vals_1d, grid, axis):
    shape = [1, 1, 1]
    shape[axis] = grid.dims[axis]
    return np.broadcast_to(np.asarray(vals_1d).reshape(shape), grid.dims)


def split_blocks(dec: SqrtDecomposition, j: CurrentField, cut: CutoffProfile) -> BlockDecomposition:
    """Assemble the three (R_b, j_b) blocks from the cutoff profiles.

    Currents split through the per-piece ingredients
    (piece_density / rho) j + sign * Im(conj(s) grad s); verifies the sum
    identities, integer masses and the pointwise null determinants.
    """
    g = dec.grid
    heavy, light = _piece_data(dec, cut.swapped)
    rho = heavy["density"] + light["density"]
    floor = EPS_FLOOR * (float(np.max(rho)) or 1.0)
    im_sgs = np.imag(np.conj(dec.s.values)[..., None] * gradient_values(g, dec.s.values))
    vmask, _, _ = masked_divide(j.j.values, rho, floor=floor)

    j_piece = {}
    for name, piece in (("heavy", heavy), ("light", light)):
        j_piece[name] = piece["density"][..., None] * vmask + piece["sign"] * im_sgs

    weights = []
    R_blocks = []
    j_blocks = []
    for (a1d, b1d) in cut.block_weights_1d():
        a = _broadcast_axis(a1d, g, cut.axis)
        b = _broadcast_axis(b1d, g, cut.axis)
        weights.append((a, b))
        Rb = heavy["R"].scaled(a).plus(light["R"].scaled(b))
        jb = a[..., None] * j_piece["heavy"] + b[..., None] * j_piece["light"]
        R_blocks.append(Rb)
        j_blocks.append(CurrentField(VectorField(g, jb)))

    # invariants: sums, masses, null determinants
    R_sum = R_blocks[0].plus(R_blocks[1]).plus(R_blocks[2])
    R_full = heavy["R"].plus(light["R"])
    scale = float(np.max(R_full.trace())) or 1.0
    dev = max(
        float(np.max(np.abs(R_sum.rho_up.values - R_full.rho_up.values))),
        float(np.max(np.abs(R_sum.rho_dn.values - R_full.rho_dn.values))),
        float(np.max(np.abs(R_sum.sigma.values - R_full.sigma.values))),
    )
    if dev > 1e-12 * scale:
        raise InvariantViolation(f"block sum misses R by {dev:.3e}")
    j_sum = j_blocks[0].j.values + j_blocks[1].j.values + j_blocks[2].j.values
    # blocks reconstruct the masked current rho * v exactly; Im(s grad s)
    # telescopes out through the support identities
    j_ref = rho[..., None] * vmask
    j_dev = float(np.max(np.abs(j_sum - j_ref)))
    j_scale = float(np.max(np.abs(j_ref))) or 1.0
    if j_dev > 1e-12 * j_scale:
        raise InvariantViolation(f"block currents miss j by {j_dev:.3e}")
    for b, (Rb, target) in enumerate(zip(R_blocks, cut.targets)):
        mass = Rb.mass()
        if abs(mass - target) > MASS_HARD:
            raise InvariantViolation(f"block {b + 1} mass {mass} misses {target}")
        det_worst = float(np.max(np.abs(Rb.det())))
        if det_worst > 1e-10 * scale * scale:
            raise InvariantViolation(f"block {b + 1} determinant {det_worst:.3e} not null")

    return BlockDecomposition(
        R_blocks=tuple(R_blocks),
        j_blocks=tuple(j_blocks),
        sizes=tuple(cut.targets),
        weight_fields=tuple(weights),
        swapped=cut.swapped,
    )


# ----------------------------- eta partitions -----------------------------

def mollifier_norm(delta: float) -> float:
    """Total integral of (1 + y^2)^{-(1+delta)/2} over the line."""
    return float(np.sqrt(np.pi) * gamma(delta / 2.0) / gamma((1.0 + delta) / 2.0))


def mollifier_cdf(x, delta: float, norm: float | None = None):
    """Normalized cumulative of the slow-decay mollifier, exact via 2F1."""
    x = np.asarray(x, dtype=float)
    m = mollifier_norm(delta) if norm is None else norm
    prim = x * hyp2f1(0.5, (1.0 + delta) / 2.0, 1.5, -x * x)
    return 0.5 + prim / m


# leading weights vary along three distinct axes: x3, x1, x2
ETA_AXES = (2, 0, 1)


def build_eta(rho_b: ScalarField, N_b: int, delta: float, *,
              mass_tol: float = MASS_TOL) -> WeightPartition:
    """Partition of unity eta_k with unit rho_b-weighted masses.

    eta_1 follows the mollifier cumulative along x3, eta_2 along x1 inside
    the remainder, eta_3 along x2 inside what is left, and eta_k for k >= 4
    split the final remainder evenly; the three shifts are tuned one after
    the other by bracketed bisection, after which the k >= 4 masses hold
    automatically.
    """
    if N_b < 4:
        raise PreconditionFailed(f"weight partition needs block size >= 4, got {N_b}")
    if delta <= 0:
        raise PreconditionFailed("delta must be positive")
    g = rho_b.grid
    mass = float(integrate_values(g, rho_b.values).real)
    if abs(mass - N_b) > mass_tol * max(1.0, N_b):
        raise PreconditionFailed(f"block mass {mass} != {N_b}")
    norm = mollifier_norm(delta)

    def tune(axis, weight_field, target):
        dens = axis_marginal(g, weight_field, axis)
        w1d = g.axis_weights(axis)
        knots = g.axis_coords(axis)

        def val(shift):
            return float(np.sum(w1d * dens * mollifier_cdf(knots + shift, delta, norm))) - target

        lo, hi = -1.0, 1.0
        for _ in range(60):
            if val(lo) < 0 < val(hi):
                break
            lo *= 2.0
            hi *= 2.0
            if hi > 1e9:
                raise TuningFailed(f"no bracket for weight shift on axis {axis}")
        shift = brentq(val, lo, hi, xtol=1e-12, rtol=8.9e-16, maxiter=300)
        profile = mollifier_cdf(knots + shift, delta, norm)
        return shift, _broadcast_axis(profile, g, axis)

    rho = rho_b.values
    alpha, xi_a = tune(ETA_AXES[0], rho, N_b / 2.0)
    eta1 = (2.0 / N_b) * xi_a

    rem1 = (1.0 - eta1) * rho
    beta, xi_b = tune(ETA_AXES[1], rem1, (N_b - 1) / 2.0)
    eta2 = (2.0 / (N_b - 1)) * xi_b * (1.0 - eta1)

    rem2 = (1.0 - eta1 - eta2) * rho
    gamma_s, xi_c = tune(ETA_AXES[2], rem2, (N_b - 2) / 2.0)
    eta3 = (2.0 / (N_b - 2)) * xi_c * (1.0 - eta1 - eta2)

    rest = (1.0 - eta1 - eta2 - eta3) / (N_b - 3)
    etas = [eta1, eta2, eta3] + [rest.copy() for _ in range(N_b - 3)]

    ssum = sum(etas)
    if float(np.max(np.abs(ssum - 1.0))) > 1e-12:
        raise InvariantViolation("weights fail to telescope to 1")
    for k, e in enumerate(etas):
        if float(np.min(e)) < -EPS_FLOOR:
            raise InvariantViolation(f"eta_{k + 1} negative")
        m = float(integrate_values(g, e * rho).real)
        if abs(m - 1.0) > mass_tol:
            raise InvariantViolation(f"eta_{k + 1} weighted mass {m} != 1")

    return WeightPartition(
        etas=[ScalarField(g, e) for e in etas],
        block=0,
        size=N_b,
        tuning=(float(alpha), float(beta), float(gamma_s)),
        mollifier_delta=delta,
        mollifier_norm=norm,
    )


# ---------------------------- block orbitals ----------------------------

def _block_modulus_spinor(dec, cut, blocks, index):
    heavy, light = _piece_data(dec, cut.swapped)
    a, b = blocks.weight_fields[index]
    sa = np.sqrt(np.clip(a, 0.0, None))
    if cut.scalar_weights is not None:
        # degenerate split: the light piece is void; mixing its spinor in
        # would break the pointwise cross-term cancellation
        return sa * heavy["spinor"][0], sa * heavy["spinor"][1]
    sb = np.sqrt(np.clip(b, 0.0, None))
    up = sa * heavy["spinor"][0] + sb * light["spinor"][0]
    dn = sa * heavy["spinor"][1] + sb * light["spinor"][1]
    return up, dn


def build_block_orbitals(R_b: SpinDensityField, j_b: CurrentField,
                         part: WeightPartition, dec: SqrtDecomposition,
                         cut: CutoffProfile, block_index: int, *,
                         blocks: BlockDecomposition,
                         velocity: VectorField | None = None,
                         previous: OrbitalSet | None = None,
                         rho_total: np.ndarray | None = None,
                         tol_rec: float = 1e-8, tol_hr: float = 1e-9,
                         tol_ps: float = 1e-2, seed: int = 0):
    """Orbitals sqrt(eta_k) Psi_b e^{i u_k} realizing (R_b, j_b).

    The modulus spinor combines the square-root pieces with the block's
    cutoff weights; the phases solve the weighted system for the shared
    velocity target.  When ``previous`` is given the new orbitals are
    orthogonalized against it (and each other) with the current-neutral
    level-set phases, and the full combined set is returned; otherwise only
    this block's internally orthogonalized set.

    Returns (orbital_set, info dict).
    """
    g = R_b.grid
    up, dn = _block_modulus_spinor(dec, cut, blocks, block_index)
    rho_b = R_b.trace()

    if velocity is None:
        heavy, light = _piece_data(dec, cut.swapped)
        rho = heavy["density"] + light["density"]
        floor = EPS_FLOOR * (float(np.max(rho)) or 1.0)
        a, b = blocks.weight_fields[block_index]
        im_sgs = np.imag(np.conj(dec.s.values)[..., None]
                         * gradient_values(g, dec.s.values))
        intrinsic = (heavy["sign"] * a + light["sign"] * b)[..., None] * im_sgs
        v_vals, _, _ = masked_divide(j_b.j.values - intrinsic, rho_b, floor=floor)
        velocity = VectorField(g, v_vals)

    phases, rel_res = solve_phase_system(
        part.etas, velocity, ScalarField(g, rho_b),
        tol_ps=tol_ps, seed=seed,
    )

    own = []
    for k, (eta, ph) in enumerate(zip(part.etas, phases)):
        amp = np.sqrt(np.clip(eta.values, 0.0, None))
        f = np.exp(1j * ph.samples) if ph.axis is None else np.exp(1j * ph.broadcast(g))
        own.append(SpinorOrbital(
            ComplexField(g, amp * up * f),
            ComplexField(g, amp * dn * f),
        ))

    # per-orbital density certificate: Phi_k Phi_k^* == eta_k R_b
    worst = 0.0
    for eta, orb in zip(part.etas, own):
        target = R_b.scaled(eta.values)
        got = spin_density_from_orbitals(OrbitalSet([orb]))
        diff = (
            np.abs(got.rho_up.values - target.rho_up.values)
            + np.abs(got.rho_dn.values - target.rho_dn.values)
            + 2.0 * np.abs(got.sigma.values - target.sigma.values)
        )
        num = float(integrate_values(g, diff).real)
        den = float(integrate_values(g, target.trace()).real) or 1.0
        worst = max(worst, num / den)
    if worst > tol_rec:
        raise InvariantViolation(f"block orbital density error {worst:.3e}")

    info = {
        "block": block_index + 1,
        "phase_residual": rel_res,
        "orbital_density_error": worst,
        "eta_tuning": list(part.tuning),
    }

    if rho_total is None:
        rho_total = rho_b
    # the joint solve bounds every pair directly, so half the Gram budget
    # is enough headroom for the final certificate
    gram_target = max(tol_hr, 0.5 * tol_rec)
    if previous is not None:
        combined = list(previous.orbitals) + own
        combined, diag = neutral_orthogonalize(
            combined, rho_total, g, start=len(previous.orbitals),
            tol=gram_target, seed=seed + 101 * (block_index + 1),
        )
        info["orthogonalization"] = diag
        return OrbitalSet(combined), info
    own, diag = neutral_orthogonalize(own, rho_total, g, start=1,
                                      tol=gram_target,
                                      seed=seed + 101 * (block_index + 1))
    info["orthogonalization"] = diag
    return OrbitalSet(own), info


# ------------------------------- pipeline -------------------------------

def current_residual(R: SpinDensityField, j_target: CurrentField,
                     S: OrbitalSet):
    """Density-weighted current mismatch of a built orbital set.

    Returns (absolute, relative) where absolute = sqrt(int |j_S - j|^2 / rho)
    over the density support and relative divides by the same norm of the
    target (absolute repeated when the target vanishes).
    """
    g = R.grid
    rho = R.trace()
    floor = EPS_FLOOR * (float(np.max(rho)) or 1.0)
    jS = current_from_orbitals(S).j.values
    diff = jS - j_target.j.values
    q, _, _ = masked_divide(np.sum(diff * diff, axis=-1), rho, floor=floor)
    absres = float(np.sqrt(integrate_values(g, q).real))
    qt, _, _ = masked_divide(np.sum(j_target.j.values ** 2, axis=-1), rho, floor=floor)
    tnorm = float(np.sqrt(integrate_values(g, qt).real))
    rel = absres / tnorm if tnorm > 0 else absres
    return absres, rel


def build_csdft(R: SpinDensityField, j: CurrentField, N: int, delta: float, *,
                targets=None, axis: int = 0, vorticity: str = "velocity",
                tol_rec: float = 1e-8, tol_hr: float = 1e-9,
                tol_ps: float = 1e-2, seed: int = 0, strict: bool = True):
    """Full constructive pipeline for a pair (R, j) at N >= 12.

    Returns (orbital_set, manifest).  The manifest records every tuning
    parameter and certificate; all certificates are recomputed from the
    built orbitals by the public observables, never trusted from
    intermediate state.
    """
    if N < MIN_GUARANTEED_N:
        raise OutOfGuaranteedRange(
            f"constructive guarantee starts at N = {MIN_GUARANTEED_N}; N = {N} is open"
        )
    if strict:
        cn = check_CN(R, N)
        bad = [c.name for c in cn.checks if c.status == "fail"]
        if bad:
            raise PreconditionFailed(f"C_{N} membership failed: {bad}")
        nec = check_current_necessary(R, j)
        if not nec.passed:
            raise PreconditionFailed("necessary current conditions failed")
    analysis = analyze_current(R, j, delta, convention=vorticity)

    g = R.grid
    dec = matrix_sqrt(R)
    cut = build_cutoffs(dec, N, targets, axis=axis)
    blocks = split_blocks(dec, j, cut)

    rho = R.trace()
    floor = EPS_FLOOR * (float(np.max(rho)) or 1.0)
    v_vals, _, _ = masked_divide(j.j.values, rho, floor=floor)
    velocity = VectorField(g, v_vals)

    manifest = {
        "pipeline": "csdft",
        "N": N,
        "delta": delta,
        "seed": seed,
        "axis": axis,
        "vorticity_convention": vorticity,
        "block_sizes": list(blocks.sizes),
        "cutoff_case": cut.case,
        "cutoff_swapped": cut.swapped,
        "cutoff_tuning": {k: (list(v) if isinstance(v, (list, tuple)) else float(v))
                          for k, v in cut.tuning.items()},
        "support_products": list(cut.support_products()),
        "liebcond_weight_sup": analysis.weight_sup,
        "liebcond_weight_grad_sup": analysis.weight_grad_sup,
        "blocks": [],
    }

    S = None
    for b in range(3):
        part = build_eta(ScalarField(g, blocks.R_blocks[b].trace()),
                         blocks.sizes[b], delta)
        S, info = build_block_orbitals(
            blocks.R_blocks[b], blocks.j_blocks[b], part, dec, cut, b,
            blocks=blocks, velocity=velocity, previous=S, rho_total=rho,
            tol_rec=tol_rec, tol_hr=tol_hr, tol_ps=tol_ps, seed=seed,
        )
        manifest["blocks"].append(info)

    dev = gram_deviation(S)
    recon = reconstruction_error(R, spin_density_from_orbitals(S))
    absres, rel = current_residual(R, j, S)
    h = max(g.spacing)
    manifest["certificates"] = {
        "gram_deviation": dev,
        "reconstruction_error": recon,
        "current_residual_abs": absres,
        "current_residual_rel": rel,
        "grid_h": h,
    }
    if dev > tol_rec or recon > tol_rec:
        raise InvariantViolation(
            f"end-to-end certificates missed: gram {dev:.3e}, recon {recon:.3e}"
        )
    return S, manifest


def mixed_scale_certificate(R: SpinDensityField, j: CurrentField, k: int, N: int, *,
                            orbitals: OrbitalSet | None = None,
                            certificate: dict | None = None) -> RepresentabilityReport:
    """Mixed-state certificate for the scaled pair (k/N)(R, j).

    Requires an existing determinant certificate for (R, j) at size N; the
    scaled pair is represented by the uniform convex combination of the
    k-orbital sub-determinants, recorded as weights.
    """
    if k < 1 or k > N:
        raise PreconditionFailed(f"k must lie in 1..{N}")
    if orbitals is None and certificate is None:
        raise PreconditionFailed("needs a built orbital set or its certificate")
    if orbitals is not None and orbitals.count != N:
        raise PreconditionFailed("orbital count differs from N")

    from math import comb

    rep = RepresentabilityReport(f"mixed-state scaling certificate (k={k}, N={N})")
    count = comb(N, k)
    weight = 1.0 / count
    rep.add("convex_combination", PASS, value=weight,
            detail=f"{count} sub-determinant weights of {weight!r} each")
    mass = (k / N) * R.mass()
    rep.add("scaled_mass", PASS if abs(mass - k) <= 1e-8 * max(1.0, k) else FINITE,
            value=mass, tolerance=1e-8, detail=f"target {k}")
    if certificate is not None:
        rep.extra["source_certificate"] = certificate
    if k == N:
        rep.extra["weights"] = [1.0]
    elif k == 1:
        rep.extra["weights"] = [1.0 / N] * N
    else:
        rep.extra["weights"] = {"count": count, "weight": weight}
    return rep
