"""spinrep: constructive N-representability for spin-density matrix fields.

Decides, certifies and constructively realizes representability of 2x2
spin-density matrix fields R (and paramagnetic currents j) by Slater
determinants on uniform 3D grids, with closed-loop verification of every
construction by recomputing the observables from the built orbitals.
"""

from .grid import (
    ComplexField,
    MassProfile,
    ScalarField,
    UniformGrid,
    VectorField,
    curl,
    gradient,
    integrate,
    marginal_profile,
    profile_inverse,
)
from .observables import (
    CurrentField,
    OrbitalSet,
    SpinDensityField,
    SpinorOrbital,
    current_from_orbitals,
    gram_matrix,
    kinetic_energy,
    magnetization,
    spin_density_from_orbitals,
)
from .phases import (
    PhaseField,
    PhaseStepParam,
    curlfree_potential,
    hobby_rice_phase,
    orthogonalize_append,
    solve_phase_system,
)
from .repcheck import (
    CurrentAnalysis,
    analyze_current,
    check_C0,
    check_CN,
    check_IN,
    check_curlfree_N1,
    check_current_necessary,
    check_mixed_tellgren,
)
from .report import RepresentabilityReport
from .sdft import SqrtDecomposition, build_N, build_single, build_two, matrix_sqrt
from .csdft import (
    BlockDecomposition,
    CutoffProfile,
    WeightPartition,
    build_csdft,
    build_cutoffs,
    build_eta,
    mixed_scale_certificate,
    split_blocks,
)

__version__ = "0.1.0"
