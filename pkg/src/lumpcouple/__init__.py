"""Lumping checks and common-image couplings for discrete-time Markov chains."""

from . import numeric
from .chains import (
    ChainSpec,
    Distribution,
    FddTable,
    StateSpace,
    TransitionKernel,
    dense_kernel,
    fdd,
    geometric_smoothing,
    marginal_at,
    prune_unreachable,
    sample_trajectory,
    stationary_distribution,
    time_reversal,
    validate_chain,
)
from .coupling import (
    CouplingResult,
    InhomogeneousChainSpec,
    PhiVector,
    ProductStateSpace,
    RMatrix,
    build_R,
    build_coupling,
    build_delta,
    build_inhomogeneous_coupling,
    build_quasistationary_coupling,
    build_stationary_coupling,
    couple_many,
    diaconis_fill_intertwining,
    iterate_phi,
)
from .errors import (
    AbsorptionMismatch,
    HypothesisEvidenceFailed,
    LumpCoupleError,
    NormalizationFailed,
    NotConverged,
    NotIntertwined,
    NotIrreducible,
    NotQuasistationary,
    NotStationary,
    PhiNotConverged,
    ShapeMismatch,
    TrajectoryBudgetExceeded,
)
from .lumping import (
    DynkinReport,
    ExactLumpingWitness,
    ImageMarkovReport,
    LumpingMap,
    compare_image_processes,
    compare_image_to_chain,
    dynkin_check,
    exact_lumping_discover,
    exact_lumping_verify,
    identity_map,
    image_fdd,
    image_markov_test,
    initial_law_admissible,
    lift_strong,
)
from .verify import (
    VerificationReport,
    monte_carlo_check,
    verify_conditional_independence,
    verify_exact_projection,
    verify_joint_law_formula,
    verify_marginals,
    verify_stationarity,
    verify_strong_projection,
)

__version__ = "0.1.0"
