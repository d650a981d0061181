"""Gaussian non-Markovian open quantum dynamics: simulation and verification.

Stochastic unravellings of Gaussian master equations with two-time kernels,
deterministic oracles (commuting closed form, finite-mode bath embedding,
Lindblad limits), and statistical CP/TP certification.
"""

from .errors import (
    CommutationError,
    ConfigError,
    DegeneracyError,
    DimensionCapError,
    KernelRoutingError,
    NyquistError,
    PronyFitError,
    PSDCertificationError,
    RefusalError,
    StepSizeError,
    ValidationError,
)
from .hilbert import (
    SIGMA_MINUS,
    SIGMA_PLUS,
    SIGMA_X,
    SIGMA_Y,
    SIGMA_Z,
    HeisenbergFamily,
    TimeGrid,
    bohr_decomposition,
    heisenberg_evolve,
    matrix_exponential,
    operator_preset,
)
from .kernels import (
    DiscretizedKernels,
    PronySum,
    PronyTerm,
    SChoice,
    StationarySpectrum,
    TabulatedKernel,
    TimeLocal,
    discretize,
    ou_kernel,
    preset_S,
    prony_fit,
    spectrum_to_kernel,
    validate_psd,
)
from .noise import NoiseSampler, build_real_covariance, moment_test
from .trajectories import (
    CommutingPropagator,
    HierarchyPropagator,
    TrajectoryConfig,
    TrajectoryEnsemble,
    expand_nonhermitian_kernel,
    make_nonhermitian_channels,
    propagate_commuting,
    propagate_hierarchy,
    propagate_markovian_sse,
    propagate_unitary,
)
from .engines import (
    ChoiSeries,
    DensitySeries,
    LindbladSpec,
    MarkovLimitScenario,
    commuting_density,
    integrate_lindblad,
    lindblad_generator,
    markov_limit_sweep,
    mc_choi,
    mc_density,
    run_choi,
    run_density,
    rwa_generator,
    to_interaction_picture,
    trace_distance,
    verify_cp_tp,
)
from .bath_oracle import (
    BathSpec,
    bath_kernel,
    converge_cutoff,
    evolve_joint,
    modes_from_spectrum,
    verify_correlation,
)

__version__ = "0.1.0"
