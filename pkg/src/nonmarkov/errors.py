"""Exception types shared across the package.

``ValidationError`` flags inputs that violate a documented contract.
``RefusalError`` subclasses flag numerically meaningful refusals; the CLI maps
them to exit code 3, configuration problems (``ConfigError``) to exit code 2.
"""


class ValidationError(ValueError):
    """Input violates a documented precondition or invariant."""


class ConfigError(ValueError):
    """Malformed run configuration; carries the offending field path."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"config field '{field}': {message}")


class RefusalError(RuntimeError):
    """Base class for numerical refusals (CLI exit code 3)."""


class PSDCertificationError(RefusalError):
    """Kernel or covariance failed its positivity certificate."""

    def __init__(self, min_eigenvalue: float, scale: float, context: str):
        self.min_eigenvalue = min_eigenvalue
        self.scale = scale
        super().__init__(
            f"{context}: min eigenvalue {min_eigenvalue:.3e} below tolerance "
            f"(scale {scale:.3e})"
        )


class KernelRoutingError(RefusalError):
    """Kernel variant must be handled by a different engine."""


class CommutationError(RefusalError):
    """Coupling family is not commuting; use the hierarchy engine."""

    def __init__(self, max_commutator: float, tolerance: float):
        self.max_commutator = max_commutator
        self.tolerance = tolerance
        super().__init__(
            f"coupling operators do not commute (max commutator norm "
            f"{max_commutator:.3e} > {tolerance:.3e}); use the hierarchy engine"
        )


class PronyFitError(RefusalError):
    """Exponential-sum fit missed the requested tolerance."""

    def __init__(self, residual: float, tolerance: float):
        self.residual = residual
        self.tolerance = tolerance
        super().__init__(
            f"exponential fit residual {residual:.3e} exceeds requested "
            f"tolerance {tolerance:.3e}"
        )


class NyquistError(RefusalError):
    """Frequency grid too coarse for the requested time grid."""

    def __init__(self, domega: float, t_max: float):
        self.domega = domega
        self.t_max = t_max
        super().__init__(
            f"frequency spacing {domega:.3e} cannot resolve oscillations over "
            f"t_max {t_max:.3e} (need domega * t_max < pi)"
        )


class DimensionCapError(RefusalError):
    """A dimension or index count exceeded its configured cap."""

    def __init__(self, count: int, cap: int, what: str):
        self.count = count
        self.cap = cap
        super().__init__(f"{what}: {count} exceeds cap {cap}")


class StepSizeError(RefusalError):
    """Integrator norm drift exceeded its bound; refuse instead of degrading."""

    def __init__(self, drift: float, bound: float):
        self.drift = drift
        self.bound = bound
        super().__init__(
            f"norm drift {drift:.3e} exceeds bound {bound:.3e}; reduce the step size"
        )


class DegeneracyError(RefusalError):
    """Frequency clusters too close to resolve unambiguously."""

    def __init__(self, gap: float, tolerance: float):
        self.gap = gap
        self.tolerance = tolerance
        super().__init__(
            f"frequency clusters separated by {gap:.3e} cannot be resolved at "
            f"tolerance {tolerance:.3e}"
        )
