"""Exception types raised by the library."""


class MlMatVampError(Exception):
    """Base class for all library errors."""


class DimensionError(MlMatVampError):
    """Invalid or mismatched matrix dimensions."""


class InvalidCovarianceError(MlMatVampError):
    """A matrix that must be PSD has an eigenvalue below tolerance."""


class InvalidModelError(MlMatVampError):
    """Layer stack does not chain, or a layer is mis-specified."""


class InvalidConfigError(MlMatVampError):
    """Unknown activation/prior name or out-of-range parameter."""


class NoDensityError(MlMatVampError):
    """Operation needs a transition density the layer does not have."""


class NumericalError(MlMatVampError):
    """A linear solve or factorization failed below the precision floor."""


class DegenerateBeliefError(MlMatVampError):
    """All quadrature weights underflowed for some row."""

    def __init__(self, row, msg=None):
        self.row = row
        super().__init__(msg or f"belief weights underflowed on row {row}")


class MapNoConvergenceError(MlMatVampError):
    """Newton iteration did not reach tolerance."""

    def __init__(self, row, grad_norm, msg=None):
        self.row = row
        self.grad_norm = grad_norm
        super().__init__(
            msg or f"MAP Newton did not converge on row {row} "
            f"(grad inf-norm {grad_norm:.3e})"
        )


class DivergedError(MlMatVampError):
    """A message became non-finite; carries the trace recorded so far."""

    def __init__(self, msg, trace=None):
        self.trace = trace
        super().__init__(msg)


class NotComputedError(MlMatVampError):
    """Requested quantity was not recorded during the run."""


class InvalidPairingError(MlMatVampError):
    """Two result objects do not belong to the same run/grid."""
