"""Exception types shared across the package."""


class NmRouteError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(NmRouteError, ValueError):
    """Tensor dimensions do not match what an operation requires."""


class MaskError(NmRouteError, ValueError):
    """A sparsity mask does not match the weight it is applied to."""


class FormatError(NmRouteError, ValueError):
    """Malformed serialized data (tensor files, compressed weights, configs)."""


class ContractError(NmRouteError, ValueError):
    """An API precondition was violated by the caller."""


class DegenerateSampleError(NmRouteError, ValueError):
    """A synthesized sample cannot be labeled (e.g. zero-variance residual)."""
