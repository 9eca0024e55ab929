"""Exception types shared across the package."""


class FlowadError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(FlowadError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(FlowadError):
    """A value lies outside the mathematical domain of the operation."""


class ContractError(FlowadError):
    """A documented precondition was violated by the caller."""


class SingularityError(FlowadError):
    """A matrix that must be invertible is (numerically) singular."""


class StateError(FlowadError):
    """An object was used before reaching the required state."""


class DegenerateInputError(FlowadError):
    """Input data carries no usable signal (e.g. zero variance)."""


class NumericsError(FlowadError):
    """A numeric quantity became non-finite where finiteness is required."""


class ConfigError(FlowadError):
    """An experiment or model configuration is inconsistent or incomplete."""


class FormatError(FlowadError):
    """A file does not conform to its declared binary/text format."""
