"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """A value lies outside the mathematical domain of an operation."""


class ContractError(ValueError):
    """A caller violated an operation's preconditions."""


class StateError(RuntimeError):
    """An object was used in a state that forbids the call."""


class ParameterError(ValueError):
    """A configuration or call parameter is out of range."""


class TopologyError(ValueError):
    """Track free space does not form a single closed loop."""


class PlacementError(ValueError):
    """A pose or footprint could not be placed on free space."""


class FormatError(ValueError):
    """A file is malformed, truncated, or of an unknown version."""


class QueryError(ValueError):
    """A map query landed outside the drivable area."""


class NumericalError(RuntimeError):
    """A loss or gradient became non-finite."""
