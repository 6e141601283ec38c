"""Exception hierarchy shared by all modules."""


class XplainError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(XplainError):
    """Tensor shapes (or dtypes) do not satisfy an operation's contract."""


class LoadError(XplainError):
    """A model or tensor file could not be loaded."""


class MissingWeightError(LoadError):
    """Manifest references a weight name absent from the container."""


class WeightShapeError(LoadError):
    """A stored weight is inconsistent with the declared layer extents."""


class CycleError(LoadError):
    """The layer graph contains a cycle."""


class GraphError(LoadError):
    """Structural problem in the layer graph (names, references, connectivity)."""


class RegistrationError(XplainError):
    """Duplicate mapping name registered."""


class IncompatibilityError(XplainError):
    """A matched backward mapping cannot be applied to its node."""


class ConfigError(XplainError):
    """Invalid analyzer or command configuration."""


class DomainError(XplainError):
    """Input outside a method's mathematical domain."""


class RegressionError(XplainError):
    """Surrogate regression system is singular."""
