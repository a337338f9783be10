"""Exception types raised across the package."""


class DiwseError(Exception):
    """Base class for all package errors."""


class DimensionMismatchError(DiwseError, ValueError):
    pass


class InvalidStateError(DiwseError, ValueError):
    """A matrix failed the density-operator checks."""


class DegenerateProbabilityError(DiwseError, ValueError):
    """Both outcomes of a measurement have (numerically) zero probability."""


class DomainError(DiwseError, ValueError):
    """A formula was evaluated outside the range where it is defined."""


class CalibrationError(DiwseError):
    """The device bases do not reproduce the optimal CHSH statistics."""

    def __init__(self, message, cell=None):
        super().__init__(message)
        self.cell = cell


class MemoryCapacityError(DiwseError):
    """An adversary tried to hold more qubits than its memory allows."""


class InconsistentRoundError(DiwseError, ValueError):
    """Round fields violate the protocol's consistency rules."""


class GeometryError(DiwseError, ValueError):
    """Positions or timing window cannot support the requested run."""


class QuantumPayloadError(DiwseError):
    """A cheater tried to send a quantum system over the classical link."""


class ConfigError(DiwseError, ValueError):
    """Invalid experiment configuration."""

    def __init__(self, message, field=None):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field
