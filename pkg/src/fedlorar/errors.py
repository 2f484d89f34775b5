"""Exception types raised across the package."""


class FedLorarError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(FedLorarError, ValueError):
    pass


class NonFiniteResult(FedLorarError, ArithmeticError):
    pass


class EmptyInput(FedLorarError, ValueError):
    pass


class InvalidSpec(FedLorarError, ValueError):
    pass


class NotClassification(FedLorarError, TypeError):
    pass


class IncompatibleSchemas(FedLorarError, ValueError):
    pass


class EmptyDataset(FedLorarError, ValueError):
    pass


class DegenerateWeights(FedLorarError, ZeroDivisionError):
    """The weighting denominator is zero for the requested mechanism."""


class InvalidConfig(FedLorarError, ValueError):
    pass


class WireError(FedLorarError):
    """Base class for frame decoding and socket protocol failures."""


class MalformedFrame(WireError, ValueError):
    pass


class TruncatedFrame(WireError, ValueError):
    pass


class VersionMismatch(WireError, ValueError):
    pass


class PayloadTooLarge(WireError, ValueError):
    pass


class ClientDisconnected(WireError, ConnectionError):
    pass


class ProtocolError(WireError, RuntimeError):
    """A peer sent a well-formed frame that is out of sequence."""
