class VonTradeError(Exception):
    """Base class for errors raised by this package."""


class TopologyError(VonTradeError):
    pass


class SpectrumError(VonTradeError):
    pass


class AuditError(SpectrumError):
    """The spectrum grid violates the one-owner-per-cell invariant."""


class EmbeddingError(VonTradeError):
    pass


class UnreachableError(EmbeddingError):
    """No modulation format reaches the requested distance."""


class ProtocolError(VonTradeError):
    pass


class EncodingError(VonTradeError):
    pass


class ConfigError(VonTradeError):
    pass
