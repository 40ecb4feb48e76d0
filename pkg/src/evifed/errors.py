"""Exception hierarchy shared by all modules."""


class EvifedError(Exception):
    pass


class DimensionError(EvifedError, ValueError):
    pass


class InvalidInputError(EvifedError, ValueError):
    pass


class DomainError(EvifedError, ValueError):
    pass


class ConfigError(EvifedError, ValueError):
    pass


class ProtocolError(EvifedError, RuntimeError):
    pass
