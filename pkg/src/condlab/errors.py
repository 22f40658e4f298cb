"""Exception hierarchy shared across condlab."""


class CondlabError(Exception):
    """Base class for every error raised by condlab."""


class DimensionError(CondlabError, ValueError):
    pass


class InvalidValueError(CondlabError, ValueError):
    pass


class CapacityError(CondlabError, MemoryError):
    pass


class EmptyBatchError(CondlabError, ValueError):
    pass


class BatchTooSmallError(CondlabError, ValueError):
    pass


class ConfigError(CondlabError, ValueError):
    """Invalid configuration; ``path`` names the offending field when known."""

    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class ParameterError(CondlabError, ValueError):
    pass


class InvalidLabelError(CondlabError, ValueError):
    pass


class CacheMismatchError(CondlabError, RuntimeError):
    pass


class TopologyError(CondlabError, ValueError):
    pass


class FormatError(CondlabError, ValueError):
    pass


class LengthError(CondlabError, ValueError):
    pass
