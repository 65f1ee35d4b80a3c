"""Exception types shared across the package."""


class THCError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(THCError, ValueError):
    pass


class InfeasibleError(THCError, ValueError):
    """Raised when a (bits, granularity) combination admits no table."""


class PreconditionError(THCError, ValueError):
    pass


class TableNotFoundError(THCError, KeyError):
    pass


class TableFormatError(THCError, ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class OverflowConfigError(THCError, ValueError):
    """Accumulator width cannot hold granularity * workers."""


class ProtocolError(THCError, ValueError):
    def __init__(self, message, field=None):
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field
