"""Exception hierarchy shared by all solver modules.

Library code raises these; only cli.py turns them into exit codes.
"""


class SubjetError(Exception):
    """Base class for every error raised on purpose by this package."""


class InvalidModelError(SubjetError):
    pass


class DomainError(SubjetError, ValueError):
    """An argument lies outside the set where an operation is defined."""


class SonicExceededError(DomainError):
    def __init__(self, message, t=None, z=None, location=None):
        super().__init__(message)
        self.t = t
        self.z = z
        self.location = location


class InconsistentTableError(SubjetError):
    pass


class GeometryError(SubjetError):
    pass


class ConfigurationError(SubjetError):
    def __init__(self, message, key=None, line=None, column=None):
        where = ""
        if line is not None:
            where = f" (line {line}" + (f", column {column})" if column is not None else ")")
        super().__init__(f"{message}{where}")
        self.key = key
        self.line = line
        self.column = column


class NoFreeBoundaryError(SubjetError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class FreeBoundaryShapeError(SubjetError):
    def __init__(self, message, height=None, crossings=None):
        super().__init__(message)
        self.height = height
        self.crossings = crossings


class LineSearchError(SubjetError):
    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class UnfittableError(SubjetError):
    def __init__(self, message, probes=None):
        super().__init__(message)
        self.probes = probes


class BracketError(SubjetError):
    pass


class InconsistentLambdaError(SubjetError):
    pass


class ExportError(SubjetError, OSError):
    pass
