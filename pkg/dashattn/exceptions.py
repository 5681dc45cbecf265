'''Exception classes for dashattn'''


class DashAttnError(Exception):
    '''The root dashattn exception class'''
    pass


class ShapeError(DashAttnError, ValueError):
    '''Exception class for inconsistent array shapes'''
    pass


class DegenerateRowError(DashAttnError):
    '''Exception class for rows without any admissible entry'''
    pass


class FormatError(DashAttnError):
    '''Exception class for malformed tensor or mask files'''
    pass


class DomainError(DashAttnError, ValueError):
    '''Exception class for inputs outside a function's domain'''
    pass


class RangeError(DashAttnError, IndexError):
    '''Exception class for chunk indices beyond the mask width'''
    pass


class TraceError(DashAttnError):
    '''Exception class for stale, empty or corrupted forward traces'''
    pass


class ConfigError(DashAttnError):
    '''Exception class for invalid run or attention configurations'''
    pass


class VerificationError(DashAttnError):
    '''Exception class for outputs that disagree with their oracle'''
    pass


class DiagonalOnly(DashAttnError):
    '''Raised when a query has no routable chunk and only the diagonal
    branch is attended'''
    pass
