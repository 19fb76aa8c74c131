"""
Error types for the tabtoken pipeline
Each maps to one CLI exit code (see tabtoken.cli)
"""


class TabTokenError(Exception):
    """Base class for every error raised by tabtoken"""
    exit_code = 4
    kind = "runtime"


class DataError(TabTokenError):
    """Raised when input data is missing, malformed or inconsistent with a schema"""
    exit_code = 3
    kind = "data"


class InvalidArgument(TabTokenError):
    """Raised when an argument value is outside its legal range"""
    exit_code = 4
    kind = "invalid_argument"


class ContractViolation(TabTokenError):
    """Raised when a numerical primitive is used against its pre-conditions"""
    exit_code = 4
    kind = "contract"


class NumericError(TabTokenError):
    """Raised when training produces non-finite values"""
    exit_code = 4
    kind = "numeric"
