"""Error taxonomy shared by library, service and CLI.

Exit-code categories: 0 success, 2 contract violation, 3 numeric failure,
4 I/O failure. The service reports the same categories in job errors.
"""


class DgfnetError(Exception):
    category = "error"
    exit_code = 1


class ContractError(DgfnetError):
    """Caller violated a documented precondition (shapes, ranges, modes)."""

    category = "contract"
    exit_code = 2


class ShapeError(ContractError):
    """Dimension mismatch; message names the operation and offending axes."""


class NumericError(DgfnetError):
    """Non-finite values or numerically invalid state."""

    category = "numeric"
    exit_code = 3


class CheckpointFormatError(ContractError):
    """Checkpoint magic/version/layout does not match this build."""


CATEGORY_EXIT_CODES = {"contract": 2, "numeric": 3, "io": 4, "error": 1}


def category_of(exc: BaseException) -> str:
    if isinstance(exc, DgfnetError):
        return exc.category
    if isinstance(exc, OSError):
        return "io"
    return "error"


def exit_code_of(exc: BaseException) -> int:
    if isinstance(exc, DgfnetError):
        return exc.exit_code
    if isinstance(exc, OSError):
        return 4
    return 1
