from enum import Enum


class ErrorCode(Enum):
    SUCCESS = 0
    SHAPE_MISMATCH = 1
    DEGENERATE_VARIANCE = 2
    INVALID_TARGET = 3
    NON_SCALAR_LOSS = 4
    EMPTY_TAPE = 5
    INVALID_SPACING = 6
    MALFORMED_DATASET = 7
    UNLABELLED_SAMPLE = 8
    UNKNOWN_DOMAIN = 9
    ALPHA_OUT_OF_RANGE = 10
    INSUFFICIENT_SAMPLES = 11
    DOMAIN_CONTRACT = 12
    OUTPUT_EXISTS = 13
    CHECKPOINT_MISMATCH = 14
    NON_FINITE = 15
    EMPTY_INPUT = 16
    INVALID_CONFIG = 17
    UNKNOWN_ERROR = 99


class ExitCode(Enum):
    SUCCESS = 0
    USAGE = 1
    DATA = 2
    NUMERICAL = 3


_DATA_ERRORS = {
    ErrorCode.MALFORMED_DATASET,
    ErrorCode.UNLABELLED_SAMPLE,
    ErrorCode.UNKNOWN_DOMAIN,
    ErrorCode.INSUFFICIENT_SAMPLES,
    ErrorCode.DOMAIN_CONTRACT,
    ErrorCode.CHECKPOINT_MISMATCH,
    ErrorCode.INVALID_SPACING,
}


class DannSegError(Exception):
    """Raised by library code; carries an ErrorCode that the CLI maps to an exit code."""

    def __init__(self, code: ErrorCode, message: str):
        super().__init__(f"{code.name}: {message}")
        self.code = code
        self.message = message

    @property
    def exit_code(self) -> ExitCode:
        if self.code == ErrorCode.NON_FINITE:
            return ExitCode.NUMERICAL
        if self.code in _DATA_ERRORS:
            return ExitCode.DATA
        return ExitCode.USAGE


class NumericalError(DannSegError):
    """Non-finite loss detected; `context` describes the offending batch."""

    def __init__(self, message: str, context: dict = None):
        super().__init__(ErrorCode.NON_FINITE, message)
        self.context = context or {}
