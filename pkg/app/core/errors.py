"""Exception hierarchy for estimator, model and pipeline failures.

Everything raised on purpose by the services derives from ``EvidenceError`` so
that the CLI and the HTTP layer can map it to an exit status / 400 response.
"""


class EvidenceError(Exception):
    """Root of all domain errors."""


class InvalidInputError(EvidenceError, ValueError):
    """Input violates a documented precondition (size, sign, finiteness)."""


class DegenerateInputError(EvidenceError):
    """Input is well-formed but carries no information (e.g. all -inf)."""


class EstimatorBreakdownError(EvidenceError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class EstimatorUndefinedError(EvidenceError):
    """IDR denominator mean(ratio) - 1 is not positive."""


class NoValidKError(EvidenceError):
    """Every point of the inflation grid was undefined."""


class DegenerateSampleError(EvidenceError):
    def __init__(self, message: str, directions: list[list[float]] | None = None):
        super().__init__(message)
        self.directions = directions or []


class BlockConstraintError(InvalidInputError):
    def __init__(self, message: str, block: str):
        super().__init__(f"{block}: {message}")
        self.block = block


class NewickParseError(EvidenceError, ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class TopologyError(EvidenceError):
    """Tree is not an unrooted binary tree over unique labels."""


class AlignmentError(EvidenceError):
    """Malformed alignment or alignment/tree name mismatch."""


class UnsupportedError(EvidenceError):
    pass


class ChainError(EvidenceError):
    def __init__(self, message: str, draw_index: int | None = None):
        super().__init__(message)
        self.draw_index = draw_index


class DataMismatchError(EvidenceError):
    """Evidence values computed on different data cannot be compared."""


class NumericError(EvidenceError):
    pass
