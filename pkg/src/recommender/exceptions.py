class RecommenderBaseException(Exception):
    """Base exception class for recommender errors.

    Every error carries a short machine-parsable ``code`` (e.g. ``"no-candidates"``)
    next to the human-readable message.
    """

    def __init__(self, code: str, message: str = ""):
        self.code = code
        self.message = message or code
        super().__init__(f"{code}: {self.message}")


class ValidationError(RecommenderBaseException):
    """Raised when configuration validation fails."""
    pass


class UsageError(RecommenderBaseException):
    """Raised when the command line is malformed."""
    pass


class DatasetError(RecommenderBaseException):
    """Raised when interaction or evidence data is malformed or violates invariants."""
    pass


class EncoderError(RecommenderBaseException):
    """Raised when a sequence cannot be encoded."""
    pass


class NumericalError(RecommenderBaseException):
    """Raised when a loss or gradient becomes non-finite."""
    pass


class RetrievalError(RecommenderBaseException):
    """Raised when evidence cannot be embedded, scored or retrieved."""
    pass


class RankerError(RecommenderBaseException):
    """Raised when ranking or explanation inputs are inconsistent."""
    pass


class MetricError(RecommenderBaseException):
    """Raised when an evaluation metric receives invalid input."""
    pass


class CheckpointError(RecommenderBaseException):
    """Raised when a checkpoint cannot be read or is incompatible."""
    pass
