"""Exception hierarchy shared by all rtnq modules."""


class RtnqError(Exception):
    """Base class for every error raised by rtnq."""


class InvalidInputError(RtnqError, ValueError):
    """Input values are unusable (non-finite, out of range, wrong kind)."""


class InvalidShapeError(RtnqError, ValueError):
    """Tensor dimensions are inconsistent with each other or with a group size."""


class CorruptDataError(RtnqError, ValueError):
    """Stored codes, buffers or checkpoint bytes are malformed."""


class PlanError(RtnqError, ValueError):
    """A selection plan cannot be parsed or applied."""


class PlanSyntaxError(PlanError):
    def __init__(self, message: str, offset: int, text: str = ""):
        self.message = message
        self.offset = offset
        self.text = text
        super().__init__(f"plan syntax error at byte {offset}: {message}")


class InvalidPlanError(PlanError):
    """A well-formed plan does not fit the model it is resolved against."""


class InsufficientDataError(RtnqError, ValueError):
    """Not enough benchmark records to draw a conclusion."""
