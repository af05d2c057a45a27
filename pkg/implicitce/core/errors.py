from typing import Optional, Sequence


class ImplicitCEError(Exception):
    pass


class DatasetError(ImplicitCEError):
    pass


class ParseError(DatasetError):
    def __init__(self, path: str, line_no: int, reason: str):
        self.path = path
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"{path}: Line {line_no}: {reason}")


class ModelError(ImplicitCEError):
    pass


class SimilarityError(ModelError):
    pass


class NonFiniteError(ModelError):
    pass


class LossError(ImplicitCEError):
    pass


class ConstantRowError(LossError):
    """Raised when one or more rows have zero variance; `rows` lists them all."""

    def __init__(self, rows: Sequence[int], what: str = "row"):
        self.rows = [int(r) for r in rows]
        shown = ", ".join(str(r) for r in self.rows[:10])
        more = "" if len(self.rows) <= 10 else f" (+{len(self.rows) - 10} more)"
        super().__init__(f"constant {what} for user index {shown}{more}")


class MetricError(ImplicitCEError):
    pass


class NumericalError(ImplicitCEError):
    def __init__(self, message: str, step: Optional[int] = None):
        self.step = step
        super().__init__(message if step is None else f"step {step}: {message}")


class CheckpointError(ImplicitCEError):
    pass
