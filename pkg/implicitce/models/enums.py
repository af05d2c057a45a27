from enum import Enum


class Split(str, Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    HOLDOUT = "holdout"


class SimilarityKind(str, Enum):
    DOT = "dot"
    COSINE = "cosine"
    EUCLIDEAN = "euclidean"


class LossKind(str, Enum):
    MSE = "mse"
    USER_NORM_MSE = "user_norm_mse"
    USER_NORM_RMSE = "user_norm_rmse"
    BPR = "bpr"
    PER_USER_CORR = "per_user_corr"
    SAMPLE_CORR = "sample_corr"


class TransformKind(str, Enum):
    MLP = "mlp"
    LINEAR = "linear"
    IDENTITY = "identity"


class OptimizerKind(str, Enum):
    SGD = "sgd"
    ADAM = "adam"


class Preprocess(str, Enum):
    RAW = "raw"
    LOG1P = "log1p"


class Mode(str, Enum):
    TRAIN = "train"
    INFERENCE = "inference"


def enum_from_value(enum_cls, value):
    """Accept either the value ("user_norm_mse"), the CLI spelling ("user-norm-mse") or the member name."""
    if isinstance(value, enum_cls):
        return value
    text = str(value).strip()
    try:
        return enum_cls(text)
    except ValueError:
        pass
    try:
        return enum_cls(text.replace("-", "_").lower())
    except ValueError:
        pass
    try:
        return enum_cls[text.replace("-", "_").upper()]
    except KeyError:
        choices = ", ".join(m.value for m in enum_cls)
        raise ValueError(f"{value!r} is not one of: {choices}") from None
