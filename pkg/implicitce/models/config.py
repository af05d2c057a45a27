from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from implicitce.models.enums import (
    LossKind,
    OptimizerKind,
    Preprocess,
    SimilarityKind,
    TransformKind,
    enum_from_value,
)


class TrainConfig(BaseModel):
    """Training configuration. Defaults: two 1024-unit relu layers with
    batch-norm, Adam at 0.05, dropout 0.3, L2 0.001, cosine similarity,
    N_SI=1000, N_SU=64, d=300.
    """

    model_config = ConfigDict(extra="forbid")

    loss: LossKind = LossKind.SAMPLE_CORR
    similarity: SimilarityKind = SimilarityKind.COSINE

    n_su: int = Field(default=64, ge=1)
    n_si: int = Field(default=1000, ge=2)
    n_pairs: int = Field(default=16, ge=1)

    learning_rate: float = Field(default=0.05, gt=0)
    optimizer: OptimizerKind = OptimizerKind.ADAM
    adam_beta1: float = Field(default=0.9, ge=0, lt=1)
    adam_beta2: float = Field(default=0.999, ge=0, lt=1)
    adam_eps: float = Field(default=1e-8, gt=0)
    l2: float = Field(default=0.001, ge=0)

    transform: TransformKind = TransformKind.MLP
    hidden_sizes: list[int] = Field(default_factory=lambda: [1024, 1024])
    batch_norm: bool = True
    dropout: float = Field(default=0.3, ge=0, lt=1)
    d_aux: int = Field(default=300, ge=1)
    d: int = Field(default=300, ge=1)
    biases: bool = False

    steps: int = Field(default=5000, ge=0)
    eval_every: int = Field(default=100, ge=1)
    eval_max_users: int = Field(default=10_000, ge=1)
    max_resample: int = Field(default=10, ge=0)
    preprocess: Preprocess = Preprocess.RAW
    seed: int = 0

    @field_validator("loss", mode="before")
    @classmethod
    def _loss(cls, v):
        return enum_from_value(LossKind, v)

    @field_validator("similarity", mode="before")
    @classmethod
    def _similarity(cls, v):
        return enum_from_value(SimilarityKind, v)

    @field_validator("optimizer", mode="before")
    @classmethod
    def _optimizer(cls, v):
        return enum_from_value(OptimizerKind, v)

    @field_validator("transform", mode="before")
    @classmethod
    def _transform(cls, v):
        return enum_from_value(TransformKind, v)

    @field_validator("preprocess", mode="before")
    @classmethod
    def _preprocess(cls, v):
        return enum_from_value(Preprocess, v)

    @field_validator("hidden_sizes")
    @classmethod
    def _hidden(cls, v: list[int]) -> list[int]:
        if any(h < 1 for h in v):
            raise ValueError("hidden sizes must be >= 1")
        return v

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        if self.transform == TransformKind.IDENTITY and self.d_aux != self.d:
            raise ValueError("identity transform requires d_aux == d")
        return self


class MetricConfig(BaseModel):
    k: int = Field(default=10, ge=1)
    max_grade: int = Field(default=4, ge=1)
    ndcg_cutoff: Optional[int] = Field(default=None, ge=1)
    batch_users: int = Field(default=256, ge=1)


class SearchSpace(BaseModel):
    """Random-search ranges; learning rate and L2 are drawn log-uniformly."""

    learning_rate: tuple[float, float] = (1e-3, 1e-1)
    dropout: tuple[float, float] = (0.0, 0.5)
    l2: tuple[float, float] = (1e-5, 1e-2)
    similarities: list[SimilarityKind] = Field(
        default_factory=lambda: [SimilarityKind.COSINE, SimilarityKind.DOT, SimilarityKind.EUCLIDEAN]
    )

    @field_validator("similarities", mode="before")
    @classmethod
    def _sims(cls, v):
        return [enum_from_value(SimilarityKind, x) for x in v]

    @model_validator(mode="after")
    def _check(self) -> "SearchSpace":
        for name in ("learning_rate", "l2"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} range must be positive and ordered")
        lo, hi = self.dropout
        if not 0 <= lo <= hi < 1:
            raise ValueError("dropout range must lie in [0, 1)")
        if not self.similarities:
            raise ValueError("at least one similarity is required")
        return self
