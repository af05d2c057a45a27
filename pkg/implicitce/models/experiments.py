from pydantic import BaseModel, Field, field_validator, model_validator

from implicitce.models.enums import LossKind, enum_from_value

CONVERGENCE_LOSSES = (LossKind.USER_NORM_MSE, LossKind.USER_NORM_RMSE, LossKind.PER_USER_CORR)


class ConvergenceSpec(BaseModel):
    n_aux_items: int = Field(default=50, ge=2)
    n_target_items: int = Field(default=50, ge=2)
    outlier_rates: list[float] = Field(default_factory=lambda: [0.0, 0.25, 0.5])
    loss_set: list[LossKind] = Field(default_factory=lambda: list(CONVERGENCE_LOSSES))
    # "loss dipping below": 10 for RMSE, 50 for MSE, 0.01 for correlation
    thresholds: dict[LossKind, float] = Field(
        default_factory=lambda: {
            LossKind.USER_NORM_RMSE: 10.0,
            LossKind.USER_NORM_MSE: 50.0,
            LossKind.PER_USER_CORR: 0.01,
        }
    )
    learning_rates: dict[LossKind, float] = Field(
        default_factory=lambda: {
            LossKind.USER_NORM_RMSE: 1e-2,
            LossKind.USER_NORM_MSE: 1e-3,
            LossKind.PER_USER_CORR: 1.0,
        }
    )
    max_steps: int = Field(default=2000, ge=1)
    trials: int = Field(default=10, ge=1)
    aux_mean: float = 10.0
    aux_std: float = Field(default=1.0, gt=0)
    outlier_scale: float = Field(default=100.0, gt=1)
    reference_users: int = Field(default=1000, ge=1)
    init_scale: float = Field(default=0.5, gt=0)
    seed: int = 0

    @field_validator("outlier_rates")
    @classmethod
    def _rates(cls, v: list[float]) -> list[float]:
        if not v or any(p < 0 or p > 1 for p in v):
            raise ValueError("outlier rates must lie in [0, 1]")
        return v

    @field_validator("loss_set", mode="before")
    @classmethod
    def _losses(cls, v):
        out = [enum_from_value(LossKind, x) for x in v]
        bad = [x.value for x in out if x not in CONVERGENCE_LOSSES]
        if bad:
            raise ValueError(f"unsupported convergence losses: {', '.join(bad)}")
        return out

    @model_validator(mode="after")
    def _check(self) -> "ConvergenceSpec":
        for loss in self.loss_set:
            if self.thresholds.get(loss, 0) <= 0:
                raise ValueError(f"threshold for {loss.value} must be positive")
            if self.learning_rates.get(loss, 0) <= 0:
                raise ValueError(f"learning rate for {loss.value} must be positive")
        return self


class SampleErrSpec(BaseModel):
    n_items_population: int = Field(default=5000, ge=2)
    n_users: int = Field(default=10, ge=1)
    sample_sizes: list[int] = Field(default_factory=lambda: [10, 50, 100, 500, 1000])
    trials: int = Field(default=1000, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "SampleErrSpec":
        if not self.sample_sizes:
            raise ValueError("at least one sample size is required")
        for n in self.sample_sizes:
            if n < 2 or n > self.n_items_population:
                raise ValueError(f"sample size {n} must lie in [2, {self.n_items_population}]")
        return self


class BiasDecaySpec(BaseModel):
    n_items: int = Field(default=50, ge=3)
    n_users: int = Field(default=20, ge=1)
    sizes: list[int] = Field(default_factory=lambda: [5, 10, 25])
    trials: int = Field(default=10_000, ge=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "BiasDecaySpec":
        if not self.sizes:
            raise ValueError("at least one size is required")
        for n in self.sizes:
            if n < 2 or n > self.n_items:
                raise ValueError(f"size {n} must lie in [2, {self.n_items}]")
        return self
