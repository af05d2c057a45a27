from typing import Optional

from pydantic import BaseModel, Field


class MetricSummary(BaseModel):
    values: list[float]
    mean: float
    ci_half_width: float = Field(ge=0)


class EvalReport(BaseModel):
    split: str
    n_users: int
    n_excluded: int = 0
    config_hash: Optional[str] = None
    metrics: dict[str, MetricSummary]

    def to_csv_row(self, label: str) -> dict[str, object]:
        row: dict[str, object] = {"label": label, "split": self.split, "n_users": self.n_users}
        for name, m in self.metrics.items():
            row[name] = m.mean
            row[f"{name}_ci"] = m.ci_half_width
        return row


class RunManifest(BaseModel):
    command: str
    config: dict
    config_hash: Optional[str] = None
    seed: Optional[int] = None
    version: str
    inputs: dict[str, str] = Field(default_factory=dict)
    outputs: list[str] = Field(default_factory=list)
    wall_time_s: float = 0.0
