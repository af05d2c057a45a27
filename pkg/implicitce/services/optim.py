from typing import Optional

import numpy as np

from implicitce.models.config import TrainConfig
from implicitce.models.enums import OptimizerKind
from implicitce.services.model import ModelParams, ParamGradients


class Optimizer:
    """Applies `ParamGradients` in place.

    Embedding and bias tables are updated lazily (only the rows present in
    the gradient); `rows_updated` holds the row count written per table in
    the last step. The L2 penalty (l2/2)*||w||^2 covers network weight
    matrices and the embedding rows touched in the step.
    """

    kind = OptimizerKind.SGD

    def __init__(self, learning_rate: float, l2: float = 0.0):
        self.learning_rate = learning_rate
        self.l2 = l2
        self.t = 0
        self.rows_updated: dict[str, int] = {}

    def step(self, params: ModelParams, grads: ParamGradients) -> None:
        self.t += 1
        self.rows_updated = {}
        tensors = params.tensors()
        self._rows("aux_embeddings", tensors["aux_embeddings"], grads.aux_rows, grads.aux, regularize=True)
        self._rows("target_embeddings", tensors["target_embeddings"], grads.target_rows, grads.target, regularize=True)
        for name, g in grads.named().items():
            w = tensors[name]
            if name.endswith(".weight") and self.l2:
                g = g + self.l2 * w
            self._dense(name, w, g)
        if grads.user_bias is not None and params.user_bias is not None:
            self._rows("user_bias", params.user_bias, grads.user_rows, grads.user_bias, regularize=False)
        if grads.item_bias is not None and params.item_bias is not None:
            self._rows("item_bias", params.item_bias, grads.item_rows, grads.item_bias, regularize=False)

    def _rows(self, name: str, table: np.ndarray, rows: np.ndarray, g: np.ndarray, regularize: bool) -> None:
        if rows is None or rows.size == 0:
            return
        if regularize and self.l2:
            g = g + self.l2 * table[rows]
        self._apply(name, table, rows, g)
        self.rows_updated[name] = int(np.unique(rows).size)

    def _dense(self, name: str, w: np.ndarray, g: np.ndarray) -> None:
        self._apply(name, w, None, g)

    def _apply(self, name: str, w: np.ndarray, rows: Optional[np.ndarray], g: np.ndarray) -> None:
        if rows is None:
            w -= self.learning_rate * g
        else:
            w[rows] -= self.learning_rate * g

    def state_dict(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_dict(self, state: dict[str, np.ndarray], t: int) -> None:
        self.t = t


class SGD(Optimizer):
    pass


class Adam(Optimizer):
    kind = OptimizerKind.ADAM

    def __init__(self, learning_rate: float, l2: float = 0.0, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(learning_rate, l2)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def _moments(self, name: str, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.m:
            self.m[name] = np.zeros_like(w)
            self.v[name] = np.zeros_like(w)
        return self.m[name], self.v[name]

    def _apply(self, name: str, w: np.ndarray, rows: Optional[np.ndarray], g: np.ndarray) -> None:
        m, v = self._moments(name, w)
        corr1 = 1.0 - self.beta1 ** self.t
        corr2 = 1.0 - self.beta2 ** self.t
        if rows is None:
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            w -= self.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + self.eps)
        else:
            m_r = self.beta1 * m[rows] + (1.0 - self.beta1) * g
            v_r = self.beta2 * v[rows] + (1.0 - self.beta2) * g * g
            m[rows], v[rows] = m_r, v_r
            w[rows] -= self.learning_rate * (m_r / corr1) / (np.sqrt(v_r / corr2) + self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        self.m = {k[2:]: np.array(v, dtype=np.float64) for k, v in state.items() if k.startswith("m.")}
        self.v = {k[2:]: np.array(v, dtype=np.float64) for k, v in state.items() if k.startswith("v.")}


def make_optimizer(cfg: TrainConfig) -> Optimizer:
    if cfg.optimizer == OptimizerKind.ADAM:
        return Adam(cfg.learning_rate, cfg.l2, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    return SGD(cfg.learning_rate, cfg.l2)
