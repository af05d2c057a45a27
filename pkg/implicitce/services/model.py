import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp

from implicitce.core.errors import ModelError, NonFiniteError, SimilarityError
from implicitce.models.config import TrainConfig
from implicitce.models.enums import Mode, SimilarityKind, TransformKind

logger = logging.getLogger(__name__)

BN_MOMENTUM = 0.9
BN_EPS = 1e-5

RngLike = Union[np.random.Generator, int, None]


@dataclass
class DenseLayer:
    weight: np.ndarray
    bias: np.ndarray
    hidden: bool
    gamma: Optional[np.ndarray] = None
    beta: Optional[np.ndarray] = None
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None

    @property
    def batch_norm(self) -> bool:
        return self.gamma is not None

    def spec(self) -> dict:
        return {
            "in": int(self.weight.shape[0]),
            "out": int(self.weight.shape[1]),
            "hidden": self.hidden,
            "batch_norm": self.batch_norm,
        }


@dataclass
class ModelParams:
    aux_embeddings: np.ndarray
    target_embeddings: np.ndarray
    layers: list[DenseLayer] = field(default_factory=list)
    user_bias: Optional[np.ndarray] = None
    item_bias: Optional[np.ndarray] = None

    @property
    def d_aux(self) -> int:
        return int(self.aux_embeddings.shape[1])

    @property
    def d(self) -> int:
        return int(self.target_embeddings.shape[1])

    def tensors(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of every parameter and buffer."""
        out = {"aux_embeddings": self.aux_embeddings, "target_embeddings": self.target_embeddings}
        for i, layer in enumerate(self.layers):
            out[f"layers.{i}.weight"] = layer.weight
            out[f"layers.{i}.bias"] = layer.bias
            if layer.batch_norm:
                out[f"layers.{i}.gamma"] = layer.gamma
                out[f"layers.{i}.beta"] = layer.beta
                out[f"layers.{i}.running_mean"] = layer.running_mean
                out[f"layers.{i}.running_var"] = layer.running_var
        if self.user_bias is not None:
            out["user_bias"] = self.user_bias
        if self.item_bias is not None:
            out["item_bias"] = self.item_bias
        return out

    def layer_specs(self) -> list[dict]:
        return [layer.spec() for layer in self.layers]

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], layer_specs: Sequence[dict]) -> "ModelParams":
        layers = []
        for i, s in enumerate(layer_specs):
            bn = bool(s["batch_norm"])
            layers.append(
                DenseLayer(
                    weight=tensors[f"layers.{i}.weight"],
                    bias=tensors[f"layers.{i}.bias"],
                    hidden=bool(s["hidden"]),
                    gamma=tensors.get(f"layers.{i}.gamma") if bn else None,
                    beta=tensors.get(f"layers.{i}.beta") if bn else None,
                    running_mean=tensors.get(f"layers.{i}.running_mean") if bn else None,
                    running_var=tensors.get(f"layers.{i}.running_var") if bn else None,
                )
            )
        params = cls(
            aux_embeddings=tensors["aux_embeddings"],
            target_embeddings=tensors["target_embeddings"],
            layers=layers,
            user_bias=tensors.get("user_bias"),
            item_bias=tensors.get("item_bias"),
        )
        params.validate()
        return params

    def copy(self) -> "ModelParams":
        return ModelParams.from_tensors({k: v.copy() for k, v in self.tensors().items()}, self.layer_specs())

    def validate(self) -> None:
        width = self.d_aux
        for i, layer in enumerate(self.layers):
            if layer.weight.shape[0] != width:
                raise ModelError(f"layer {i} expects input width {layer.weight.shape[0]}, got {width}")
            width = layer.weight.shape[1]
            if layer.bias.shape != (width,):
                raise ModelError(f"layer {i} bias has shape {layer.bias.shape}, expected ({width},)")
            if layer.batch_norm and np.any(layer.running_var <= 0):
                raise ModelError(f"layer {i} has a nonpositive running variance")
        if width != self.d:
            raise ModelError(f"network output width {width} does not match target embedding size {self.d}")
        for name, t in self.tensors().items():
            if not np.all(np.isfinite(t)):
                raise ModelError(f"parameter {name} has non-finite values")


def init_params(
    n_aux_items: int,
    n_target_items: int,
    *,
    d_aux: int = 300,
    d: int = 300,
    transform: TransformKind = TransformKind.MLP,
    hidden_sizes: Sequence[int] = (1024, 1024),
    batch_norm: bool = True,
    biases: bool = False,
    n_users: int = 0,
    seed: RngLike = 0,
) -> ModelParams:
    rng = np.random.default_rng(seed)
    aux = rng.uniform(-1.0 / np.sqrt(d_aux), 1.0 / np.sqrt(d_aux), size=(n_aux_items, d_aux))
    target = rng.uniform(-1.0 / np.sqrt(d), 1.0 / np.sqrt(d), size=(n_target_items, d))

    if transform == TransformKind.IDENTITY:
        if d_aux != d:
            raise ModelError("identity transform requires d_aux == d")
        widths, n_hidden = [d_aux], 0
    elif transform == TransformKind.LINEAR:
        widths, n_hidden = [d_aux, d], 0
    else:
        widths, n_hidden = [d_aux, *hidden_sizes, d], len(hidden_sizes)

    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        hidden = i < n_hidden
        bn = hidden and batch_norm
        layers.append(
            DenseLayer(
                weight=rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)),
                bias=np.zeros(fan_out),
                hidden=hidden,
                gamma=np.ones(fan_out) if bn else None,
                beta=np.zeros(fan_out) if bn else None,
                running_mean=np.zeros(fan_out) if bn else None,
                running_var=np.ones(fan_out) if bn else None,
            )
        )
    return ModelParams(
        aux_embeddings=aux,
        target_embeddings=target,
        layers=layers,
        user_bias=np.zeros(n_users) if biases else None,
        item_bias=np.zeros(n_target_items) if biases else None,
    )


def init_from_config(cfg: TrainConfig, n_aux_items: int, n_target_items: int, n_users: int) -> ModelParams:
    return init_params(
        n_aux_items,
        n_target_items,
        d_aux=cfg.d_aux,
        d=cfg.d,
        transform=cfg.transform,
        hidden_sizes=cfg.hidden_sizes,
        batch_norm=cfg.batch_norm,
        biases=cfg.biases,
        n_users=n_users,
        seed=cfg.seed,
    )


# --- forward -----------------------------------------------------------------


@dataclass
class LayerCache:
    x_in: np.ndarray
    pre_act: Optional[np.ndarray] = None
    xhat: Optional[np.ndarray] = None
    inv_std: Optional[np.ndarray] = None
    batch_mean: Optional[np.ndarray] = None
    batch_var: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None


@dataclass
class ForwardTrace:
    mode: Mode
    aux_items: np.ndarray
    x_local: sp.csr_matrix
    layers: list[LayerCache]
    output: np.ndarray


def _as_rows(aux_rows) -> sp.csr_matrix:
    if sp.issparse(aux_rows):
        m = sp.csr_matrix(aux_rows, dtype=np.float64)
    else:
        m = sp.csr_matrix(np.atleast_2d(np.asarray(aux_rows, dtype=np.float64)))
    if not m.has_sorted_indices:
        m = m.sorted_indices()
    return m


def _localize(rows: sp.csr_matrix) -> tuple[np.ndarray, sp.csr_matrix]:
    # restrict to the auxiliary items the batch touches
    aux_items, inverse = np.unique(rows.indices, return_inverse=True)
    x_local = sp.csr_matrix((rows.data, inverse.reshape(-1), rows.indptr), shape=(rows.shape[0], aux_items.size))
    return aux_items, x_local


def user_aux_embedding(params: ModelParams, aux_row) -> np.ndarray:
    """e_UA = sum_i k_ai * e_A_i over the stored entries of one row.

    `aux_row` is a 1 x n_aux sparse row, a dense vector, or an
    `(indices, values)` pair.
    """
    if isinstance(aux_row, tuple):
        idx, vals = (np.asarray(a) for a in aux_row)
    else:
        row = _as_rows(aux_row)
        if row.shape[0] != 1:
            raise ModelError("user_aux_embedding expects a single row")
        idx, vals = row.indices, row.data
    if idx.size == 0:
        return np.zeros(params.d_aux)
    return np.asarray(vals, dtype=np.float64) @ params.aux_embeddings[idx]


def _rng(rng: RngLike) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def forward(
    params: ModelParams,
    aux_rows,
    mode: Mode = Mode.INFERENCE,
    dropout_rate: float = 0.0,
    rng: RngLike = None,
) -> tuple[np.ndarray, ForwardTrace]:
    rows = _as_rows(aux_rows)
    n = rows.shape[0]
    if n == 0:
        raise ModelError("forward needs a nonempty batch")
    if rows.shape[1] != params.aux_embeddings.shape[0]:
        raise ModelError(f"rows have {rows.shape[1]} auxiliary columns, model has {params.aux_embeddings.shape[0]}")
    train = mode == Mode.TRAIN
    if train and n < 2 and any(layer.batch_norm for layer in params.layers):
        raise ModelError("batch-norm in train mode needs a batch of at least 2 users")
    gen = _rng(rng) if train and dropout_rate > 0 else None

    aux_items, x_local = _localize(rows)
    h = np.asarray(x_local @ params.aux_embeddings[aux_items])
    caches = []
    for layer in params.layers:
        cache = LayerCache(x_in=h)
        z = h @ layer.weight + layer.bias
        if layer.hidden:
            if layer.batch_norm:
                if train:
                    mean, var = z.mean(axis=0), z.var(axis=0)
                    cache.batch_mean, cache.batch_var = mean, var
                else:
                    mean, var = layer.running_mean, layer.running_var
                cache.inv_std = 1.0 / np.sqrt(var + BN_EPS)
                cache.xhat = (z - mean) * cache.inv_std
                z = layer.gamma * cache.xhat + layer.beta
            cache.pre_act = z
            z = np.maximum(z, 0.0)
            if gen is not None:
                cache.mask = (gen.random(z.shape) >= dropout_rate) / (1.0 - dropout_rate)
                z = z * cache.mask
        caches.append(cache)
        h = z
    return h, ForwardTrace(mode=mode, aux_items=aux_items, x_local=x_local, layers=caches, output=h)


def embed_users(params: ModelParams, aux_rows) -> np.ndarray:
    return forward(params, aux_rows, Mode.INFERENCE)[0]


def apply_running_stats(params: ModelParams, trace: ForwardTrace, momentum: float = BN_MOMENTUM) -> None:
    """Fold the batch statistics of a train-mode forward into the running statistics."""
    if trace.mode != Mode.TRAIN:
        return
    n = trace.output.shape[0]
    for layer, cache in zip(params.layers, trace.layers):
        if not layer.batch_norm or cache.batch_mean is None:
            continue
        unbiased = cache.batch_var * n / max(n - 1, 1)
        layer.running_mean *= momentum
        layer.running_mean += (1.0 - momentum) * cache.batch_mean
        layer.running_var *= momentum
        layer.running_var += (1.0 - momentum) * unbiased


# --- similarity --------------------------------------------------------------


def similarity(kind: SimilarityKind, u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if kind == SimilarityKind.DOT:
        return float(u @ v)
    if kind == SimilarityKind.COSINE:
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        if nu == 0 or nv == 0:
            raise SimilarityError("cosine similarity of a zero vector")
        return float(u @ v / (nu * nv))
    if kind == SimilarityKind.EUCLIDEAN:
        return float(1.0 - np.linalg.norm(u - v))
    raise ModelError(f"unknown similarity {kind!r}")


@dataclass
class SimilarityCache:
    kind: SimilarityKind
    u: np.ndarray
    v: np.ndarray
    u_norm: Optional[np.ndarray] = None
    v_norm: Optional[np.ndarray] = None
    dist: Optional[np.ndarray] = None


def _norms(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise SimilarityError(f"cosine similarity of a zero {what} vector (row {int(zero[0])})")
    return norms


def similarity_matrix(kind: SimilarityKind, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, SimilarityCache]:
    cache = SimilarityCache(kind=kind, u=u, v=v)
    if kind == SimilarityKind.DOT:
        return u @ v.T, cache
    if kind == SimilarityKind.COSINE:
        cache.u_norm, cache.v_norm = _norms(u, "user"), _norms(v, "item")
        return (u / cache.u_norm[:, None]) @ (v / cache.v_norm[:, None]).T, cache
    if kind == SimilarityKind.EUCLIDEAN:
        dist = np.empty((u.shape[0], v.shape[0]))
        for i in range(u.shape[0]):
            dist[i] = np.linalg.norm(u[i] - v, axis=1)
        cache.dist = dist
        return 1.0 - dist, cache
    raise ModelError(f"unknown similarity {kind!r}")


def _similarity_backward(cache: SimilarityCache, dP: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    u, v = cache.u, cache.v
    if cache.kind == SimilarityKind.DOT:
        return dP @ v, dP.T @ u
    if cache.kind == SimilarityKind.COSINE:
        un, vn = u / cache.u_norm[:, None], v / cache.v_norm[:, None]
        dun, dvn = dP @ vn, dP.T @ un
        du = (dun - un * np.sum(dun * un, axis=1, keepdims=True)) / cache.u_norm[:, None]
        dv = (dvn - vn * np.sum(dvn * vn, axis=1, keepdims=True)) / cache.v_norm[:, None]
        return du, dv
    # euclidean: P = 1 - ||u - v||, subgradient 0 where u == v
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(cache.dist > 0, dP / cache.dist, 0.0)
    du = -(w.sum(axis=1)[:, None] * u - w @ v)
    dv = w.T @ u - w.sum(axis=0)[:, None] * v
    return du, dv


# --- prediction blocks -------------------------------------------------------


@dataclass
class PredictionBlock:
    values: np.ndarray
    items: np.ndarray
    users: Optional[np.ndarray]
    trace: ForwardTrace
    sim: SimilarityCache


def score_items(
    params: ModelParams,
    kind: SimilarityKind,
    user_embeddings: np.ndarray,
    items: Optional[np.ndarray] = None,
    users: Optional[np.ndarray] = None,
) -> np.ndarray:
    item_emb = params.target_embeddings if items is None else params.target_embeddings[items]
    scores, _ = similarity_matrix(kind, user_embeddings, item_emb)
    return _add_biases(params, scores, items, users)


def _add_biases(params: ModelParams, scores: np.ndarray, items, users) -> np.ndarray:
    if params.item_bias is not None:
        scores = scores + (params.item_bias if items is None else params.item_bias[items])[None, :]
    if params.user_bias is not None and users is not None:
        scores = scores + params.user_bias[users][:, None]
    return scores


def predict_block(
    params: ModelParams,
    aux_rows,
    items: Sequence[int],
    kind: SimilarityKind,
    mode: Mode = Mode.INFERENCE,
    *,
    users: Optional[Sequence[int]] = None,
    dropout_rate: float = 0.0,
    rng: RngLike = None,
) -> PredictionBlock:
    """P[i][j] = sim(e_UB_i, e_B_j) (+ biases) for the sampled users and items."""
    items = np.asarray(items, dtype=np.int64)
    if items.size and (items.min() < 0 or items.max() >= params.target_embeddings.shape[0]):
        raise ModelError("target item index out of range")
    user_idx = None if users is None else np.asarray(users, dtype=np.int64)
    emb, trace = forward(params, aux_rows, mode, dropout_rate, rng)
    values, sim = similarity_matrix(kind, emb, params.target_embeddings[items])
    values = _add_biases(params, values, items, user_idx)
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("non-finite predictions")
    return PredictionBlock(values=values, items=items, users=user_idx, trace=trace, sim=sim)


# --- backward ----------------------------------------------------------------


@dataclass
class ParamGradients:
    aux_rows: np.ndarray
    aux: np.ndarray
    target_rows: np.ndarray
    target: np.ndarray
    layers: list[dict[str, np.ndarray]]
    user_rows: Optional[np.ndarray] = None
    user_bias: Optional[np.ndarray] = None
    item_rows: Optional[np.ndarray] = None
    item_bias: Optional[np.ndarray] = None

    def named(self) -> dict[str, np.ndarray]:
        """Dense (network) gradients keyed like `ModelParams.tensors()`."""
        out = {}
        for i, g in enumerate(self.layers):
            for k, v in g.items():
                out[f"layers.{i}.{k}"] = v
        return out

    def to_dense(self, params: ModelParams) -> dict[str, np.ndarray]:
        out = {name: np.zeros_like(t) for name, t in params.tensors().items() if "running_" not in name}
        out["aux_embeddings"][self.aux_rows] = self.aux
        out["target_embeddings"][self.target_rows] = self.target
        out.update(self.named())
        if self.user_bias is not None:
            out["user_bias"][self.user_rows] = self.user_bias
        if self.item_bias is not None:
            out["item_bias"][self.item_rows] = self.item_bias
        return out


def _network_backward(params: ModelParams, trace: ForwardTrace, grad: np.ndarray):
    layer_grads: list[dict[str, np.ndarray]] = [{} for _ in params.layers]
    g = grad
    for i in reversed(range(len(params.layers))):
        layer, cache = params.layers[i], trace.layers[i]
        if layer.hidden:
            if cache.mask is not None:
                g = g * cache.mask
            g = g * (cache.pre_act > 0)
            if layer.batch_norm:
                layer_grads[i]["gamma"] = np.sum(g * cache.xhat, axis=0)
                layer_grads[i]["beta"] = g.sum(axis=0)
                dxhat = g * layer.gamma
                if trace.mode == Mode.TRAIN:
                    n = g.shape[0]
                    g = cache.inv_std / n * (
                        n * dxhat - dxhat.sum(axis=0) - cache.xhat * np.sum(dxhat * cache.xhat, axis=0)
                    )
                else:
                    g = dxhat * cache.inv_std
        layer_grads[i]["weight"] = cache.x_in.T @ g
        layer_grads[i]["bias"] = g.sum(axis=0)
        g = g @ layer.weight.T
    aux_grad = np.asarray(trace.x_local.T @ g)
    return layer_grads, aux_grad


def backward(block: PredictionBlock, params: ModelParams, dP: np.ndarray) -> ParamGradients:
    """Gradients of a scalar loss with respect to every parameter, given dL/dP.

    Embedding and bias gradients are returned only for the rows the block
    touched; every other row has zero gradient.
    """
    dP = np.asarray(dP, dtype=np.float64)
    if dP.shape != block.values.shape:
        raise ModelError(f"gradient shape {dP.shape} does not match prediction block {block.values.shape}")

    du, dv = _similarity_backward(block.sim, dP)
    target_rows, inverse = np.unique(block.items, return_inverse=True)
    target_grad = np.zeros((target_rows.size, params.d))
    np.add.at(target_grad, inverse.reshape(-1), dv)

    layer_grads, aux_grad = _network_backward(params, block.trace, du)
    grads = ParamGradients(
        aux_rows=block.trace.aux_items,
        aux=aux_grad,
        target_rows=target_rows,
        target=target_grad,
        layers=layer_grads,
    )
    if params.item_bias is not None:
        item_grad = np.zeros(target_rows.size)
        np.add.at(item_grad, inverse.reshape(-1), dP.sum(axis=0))
        grads.item_rows, grads.item_bias = target_rows, item_grad
    if params.user_bias is not None and block.users is not None:
        user_rows, uinv = np.unique(block.users, return_inverse=True)
        user_grad = np.zeros(user_rows.size)
        np.add.at(user_grad, uinv.reshape(-1), dP.sum(axis=1))
        grads.user_rows, grads.user_bias = user_rows, user_grad
    return grads
