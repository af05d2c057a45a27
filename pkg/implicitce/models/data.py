from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from implicitce.models.enums import Split


class InteractionMatrix(BaseModel):
    """Sparse nonnegative user x item count matrix.

    Rows are kept in canonical CSR form: sorted, duplicate-free item indices
    and no explicit zeros, so a stored entry always means count > 0.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    counts: sp.csr_matrix

    @field_validator("counts")
    @classmethod
    def _check_counts(cls, m: sp.csr_matrix) -> sp.csr_matrix:
        if m.dtype != np.float64:
            raise ValueError("counts must be float64")
        if not m.has_canonical_format:
            raise ValueError("counts must be canonical (sorted, no duplicates)")
        if m.nnz:
            if not np.all(np.isfinite(m.data)):
                raise ValueError("counts must be finite")
            if np.any(m.data <= 0):
                raise ValueError("stored counts must be > 0")
        return m

    @classmethod
    def from_csr(cls, m) -> "InteractionMatrix":
        m = sp.csr_matrix(m, dtype=np.float64, copy=True)
        m.sum_duplicates()
        m.eliminate_zeros()
        m.sort_indices()
        if m.nnz and np.any(m.data < 0):
            raise ValueError("counts must be nonnegative")
        return cls(counts=m)

    @classmethod
    def from_triples(cls, users, items, values, shape: tuple[int, int]) -> "InteractionMatrix":
        m = sp.coo_matrix(
            (np.asarray(values, dtype=np.float64), (np.asarray(users), np.asarray(items))),
            shape=shape,
        ).tocsr()
        return cls.from_csr(m)

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "InteractionMatrix":
        return cls.from_csr(sp.csr_matrix(np.asarray(dense, dtype=np.float64)))

    @property
    def n_users(self) -> int:
        return int(self.counts.shape[0])

    @property
    def n_items(self) -> int:
        return int(self.counts.shape[1])

    @property
    def row_nnz(self) -> np.ndarray:
        return np.diff(self.counts.indptr)

    def row(self, user: int) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.counts.indptr[user], self.counts.indptr[user + 1]
        return self.counts.indices[lo:hi], self.counts.data[lo:hi]

    def take_rows(self, users: Sequence[int]) -> sp.csr_matrix:
        return self.counts[np.asarray(users, dtype=np.int64)]

    def lookup_block(self, users: Sequence[int], items: Sequence[int]) -> np.ndarray:
        """Dense |users| x |items| block, absent entries 0.

        Binary-searches each user's stored items, so the cost depends on the
        block and the rows' nnz only, never on n_items.
        """
        items = np.asarray(items, dtype=np.int64)
        order = np.argsort(items, kind="stable")
        sorted_items = items[order]
        out = np.zeros((len(users), items.size), dtype=np.float64)
        for r, u in enumerate(users):
            idx, vals = self.row(int(u))
            if idx.size == 0 or items.size == 0:
                continue
            pos = np.minimum(np.searchsorted(idx, sorted_items), idx.size - 1)
            hit = idx[pos] == sorted_items
            out[r, order[hit]] = vals[pos[hit]]
        return out

    def dense_rows(self, users: Sequence[int]) -> np.ndarray:
        return self.take_rows(users).toarray()

    def map_values(self, fn: Callable[[np.ndarray], np.ndarray]) -> "InteractionMatrix":
        m = self.counts.copy()
        m.data = fn(m.data)
        return InteractionMatrix.from_csr(m)


class CrossDomainDataset(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    auxiliary: InteractionMatrix
    target: InteractionMatrix
    split: list[Split]
    user_ids: list[str]
    aux_item_ids: list[str]
    target_item_ids: list[str]
    outliers: Optional[np.ndarray] = None

    @model_validator(mode="after")
    def _check_shapes(self) -> "CrossDomainDataset":
        n = self.auxiliary.n_users
        if self.target.n_users != n:
            raise ValueError(f"auxiliary has {n} users but target has {self.target.n_users}")
        if len(self.split) != n:
            raise ValueError(f"split has {len(self.split)} labels for {n} users")
        if len(self.user_ids) != n:
            raise ValueError("user_ids length does not match n_users")
        if len(self.aux_item_ids) != self.auxiliary.n_items:
            raise ValueError("aux_item_ids length does not match auxiliary n_items")
        if len(self.target_item_ids) != self.target.n_items:
            raise ValueError("target_item_ids length does not match target n_items")
        empty_aux = np.flatnonzero(self.auxiliary.row_nnz == 0)
        if empty_aux.size:
            raise ValueError(f"user {int(empty_aux[0])} has no auxiliary interactions")
        empty_target = np.flatnonzero(self.target.row_nnz == 0)
        if empty_target.size:
            raise ValueError(f"user {int(empty_target[0])} has no target interactions")
        if self.outliers is not None and self.outliers.shape != (n,):
            raise ValueError("outliers mask must have one entry per user")
        return self

    @property
    def n_users(self) -> int:
        return self.auxiliary.n_users

    def users_in(self, label: Split) -> np.ndarray:
        return np.flatnonzero(np.array([s == label for s in self.split], dtype=bool))

    def split_counts(self) -> dict[str, int]:
        return {s.value: sum(1 for x in self.split if x == s) for s in Split}


class SyntheticSpec(BaseModel):
    n_users: int = Field(ge=1)
    n_aux_items: int = Field(ge=1)
    n_target_items: int = Field(ge=1)
    noise_scale: float = Field(default=0.0, ge=0)
    outlier_rate: float = Field(default=0.0, ge=0, le=1)
    outlier_magnitude: float = Field(default=100.0, gt=1)
    aux_mean: float = Field(default=10.0, gt=0)
    aux_std: float = Field(default=1.0, ge=0)
    seed: int = 0
