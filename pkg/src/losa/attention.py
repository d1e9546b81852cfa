"""Dense and partial attention, plus the online-softmax merge of partials.

A partial is the pair (output, lse) for one slice of the key set: ``output``
is the softmax-normalized attention output over that slice and ``lse`` the
log-sum-exp of the scores. Two partials over disjoint key slices merge into
the partial over their union, so prefix and block contributions can be
computed (and cached) separately.

Scores are computed one query row at a time, so a row's result depends only
on that row's query and the key slice. The engine relies on this to get
bit-identical prefix statistics for unchanged queries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInputError, ShapeError
from .numerics import ACC, DTYPE
from .selector import PagedPrefix


@dataclass
class PartialAttention:
    output: np.ndarray  # (m, d) float32
    lse: np.ndarray  # (m,) float64; -inf marks an empty row

    def __post_init__(self):
        if self.output.ndim != 2 or self.lse.shape != (self.output.shape[0],):
            raise ShapeError(f"output {self.output.shape} does not match lse {self.lse.shape}")

    @property
    def rows(self) -> int:
        return self.output.shape[0]

    @classmethod
    def empty(cls, m: int, d: int) -> "PartialAttention":
        return cls(np.zeros((m, d), dtype=DTYPE), np.full(m, -np.inf, dtype=ACC))

    def take(self, rows) -> "PartialAttention":
        return PartialAttention(self.output[rows].copy(), self.lse[rows].copy())

    def copy(self) -> "PartialAttention":
        return PartialAttention(self.output.copy(), self.lse.copy())

    @property
    def scalar_count(self) -> int:
        return self.output.size + self.lse.size


def _check_qkv(Q, K, V):
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ShapeError("Q, K and V must be 2-D")
    if K.shape[0] != V.shape[0]:
        raise ShapeError(f"K has {K.shape[0]} rows but V has {V.shape[0]}")
    if not (Q.shape[1] == K.shape[1] == V.shape[1]):
        raise ShapeError(f"head dims differ: Q {Q.shape}, K {K.shape}, V {V.shape}")


def _partial64(Q: np.ndarray, K: np.ndarray, V: np.ndarray) -> PartialAttention:
    # Q, K, V already float64.
    m, d = Q.shape
    if K.shape[0] == 0:
        return PartialAttention.empty(m, d)
    scale = math.sqrt(d)
    out = np.empty((m, d), dtype=ACC)
    lse = np.empty(m, dtype=ACC)
    for i in range(m):
        s = (K @ Q[i]) / scale
        mx = s.max()
        p = np.exp(s - mx)
        total = p.sum()
        out[i] = (p @ V) / total
        lse[i] = mx + math.log(total)
    return PartialAttention(out.astype(DTYPE), lse)


def partial_attention(Q, K, V) -> PartialAttention:
    """Attention of every row of ``Q`` over ``K``/``V`` with its log-normalizer.

    An empty key set yields the empty partial (zero rows, ``-inf`` lse).
    """
    Q, K, V = np.asarray(Q), np.asarray(K), np.asarray(V)
    _check_qkv(Q, K, V)
    return _partial64(Q.astype(ACC, copy=False), K.astype(ACC, copy=False), V.astype(ACC, copy=False))


def dense_attention(Q, K, V) -> np.ndarray:
    """``softmax(Q K^T / sqrt(d)) V`` with a row-wise softmax."""
    K = np.asarray(K)
    if K.ndim == 2 and K.shape[0] == 0:
        raise EmptyInputError("dense attention needs at least one key")
    return partial_attention(Q, K, V).output


def merge_partials(a: PartialAttention, b: PartialAttention) -> PartialAttention:
    """Online-softmax merge of two partials over disjoint key sets."""
    if a.output.shape != b.output.shape:
        raise ShapeError(f"cannot merge partials of shape {a.output.shape} and {b.output.shape}")
    la, lb = a.lse, b.lse
    m = np.maximum(la, lb)
    both_empty = np.isneginf(m)
    m_safe = np.where(both_empty, 0.0, m)
    wa = np.exp(la - m_safe)
    wb = np.exp(lb - m_safe)
    denom = wa + wb
    denom_safe = np.where(both_empty, 1.0, denom)
    out = (wa[:, None] * a.output.astype(ACC) + wb[:, None] * b.output.astype(ACC)) / denom_safe[:, None]
    lse = np.where(both_empty, -np.inf, m_safe + np.log(denom_safe))
    return PartialAttention(out.astype(DTYPE), lse)


def sparse_prefix_attention(Q_active, prefix: PagedPrefix, union_pages) -> PartialAttention:
    """Partial attention of ``Q_active`` over the prefix rows covered by ``union_pages``.

    Rows are gathered in ascending key position regardless of the order in
    which pages are listed.
    """
    Q = np.asarray(Q_active)
    if Q.ndim != 2 or Q.shape[1] != prefix.head_dim:
        raise ShapeError(f"query block {Q.shape} does not match head dim {prefix.head_dim}")
    pos = prefix.positions(union_pages)
    if pos.size == 0:
        return PartialAttention.empty(Q.shape[0], prefix.head_dim)
    return _partial64(Q.astype(ACC), prefix.keys64[pos], prefix.values64[pos])
