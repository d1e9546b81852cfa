"""QUEST-style paged key metadata and per-query page selection.

The prefix is split into contiguous pages of ``page_size`` keys. Each page
keeps the elementwise min and max of its keys, which bounds ``q.k`` from
above for every key in the page: per dimension, the product with the box
corner picked by the sign of ``q`` is the largest possible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyInputError, ShapeError
from .numerics import ACC, DTYPE


@dataclass(frozen=True, eq=False)
class PagedPrefix:
    keys: np.ndarray  # (L, d) float32
    values: np.ndarray  # (L, d) float32
    page_size: int
    page_min: np.ndarray  # (P, d) float32
    page_max: np.ndarray  # (P, d) float32
    keys64: np.ndarray = field(repr=False)
    values64: np.ndarray = field(repr=False)

    @property
    def length(self) -> int:
        return self.keys.shape[0]

    @property
    def head_dim(self) -> int:
        return self.keys.shape[1]

    @property
    def num_pages(self) -> int:
        return self.page_min.shape[0]

    def page_len(self, p: int) -> int:
        start = p * self.page_size
        return min(self.page_size, self.length - start)

    def positions(self, pages) -> np.ndarray:
        """Key positions covered by ``pages``, ascending."""
        pages = np.unique(np.asarray(pages, dtype=np.int64))
        if pages.size == 0:
            return np.empty(0, dtype=np.int64)
        if pages[0] < 0 or pages[-1] >= self.num_pages:
            raise IndexError(f"page index out of range [0, {self.num_pages})")
        g = self.page_size
        pos = (pages[:, None] * g + np.arange(g)[None, :]).ravel()
        return pos[pos < self.length]


def build_paged_prefix(K_p, V_p, g: int) -> PagedPrefix:
    K = np.ascontiguousarray(K_p, dtype=DTYPE)
    V = np.ascontiguousarray(V_p, dtype=DTYPE)
    if g < 1:
        raise ConfigError(f"page size must be >= 1, got {g}")
    if K.ndim != 2 or V.ndim != 2 or K.shape != V.shape:
        raise ShapeError(f"prefix keys {K.shape} and values {V.shape} must be matching 2-D matrices")
    L, d = K.shape
    if L == 0:
        raise EmptyInputError("prefix has no keys")
    P = -(-L // g)
    pad = P * g - L
    if pad:
        # Pad the ragged last page with copies of its own first key so min/max are unaffected.
        filler = np.repeat(K[(P - 1) * g : (P - 1) * g + 1], pad, axis=0)
        paged = np.concatenate([K, filler]).reshape(P, g, d)
    else:
        paged = K.reshape(P, g, d)
    K.setflags(write=False)
    V.setflags(write=False)
    pmin = paged.min(axis=1)
    pmax = paged.max(axis=1)
    k64 = K.astype(ACC)
    v64 = V.astype(ACC)
    for a in (pmin, pmax, k64, v64):
        a.setflags(write=False)
    return PagedPrefix(K, V, g, pmin, pmax, k64, v64)


def page_bounds(Q, prefix: PagedPrefix) -> np.ndarray:
    """Upper bounds for every (query, page) pair, shape (m, P)."""
    Q = np.asarray(Q, dtype=ACC)
    squeeze = Q.ndim == 1
    Q = np.atleast_2d(Q)
    if Q.shape[1] != prefix.head_dim:
        raise ShapeError(f"query dim {Q.shape[1]} != head dim {prefix.head_dim}")
    lo = prefix.page_min.astype(ACC)
    hi = prefix.page_max.astype(ACC)
    out = np.empty((Q.shape[0], prefix.num_pages), dtype=ACC)
    scale = math.sqrt(prefix.head_dim)
    for i, q in enumerate(Q):
        out[i] = np.maximum(q * lo, q * hi).sum(axis=-1) / scale
    return out[0] if squeeze else out


def page_upper_bound(q, prefix: PagedPrefix, p: int) -> float:
    """``sum_j max(q_j * min_j, q_j * max_j) / sqrt(d)`` for page ``p``."""
    if not 0 <= p < prefix.num_pages:
        raise IndexError(f"page {p} out of range [0, {prefix.num_pages})")
    q = np.asarray(q, dtype=ACC)
    lo = prefix.page_min[p].astype(ACC)
    hi = prefix.page_max[p].astype(ACC)
    return float(np.maximum(q * lo, q * hi).sum() / math.sqrt(prefix.head_dim))


def pages_for_budget(k: int, g: int) -> int:
    return -(-k // g)


def top_pages(bounds: np.ndarray, n: int) -> np.ndarray:
    """Indices of the ``n`` largest bounds, ties to the smaller index, sorted ascending."""
    n = min(n, bounds.shape[-1])
    order = np.argsort(-bounds, kind="stable")
    return np.sort(order[:n])


def select_pages(q, prefix: PagedPrefix, k: int) -> np.ndarray:
    if k < 1:
        raise ConfigError(f"budget must be >= 1, got {k}")
    n = pages_for_budget(k, prefix.page_size)
    if n >= prefix.num_pages:
        return np.arange(prefix.num_pages)
    return top_pages(page_bounds(q, prefix), n)


def select_pages_batch(Q, prefix: PagedPrefix, k: int) -> list[np.ndarray]:
    """``select_pages`` for each row of ``Q``."""
    if k < 1:
        raise ConfigError(f"budget must be >= 1, got {k}")
    Q = np.atleast_2d(np.asarray(Q))
    n = pages_for_budget(k, prefix.page_size)
    if n >= prefix.num_pages:
        return [np.arange(prefix.num_pages) for _ in range(Q.shape[0])]
    return [top_pages(b, n) for b in page_bounds(Q, prefix)]


@dataclass
class SelectionResult:
    per_query_pages: list[np.ndarray]
    union_pages: np.ndarray
    union_positions: int


def union_selection(sets, prefix: PagedPrefix) -> SelectionResult:
    sets = [np.asarray(s, dtype=np.int64) for s in sets]
    if sets:
        union = np.unique(np.concatenate(sets))
    else:
        union = np.empty(0, dtype=np.int64)
    if union.size and (union[0] < 0 or union[-1] >= prefix.num_pages):
        raise IndexError(f"page index out of range [0, {prefix.num_pages})")
    positions = union.size * prefix.page_size
    last = prefix.num_pages - 1
    if union.size and union[-1] == last:
        positions -= prefix.page_size - prefix.page_len(last)
    return SelectionResult(sets, union, int(positions))
