"""Per-block attention engine: dense, naive per-query QUEST, and LoSA.

All step functions take the block tensors for every head at once, shaped
(H, B, d), and a sequence of ``PagedPrefix`` objects (one per head). The
first denoising step of a LoSA block runs dense prefix attention and caches
the per-token prefix partials. Later steps recompute sparse prefix attention
only for the tokens whose representation changed most, over the union of
their selected pages, and reuse the cached partials for the rest.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import PartialAttention, merge_partials, partial_attention, sparse_prefix_attention
from .errors import ConfigError, InvariantError, ShapeError, StateError
from .locality import ActiveSet, heads_to_tokens, locality_scores, select_active_threshold, select_active_topk
from .numerics import DTYPE
from .selector import PagedPrefix, build_paged_prefix, pages_for_budget, select_pages_batch, union_selection
from .workload import DenoiseWorkload

logger = logging.getLogger(__name__)

METHODS = ("dense", "quest", "losa")


@dataclass(frozen=True)
class EngineConfig:
    budget: int = 128
    page_size: int = 16
    policy: str = "topk"
    k_active: int = 5
    tau: float = 0.5
    signal: str = "q"  # "q" or "qkv"
    heads: int | None = None
    head_dim: int | None = None

    def validate(self) -> None:
        if self.budget < 1:
            raise ConfigError(f"budget must be >= 1, got {self.budget}")
        if self.page_size < 1:
            raise ConfigError(f"page size must be >= 1, got {self.page_size}")
        if self.policy == "topk":
            if self.k_active < 1:
                raise ConfigError(f"k_active must be >= 1, got {self.k_active}")
        elif self.policy == "threshold":
            if not 0.0 < self.tau <= 1.0:
                raise ConfigError(f"tau must lie in (0, 1], got {self.tau}")
        else:
            raise ConfigError(f"unknown active policy {self.policy!r}")
        if self.signal not in ("q", "qkv"):
            raise ConfigError(f"unknown locality signal {self.signal!r}")

    def select_active(self, scores) -> ActiveSet:
        if self.policy == "topk":
            return select_active_topk(scores, self.k_active)
        return select_active_threshold(scores, self.tau)

    def selection_key(self) -> tuple:
        return (self.budget, self.page_size, self.policy, self.k_active, self.tau, self.signal)


@dataclass
class HeadStats:
    union_pages: np.ndarray
    union_positions: int
    selector_ops: int


@dataclass
class StepStats:
    step: int
    method: str
    active_count: int
    union_pages: float
    pages_total: int
    union_positions: float
    density: float
    kv_elements_loaded: float
    selector_ops: int
    prefix_len: int
    is_init: bool = False
    active: np.ndarray | None = field(default=None, repr=False)
    heads: list[HeadStats] = field(default_factory=list, repr=False)
    max_abs_err: float | None = None
    mse: float | None = None
    rel_fro_err: float | None = None


@dataclass
class BlockState:
    """LoSA cache for one block: per-head prefix partials plus last-step queries."""

    cached_prefix: list[PartialAttention]
    prev_queries: np.ndarray  # (H, B, d)
    config: EngineConfig
    prefix_ids: tuple
    step_index: int = 0
    prev_keys: np.ndarray | None = None
    prev_values: np.ndarray | None = None

    def cached_scalar_count(self) -> int:
        return sum(p.scalar_count for p in self.cached_prefix)


def build_prefixes(K_p, V_p, page_size: int) -> list[PagedPrefix] | None:
    """One ``PagedPrefix`` per head from (H, L, d) tensors; ``None`` if L == 0."""
    K_p = np.asarray(K_p)
    if K_p.shape[1] == 0:
        return None
    return [build_paged_prefix(K_p[h], V_p[h], page_size) for h in range(K_p.shape[0])]


def _map_heads(fn, H: int, workers: int):
    if workers <= 1 or H == 1:
        return [fn(h) for h in range(H)]
    with ThreadPoolExecutor(max_workers=min(workers, H)) as pool:
        return list(pool.map(fn, range(H)))


def _check_block(prefixes, Q_b, K_b, V_b, cfg: EngineConfig | None = None):
    Q_b, K_b, V_b = (np.asarray(x, dtype=DTYPE) for x in (Q_b, K_b, V_b))
    if Q_b.ndim != 3 or not (Q_b.shape == K_b.shape == V_b.shape):
        raise ShapeError(f"block tensors must share shape (H, B, d); got {Q_b.shape}, {K_b.shape}, {V_b.shape}")
    H, _, d = Q_b.shape
    if prefixes is not None:
        if len(prefixes) != H:
            raise ShapeError(f"{len(prefixes)} prefixes for {H} heads")
        for p in prefixes:
            if p.head_dim != d:
                raise ShapeError(f"prefix head dim {p.head_dim} != block head dim {d}")
            if cfg is not None and p.page_size != cfg.page_size:
                raise ConfigError(f"prefix page size {p.page_size} != configured {cfg.page_size}")
    if cfg is not None:
        if cfg.heads is not None and cfg.heads != H:
            raise ConfigError(f"config expects {cfg.heads} heads, block has {H}")
        if cfg.head_dim is not None and cfg.head_dim != d:
            raise ConfigError(f"config expects head dim {cfg.head_dim}, block has {d}")
    return Q_b, K_b, V_b


def _prefix_ids(prefixes) -> tuple:
    return () if prefixes is None else tuple(id(p) for p in prefixes)


def _aggregate(step, method, active_count, heads: list[HeadStats], prefixes, H, d, *, is_init=False, active=None):
    if prefixes is None:
        return StepStats(step, method, active_count, 0.0, 0, 0.0, 1.0, 0.0, 0, 0, is_init, active, heads)
    L = prefixes[0].length
    P = prefixes[0].num_pages
    pages = float(np.mean([len(h.union_pages) for h in heads]))
    positions = float(np.mean([h.union_positions for h in heads]))
    density = float(np.mean([h.union_positions / L for h in heads]))
    return StepStats(
        step=step,
        method=method,
        active_count=active_count,
        union_pages=pages,
        pages_total=P,
        union_positions=positions,
        density=density,
        kv_elements_loaded=2.0 * d * positions,
        selector_ops=sum(h.selector_ops for h in heads),
        prefix_len=L,
        is_init=is_init,
        active=active,
        heads=heads,
    )


def _full_head_stats(prefix: PagedPrefix) -> HeadStats:
    return HeadStats(np.arange(prefix.num_pages), prefix.length, 0)


def _sparse_head(prefix: PagedPrefix, Q_sel: np.ndarray, budget: int):
    sets = select_pages_batch(Q_sel, prefix, budget)
    n_pages = pages_for_budget(budget, prefix.page_size)
    ops = 0 if n_pages >= prefix.num_pages else Q_sel.shape[0] * prefix.num_pages
    sel = union_selection(sets, prefix)
    fresh = sparse_prefix_attention(Q_sel, prefix, sel.union_pages)
    return fresh, HeadStats(sel.union_pages, sel.union_positions, ops)


def step_dense(prefixes, Q_b, K_b, V_b, *, step: int = 0, workers: int = 1):
    """Full attention of the block over ``[K_p; K_b]`` in one pass."""
    Q_b, K_b, V_b = _check_block(prefixes, Q_b, K_b, V_b)
    H, B, d = Q_b.shape

    def head(h):
        if prefixes is None:
            K, V = K_b[h], V_b[h]
        else:
            K = np.concatenate([prefixes[h].keys, K_b[h]])
            V = np.concatenate([prefixes[h].values, V_b[h]])
        out = partial_attention(Q_b[h], K, V).output
        return out, (None if prefixes is None else _full_head_stats(prefixes[h]))

    res = _map_heads(head, H, workers)
    out = np.stack([r[0] for r in res])
    heads = [r[1] for r in res] if prefixes is not None else []
    return out, _aggregate(step, "dense", B, heads, prefixes, H, d)


def init_block(prefixes, Q_b, K_b, V_b, cfg: EngineConfig, *, workers: int = 1):
    """First denoising step of a block: dense prefix partials, cached for reuse."""
    cfg.validate()
    Q_b, K_b, V_b = _check_block(prefixes, Q_b, K_b, V_b, cfg)
    H, B, d = Q_b.shape

    def head(h):
        if prefixes is None:
            p = PartialAttention.empty(B, d)
        else:
            p = partial_attention(Q_b[h], prefixes[h].keys64, prefixes[h].values64)
        b = partial_attention(Q_b[h], K_b[h], V_b[h])
        return merge_partials(p, b).output, p

    res = _map_heads(head, H, workers)
    out = np.stack([r[0] for r in res])
    state = BlockState(
        cached_prefix=[r[1] for r in res],
        prev_queries=Q_b.copy(),
        config=cfg,
        prefix_ids=_prefix_ids(prefixes),
        step_index=1,
        prev_keys=K_b.copy() if cfg.signal == "qkv" else None,
        prev_values=V_b.copy() if cfg.signal == "qkv" else None,
    )
    heads = [] if prefixes is None else [_full_head_stats(p) for p in prefixes]
    stats = _aggregate(0, "losa", B, heads, prefixes, H, d, is_init=True, active=np.arange(B))
    return out, state, stats


def block_locality(state: BlockState, Q_b, K_b, V_b) -> np.ndarray:
    """Per-token change score against the state's previous step (shared by all heads)."""
    delta = locality_scores(heads_to_tokens(Q_b), heads_to_tokens(state.prev_queries))
    if state.config.signal == "qkv":
        dk = locality_scores(heads_to_tokens(K_b), heads_to_tokens(state.prev_keys))
        dv = locality_scores(heads_to_tokens(V_b), heads_to_tokens(state.prev_values))
        delta = (delta + dk + dv) / 3.0
    return delta


def step_losa(state: BlockState, prefixes, Q_b, K_b, V_b, cfg: EngineConfig, *, workers: int = 1):
    """One locality-aware sparse step. Mutates and returns ``state``."""
    if state is None or state.step_index < 1:
        raise StateError("block state is not initialized; call init_block first")
    if cfg.selection_key() != state.config.selection_key():
        raise ConfigError("engine config differs from the one the block was initialized with")
    if _prefix_ids(prefixes) != state.prefix_ids:
        raise ConfigError("prefix differs from the one the block was initialized with")
    Q_b, K_b, V_b = _check_block(prefixes, Q_b, K_b, V_b, cfg)
    H, B, d = Q_b.shape
    if state.prev_queries.shape != Q_b.shape:
        raise ShapeError(f"block shape {Q_b.shape} != cached shape {state.prev_queries.shape}")

    active = cfg.select_active(block_locality(state, Q_b, K_b, V_b)).indices

    def head(h):
        cache = state.cached_prefix[h]
        hs = None
        if prefixes is not None:
            fresh, hs = _sparse_head(prefixes[h], Q_b[h][active], cfg.budget)
            if hs.union_pages.size:
                cache.output[active] = fresh.output
                cache.lse[active] = fresh.lse
        b = partial_attention(Q_b[h], K_b[h], V_b[h])
        return merge_partials(cache, b).output, hs

    res = _map_heads(head, H, workers)
    out = np.stack([r[0] for r in res])
    step = state.step_index
    state.prev_queries = Q_b.copy()
    if cfg.signal == "qkv":
        state.prev_keys = K_b.copy()
        state.prev_values = V_b.copy()
    state.step_index += 1
    heads = [r[1] for r in res] if prefixes is not None else []
    return out, state, _aggregate(step, "losa", int(active.size), heads, prefixes, H, d, active=active)


def step_quest(prefixes, Q_b, K_b, V_b, cfg: EngineConfig, *, step: int = 0, workers: int = 1):
    """Naive per-query QUEST: every block query selects pages; attention runs over their union."""
    cfg.validate()
    Q_b, K_b, V_b = _check_block(prefixes, Q_b, K_b, V_b, cfg)
    H, B, d = Q_b.shape
    if prefixes is not None and cfg.budget >= prefixes[0].length:
        out, st = step_dense(prefixes, Q_b, K_b, V_b, step=step, workers=workers)
        st.method = "quest"
        st.active = np.arange(B)
        return out, st

    def head(h):
        b = partial_attention(Q_b[h], K_b[h], V_b[h])
        if prefixes is None:
            return b.output, None
        fresh, hs = _sparse_head(prefixes[h], Q_b[h], cfg.budget)
        return merge_partials(fresh, b).output, hs

    res = _map_heads(head, H, workers)
    out = np.stack([r[0] for r in res])
    heads = [r[1] for r in res] if prefixes is not None else []
    return out, _aggregate(step, "quest", B, heads, prefixes, H, d, active=np.arange(B))


def union_size_curve(Q, prefix: PagedPrefix, budget: int, order=None) -> list[int]:
    """Union size (positions) as queries are added one at a time in ``order``."""
    Q = np.atleast_2d(np.asarray(Q))
    order = np.arange(Q.shape[0]) if order is None else np.asarray(order)
    sets = select_pages_batch(Q[order], prefix, budget)
    return [union_selection(sets[: n + 1], prefix).union_positions for n in range(len(sets))]


def check_step_invariants(stats: StepStats, prefixes, Q_b, cfg: EngineConfig, B: int) -> None:
    """Raise ``InvariantError`` if a step's stats break a structural guarantee."""
    if not 0.0 <= stats.density <= 1.0:
        raise InvariantError(f"density-in-range: step {stats.step} {stats.method} density {stats.density}")
    if stats.active_count > B:
        raise InvariantError(f"active-count-bounded: {stats.active_count} > B={B}")
    if prefixes is None or stats.method == "dense" or stats.is_init:
        return
    L = prefixes[0].length
    n_pages = pages_for_budget(cfg.budget, cfg.page_size)
    limit = min(L, stats.active_count * n_pages * cfg.page_size)
    for h, hs in enumerate(stats.heads):
        if hs.union_positions > limit:
            raise InvariantError(
                f"worst-case-union-bound: head {h} step {stats.step} union {hs.union_positions} > {limit}"
            )
        if stats.method == "losa":
            full = union_selection(select_pages_batch(Q_b[h], prefixes[h], cfg.budget), prefixes[h]).union_pages
            if not np.isin(hs.union_pages, full).all():
                raise InvariantError(f"union-shrinkage: head {h} step {stats.step} losa union not within quest union")


def run_block(w: DenoiseWorkload, cfg: EngineConfig, method: str, *, workers: int = 1, check: bool = True, prefixes=None):
    """Run every denoising step of ``w`` with ``method``; returns (outputs, stats)."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
    cfg.validate()
    if w.steps < 1:
        raise ConfigError("workload has no steps")
    if prefixes is None:
        prefixes = build_prefixes(w.K_p, w.V_p, cfg.page_size)
    outputs, stats = [], []
    state = None
    for t in range(w.steps):
        Q, K, V = w.step(t)
        if method == "dense":
            out, st = step_dense(prefixes, Q, K, V, step=t, workers=workers)
        elif method == "quest":
            out, st = step_quest(prefixes, Q, K, V, cfg, step=t, workers=workers)
        elif t == 0:
            out, state, st = init_block(prefixes, Q, K, V, cfg, workers=workers)
        else:
            out, state, st = step_losa(state, prefixes, Q, K, V, cfg, workers=workers)
        if check:
            check_step_invariants(st, prefixes, Q, cfg, w.block_size)
        logger.debug("step %d %s density=%.4f active=%d", t, method, st.density, st.active_count)
        outputs.append(out)
        stats.append(st)
    return outputs, stats


def with_full_budget(cfg: EngineConfig, L: int, B: int) -> EngineConfig:
    """Config with a budget covering the whole prefix and every token active."""
    return replace(cfg, budget=max(L, 1), policy="topk", k_active=B)
