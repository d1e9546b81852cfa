"""Per-token change scores between denoising steps and active-token selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import ACC


@dataclass(frozen=True)
class ActiveSet:
    indices: np.ndarray  # sorted token positions within the block
    policy: str  # "topk" or "threshold"
    param: float  # k_active or tau

    def __len__(self) -> int:
        return int(self.indices.size)


def locality_scores(x_t, x_prev) -> np.ndarray:
    """Mean squared change per token (row); inputs are (B, d_total)."""
    a = np.asarray(x_t, dtype=ACC)
    b = np.asarray(x_prev, dtype=ACC)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"cannot compare representations of shape {a.shape} and {b.shape}")
    diff = a - b
    return (diff * diff).mean(axis=1)


def heads_to_tokens(x) -> np.ndarray:
    """Flatten an (H, B, d) per-head tensor to (B, H*d) so each row is one token."""
    x = np.asarray(x)
    if x.ndim == 2:
        return x
    H, B, d = x.shape
    return x.transpose(1, 0, 2).reshape(B, H * d)


def ranked_tokens(scores) -> np.ndarray:
    """Token indices by descending score; equal scores keep ascending index order."""
    return np.argsort(-np.asarray(scores, dtype=ACC), kind="stable")


def select_active_topk(scores, k_active: int) -> ActiveSet:
    if k_active < 1:
        raise ConfigError(f"k_active must be >= 1, got {k_active}")
    order = ranked_tokens(scores)
    return ActiveSet(np.sort(order[:k_active]), "topk", k_active)


def select_active_threshold(scores, tau: float) -> ActiveSet:
    """Smallest set of highest-scoring tokens holding at least ``tau`` of the total change."""
    if not 0.0 < tau <= 1.0:
        raise ConfigError(f"tau must lie in (0, 1], got {tau}")
    scores = np.asarray(scores, dtype=ACC)
    order = ranked_tokens(scores)
    total = scores.sum()
    if total <= 0.0:
        return ActiveSet(order[:1].copy(), "threshold", tau)
    if tau >= 1.0:
        # cumulative sums can stall on tiny positive entries, so count them directly
        n = int((scores > 0).sum())
    else:
        cum = np.cumsum(scores[order])
        n = int(np.searchsorted(cum, tau * cum[-1], side="left")) + 1
    return ActiveSet(np.sort(order[:n]), "threshold", tau)


def cumulative_mass(scores) -> tuple[np.ndarray, np.ndarray]:
    """Scores sorted descending and their normalized cumulative sum (zeros if no mass)."""
    s = np.asarray(scores, dtype=ACC)[ranked_tokens(scores)]
    total = s.sum()
    cum = np.cumsum(s) / total if total > 0 else np.zeros_like(s)
    return s, cum
