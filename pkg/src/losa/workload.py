"""Synthetic denoising trajectories and the binary trace format.

Trace layout (little-endian, no padding)::

    magic   4 bytes  b"LBTR"
    version u32      1
    H, d, L, B, S    u32 each
    K_p     float32  H*L*d   (head, position, dim)
    V_p     float32  H*L*d
    S times:
      Q_b   float32  H*B*d   (head, token, dim)
      K_b   float32  H*B*d
      V_b   float32  H*B*d

Random numbers come from numpy's ``Generator`` on a ``Philox`` bit
generator seeded with ``GenConfig.seed``. Draw order: K_p, V_p, then
step-0 Q_b, K_b, V_b (all standard normal scaled by ``base_scale``), then
the window start (``integers(B)``), then per step t >= 1 the perturbed rows
(uniform mode only: ``choice(B, m, replace=False)``) followed by noise for
Q_b, K_b, V_b, each of shape (H, m, d).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError, TraceFormatError
from .numerics import DTYPE

MAGIC = b"LBTR"
VERSION = 1
_HEADER = struct.Struct("<4s6I")
_MAX_ELEMENTS = 1 << 40


@dataclass(eq=False)
class DenoiseWorkload:
    K_p: np.ndarray  # (H, L, d)
    V_p: np.ndarray  # (H, L, d)
    Q_b: np.ndarray  # (S, H, B, d)
    K_b: np.ndarray  # (S, H, B, d)
    V_b: np.ndarray  # (S, H, B, d)

    def __post_init__(self):
        for name in ("K_p", "V_p", "Q_b", "K_b", "V_b"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=DTYPE))
        if self.K_p.ndim != 3 or self.K_p.shape != self.V_p.shape:
            raise ShapeError(f"prefix tensors must be (H, L, d); got {self.K_p.shape}, {self.V_p.shape}")
        if self.Q_b.ndim != 4 or not (self.Q_b.shape == self.K_b.shape == self.V_b.shape):
            raise ShapeError("block tensors must share shape (S, H, B, d)")
        H, _, d = self.K_p.shape
        if self.Q_b.shape[1] != H or self.Q_b.shape[3] != d:
            raise ShapeError(f"block tensors {self.Q_b.shape} disagree with prefix {self.K_p.shape}")

    @property
    def heads(self) -> int:
        return self.K_p.shape[0]

    @property
    def head_dim(self) -> int:
        return self.K_p.shape[2]

    @property
    def prefix_len(self) -> int:
        return self.K_p.shape[1]

    @property
    def block_size(self) -> int:
        return self.Q_b.shape[2]

    @property
    def steps(self) -> int:
        return self.Q_b.shape[0]

    def header(self) -> dict:
        return {"H": self.heads, "d": self.head_dim, "L": self.prefix_len, "B": self.block_size, "S": self.steps}

    def step(self, t: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.Q_b[t], self.K_b[t], self.V_b[t]

    def check_finite(self) -> None:
        for name in ("K_p", "V_p", "Q_b", "K_b", "V_b"):
            if not np.isfinite(getattr(self, name)).all():
                raise ValueError(f"{name} contains NaN or Inf")

    def equals(self, other: "DenoiseWorkload") -> bool:
        """Bitwise equality of every tensor."""
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self._tensors(), other._tensors())
        )

    def _tensors(self):
        return (self.K_p, self.V_p, self.Q_b, self.K_b, self.V_b)


@dataclass(frozen=True)
class GenConfig:
    L: int = 4096
    B: int = 16
    d: int = 64
    H: int = 2
    S: int = 8
    active_fraction: float = 5 / 16
    perturb_scale: float = 0.1
    base_scale: float = 1.0
    seed: int = 0
    pattern: str = "window"  # or "uniform"

    def validate(self) -> None:
        for name in ("L", "B", "d", "H", "S"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0.0 <= self.active_fraction <= 1.0:
            raise ConfigError(f"active_fraction must lie in [0, 1], got {self.active_fraction}")
        if not self.perturb_scale > 0:
            raise ConfigError(f"perturb_scale must be > 0, got {self.perturb_scale}")
        if not self.base_scale > 0:
            raise ConfigError(f"base_scale must be > 0, got {self.base_scale}")
        if self.pattern not in ("window", "uniform"):
            raise ConfigError(f"unknown perturbation pattern {self.pattern!r}")

    @property
    def perturbed_rows(self) -> int:
        return int(round(self.active_fraction * self.B))


def perturbed_rows_at(cfg: GenConfig, start: int, t: int) -> np.ndarray:
    """Rows touched at step ``t >= 1`` in window mode: width m, advancing by m each step."""
    m = cfg.perturbed_rows
    return np.sort((start + (t - 1) * m + np.arange(m)) % cfg.B)


def gen_synthetic(cfg: GenConfig, *, return_rows: bool = False):
    """Generate a seeded synthetic workload.

    Step 0 is drawn fresh. Each later step copies the previous one and adds
    normal noise of std ``perturb_scale`` to exactly ``round(active_fraction*B)``
    token rows of Q_b, K_b and V_b in every head. All other rows are
    bit-identical to the previous step.

    With ``return_rows`` the list of perturbed row indices per step (empty for
    step 0) is returned alongside the workload.
    """
    cfg.validate()
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    H, L, B, d, S = cfg.H, cfg.L, cfg.B, cfg.d, cfg.S
    m = cfg.perturbed_rows

    def normal(shape, scale):
        return (rng.standard_normal(shape, dtype=np.float32) * np.float32(scale)).astype(DTYPE)

    K_p = normal((H, L, d), cfg.base_scale)
    V_p = normal((H, L, d), cfg.base_scale)
    Q = np.empty((S, H, B, d), dtype=DTYPE)
    K = np.empty_like(Q)
    V = np.empty_like(Q)
    Q[0] = normal((H, B, d), cfg.base_scale)
    K[0] = normal((H, B, d), cfg.base_scale)
    V[0] = normal((H, B, d), cfg.base_scale)
    start = int(rng.integers(B))
    rows_per_step: list[np.ndarray] = [np.empty(0, dtype=np.int64)]
    for t in range(1, S):
        if cfg.pattern == "window":
            rows = perturbed_rows_at(cfg, start, t)
        else:
            rows = np.sort(rng.choice(B, size=m, replace=False))
        for buf in (Q, K, V):
            buf[t] = buf[t - 1]
            if m:
                buf[t][:, rows, :] += normal((H, m, d), cfg.perturb_scale)
        rows_per_step.append(rows)
    w = DenoiseWorkload(K_p, V_p, Q, K, V)
    return (w, rows_per_step) if return_rows else w


def save_trace(w: DenoiseWorkload, path) -> None:
    path = Path(path)
    with path.open("wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, w.heads, w.head_dim, w.prefix_len, w.block_size, w.steps))
        f.write(w.K_p.astype("<f4").tobytes())
        f.write(w.V_p.astype("<f4").tobytes())
        for t in range(w.steps):
            for buf in (w.Q_b, w.K_b, w.V_b):
                f.write(buf[t].astype("<f4").tobytes())


def load_trace(path) -> DenoiseWorkload:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise TraceFormatError(f"truncated header: need {_HEADER.size} bytes, file has {len(data)}", len(data))
    magic, version, H, d, L, B, S = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise TraceFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != VERSION:
        raise TraceFormatError(f"unsupported version {version}, expected {VERSION}", 4)
    if S == 0:
        raise TraceFormatError("empty workload: header declares S=0 steps", 24)
    if min(H, d, L, B) == 0:
        raise TraceFormatError(f"degenerate header H={H} d={d} L={L} B={B}", 8)
    prefix_n = H * L * d
    block_n = H * B * d
    total = 2 * prefix_n + 3 * S * block_n
    if total > _MAX_ELEMENTS:
        raise TraceFormatError(f"header declares {total} elements, exceeding the {_MAX_ELEMENTS} limit", 8)
    offset = _HEADER.size

    def read(n: int, section: str) -> np.ndarray:
        nonlocal offset
        need = 4 * n
        if offset + need > len(data):
            raise TraceFormatError(
                f"truncated file: section {section} needs {need} bytes, {len(data) - offset} remain", offset
            )
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=offset).astype(DTYPE)
        offset += need
        return arr

    K_p = read(prefix_n, "K_p").reshape(H, L, d)
    V_p = read(prefix_n, "V_p").reshape(H, L, d)
    Q = np.empty((S, H, B, d), dtype=DTYPE)
    K = np.empty_like(Q)
    V = np.empty_like(Q)
    for t in range(S):
        Q[t] = read(block_n, f"Q_b[step {t}]").reshape(H, B, d)
        K[t] = read(block_n, f"K_b[step {t}]").reshape(H, B, d)
        V[t] = read(block_n, f"V_b[step {t}]").reshape(H, B, d)
    if offset != len(data):
        raise TraceFormatError(f"{len(data) - offset} trailing bytes after last step", offset)
    w = DenoiseWorkload(K_p, V_p, Q, K, V)
    try:
        w.check_finite()
    except ValueError as exc:
        raise TraceFormatError(str(exc)) from None
    return w
