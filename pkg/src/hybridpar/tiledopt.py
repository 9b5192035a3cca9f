"""Mixed-precision AdamW step with optional tiling of the gradient upcast.

Update rule (all arithmetic in float32, ``g`` the upcast 16-bit gradient,
``t`` the step count after increment)::

    w  <- w * (1 - lr * weight_decay)
    m  <- beta1 * m + (1 - beta1) * g
    v  <- beta2 * v + (1 - beta2) * g * g
    w  <- w - lr * (m / (1 - beta1**t)) / (sqrt(v / (1 - beta2**t)) + eps)

Every operation is element-wise, so processing the group in tiles gives
bit-identical results to processing it in one go. Only the 32-bit gradient
buffer is counted as transient memory.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_TILE_SIZE = 1_800_000
UPCAST_BYTES = 4


class BadTilePlan(ValueError):
    pass


@dataclass(frozen=True)
class AdamWHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class ParamGroup:
    master_weights: np.ndarray
    grads_16: np.ndarray
    exp_avg: np.ndarray
    exp_avg_sq: np.ndarray
    step_count: int = 0

    def __post_init__(self):
        self.master_weights = np.asarray(self.master_weights, dtype=np.float32)
        self.grads_16 = np.asarray(self.grads_16, dtype=np.float16)
        self.exp_avg = np.asarray(self.exp_avg, dtype=np.float32)
        self.exp_avg_sq = np.asarray(self.exp_avg_sq, dtype=np.float32)
        n = len(self.master_weights)
        if any(len(a) != n for a in (self.grads_16, self.exp_avg, self.exp_avg_sq)):
            raise ValueError("parameter group vectors must have equal length")
        if self.step_count < 0:
            raise ValueError("step_count must be >= 0")

    def __len__(self):
        return len(self.master_weights)

    @classmethod
    def zeros(cls, n: int) -> ParamGroup:
        z = np.zeros(n, dtype=np.float32)
        return cls(z.copy(), np.zeros(n, dtype=np.float16), z.copy(), z.copy())

    @classmethod
    def random(cls, n: int, seed: int = 0, warm: bool = True) -> ParamGroup:
        """Random weights and gradients; ``warm`` also fills the moments."""
        rng = np.random.default_rng(seed)
        w = rng.standard_normal(n).astype(np.float32)
        g = (rng.standard_normal(n) * 0.05).astype(np.float16)
        if warm:
            m = (rng.standard_normal(n) * 0.01).astype(np.float32)
            v = (np.abs(rng.standard_normal(n)) * 1e-4).astype(np.float32)
            steps = int(rng.integers(0, 100))
        else:
            m = np.zeros(n, dtype=np.float32)
            v = np.zeros(n, dtype=np.float32)
            steps = 0
        return cls(w, g, m, v, steps)

    def copy(self) -> ParamGroup:
        return ParamGroup(self.master_weights.copy(), self.grads_16.copy(), self.exp_avg.copy(),
                          self.exp_avg_sq.copy(), self.step_count)

    def bit_identical(self, other: ParamGroup) -> bool:
        pairs = ((self.master_weights, other.master_weights), (self.exp_avg, other.exp_avg),
                 (self.exp_avg_sq, other.exp_avg_sq))
        return self.step_count == other.step_count and all(
            a.tobytes() == b.tobytes() for a, b in pairs)


@dataclass(frozen=True)
class TilePlan:
    tile_size: int
    ranges: tuple[tuple[int, int], ...]
    group_len: int

    def validate(self) -> TilePlan:
        if self.tile_size < 1:
            raise BadTilePlan("tile size must be >= 1")
        pos = 0
        for idx, (start, end) in enumerate(self.ranges):
            if start != pos:
                kind = "gap" if start > pos else "overlap"
                raise BadTilePlan(f"{kind} before tile {idx} at [{start}, {end})")
            if end <= start:
                raise BadTilePlan(f"empty tile {idx}")
            if end - start > self.tile_size:
                raise BadTilePlan(f"tile {idx} longer than the tile size")
            if end - start < self.tile_size and idx != len(self.ranges) - 1:
                raise BadTilePlan(f"only the last tile may be short (tile {idx})")
            pos = end
        if pos != self.group_len:
            raise BadTilePlan(f"tiles cover [0, {pos}) but the group has {self.group_len} entries")
        return self


def make_tile_plan(group_len: int, ts: int = DEFAULT_TILE_SIZE) -> TilePlan:
    if ts < 1:
        raise BadTilePlan("tile size must be >= 1")
    ranges = tuple((s, min(s + ts, group_len)) for s in range(0, group_len, ts))
    return TilePlan(ts, ranges, group_len)


class _Accountant:
    """Tracks bytes held by buffers the optimizer allocates itself."""

    def __init__(self):
        self.current = 0
        self.peak = 0
        self.samples: list[tuple[str, int]] = []

    def alloc(self, n: int, label: str) -> np.ndarray:
        buf = np.empty(n, dtype=np.float32)
        self.current += buf.nbytes
        self.peak = max(self.peak, self.current)
        self.samples.append((label, self.current))
        return buf

    def free(self, buf: np.ndarray, label: str) -> None:
        self.current -= buf.nbytes
        self.samples.append((label, self.current))


@dataclass(frozen=True)
class MemoryTrace:
    peak_transient_bytes: int
    samples: list[tuple[str, int]] = field(default_factory=list)


def _update_slice(group: ParamGroup, g32: np.ndarray, sl: slice, hyper: AdamWHyper, t: int) -> None:
    f = np.float32
    lr, b1, b2 = f(hyper.lr), f(hyper.beta1), f(hyper.beta2)
    eps, wd = f(hyper.eps), f(hyper.weight_decay)
    one = f(1)
    bc1 = one - b1 ** f(t)
    bc2 = one - b2 ** f(t)
    w = group.master_weights[sl]
    m = group.exp_avg[sl]
    v = group.exp_avg_sq[sl]
    w *= one - lr * wd
    m *= b1
    m += (one - b1) * g32
    v *= b2
    v += (one - b2) * (g32 * g32)
    denom = np.sqrt(v / bc2) + eps
    w -= lr * ((m / bc1) / denom)


def step_untiled(group: ParamGroup, hyper: AdamWHyper = AdamWHyper()) -> tuple[ParamGroup, MemoryTrace]:
    out = group.copy()
    out.step_count += 1
    acct = _Accountant()
    buf = acct.alloc(len(out), "upcast")
    buf[:] = out.grads_16
    _update_slice(out, buf, slice(0, len(out)), hyper, out.step_count)
    acct.free(buf, "upcast")
    return out, MemoryTrace(acct.peak, acct.samples)


def step_tiled(group: ParamGroup, plan: TilePlan, hyper: AdamWHyper = AdamWHyper()
               ) -> tuple[ParamGroup, MemoryTrace]:
    if plan.group_len != len(group):
        raise BadTilePlan(f"plan covers {plan.group_len} entries, group has {len(group)}")
    plan.validate()
    out = group.copy()
    out.step_count += 1
    acct = _Accountant()
    buf = acct.alloc(min(plan.tile_size, len(out)), "tile-buffer")
    for start, end in plan.ranges:
        n = end - start
        buf[:n] = out.grads_16[start:end]
        _update_slice(out, buf[:n], slice(start, end), hyper, out.step_count)
    acct.free(buf, "tile-buffer")
    return out, MemoryTrace(acct.peak, acct.samples)


def plan_transient_bytes(group_len: int, ts: int | None = None) -> int:
    """Upcast buffer size without running a step (``ts=None`` means untiled)."""
    n = group_len if ts is None else min(ts, group_len)
    return UPCAST_BYTES * n


def bench(params: int, tile_size: int = DEFAULT_TILE_SIZE, seed: int = 0,
          hyper: AdamWHyper = AdamWHyper()) -> dict:
    group = ParamGroup.random(params, seed)
    ref, ref_trace = step_untiled(group, hyper)
    tiled, trace = step_tiled(group, make_tile_plan(params, tile_size), hyper)
    return {
        "params": params,
        "tile_size": tile_size,
        "peak_transient_bytes_tiled": trace.peak_transient_bytes,
        "peak_transient_bytes_untiled": ref_trace.peak_transient_bytes,
        "bit_identical": tiled.bit_identical(ref),
    }
