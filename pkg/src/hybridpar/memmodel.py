"""Per-GPU memory accounting for expert/tensor/ZeRO-1 data parallel training.

All arithmetic is exact (``Fraction``); byte values are rounded half-up to
integers only when a :class:`MemoryReport` is built.

Byte constants follow mixed-precision ZeRO stage-1: every parameter costs
2 bytes (fp16 weight) + 2 bytes (fp16 gradient) on every replica, and 12 bytes
of optimizer state (4 fp32 master + 8 for the two Adam moments) sharded over
the data-parallel replicas. Upcast gradients are fp32, 4 bytes each.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from numbers import Rational

from .core import ParallelConfig, validate_config
from .serialize import round_half_up

REPLICATED_BYTES = 4
SHARDED_STATE_BYTES = 12
FP32_BYTES = 4


class IndivisibleDegrees(ValueError):
    pass


def _exact(x) -> Fraction:
    if isinstance(x, (int, Rational)):
        return Fraction(x)
    if isinstance(x, float):
        return Fraction(repr(x))
    if isinstance(x, str):
        return Fraction(x)
    raise TypeError(f"expected a number, got {x!r}")


@dataclass(frozen=True)
class ParamSplit:
    p_e: Fraction
    p_ne: Fraction
    p_base: Fraction
    E: int

    @property
    def total(self) -> Fraction:
        return self.p_e + self.p_ne


def split_params(p_base, E: int) -> ParamSplit:
    """Split a base model into expert and non-expert parameter counts.

    Experts replace every other feed-forward block; feed-forward blocks hold
    two thirds of the base parameters, so ``p_e = E/3 * p_base`` and the
    remaining ``p_ne = 2/3 * p_base`` are attention plus the dense half of
    the feed-forward blocks.
    """
    p = _exact(p_base)
    if p <= 0:
        raise ValueError("p_base must be positive")
    if E < 1:
        raise ValueError("E must be >= 1")
    ff = Fraction(2, 3) * p
    p_e = E * Fraction(1, 2) * ff
    p_ne = Fraction(1, 2) * ff + Fraction(1, 3) * p
    return ParamSplit(p_e=p_e, p_ne=p_ne, p_base=p, E=E)


@dataclass(frozen=True)
class ShardingTerms:
    """Intermediate quantities of the two-term ZeRO-1 bound."""

    data_ne: int
    data_e: int
    p_ne_gpu: Fraction
    p_e_gpu: Fraction
    nonexpert_bytes: Fraction
    expert_bytes: Fraction

    @property
    def total(self) -> Fraction:
        return self.nonexpert_bytes + self.expert_bytes


def sharding_terms(cfg: ParallelConfig, split: ParamSplit) -> ShardingTerms:
    validate_config(cfg)
    G, Gt, E = cfg.total_gpus, cfg.tensor_degree, cfg.expert_degree
    if G % Gt:
        raise IndivisibleDegrees(f"G={G} not divisible by G_tensor={Gt}")
    if G % (Gt * E):
        raise IndivisibleDegrees(f"G={G} not divisible by G_tensor*E={Gt * E}")
    if split.E % E:
        raise IndivisibleDegrees(f"{split.E} experts do not spread evenly over expert degree {E}")
    data_ne = G // Gt
    data_e = G // (Gt * E)
    p_ne_gpu = split.p_ne / Gt
    p_e_gpu = split.p_e / (Gt * E)
    ne = (REPLICATED_BYTES + Fraction(SHARDED_STATE_BYTES, data_ne)) * p_ne_gpu
    ex = (REPLICATED_BYTES + Fraction(SHARDED_STATE_BYTES, data_e)) * p_e_gpu
    return ShardingTerms(data_ne, data_e, p_ne_gpu, p_e_gpu, ne, ex)


def zero1_lower_bound_exact(cfg: ParallelConfig, split: ParamSplit) -> Fraction:
    return sharding_terms(cfg, split).total


def zero1_lower_bound(cfg: ParallelConfig, split: ParamSplit) -> int:
    """Per-GPU lower bound in bytes under ZeRO stage-1 (rounded half-up)."""
    return round_half_up(zero1_lower_bound_exact(cfg, split))


def zero1_closed_form(cfg: ParallelConfig, p_base) -> Fraction:
    """Simplified form ``4 p/G_tensor + 4 (E+2) p / G``; used as a cross-check."""
    p = _exact(p_base)
    return 4 * p / cfg.tensor_degree + Fraction(4 * (cfg.expert_degree + 2), cfg.total_gpus) * p


def max_base_model(mem_per_gpu, G_tensor: int) -> Fraction:
    """Largest base model that fits once the sharded term becomes negligible."""
    m = _exact(mem_per_gpu)
    if m <= 0 or G_tensor < 1:
        raise ValueError("mem_per_gpu must be > 0 and G_tensor >= 1")
    return Fraction(G_tensor, 4) * m


@dataclass(frozen=True)
class Spike:
    spike_untiled: Fraction
    spike_tiled: Fraction
    expert_shard: Fraction
    nonexpert_upcast: Fraction


def optimizer_spike_exact(cfg: ParallelConfig, split: ParamSplit, tile_size=None) -> Spike:
    terms = sharding_terms(cfg, split)
    # ZeRO-1 splits the optimizer step over the data-parallel replicas of each group.
    expert_shard = split.p_e / (cfg.tensor_degree * cfg.expert_degree * terms.data_e)
    nonexpert_shard = split.p_ne / (cfg.tensor_degree * terms.data_ne)
    untiled = FP32_BYTES * expert_shard
    if tile_size is None:
        tiled = untiled
    else:
        ts = _exact(tile_size)
        if ts < 1:
            raise ValueError("tile_size must be >= 1")
        tiled = FP32_BYTES * min(ts, expert_shard)
    return Spike(untiled, tiled, expert_shard, FP32_BYTES * nonexpert_shard)


def optimizer_spike(cfg: ParallelConfig, split: ParamSplit, tile_size=None) -> dict[str, int]:
    s = optimizer_spike_exact(cfg, split, tile_size)
    return {"spike_untiled": round_half_up(s.spike_untiled),
            "spike_tiled": round_half_up(s.spike_tiled)}


@dataclass(frozen=True)
class MemoryReport:
    per_gpu_lower_bound: int
    persistent_params: int
    optimizer_states: int
    spike_untiled: int
    spike_tiled: int
    phases: dict[str, int]
    breakdown: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "per_gpu_lower_bound": self.per_gpu_lower_bound,
            "persistent_params": self.persistent_params,
            "optimizer_states": self.optimizer_states,
            "spike_untiled": self.spike_untiled,
            "spike_tiled": self.spike_tiled,
            "phases": dict(self.phases),
            "breakdown": dict(self.breakdown),
        }


def memory_report(cfg: ParallelConfig, split: ParamSplit, tile_size=None) -> MemoryReport:
    """Static footprint plus the transient optimizer spike.

    Forward and backward phases hold only the static bound (activations are
    not modelled); the optimizer phase adds the expert upcast buffer, tiled
    when ``tile_size`` is given.
    """
    t = sharding_terms(cfg, split)
    spike = optimizer_spike_exact(cfg, split, tile_size)
    persistent = REPLICATED_BYTES * (t.p_ne_gpu + t.p_e_gpu)
    states = (Fraction(SHARDED_STATE_BYTES, t.data_ne) * t.p_ne_gpu
              + Fraction(SHARDED_STATE_BYTES, t.data_e) * t.p_e_gpu)
    static = t.total
    active_spike = spike.spike_tiled if tile_size is not None else spike.spike_untiled
    r = round_half_up
    return MemoryReport(
        per_gpu_lower_bound=r(static),
        persistent_params=r(persistent),
        optimizer_states=r(states),
        spike_untiled=r(spike.spike_untiled),
        spike_tiled=r(spike.spike_tiled),
        phases={"forward": r(static), "backward": r(static),
                "optimizer": r(static + active_spike)},
        breakdown={
            "data_degree_nonexpert": t.data_ne,
            "data_degree_expert": t.data_e,
            "params_per_gpu_nonexpert": r(t.p_ne_gpu),
            "params_per_gpu_expert": r(t.p_e_gpu),
            "nonexpert_bytes": r(t.nonexpert_bytes),
            "expert_bytes": r(t.expert_bytes),
            "expert_shard_params": r(spike.expert_shard),
            "nonexpert_upcast_bytes": r(spike.nonexpert_upcast),
        },
    )
