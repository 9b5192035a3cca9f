"""Search over GPU decompositions for the lowest predicted communication volume."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

from . import commmodel, memmodel
from .core import ModelKind, ModelSpec, ParallelConfig


class Infeasible(RuntimeError):
    pass


@dataclass(frozen=True)
class PlanRequest:
    model: ModelSpec
    G: int
    mem_per_gpu: int
    gpus_per_node: int = 4
    max_tensor_degree: int | None = None
    min_tensor_degree: int = 1

    def __post_init__(self):
        if self.G < 1:
            raise ValueError("G must be >= 1")
        if self.mem_per_gpu <= 0:
            raise ValueError("mem_per_gpu must be positive")
        if self.min_tensor_degree < 1:
            raise ValueError("min_tensor_degree must be >= 1")

    @property
    def tensor_cap(self) -> int:
        return self.gpus_per_node if self.max_tensor_degree is None else self.max_tensor_degree


@dataclass(frozen=True)
class Plan:
    config: ParallelConfig
    predicted_volume: Fraction
    predicted_memory: int
    feasible: bool
    rank: int = -1

    def to_dict(self) -> dict:
        c = self.config
        return {
            "rank": self.rank,
            "config": c.as_dict(),
            "predicted_volume": self.predicted_volume,
            "predicted_memory": self.predicted_memory,
            "feasible": self.feasible,
        }


def divisors(n: int) -> list[int]:
    small, large = [], []
    for d in range(1, math.isqrt(n) + 1):
        if n % d == 0:
            small.append(d)
            if d != n // d:
                large.append(n // d)
    return small + large[::-1]


def ordered_triples(n: int):
    for a in divisors(n):
        for b in divisors(n // a):
            yield a, b, n // (a * b)


def predicted_memory(model: ModelSpec, cfg: ParallelConfig) -> int:
    params = model.param_count
    if params is None:
        raise ValueError(f"{model.kind.value} model needs an explicit params count for planning")
    experts = model.experts if model.kind is ModelKind.MOE else 1
    return memmodel.zero1_lower_bound(cfg, memmodel.split_params(params, experts))


def predicted_volume(model: ModelSpec, cfg: ParallelConfig) -> Fraction:
    """Tensor-parallel elements per GPU per iteration for the whole model.

    For MoE models the dense layers see a data degree of ``G / G_tensor``
    (expert groups replicate non-expert weights) and every other layer adds
    two dispatch/combine all-to-alls in each of forward and backward.
    """
    kind = model.kind
    layers = model.layers or 1
    if kind is ModelKind.UNET:
        return commmodel.unet_volume(model.channels, model.batch_size, cfg).v_total
    if kind is ModelKind.TRANSFORMER:
        return layers * commmodel.transformer_volume(model.hidden_size, model.token_rows, cfg,
                                                     strict=False).v_total
    if model.hidden_size is None:
        return Fraction(0)
    dense_cfg = ParallelConfig(cfg.total_gpus, cfg.data_degree * cfg.expert_degree,
                               cfg.tensor_rows, cfg.tensor_cols, 1, cfg.gpus_per_node)
    dense = commmodel.transformer_volume(model.hidden_size, model.token_rows, dense_cfg,
                                         strict=False).v_total
    E = cfg.expert_degree
    tokens_per_group = Fraction(model.token_rows, cfg.data_degree * E)
    a2a = Fraction(E - 1, E) * tokens_per_group * model.hidden_size
    moe_layers = Fraction(layers, 2)
    return layers * dense + moe_layers * 4 * a2a


def _sort_key(plan: Plan):
    c = plan.config
    return (plan.predicted_volume, -c.data_degree, c.tensor_rows, c.expert_degree, c.tensor_cols)


def enumerate_plans(req: PlanRequest) -> list[Plan]:
    """Every ordered (G_data, G_r, G_c) decomposition, best first.

    MoE models additionally range over expert degrees dividing both G and
    the expert count. Infeasible plans stay in the list, flagged.
    """
    model = req.model
    if model.kind is ModelKind.MOE:
        expert_degrees = [e for e in divisors(req.G) if model.experts % e == 0]
    else:
        expert_degrees = [1]
    plans = []
    for E in expert_degrees:
        for gd, gr, gc in ordered_triples(req.G // E):
            cfg = ParallelConfig(req.G, gd, gr, gc, E, req.gpus_per_node)
            mem = predicted_memory(model, cfg)
            gt = gr * gc
            feasible = (mem <= req.mem_per_gpu
                        and req.min_tensor_degree <= gt <= req.tensor_cap)
            plans.append(Plan(cfg, predicted_volume(model, cfg), mem, feasible))
    plans.sort(key=_sort_key)
    return [Plan(p.config, p.predicted_volume, p.predicted_memory, p.feasible, i)
            for i, p in enumerate(plans)]


def choose_plan(req: PlanRequest) -> Plan:
    for plan in enumerate_plans(req):
        if plan.feasible:
            return plan
    raise Infeasible(f"no decomposition of {req.G} GPUs fits in {req.mem_per_gpu} bytes per GPU")


def best_data_degree(req: PlanRequest) -> int:
    feasible = [p.config.data_degree for p in enumerate_plans(req) if p.feasible]
    if not feasible:
        raise Infeasible(f"no decomposition of {req.G} GPUs fits in {req.mem_per_gpu} bytes per GPU")
    return max(feasible)


def _relative_volume(kind: ModelKind, gc: int, gr: int) -> Fraction:
    if kind is ModelKind.UNET:
        return commmodel.UNET_COL_COEF * (gc - 1) + commmodel.UNET_ROW_COEF * (gr - 1)
    return Fraction(gc - 1 + 3 * (gr - 1))


@dataclass(frozen=True)
class Optimum:
    gc_star: float
    gc_feasible: int


def closed_form_optimum(kind: ModelKind, G_tensor: int) -> Optimum:
    """Real-valued optimal column degree and the best divisor next to it.

    The divisor is chosen by evaluating the volume at the divisors just below
    and just above ``gc_star``; on a tie the larger column degree wins (same
    preference for fewer rows as the planner).
    """
    kind = ModelKind(kind)
    if G_tensor < 1:
        raise ValueError("G_tensor must be >= 1")
    if kind is ModelKind.UNET:
        gc_star = math.sqrt(G_tensor / float(commmodel.UNET_OPT_DIVISOR))
    else:
        gc_star = math.sqrt(3 * G_tensor)
    divs = divisors(G_tensor)
    below = [d for d in divs if d <= gc_star]
    above = [d for d in divs if d >= gc_star]
    candidates = sorted(({below[-1]} if below else set()) | ({above[0]} if above else set()))
    best = min(candidates, key=lambda gc: (_relative_volume(kind, gc, G_tensor // gc), -gc))
    return Optimum(gc_star, best)
