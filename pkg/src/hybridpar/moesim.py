"""Communication of one MoE layer under combined tensor + expert parallelism.

Each tensor group holds ``T`` tokens replicated on all its ranks. A layer's
forward pass issues, per rank::

    all-reduce (attention, tensor group)
    all-to-all (dispatch to experts, expert group)
    all-reduce (expert FFN, tensor group)
    all-to-all (combine back, expert group)

Duplicate token dropping (DTD) lets every tensor rank send only its own
contiguous ``T / G_tensor`` block through each all-to-all and restores the
full set with an all-gather over the tensor group afterwards. In backward the
drop and the all-gather swap places, so the per-pass call pattern is the
same. With activation checkpointing the forward pass is replayed before
backward; communication-aware checkpointing (CAC) stashes the outputs of the
first forward's collectives and the replay reads them instead of
communicating.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .core import ParallelConfig, RankGrid
from .simnet import CollectiveEvent, CollectiveKind, VolumeReport, run_collective


class IndivisibleTokens(ValueError):
    pass


class UnequalReplicas(ValueError):
    pass


class OverlappingSubsets(ValueError):
    pass


class StashUnderflow(RuntimeError):
    pass


class StashOrderMismatch(RuntimeError):
    pass


PASSES = ("forward", "backward", "replay")
TALLY_KINDS = {
    CollectiveKind.ALL_REDUCE_TENSOR: "all_reduce_tp",
    CollectiveKind.ALL_TO_ALL_EXPERT: "all_to_all_expert",
    CollectiveKind.ALL_GATHER_TENSOR: "all_gather_dtd",
}


@dataclass(frozen=True)
class MoELayerPlan:
    tokens_per_group: int
    hidden: int
    cfg: ParallelConfig
    dtd_enabled: bool = False
    cac_enabled: bool = False
    checkpointing: bool = False
    element_bytes: int = 2
    name: str = "moe0"

    def __post_init__(self):
        if self.tokens_per_group < 1 or self.hidden < 1:
            raise ValueError("tokens_per_group and hidden must be positive")
        if self.dtd_enabled and self.tokens_per_group % self.cfg.tensor_degree:
            raise IndivisibleTokens(
                f"T={self.tokens_per_group} does not split over G_tensor={self.cfg.tensor_degree}")

    @property
    def token_bytes(self) -> int:
        return self.hidden * self.element_bytes

    def to_dict(self) -> dict:
        return {"tokens_per_group": self.tokens_per_group, "hidden": self.hidden,
                "config": self.cfg.as_dict(), "dtd_enabled": self.dtd_enabled,
                "cac_enabled": self.cac_enabled, "checkpointing": self.checkpointing,
                "element_bytes": self.element_bytes}


@dataclass
class CommTally:
    """Calls and bytes seen by one rank (all ranks are symmetric)."""

    counts: dict[str, dict[str, int]] = field(
        default_factory=lambda: {p: {k: 0 for k in TALLY_KINDS.values()} for p in PASSES})
    bytes: dict[str, dict[str, Fraction]] = field(
        default_factory=lambda: {p: {k: Fraction(0) for k in TALLY_KINDS.values()} for p in PASSES})
    stash_bytes: Fraction = Fraction(0)
    stash_entries: int = 0

    def add(self, pass_name: str, event: CollectiveEvent) -> None:
        key = TALLY_KINDS[event.kind]
        self.counts[pass_name][key] += 1
        self.bytes[pass_name][key] += event.bytes_per_rank

    def calls(self, kinds: Sequence[str] | None = None, passes: Sequence[str] = PASSES) -> int:
        kinds = list(TALLY_KINDS.values()) if kinds is None else kinds
        return sum(self.counts[p][k] for p in passes for k in kinds)

    def total_bytes(self, kinds: Sequence[str] | None = None, passes: Sequence[str] = PASSES) -> Fraction:
        kinds = list(TALLY_KINDS.values()) if kinds is None else kinds
        return sum((self.bytes[p][k] for p in passes for k in kinds), Fraction(0))

    def merge(self, other: CommTally) -> CommTally:
        for p in PASSES:
            for k in TALLY_KINDS.values():
                self.counts[p][k] += other.counts[p][k]
                self.bytes[p][k] += other.bytes[p][k]
        self.stash_bytes += other.stash_bytes
        self.stash_entries += other.stash_entries
        return self

    def to_dict(self) -> dict:
        return {"counts": self.counts, "bytes": self.bytes,
                "stash_bytes": self.stash_bytes, "stash_entries": self.stash_entries}


# -- collective schedule ------------------------------------------------------

@dataclass(frozen=True)
class _Op:
    name: str
    kind: CollectiveKind


def collective_schedule(plan: MoELayerPlan, pass_name: str) -> list[_Op]:
    AR, A2A, AG = (CollectiveKind.ALL_REDUCE_TENSOR, CollectiveKind.ALL_TO_ALL_EXPERT,
                   CollectiveKind.ALL_GATHER_TENSOR)
    dtd = plan.dtd_enabled

    def a2a(name):
        ops = [_Op(f"{name}_alltoall", A2A)]
        if dtd:
            ops.append(_Op(f"{name}_allgather", AG))
        return ops

    if pass_name == "backward":
        pieces = [a2a("combine"), [_Op("expert_allreduce", AR)], a2a("dispatch"),
                  [_Op("attn_allreduce", AR)]]
    else:
        pieces = [[_Op("attn_allreduce", AR)], a2a("dispatch"), [_Op("expert_allreduce", AR)],
                  a2a("combine")]
    return [op for piece in pieces for op in piece]


def _buffer_bytes(plan: MoELayerPlan, kind: CollectiveKind) -> Fraction:
    full = Fraction(plan.tokens_per_group * plan.token_bytes)
    if kind is CollectiveKind.ALL_TO_ALL_EXPERT and plan.dtd_enabled:
        return full / plan.cfg.tensor_degree
    return full


def _groups(grid: RankGrid, kind: CollectiveKind) -> list[list[int]]:
    pick = grid.expert_group if kind is CollectiveKind.ALL_TO_ALL_EXPERT else grid.tensor_group
    seen, out = set(), []
    for r in grid.ranks():
        g = pick(r)
        if g[0] not in seen:
            seen.add(g[0])
            out.append(g)
    return out


def _issue(plan: MoELayerPlan, grid: RankGrid, op: _Op, pass_name: str,
           report: VolumeReport, tally: CommTally, observer: int = 0) -> None:
    buf = _buffer_bytes(plan, op.kind)
    for group in _groups(grid, op.kind):
        ev = CollectiveEvent.make(op.kind, group, buf, f"{plan.name}:{pass_name}:{op.name}")
        run_collective(ev, report)
        if observer in group:
            tally.add(pass_name, ev)


class ActivationStash:
    """FIFO of collective outputs keyed by (layer, pass, collective ordinal)."""

    def __init__(self):
        self._entries: deque = deque()
        self.nbytes = Fraction(0)
        self.pushed = 0

    def __len__(self):
        return len(self._entries)

    def push(self, key: tuple, value, nbytes) -> None:
        self._entries.append((key, value))
        self.nbytes += Fraction(nbytes)
        self.pushed += 1

    def pop(self, key: tuple):
        if not self._entries:
            raise StashUnderflow(f"replay asked for {key} but the stash is empty")
        stored_key, value = self._entries[0]
        if stored_key != key:
            raise StashOrderMismatch(f"replay asked for {key}, stash holds {stored_key}")
        self._entries.popleft()
        return value


def _output_bytes(plan: MoELayerPlan, kind: CollectiveKind) -> Fraction:
    # all-to-all receives as much as it sends under balanced routing
    return _buffer_bytes(plan, kind)


def cac_stash_and_replay(plan: MoELayerPlan, report: VolumeReport,
                         grid: RankGrid | None = None) -> CommTally:
    """First forward plus its checkpoint replay.

    With ``cac_enabled`` every collective output of the first forward is
    stashed and the replay consumes the stash without communicating;
    otherwise the replay communicates exactly like the forward.
    """
    if not plan.checkpointing:
        raise ValueError("replay only happens with activation checkpointing enabled")
    grid = RankGrid(plan.cfg) if grid is None else grid
    tally = CommTally()
    stash = ActivationStash()
    for ordinal, op in enumerate(collective_schedule(plan, "forward")):
        _issue(plan, grid, op, "forward", report, tally)
        if plan.cac_enabled:
            stash.push((plan.name, "forward", ordinal), op.name, _output_bytes(plan, op.kind))
    for ordinal, op in enumerate(collective_schedule(plan, "replay")):
        if plan.cac_enabled:
            stash.pop((plan.name, "forward", ordinal))
        else:
            _issue(plan, grid, op, "replay", report, tally)
    if len(stash):
        raise StashOrderMismatch(f"{len(stash)} stashed outputs were never replayed")
    tally.stash_bytes = stash.nbytes
    tally.stash_entries = stash.pushed
    return tally


def moe_layer_pass(plan: MoELayerPlan, report: VolumeReport) -> CommTally:
    """Log one training iteration's collectives for a single MoE layer."""
    grid = RankGrid(plan.cfg)
    if plan.checkpointing:
        tally = cac_stash_and_replay(plan, report, grid)
    else:
        tally = CommTally()
        for op in collective_schedule(plan, "forward"):
            _issue(plan, grid, op, "forward", report, tally)
    for op in collective_schedule(plan, "backward"):
        _issue(plan, grid, op, "backward", report, tally)
    return tally


# -- token-level DTD primitives -------------------------------------------------

@dataclass(frozen=True)
class Tokens:
    """Token activations with stable ids, one row per token."""

    ids: tuple
    values: np.ndarray

    def __post_init__(self):
        if len(self.ids) != len(self.values):
            raise ValueError("ids and values disagree in length")

    def __len__(self):
        return len(self.ids)

    def same_as(self, other: Tokens) -> bool:
        return self.ids == other.ids and np.array_equal(self.values, other.values)

    def take(self, sl: slice) -> Tokens:
        return Tokens(self.ids[sl], self.values[sl].copy())

    @staticmethod
    def concat(parts: Sequence[Tokens], hidden: int) -> Tokens:
        ids = tuple(i for p in parts for i in p.ids)
        if parts:
            values = np.concatenate([p.values for p in parts], axis=0)
        else:
            values = np.zeros((0, hidden))
        return Tokens(ids, values)


def dtd_drop(activations: dict[int, Tokens], tensor_group: Sequence[int]) -> dict[int, Tokens]:
    """Keep only the ``r``-th contiguous block of the replicated tokens on rank ``r``."""
    group = list(tensor_group)
    ref = activations[group[0]]
    for r in group[1:]:
        if not activations[r].same_as(ref):
            raise UnequalReplicas(f"rank {r} holds different tokens than rank {group[0]}")
    s = len(group)
    if len(ref) % s:
        raise IndivisibleTokens(f"{len(ref)} tokens do not split over {s} tensor ranks")
    block = len(ref) // s
    return {r: ref.take(slice(pos * block, (pos + 1) * block)) for pos, r in enumerate(group)}


def dtd_allgather(subsets: dict[int, Tokens], tensor_group: Sequence[int], report: VolumeReport,
                  element_bytes: int = 2, tag: str = "dtd:allgather") -> dict[int, Tokens]:
    """Reassemble the full token set on every rank of the group."""
    group = list(tensor_group)
    seen: set = set()
    for r in group:
        overlap = seen.intersection(subsets[r].ids)
        if overlap:
            raise OverlappingSubsets(f"tokens {sorted(map(str, overlap))[:4]} held by several ranks")
        seen.update(subsets[r].ids)
    hidden = subsets[group[0]].values.shape[1]
    full = Tokens.concat([subsets[r] for r in group], hidden)
    gathered_bytes = len(full) * hidden * element_bytes
    run_collective(CollectiveEvent.make(CollectiveKind.ALL_GATHER_TENSOR, group, gathered_bytes, tag),
                   report)
    return {r: Tokens(full.ids, full.values.copy()) for r in group}


# -- numerical desk-scale layer --------------------------------------------------

class MoELayerSim:
    """Forward pass of a small MoE layer with real data movement.

    The attention and expert blocks are linear maps split by hidden rows
    across the tensor group (each rank multiplies its slice, an all-reduce
    sums the slices). Integer-valued weights and inputs keep every result
    exact. Routing sends local token ``idx`` to expert ``idx % E`` unless
    ``routing="skewed"``, which draws destinations from a seeded generator.
    """

    def __init__(self, plan: MoELayerPlan, seed: int = 0, routing: str = "round_robin"):
        cfg = plan.cfg
        if plan.hidden % cfg.tensor_degree:
            raise ValueError("hidden must split over the tensor group")
        self.plan = plan
        self.grid = RankGrid(cfg)
        rng = np.random.default_rng(seed)
        H, T, E = plan.hidden, plan.tokens_per_group, cfg.expert_degree
        if routing == "round_robin":
            if T % E or (plan.dtd_enabled and (T // cfg.tensor_degree) % E):
                raise IndivisibleTokens("round-robin routing needs token blocks divisible by E")
            self.route = np.arange(T) % E
        elif routing == "skewed":
            self.route = rng.choice(E, size=T, p=self._skew(E))
        else:
            raise ValueError(f"unknown routing {routing!r}")
        self.w_attn = rng.integers(-2, 3, size=(H, H)).astype(np.float64)
        self.w_expert = rng.integers(-2, 3, size=(E, H, H)).astype(np.float64)
        self.inputs = {(e, d): rng.integers(-3, 4, size=(T, H)).astype(np.float64)
                       for e in range(E) for d in range(cfg.data_degree)}
        self.last_dispatch: dict[int, Tokens] = {}

    @staticmethod
    def _skew(E: int) -> np.ndarray:
        w = 1.0 / np.arange(1, E + 1)
        return w / w.sum()

    def _group_key(self, rank: int) -> tuple[int, int]:
        co = self.grid.coord(rank)
        return co.expert, co.data

    def _tensor_slice(self, rank: int) -> slice:
        Gt = self.plan.cfg.tensor_degree
        t = self.grid.tensor_index(rank)
        step = self.plan.hidden // Gt
        return slice(t * step, (t + 1) * step)

    def forward(self, report: VolumeReport, stash: ActivationStash | None = None,
                replay: bool = False, pass_name: str = "forward",
                tally: CommTally | None = None) -> dict[int, Tokens]:
        """Run the layer; ``replay`` reads collective outputs from ``stash``."""
        plan, grid = self.plan, self.grid
        ranks = list(grid.ranks())
        T = plan.tokens_per_group
        tally = CommTally() if tally is None else tally
        ordinal = iter(range(10 ** 6))

        def collective(op_name: str, kind: CollectiveKind, live):
            key = (plan.name, "forward", next(ordinal))
            if replay:
                if stash is None:
                    raise StashUnderflow("replay without a stash")
                return stash.pop(key)
            before = len(report.events)
            out = live()
            for ev in report.events[before:]:
                if 0 in ev.group:
                    tally.add(pass_name, ev)
            if stash is not None:
                stash.push(key, out, _output_bytes(plan, kind))
            return out

        def tensor_allreduce(partials, op_name):
            def live():
                out = {}
                for group in _groups(grid, CollectiveKind.ALL_REDUCE_TENSOR):
                    total = partials[group[0]].copy()
                    for r in group[1:]:
                        total += partials[r]
                    for r in group:
                        out[r] = total.copy()
                    run_collective(CollectiveEvent.make(
                        CollectiveKind.ALL_REDUCE_TENSOR, group, total.size * plan.element_bytes,
                        f"{plan.name}:{pass_name}:{op_name}"), report)
                return out
            return collective(op_name, CollectiveKind.ALL_REDUCE_TENSOR, live)

        def all_to_all(held: dict[int, Tokens], dest_of, op_name):
            def live():
                inbox: dict[int, list[Tokens]] = {r: [] for r in ranks}
                for group in _groups(grid, CollectiveKind.ALL_TO_ALL_EXPERT):
                    for src in group:
                        tok = held[src]
                        dests = np.array([dest_of(src, i) for i in tok.ids], dtype=int)
                        for pos, dst in enumerate(group):
                            mask = dests == grid.coord(dst).expert
                            sel = [i for i, m in zip(tok.ids, mask) if m]
                            inbox[dst].append(Tokens(tuple(sel), tok.values[mask].copy()))
                    buf = len(held[group[0]]) * plan.token_bytes
                    run_collective(CollectiveEvent.make(
                        CollectiveKind.ALL_TO_ALL_EXPERT, group, buf,
                        f"{plan.name}:{pass_name}:{op_name}"), report)
                return {r: Tokens.concat(inbox[r], plan.hidden) for r in ranks}
            return collective(op_name, CollectiveKind.ALL_TO_ALL_EXPERT, live)

        def regather(parts: dict[int, Tokens], op_name):
            def live():
                out = {}
                for group in _groups(grid, CollectiveKind.ALL_GATHER_TENSOR):
                    out.update(dtd_allgather({r: parts[r] for r in group}, group, report,
                                             plan.element_bytes, f"{plan.name}:{pass_name}:{op_name}"))
                return out
            return collective(op_name, CollectiveKind.ALL_GATHER_TENSOR, live)

        def drop(tokens: dict[int, Tokens]) -> dict[int, Tokens]:
            out = {}
            for group in _groups(grid, CollectiveKind.ALL_GATHER_TENSOR):
                out.update(dtd_drop({r: tokens[r] for r in group}, group))
            return out

        def dispatch(held, op_name, dest_of):
            if plan.dtd_enabled:
                held = drop(held)
            got = all_to_all(held, dest_of, f"{op_name}_alltoall")
            if plan.dtd_enabled:
                got = regather(got, f"{op_name}_allgather")
            return got

        # attention stand-in: row-parallel linear + all-reduce
        partial = {}
        for r in ranks:
            sl = self._tensor_slice(r)
            partial[r] = self.inputs[self._group_key(r)][:, sl] @ self.w_attn[sl, :]
        attn = tensor_allreduce(partial, "attn_allreduce")
        held = {r: Tokens(tuple((self._group_key(r)[0], i) for i in range(T)), attn[r])
                for r in ranks}

        route = self.route
        at_expert = dispatch(held, "dispatch", lambda src, tid: route[tid[1]])
        self.last_dispatch = at_expert

        partial = {}
        for r in ranks:
            e = self.grid.coord(r).expert
            sl = self._tensor_slice(r)
            partial[r] = at_expert[r].values[:, sl] @ self.w_expert[e][sl, :]
        expert_out = tensor_allreduce(partial, "expert_allreduce")
        held = {r: Tokens(at_expert[r].ids, expert_out[r]) for r in ranks}

        back = dispatch(held, "combine", lambda src, tid: tid[0])
        out = {}
        for r in ranks:
            order = np.argsort([tid[1] for tid in back[r].ids], kind="stable")
            ids = tuple(back[r].ids[i] for i in order)
            out[r] = Tokens(ids, back[r].values[order])
        return out

    def serial_reference(self) -> dict[tuple[int, int], np.ndarray]:
        """Per tensor-group output computed without any parallelism."""
        out = {}
        for (e, d), x in self.inputs.items():
            a = x @ self.w_attn
            y = np.empty_like(a)
            for i in range(len(a)):
                y[i] = a[i] @ self.w_expert[self.route[i]]
            out[(e, d)] = y
        return out
