"""Deterministic message-level simulation of collectives and two-stream timelines.

Collectives are counted at their bandwidth lower bound rather than stepped
through a ring; per-rank byte counts are exact ``Fraction``s.
"""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Iterable, Sequence

from .serialize import number, real_str


class CollectiveKind(str, Enum):
    ALL_REDUCE_ROW = "AllReduceRow"
    ALL_REDUCE_COL = "AllReduceCol"
    ALL_REDUCE_TENSOR = "AllReduceTensor"
    ALL_TO_ALL_EXPERT = "AllToAllExpert"
    ALL_GATHER_TENSOR = "AllGatherTensor"
    ALL_REDUCE_DATA = "AllReduceData"

    @property
    def is_all_reduce(self) -> bool:
        return self.value.startswith("AllReduce")


TENSOR_PARALLEL_KINDS = frozenset({CollectiveKind.ALL_REDUCE_ROW, CollectiveKind.ALL_REDUCE_COL})


class InconsistentBytes(ValueError):
    pass


def collective_bytes(kind: CollectiveKind, group_size: int, buffer_bytes) -> Fraction:
    """Per-rank traffic for one collective.

    ``buffer_bytes`` is the local buffer for all-reduce and all-to-all and the
    gathered (output) size for all-gather.
    """
    s = group_size
    if s < 1:
        raise ValueError("empty group")
    frac = Fraction(s - 1, s)
    kind = CollectiveKind(kind)
    if kind.is_all_reduce:
        return 2 * frac * Fraction(buffer_bytes)
    return frac * Fraction(buffer_bytes)


@dataclass(frozen=True)
class CollectiveEvent:
    kind: CollectiveKind
    group: tuple[int, ...]
    bytes_per_rank: Fraction
    tag: str
    buffer_bytes: Fraction

    @classmethod
    def make(cls, kind, group: Sequence[int], buffer_bytes, tag: str) -> CollectiveEvent:
        kind = CollectiveKind(kind)
        group = tuple(group)
        return cls(kind, group, collective_bytes(kind, len(group), buffer_bytes), tag,
                   Fraction(buffer_bytes))

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "group": list(self.group),
                "bytes_per_rank": number(self.bytes_per_rank), "tag": self.tag}


@dataclass
class VolumeReport:
    per_rank: dict[int, dict[CollectiveKind, Fraction]] = field(
        default_factory=lambda: defaultdict(lambda: defaultdict(Fraction)))
    events: list[CollectiveEvent] = field(default_factory=list)

    def bytes(self, rank: int, kinds: Iterable[CollectiveKind] | None = None) -> Fraction:
        counters = self.per_rank.get(rank, {})
        if kinds is None:
            return sum(counters.values(), Fraction(0))
        return sum((counters.get(k, Fraction(0)) for k in kinds), Fraction(0))

    def totals(self) -> dict[CollectiveKind, Fraction]:
        out: dict[CollectiveKind, Fraction] = defaultdict(Fraction)
        for counters in self.per_rank.values():
            for kind, b in counters.items():
                out[kind] += b
        return dict(out)

    def count(self, rank: int, kinds: Iterable[CollectiveKind] | None = None) -> int:
        wanted = None if kinds is None else set(kinds)
        return sum(1 for e in self.events
                   if rank in e.group and (wanted is None or e.kind in wanted))

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in self.events)

    def to_dict(self) -> dict:
        per_rank = {str(r): {k.value: number(b) for k, b in sorted(c.items(), key=lambda kv: kv[0].value)}
                    for r, c in sorted(self.per_rank.items())}
        totals = {k.value: number(b) for k, b in sorted(self.totals().items(), key=lambda kv: kv[0].value)}
        return {"per_rank": per_rank, "totals": totals,
                "events": [e.to_dict() for e in self.events]}


def run_collective(event: CollectiveEvent, report: VolumeReport) -> VolumeReport:
    if not event.group:
        raise ValueError("collective over an empty group")
    expected = collective_bytes(event.kind, len(event.group), event.buffer_bytes)
    if Fraction(event.bytes_per_rank) != expected:
        raise InconsistentBytes(
            f"{event.kind.value} over {len(event.group)} ranks with buffer {event.buffer_bytes}"
            f" must move {expected} bytes per rank, event says {event.bytes_per_rank}")
    for rank in event.group:
        report.per_rank[rank][event.kind] += expected
    report.events.append(event)
    return report


# -- timelines ---------------------------------------------------------------

COMPUTE = "compute"
COMM = "comm"


@dataclass(frozen=True)
class CostModel:
    compute_rate: Fraction = Fraction(1)     # elements per time unit
    bandwidth: Fraction = Fraction(1)        # bytes per time unit

    def compute_time(self, elements) -> Fraction:
        return Fraction(elements) / Fraction(self.compute_rate)

    def comm_time(self, nbytes) -> Fraction:
        return Fraction(nbytes) / Fraction(self.bandwidth)


@dataclass(frozen=True)
class Step:
    """One layer-pass of a shard: compute, then (optionally) a blocking collective."""

    compute: Fraction = Fraction(0)
    comm_bytes: Fraction | None = None
    tag: str = ""


@dataclass(frozen=True)
class TimelineEvent:
    rank: int
    stream: str
    tag: str
    start: Fraction
    end: Fraction


@dataclass
class Timeline:
    events: list[TimelineEvent] = field(default_factory=list)

    def for_rank(self, rank: int, stream: str | None = None) -> list[TimelineEvent]:
        return [e for e in self.events if e.rank == rank and (stream is None or e.stream == stream)]

    def makespan(self, rank: int = 0) -> Fraction:
        evs = self.for_rank(rank)
        if not evs:
            return Fraction(0)
        return max(e.end for e in evs) - min(e.start for e in evs)

    def busy(self, rank: int, stream: str) -> Fraction:
        return sum((e.end - e.start for e in self.for_rank(rank, stream)), Fraction(0))

    def idle_time(self, rank: int = 0) -> Fraction:
        """Compute-stream time left unused within the makespan."""
        return self.makespan(rank) - self.busy(rank, COMPUTE)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rank", "stream", "tag", "start", "end"])
        for e in self.events:
            w.writerow([e.rank, e.stream, e.tag, _time_str(e.start), _time_str(e.end)])
        return buf.getvalue()


def _time_str(t: Fraction) -> str:
    return str(t.numerator) if t.denominator == 1 else real_str(t)


class _Streams:
    def __init__(self, rank: int, cost: CostModel, timeline: Timeline):
        self.rank = rank
        self.cost = cost
        self.timeline = timeline
        self.free = {COMPUTE: Fraction(0), COMM: Fraction(0)}

    def issue(self, stream: str, duration: Fraction, after: Fraction, tag: str) -> Fraction:
        start = max(self.free[stream], after)
        end = start + duration
        self.free[stream] = end
        if duration > 0:
            self.timeline.events.append(TimelineEvent(self.rank, stream, tag, start, end))
        return end


def _check_shards(shards: Sequence[Sequence[Step]]) -> None:
    if len(shards) < 1:
        raise ValueError("need at least one shard")
    lengths = {len(s) for s in shards}
    if len(lengths) != 1:
        raise ValueError("shards must have the same layer structure")
    for layer in zip(*shards):
        if len({s.comm_bytes is None for s in layer}) != 1:
            raise ValueError("shards must have the same layer structure")


def schedule_overdecomposed(shards: Sequence[Sequence[Step]], cost: CostModel,
                            dp_allreduce_bytes=None, rank: int = 0,
                            timeline: Timeline | None = None) -> Timeline:
    """Round-robin enqueue of per-shard work on separate compute/comm streams.

    Each shard's compute for a layer is enqueued until its collective, the
    collective goes to the comm stream without waiting, and the scheduler
    switches to the next shard. Returning to a shard waits for its pending
    collective. An optional data-parallel gradient all-reduce is issued
    after the last step of every shard.
    """
    _check_shards(shards)
    timeline = Timeline() if timeline is None else timeline
    streams = _Streams(rank, cost, timeline)
    ready = [Fraction(0)] * len(shards)     # when each shard's inputs are available
    for layer in range(len(shards[0])):
        for s, shard in enumerate(shards):
            step = shard[layer]
            label = step.tag or f"layer{layer}"
            done = streams.issue(COMPUTE, cost.compute_time(step.compute), ready[s],
                                 f"shard{s}:{label}:compute")
            if step.comm_bytes is not None:
                done = streams.issue(COMM, cost.comm_time(step.comm_bytes), done,
                                     f"shard{s}:{label}:comm")
            ready[s] = done
    if dp_allreduce_bytes is not None:
        streams.issue(COMM, cost.comm_time(dp_allreduce_bytes), max(ready), "dp_allreduce")
    return timeline


def serialize_schedule(work: Sequence[Step], cost: CostModel, dp_allreduce_bytes=None,
                       rank: int = 0) -> Timeline:
    """Blocking alternation of compute and collectives for a single shard."""
    return schedule_overdecomposed([list(work)], cost, dp_allreduce_bytes, rank)


def merge_shards(shards: Sequence[Sequence[Step]]) -> list[Step]:
    """The single-shard work equivalent to running all shards as one batch."""
    _check_shards(shards)
    merged = []
    for layer in zip(*shards):
        comm = None
        if layer[0].comm_bytes is not None:
            comm = sum((Fraction(s.comm_bytes) for s in layer), Fraction(0))
        merged.append(Step(sum((Fraction(s.compute) for s in layer), Fraction(0)), comm,
                           layer[0].tag))
    return merged


def split_work(work: Sequence[Step], parts: int = 2) -> list[list[Step]]:
    """Split a batch evenly along the batch dimension into ``parts`` shards."""
    return [[Step(Fraction(s.compute) / parts,
                  None if s.comm_bytes is None else Fraction(s.comm_bytes) / parts, s.tag)
             for s in work] for _ in range(parts)]
