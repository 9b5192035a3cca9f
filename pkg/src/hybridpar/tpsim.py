"""Numerical execution of 2D tensor-parallel FC layers on a simulated rank grid.

Layout conventions on a ``G_r x G_c`` grid (``GPU(i, j)``):

* an untransposed layer expects its input split by column into ``G_r``
  blocks, block ``i`` held by every ``GPU(i, *)``; its weight block
  ``W[i, j]`` is ``k/G_r x n/G_c``. The forward all-reduce runs over the
  column group (all ``i`` for fixed ``j``) and leaves output block ``j`` on
  every ``GPU(*, j)``.
* a transposed layer consumes exactly that output layout: weight block
  ``(j, i)`` lives on ``GPU(i, j)`` and the all-reduces swap communicators,
  so its output is back in the untransposed input layout.

Rows are additionally split across data-parallel groups. Alternating the two
layer kinds therefore needs no data movement between layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .commmodel import IndivisibleShape, LayerShape
from .core import RankGrid
from .simnet import CollectiveEvent, CollectiveKind, VolumeReport, run_collective


class ShapeMismatch(ValueError):
    pass


class LayoutMismatch(ValueError):
    pass


class MissingCache(RuntimeError):
    pass


class Partition(str, Enum):
    BY_ROW_INDEX = "ColumnShardByRow-group"   # column block i on GPU(i, *)
    BY_COL_INDEX = "ColumnShardByCol-group"   # column block j on GPU(*, j)
    GRID2D = "Grid2D"


def _split(length: int, parts: int, index: int, what: str) -> slice:
    if length % parts:
        raise IndivisibleShape(f"{what} of size {length} does not split into {parts} parts")
    step = length // parts
    return slice(index * step, (index + 1) * step)


@dataclass
class ShardedMatrix:
    shape: tuple[int, int]
    partition: Partition
    blocks: dict[int, np.ndarray]
    grid: RankGrid
    transposed: bool = False          # GRID2D only: block (j, i) on GPU(i, j)

    @staticmethod
    def block_slices(shape, partition: Partition, grid: RankGrid, rank: int,
                     transposed: bool = False) -> tuple[slice, slice]:
        c = grid.config
        co = grid.coord(rank)
        rows, cols = shape
        if partition is Partition.GRID2D:
            if transposed:
                return (_split(rows, c.tensor_cols, co.col, "rows"),
                        _split(cols, c.tensor_rows, co.row, "cols"))
            return (_split(rows, c.tensor_rows, co.row, "rows"),
                    _split(cols, c.tensor_cols, co.col, "cols"))
        row_sl = _split(rows, c.data_degree, co.data, "batch rows")
        if partition is Partition.BY_ROW_INDEX:
            return row_sl, _split(cols, c.tensor_rows, co.row, "cols")
        return row_sl, _split(cols, c.tensor_cols, co.col, "cols")

    @classmethod
    def shard(cls, matrix: np.ndarray, grid: RankGrid, partition: Partition,
              transposed: bool = False) -> ShardedMatrix:
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise ShapeMismatch("expected a 2-D matrix")
        if grid.config.expert_degree != 1:
            raise ValueError("tensor-parallel simulation runs with expert_degree = 1")
        blocks = {}
        for r in grid.ranks():
            rs, cs = cls.block_slices(matrix.shape, partition, grid, r, transposed)
            blocks[r] = matrix[rs, cs].copy()
        return cls(tuple(matrix.shape), partition, blocks, grid, transposed)

    def assemble(self) -> np.ndarray:
        """Rebuild the logical matrix; replicated blocks must agree exactly."""
        out = np.full(self.shape, np.nan)
        seen = np.zeros(self.shape, dtype=bool)
        for r in self.grid.ranks():
            rs, cs = self.block_slices(self.shape, self.partition, self.grid, r, self.transposed)
            block = self.blocks[r]
            region = out[rs, cs]
            if seen[rs, cs].any() and not np.array_equal(region, block):
                raise ValueError(f"replica on rank {r} disagrees with other copies")
            out[rs, cs] = block
            seen[rs, cs] = True
        return out


@dataclass
class LayerState:
    shape: LayerShape
    weights: ShardedMatrix
    element_bytes: int = 2
    name: str = "fc"
    cache: dict[int, tuple[np.ndarray, np.ndarray]] | None = field(default=None, repr=False)

    @classmethod
    def from_dense(cls, W: np.ndarray, grid: RankGrid, transposed: bool = False,
                   element_bytes: int = 2, name: str = "fc") -> LayerState:
        W = np.asarray(W, dtype=np.float64)
        k, n = W.shape
        shape = LayerShape(k=k, n=n, transposed=transposed)
        return cls(shape, ShardedMatrix.shard(W, grid, Partition.GRID2D, transposed),
                   element_bytes, name)

    @property
    def input_partition(self) -> Partition:
        return Partition.BY_COL_INDEX if self.shape.transposed else Partition.BY_ROW_INDEX

    @property
    def output_partition(self) -> Partition:
        return Partition.BY_ROW_INDEX if self.shape.transposed else Partition.BY_COL_INDEX


def _all_reduce(partials: dict[int, np.ndarray], groups: dict[int, list[int]],
                kind: CollectiveKind, element_bytes: int, tag: str,
                report: VolumeReport) -> dict[int, np.ndarray]:
    """Sum partials within each group in ascending rank order."""
    out: dict[int, np.ndarray] = {}
    for rank in sorted(partials):
        if rank in out:
            continue
        group = sorted(groups[rank])
        total = partials[group[0]].copy()
        for member in group[1:]:
            total += partials[member]
        for member in group:
            out[member] = total.copy()
        run_collective(CollectiveEvent.make(kind, group, total.size * element_bytes, tag), report)
    return out


def _communicators(grid: RankGrid, transposed: bool, forward: bool):
    use_column = forward != transposed
    if use_column:
        return CollectiveKind.ALL_REDUCE_COL, {r: grid.column_group(r) for r in grid.ranks()}
    return CollectiveKind.ALL_REDUCE_ROW, {r: grid.row_group(r) for r in grid.ranks()}


def fc_forward(layer: LayerState, X: ShardedMatrix, grid: RankGrid,
               report: VolumeReport, tag: str | None = None) -> ShardedMatrix:
    if X.partition is not layer.input_partition:
        raise LayoutMismatch(
            f"{layer.name} expects input {layer.input_partition.value}, got {X.partition.value}")
    if X.shape[1] != layer.shape.k:
        raise ShapeMismatch(f"{layer.name}: input has {X.shape[1]} columns, weight has {layer.shape.k} rows")
    partials = {r: X.blocks[r] @ layer.weights.blocks[r] for r in grid.ranks()}
    kind, groups = _communicators(grid, layer.shape.transposed, forward=True)
    Y = _all_reduce(partials, groups, kind, layer.element_bytes,
                    tag or f"{layer.name}:forward", report)
    layer.cache = {r: (X.blocks[r], layer.weights.blocks[r]) for r in grid.ranks()}
    return ShardedMatrix((X.shape[0], layer.shape.n), layer.output_partition, Y, grid)


@dataclass
class Gradients:
    dX: ShardedMatrix
    dW: ShardedMatrix


def fc_backward(layer: LayerState, dY: ShardedMatrix, grid: RankGrid,
                report: VolumeReport, tag: str | None = None) -> Gradients:
    if layer.cache is None:
        raise MissingCache(f"{layer.name}: backward called before forward")
    if dY.partition is not layer.output_partition:
        raise LayoutMismatch(
            f"{layer.name} expects output gradient {layer.output_partition.value}, got {dY.partition.value}")
    if dY.shape[1] != layer.shape.n:
        raise ShapeMismatch(f"{layer.name}: gradient has {dY.shape[1]} columns, expected {layer.shape.n}")
    partials = {}
    dW = {}
    for r in grid.ranks():
        x_local, w_local = layer.cache[r]
        partials[r] = dY.blocks[r] @ w_local.T
        dW[r] = x_local.T @ dY.blocks[r]
    kind, groups = _communicators(grid, layer.shape.transposed, forward=False)
    dX = _all_reduce(partials, groups, kind, layer.element_bytes,
                     tag or f"{layer.name}:backward", report)
    layer.cache = None
    w = layer.weights
    return Gradients(
        dX=ShardedMatrix((dY.shape[0], layer.shape.k), layer.input_partition, dX, grid),
        dW=ShardedMatrix(w.shape, Partition.GRID2D, dW, grid, w.transposed),
    )


def allreduce_data_gradients(dW: ShardedMatrix, grid: RankGrid, report: VolumeReport,
                             element_bytes: int = 2, tag: str = "dp:grad") -> ShardedMatrix:
    """Sum weight-gradient shards across data-parallel replicas."""
    groups = {r: grid.data_group(r) for r in grid.ranks()}
    reduced = _all_reduce(dW.blocks, groups, CollectiveKind.ALL_REDUCE_DATA, element_bytes, tag, report)
    return ShardedMatrix(dW.shape, dW.partition, reduced, grid, dW.transposed)


def chain_layers(layers: list[LayerState], X0: ShardedMatrix, grid: RankGrid,
                 report: VolumeReport) -> ShardedMatrix:
    """Forward through a stack of layers; layouts must alternate."""
    X = X0
    for idx, layer in enumerate(layers):
        if X.partition is not layer.input_partition:
            raise LayoutMismatch(
                f"layer {idx} ({layer.name}) needs {layer.input_partition.value} input but the"
                f" previous output is {X.partition.value}; alternate transposed layers")
        X = fc_forward(layer, X, grid, report, tag=f"{layer.name}:forward")
    return X


def chain_backward(layers: list[LayerState], dY: ShardedMatrix, grid: RankGrid,
                   report: VolumeReport) -> tuple[ShardedMatrix, list[ShardedMatrix]]:
    grads = []
    for layer in reversed(layers):
        g = fc_backward(layer, dY, grid, report, tag=f"{layer.name}:backward")
        grads.append(g.dW)
        dY = g.dX
    return dY, grads[::-1]


def finite_difference_check(W: np.ndarray, X: np.ndarray, grid: RankGrid,
                            epsilon: float = 1e-4, transposed: bool = False) -> float:
    """Compare parallel gradients of ``sum(X @ W)`` with central differences.

    Returns ``max |analytic - numeric| / max(1, |numeric|)`` over every entry
    of dX and dW.
    """
    W = np.asarray(W, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    layer = LayerState.from_dense(W, grid, transposed)
    report = VolumeReport()
    Xs = ShardedMatrix.shard(X, grid, layer.input_partition)
    Y = fc_forward(layer, Xs, grid, report)
    dY = ShardedMatrix.shard(np.ones(Y.shape), grid, layer.output_partition)
    g = fc_backward(layer, dY, grid, report)
    dX = g.dX.assemble()
    dW = allreduce_data_gradients(g.dW, grid, report).assemble()

    def loss(x, w):
        return float((x @ w).sum())

    worst = 0.0
    for target, analytic in ((X, dX), (W, dW)):
        for idx in np.ndindex(target.shape):
            orig = target[idx]
            target[idx] = orig + epsilon
            up = loss(X, W)
            target[idx] = orig - epsilon
            down = loss(X, W)
            target[idx] = orig
            numeric = (up - down) / (2 * epsilon)
            worst = max(worst, abs(analytic[idx] - numeric) / max(1.0, abs(numeric)))
    return worst


def load_matrix(data) -> np.ndarray:
    """Matrix from ``{rows, cols, data}`` with ``data`` in row-major order."""
    rows, cols, values = data["rows"], data["cols"], data["data"]
    if len(values) != rows * cols:
        raise ShapeMismatch(f"expected {rows * cols} values, got {len(values)}")
    return np.asarray(values, dtype=np.float64).reshape(rows, cols)
