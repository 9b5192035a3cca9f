"""Shared domain types: parallel decomposition, model description, rank grid."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Any, Mapping


class ConfigError(ValueError):
    """Base class for invalid parallel configurations."""


class NonFactorization(ConfigError):
    pass


class ZeroDegree(ConfigError):
    pass


class RankOutOfRange(IndexError):
    pass


@dataclass(frozen=True)
class ParallelConfig:
    """A decomposition of ``total_gpus`` into data x rows x cols x experts.

    Construction does not validate; call :func:`validate_config` (or
    :meth:`validated`) before use so a bad config can still be inspected.
    """

    total_gpus: int
    data_degree: int
    tensor_rows: int
    tensor_cols: int
    expert_degree: int = 1
    gpus_per_node: int = 4

    @property
    def tensor_degree(self) -> int:
        return self.tensor_rows * self.tensor_cols

    @property
    def G(self) -> int:
        return self.total_gpus

    def validated(self) -> ParallelConfig:
        validate_config(self)
        return self

    def as_dict(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ParallelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        missing = {"total_gpus", "data_degree", "tensor_rows", "tensor_cols"} - set(data)
        if missing:
            raise ConfigError(f"missing config fields: {sorted(missing)}")
        kwargs = {}
        for key, value in data.items():
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{key} must be an integer, got {value!r}")
            kwargs[key] = value
        return cls(**kwargs)


def validate_config(cfg: ParallelConfig) -> None:
    """Raise a :class:`ConfigError` subclass naming the first violated invariant."""
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if value < 1:
            raise ZeroDegree(f"{f.name} must be >= 1, got {value}")
    product = cfg.data_degree * cfg.tensor_rows * cfg.tensor_cols * cfg.expert_degree
    if product != cfg.total_gpus:
        raise NonFactorization(
            f"data({cfg.data_degree}) x rows({cfg.tensor_rows}) x cols({cfg.tensor_cols})"
            f" x experts({cfg.expert_degree}) = {product} != total_gpus({cfg.total_gpus})"
        )


def load_config(path: str | Path) -> ParallelConfig:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return ParallelConfig.from_dict(data).validated()


class ModelKind(str, Enum):
    TRANSFORMER = "Transformer"
    UNET = "UNet"
    MOE = "MoE"


_REQUIRED = {
    ModelKind.TRANSFORMER: {"hidden_size", "layers", "batch_size", "seq_len"},
    ModelKind.UNET: {"channels", "batch_size"},
    ModelKind.MOE: {"base_params", "experts", "batch_size"},
}
_OPTIONAL = {
    ModelKind.TRANSFORMER: {"params"},
    ModelKind.UNET: {"params", "layers"},
    ModelKind.MOE: {"hidden_size", "layers", "seq_len"},
}
_SIZE_FIELDS = ("hidden_size", "layers", "batch_size", "seq_len", "channels",
                "base_params", "experts", "params")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture parameters for one of the supported model families.

    Only the fields listed for ``kind`` may be set:

    * Transformer: hidden_size, layers, batch_size, seq_len (params optional,
      defaults to ``12 * layers * hidden_size**2``)
    * UNet: channels, batch_size (params, layers optional)
    * MoE: base_params, experts, batch_size (hidden_size, layers, seq_len optional)
    """

    kind: ModelKind
    batch_size: int
    hidden_size: int | None = None
    layers: int | None = None
    seq_len: int | None = None
    channels: int | None = None
    base_params: int | None = None
    experts: int | None = None
    params: int | None = None
    element_bytes: int = 2

    def __post_init__(self):
        kind = ModelKind(self.kind)
        object.__setattr__(self, "kind", kind)
        present = {name for name in _SIZE_FIELDS if getattr(self, name) is not None}
        missing = _REQUIRED[kind] - present
        if missing:
            raise ValueError(f"{kind.value} model requires {sorted(missing)}")
        extra = present - _REQUIRED[kind] - _OPTIONAL[kind]
        if extra:
            raise ValueError(f"{kind.value} model does not take {sorted(extra)}")
        for name in present:
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.element_bytes not in (2, 4):
            raise ValueError(f"element_bytes must be 2 or 4, got {self.element_bytes}")

    @property
    def token_rows(self) -> int:
        """Rows of the activation matrix fed to each FC layer per iteration."""
        if self.seq_len is not None:
            return self.batch_size * self.seq_len
        return self.batch_size

    @property
    def param_count(self) -> int | None:
        if self.params is not None:
            return self.params
        if self.kind is ModelKind.TRANSFORMER:
            return 12 * self.layers * self.hidden_size ** 2
        if self.kind is ModelKind.MOE:
            return self.base_params
        return None

    def as_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind.value}
        for name in _SIZE_FIELDS:
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        out["element_bytes"] = self.element_bytes
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ModelSpec:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model fields: {sorted(unknown)}")
        kwargs = dict(data)
        for name in _SIZE_FIELDS:
            # JSON fixtures may write 2.7e9; accept integral floats.
            value = kwargs.get(name)
            if isinstance(value, float) and value.is_integer():
                kwargs[name] = int(value)
        return cls(**kwargs)


@dataclass(frozen=True)
class Coord:
    expert: int
    data: int
    row: int
    col: int


@dataclass(frozen=True)
class RankGrid:
    """Bijection between rank ids and (expert, data, row, col) coordinates.

    Layout: expert index varies slowest, then data index, then row-major
    (row, col) inside the tensor grid::

        rank = ((expert * G_data + data) * G_r + row) * G_c + col
    """

    config: ParallelConfig
    _coords: tuple[Coord, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        validate_config(self.config)
        c = self.config
        coords = tuple(
            Coord(e, d, i, j)
            for e in range(c.expert_degree)
            for d in range(c.data_degree)
            for i in range(c.tensor_rows)
            for j in range(c.tensor_cols)
        )
        object.__setattr__(self, "_coords", coords)

    @property
    def size(self) -> int:
        return self.config.total_gpus

    def ranks(self) -> range:
        return range(self.size)

    def coord(self, rank: int) -> Coord:
        if not 0 <= rank < self.size:
            raise RankOutOfRange(f"rank {rank} outside [0, {self.size})")
        return self._coords[rank]

    def rank(self, expert: int = 0, data: int = 0, row: int = 0, col: int = 0) -> int:
        c = self.config
        if not (0 <= expert < c.expert_degree and 0 <= data < c.data_degree
                and 0 <= row < c.tensor_rows and 0 <= col < c.tensor_cols):
            raise RankOutOfRange(f"coordinate {(expert, data, row, col)} outside grid")
        return ((expert * c.data_degree + data) * c.tensor_rows + row) * c.tensor_cols + col

    def tensor_index(self, rank: int) -> int:
        """Position of ``rank`` inside its tensor group (row-major)."""
        co = self.coord(rank)
        return co.row * self.config.tensor_cols + co.col

    def column_group(self, rank: int) -> list[int]:
        co = self.coord(rank)
        return [self.rank(co.expert, co.data, i, co.col) for i in range(self.config.tensor_rows)]

    def row_group(self, rank: int) -> list[int]:
        co = self.coord(rank)
        return [self.rank(co.expert, co.data, co.row, j) for j in range(self.config.tensor_cols)]

    def tensor_group(self, rank: int) -> list[int]:
        co = self.coord(rank)
        return [self.rank(co.expert, co.data, i, j)
                for i in range(self.config.tensor_rows)
                for j in range(self.config.tensor_cols)]

    def data_group(self, rank: int) -> list[int]:
        co = self.coord(rank)
        return [self.rank(co.expert, d, co.row, co.col) for d in range(self.config.data_degree)]

    def expert_group(self, rank: int) -> list[int]:
        co = self.coord(rank)
        return [self.rank(e, co.data, co.row, co.col) for e in range(self.config.expert_degree)]


def grid_neighbors(grid: RankGrid, rank: int) -> dict[str, list[int]]:
    """Communicator membership of ``rank`` for every collective kind."""
    return {
        "column_group": grid.column_group(rank),
        "row_group": grid.row_group(rank),
        "tensor_group": grid.tensor_group(rank),
        "expert_group": grid.expert_group(rank),
        "data_group": grid.data_group(rank),
    }
