"""Reference configurations shipped as JSON, one file per fixture.

Each entry holds a model, a parallel configuration and an ``expected`` block
whose values are tagged ``reported`` (stated with the original setups) or
``derived`` (follows from the reported values through one of the models).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Any

from ..core import ModelSpec, ParallelConfig, validate_config

SOURCES = ("reported", "derived")


class UnknownFixture(KeyError):
    pass


@dataclass(frozen=True)
class Expected:
    value: Any
    source: str
    note: str | None = None

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"expected value source must be one of {SOURCES}, got {self.source!r}")


@dataclass(frozen=True)
class FixtureEntry:
    label: str
    model: ModelSpec
    parallel: ParallelConfig
    expected: dict[str, Expected]
    request: dict[str, Any] | None = None

    def value(self, key: str) -> Any:
        return self.expected[key].value

    @classmethod
    def from_dict(cls, data: dict) -> FixtureEntry:
        expected = {k: Expected(v["value"], v["source"], v.get("note"))
                    for k, v in data.get("expected", {}).items()}
        return cls(data["label"], ModelSpec.from_dict(data["model"]),
                   ParallelConfig.from_dict(data["parallel"]), expected, data.get("request"))


@dataclass(frozen=True)
class ReferenceFixture:
    name: str
    description: str
    entries: tuple[FixtureEntry, ...] = field(default_factory=tuple)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, idx: int) -> FixtureEntry:
        return self.entries[idx]

    def __iter__(self):
        return iter(self.entries)

    @property
    def model(self) -> ModelSpec:
        return self.entries[0].model

    @property
    def parallel(self) -> ParallelConfig:
        return self.entries[0].parallel

    @property
    def expected(self) -> dict[str, Expected]:
        return self.entries[0].expected


def _data_dir():
    return resources.files(__package__).joinpath("data")


def fixture_names() -> list[str]:
    return sorted(p.name[:-5] for p in _data_dir().iterdir() if p.name.endswith(".json"))


def load_fixture(name: str) -> ReferenceFixture:
    path = _data_dir().joinpath(f"{name}.json")
    if not path.is_file():
        raise UnknownFixture(f"no fixture named {name!r}; known: {', '.join(fixture_names())}")
    data = json.loads(path.read_text())
    fx = ReferenceFixture(data["name"], data.get("description", ""),
                          tuple(FixtureEntry.from_dict(e) for e in data["entries"]))
    for entry in fx:
        validate_config(entry.parallel)
    return fx
