"""Experiment configuration and named presets.

A config file is a JSON object; any key left out takes the preset's value.
Months in windows are 0-based and half-open, so ``[11, 12]`` is the twelfth
month. See README.md for the full schema.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .engine import ALGORITHMS, RoundConfig
from .models import KINDS
from .population import DAYS_PER_MONTH, DatasetSpec, TimeWindow
from .strategies import STRATEGY_NAMES, SelectionStrategy

MODES = ("one_shot", "continual")


class ConfigError(ValueError):
    pass


_COMMON = {
    "dataset_path": None,
    "train_window": [5, 11],
    "test_window": [11, 12],
    "algorithms": list(ALGORITHMS),
    "strategies": list(STRATEGY_NAMES),
    "cells": None,
    "modes": list(MODES),
    "delta_months": 2,
    "continual_rounds": None,
    "rank_scope": "segment",
    "count_scope": "segment",
    "model": {"kind": "bigram", "dim": 16, "init_seed": 0},
    "seeds": [0, 1, 2],
    "baseline": {"one_shot": "fedavg/uniform", "continual": "fedavg/log"},
    "innovation_weighting": "device",
}

PRESETS: dict[str, dict[str, Any]] = {
    "paper": {
        **_COMMON,
        "dataset": asdict(DatasetSpec()),
        "round": {**asdict(RoundConfig()), "cohort_size": 800},
    },
    "desk": {
        **_COMMON,
        "dataset": {
            **asdict(DatasetSpec()),
            "device_count": 1000,
            "zipf_exponent": 1.8,
            "max_count": 1000,
        },
        "round": asdict(RoundConfig()),
    },
}
for _preset in PRESETS.values():
    _preset["dataset"].pop("seed")
    _preset["round"].pop("seed")


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key != "baseline":
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass(frozen=True)
class Cell:
    algorithm: str
    strategy: SelectionStrategy

    @property
    def name(self) -> str:
        label = self.strategy.name
        if self.strategy.is_filter and self.strategy.quantile != 0.2:
            label += f"{self.strategy.quantile:g}"
        return f"{self.algorithm}-{label}"

    @classmethod
    def parse(cls, text: str) -> "Cell":
        algorithm, _, strategy = text.partition("/")
        if algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {algorithm!r} in {text!r}")
        return cls(algorithm, SelectionStrategy.parse(strategy))


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec
    dataset_path: str | None
    train_window: TimeWindow
    test_window: TimeWindow
    cells: tuple[Cell, ...]
    modes: tuple[str, ...]
    delta_months: int
    continual_rounds: int | None
    rank_scope: str
    count_scope: str
    round: RoundConfig
    model_kind: str
    model_dim: int
    init_seed: int
    seeds: tuple[int, ...]
    baseline: dict[str, Cell]
    innovation_weighting: str
    raw: dict = field(default_factory=dict, compare=False)

    @property
    def n_segments(self) -> int:
        return self.train_window.length // (self.delta_months * DAYS_PER_MONTH)

    @property
    def rounds_per_segment(self) -> int:
        # equal server-round budget to one-shot unless set explicitly
        if self.continual_rounds is not None:
            return self.continual_rounds
        return self.round.rounds // self.n_segments

    def dataset_for(self, seed: int) -> DatasetSpec:
        return DatasetSpec(**{**asdict(self.dataset), "seed": seed})

    def round_for(self, seed: int) -> RoundConfig:
        return RoundConfig(**{**asdict(self.round), "seed": seed})

    def digest(self) -> str:
        canon = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def _window(value, name: str) -> TimeWindow:
    try:
        start, end = value
        return TimeWindow.months(int(start), int(end))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: expected [start_month, end_month], got {value!r} ({exc})") from None


def build_config(raw: dict) -> ExperimentConfig:
    known = set(PRESETS["desk"]) | {"preset"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        dataset = DatasetSpec(**{**raw["dataset"], "seed": 0})
        dataset.validate()
        round_cfg = RoundConfig(**{**raw["round"], "seed": 0})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    dataset_fields = {f.name for f in fields(DatasetSpec)}
    if set(raw["dataset"]) - dataset_fields:
        raise ConfigError(f"unknown dataset keys: {sorted(set(raw['dataset']) - dataset_fields)}")

    train = _window(raw["train_window"], "train_window")
    test = _window(raw["test_window"], "test_window")
    if raw["dataset_path"] is None:
        horizon = TimeWindow(*dataset.time_range)
        for name, w in (("train_window", train), ("test_window", test)):
            if w.start_day < horizon.start_day or w.end_day > horizon.end_day:
                raise ConfigError(f"{name} lies outside the {dataset.months}-month data range")

    try:
        if raw.get("cells"):
            cells = tuple(Cell.parse(c) if isinstance(c, str) else Cell(c[0], SelectionStrategy.parse(c[1]))
                          for c in raw["cells"])
        else:
            cells = tuple(Cell(a, SelectionStrategy.parse(s)) for a in raw["algorithms"] for s in raw["strategies"])
        baseline = {mode: Cell.parse(text) for mode, text in raw["baseline"].items()}
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad cell specification: {exc}") from None
    for cell in cells:
        if cell.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {cell.algorithm!r}")
    if not cells:
        raise ConfigError("at least one (algorithm, strategy) cell is required")
    if len({c.name for c in cells}) != len(cells):
        raise ConfigError("duplicate cells")

    modes = tuple(raw["modes"])
    if not modes or set(modes) - set(MODES):
        raise ConfigError(f"modes must be a non-empty subset of {MODES}")
    seeds = tuple(int(s) for s in raw["seeds"])
    if not seeds or len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be a non-empty list of distinct integers")
    model = raw["model"]
    if model.get("kind") not in KINDS:
        raise ConfigError(f"model.kind must be one of {KINDS}")
    if int(model.get("dim", 0)) < 1:
        raise ConfigError("model.dim must be >= 1")
    delta = int(raw["delta_months"])
    if "continual" in modes and (delta < 1 or train.length % (delta * DAYS_PER_MONTH)):
        raise ConfigError("train_window length must be a multiple of delta_months")
    for key in ("rank_scope", "count_scope"):
        if raw[key] not in ("segment", "window"):
            raise ConfigError(f"{key} must be 'segment' or 'window'")
    if raw["innovation_weighting"] not in ("device", "utterance"):
        raise ConfigError("innovation_weighting must be 'device' or 'utterance'")

    return ExperimentConfig(
        dataset=dataset,
        dataset_path=raw["dataset_path"],
        train_window=train,
        test_window=test,
        cells=cells,
        modes=modes,
        delta_months=delta,
        continual_rounds=None if raw["continual_rounds"] is None else int(raw["continual_rounds"]),
        rank_scope=raw["rank_scope"],
        count_scope=raw["count_scope"],
        round=round_cfg,
        model_kind=model["kind"],
        model_dim=int(model["dim"]),
        init_seed=int(model.get("init_seed", 0)),
        seeds=seeds,
        baseline=baseline,
        innovation_weighting=raw["innovation_weighting"],
        raw=raw,
    )


def resolve(
    path: str | Path | None = None,
    preset: str | None = None,
    overrides: dict | None = None,
) -> ExperimentConfig:
    """preset defaults <- config file <- ``overrides`` (CLI flags)."""
    file_values: dict = {}
    if path is not None:
        try:
            file_values = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(file_values, dict):
            raise ConfigError("config file must contain a JSON object")
    name = preset or file_values.get("preset") or "paper"
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    raw = _merge(PRESETS[name], file_values)
    raw = _merge(raw, overrides or {})
    raw["preset"] = name
    return build_config(raw)
