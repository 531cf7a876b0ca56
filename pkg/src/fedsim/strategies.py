"""Activity-based device selection.

A strategy maps a device's sample count ``n`` to a non-negative selection
weight. Cohorts are drawn without replacement with exponential keys: each
eligible device gets ``key = Exp(1) / weight`` and the ``K`` smallest keys
win. For ``K = 1`` the chosen device is distributed exactly in proportion to
the weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping

import numpy as np


class NoEligibleDevicesError(ValueError):
    pass


class StrategyKind(str, Enum):
    UNIFORM = "uniform"
    LOG = "log"
    SQRT = "sqrt"
    LINEAR = "linear"
    INVLOG = "invlog"
    HEAVY = "heavy"
    LIGHT = "light"


STRATEGY_NAMES = tuple(k.value for k in StrategyKind)


@dataclass(frozen=True)
class SelectionStrategy:
    kind: StrategyKind
    quantile: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "kind", StrategyKind(self.kind))
        if not 0.0 < self.quantile <= 1.0:
            raise ValueError(f"quantile must lie in (0, 1], got {self.quantile}")

    @classmethod
    def parse(cls, spec) -> "SelectionStrategy":
        """Accept ``"log"``, ``{"name": "heavy", "quantile": 0.1}`` or an instance."""
        if isinstance(spec, SelectionStrategy):
            return spec
        if isinstance(spec, str):
            return cls(StrategyKind(spec))
        if isinstance(spec, Mapping):
            return cls(StrategyKind(spec["name"]), float(spec.get("quantile", 0.2)))
        raise TypeError(f"cannot interpret {spec!r} as a selection strategy")

    @property
    def name(self) -> str:
        return self.kind.value

    @property
    def is_filter(self) -> bool:
        return self.kind in (StrategyKind.HEAVY, StrategyKind.LIGHT)

    def to_config(self):
        if self.is_filter and self.quantile != 0.2:
            return {"name": self.name, "quantile": self.quantile}
        return self.name


def activity_weight(kind: StrategyKind, count: int) -> float:
    """The count-only part of a strategy; filters are handled by ``quantile_members``."""
    if count < 0:
        raise ValueError(f"negative sample count {count}")
    if kind is StrategyKind.UNIFORM:
        return 1.0
    if kind is StrategyKind.LOG:
        return math.log1p(count)
    if kind is StrategyKind.SQRT:
        return math.sqrt(count)
    if kind is StrategyKind.LINEAR:
        return float(count)
    if kind is StrategyKind.INVLOG:
        # 1/ln(1) is undefined; empty devices get weight 0
        return 1.0 / math.log1p(count) if count > 0 else 0.0
    raise ValueError(f"{kind.value} is a quantile filter, not an activity function")


def quantile_members(rank_counts: Mapping[str, int], quantile: float, heavy: bool) -> set[str]:
    """Top (``heavy``) or bottom ``ceil(q * M)`` devices by activity.

    Only devices with at least one sample take part in the ranking. Devices are
    ordered by (count desc, device_id asc); heavy takes the head of that order
    and light the tail, so heavy(q) and light(1 - q) together cover every device.
    """
    active = sorted((-c, d) for d, c in rank_counts.items() if c > 0)
    if not active:
        return set()
    # guard against 0.7 * 10 == 7.000000000000001
    k = min(len(active), max(1, math.ceil(quantile * len(active) - 1e-9)))
    chosen = active[:k] if heavy else active[-k:]
    return {d for _, d in chosen}


def weight(
    strategy: SelectionStrategy,
    count: int,
    rank_context: Mapping[str, int] | None = None,
    device_id: str | None = None,
) -> float:
    if count < 0:
        raise ValueError(f"negative sample count {count}")
    if not strategy.is_filter:
        return activity_weight(strategy.kind, count)
    if rank_context is None or device_id is None:
        raise ValueError(f"{strategy.name} needs rank_context and device_id")
    members = quantile_members(rank_context, strategy.quantile, strategy.kind is StrategyKind.HEAVY)
    return 1.0 if count > 0 and device_id in members else 0.0


def selection_weights(
    strategy: SelectionStrategy,
    counts: Mapping[str, int],
    rank_counts: Mapping[str, int] | None = None,
) -> dict[str, float]:
    """Weights for every device, keyed in sorted device-id order.

    ``rank_counts`` lets heavy/light rank on a different window (e.g. the whole
    continual period) than the one supplying ``counts``.
    """
    ids = sorted(counts)
    if strategy.is_filter:
        members = quantile_members(
            counts if rank_counts is None else rank_counts,
            strategy.quantile,
            strategy.kind is StrategyKind.HEAVY,
        )
        out = {}
        for d in ids:
            if counts[d] < 0:
                raise ValueError(f"negative sample count {counts[d]}")
            out[d] = 1.0 if counts[d] > 0 and d in members else 0.0
        return out
    return {d: activity_weight(strategy.kind, counts[d]) for d in ids}


def normalize(weights: Mapping[str, float]) -> dict[str, float]:
    total = math.fsum(weights.values())
    if not total > 0:
        raise NoEligibleDevicesError("no eligible devices")
    return {d: w / total for d, w in weights.items()}


def selection_probabilities(
    strategy: SelectionStrategy,
    counts: Mapping[str, int],
    rank_counts: Mapping[str, int] | None = None,
) -> dict[str, float]:
    return normalize(selection_weights(strategy, counts, rank_counts))


@dataclass(frozen=True)
class CohortPlan:
    devices: tuple[str, ...]
    weights: dict[str, float] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.devices)


def select_cohort(probabilities: Mapping[str, float], k: int, rng: np.random.Generator) -> CohortPlan:
    """Draw ``min(k, #eligible)`` distinct devices by exponential keys.

    One exponential variate is drawn per device (eligible or not) in sorted
    id order, so the stream consumed does not depend on the weights.
    """
    if k < 1:
        raise ValueError("cohort size must be >= 1")
    if not probabilities:
        raise NoEligibleDevicesError("empty selection distribution")
    ids = sorted(probabilities)
    p = np.array([probabilities[d] for d in ids], dtype=float)
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("selection weights must be finite and non-negative")
    eligible = p > 0
    if not eligible.any():
        raise NoEligibleDevicesError("no eligible devices")
    keys = np.full(p.size, np.inf)
    draws = rng.exponential(size=p.size)
    keys[eligible] = draws[eligible] / p[eligible]
    n_take = min(k, int(eligible.sum()))
    picked = np.argsort(keys, kind="stable")[:n_take]
    chosen = tuple(sorted(ids[i] for i in picked))
    return CohortPlan(chosen, {d: probabilities[d] for d in chosen})
