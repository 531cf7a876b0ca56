"""Federated training loop: local updates, FedAvg aggregation, FedAdam server step,
and one-shot / continual drivers."""

from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from . import models
from .models import Batch, ModelParams
from .population import DeviceShard, Population, TimeWindow, device_counts, restrict_to_window, segment_periods
from .strategies import SelectionStrategy, select_cohort, selection_probabilities

log = logging.getLogger(__name__)

ALGORITHMS = ("fedavg", "fedopt")


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary printable parts (independent of PYTHONHASHSEED)."""
    digest = hashlib.blake2b(":".join(map(str, parts)).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


@dataclass(frozen=True)
class RoundConfig:
    cohort_size: int = 50
    local_epochs: int = 1
    local_lr: float = 0.5
    local_batch_size: int = 32
    server_lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3
    rounds: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.cohort_size < 1:
            raise ValueError("cohort_size must be >= 1")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.local_batch_size < 1:
            raise ValueError("local_batch_size must be >= 1")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        # zero rates are allowed: they are the no-op reference cases
        for name in ("local_lr", "server_lr", "tau"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in [0, 1)")


@dataclass(frozen=True)
class LocalUpdate:
    device_id: str
    count: int
    params: ModelParams
    loss: float = math.nan

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("a local update needs count >= 1")


@dataclass(frozen=True)
class RoundDiagnostics:
    round: int
    cohort_size: int
    total_count: int
    mean_loss: float
    skipped: bool = False


@dataclass(frozen=True)
class ServerState:
    round: int
    params: ModelParams
    first_moment: np.ndarray | None = None
    second_moment: np.ndarray | None = None
    diagnostics: RoundDiagnostics | None = None

    @classmethod
    def initial(cls, params: ModelParams, algorithm: str = "fedavg") -> "ServerState":
        if algorithm == "fedopt":
            zeros = np.zeros_like(params.values)
            return cls(0, params, zeros, zeros.copy())
        return cls(0, params)


@dataclass
class RunResult:
    initial_params: ModelParams
    params: ModelParams
    diagnostics: list[RoundDiagnostics] = field(default_factory=list)
    provenance: dict = field(default_factory=dict)


class ShardCache:
    """Lazily extracted (context, target) pairs per device of one population."""

    def __init__(self, population: Population):
        self.population = population
        self._batches: dict[str, Batch] = {}

    def batch(self, device_id: str) -> Batch:
        if device_id not in self._batches:
            shard = self.population.shard(device_id)
            self._batches[device_id] = Batch.from_utterances(shard.utterances, self.population.vocab_size)
        return self._batches[device_id]


def local_update(
    shard: DeviceShard,
    w_t: ModelParams,
    cfg: RoundConfig,
    rng: np.random.Generator,
    batch: Batch | None = None,
    count: int | None = None,
) -> LocalUpdate | None:
    """Run ``cfg.local_epochs`` SGD epochs from ``w_t``. Returns None for an empty shard.

    ``count`` overrides the aggregation weight (defaults to the shard size).
    """
    if len(shard) == 0:
        return None
    if batch is None:
        batch = Batch.from_utterances(shard.utterances, w_t.vocab_size)
    params, losses = w_t, []
    for _ in range(cfg.local_epochs):
        params, epoch_loss = models.sgd_epoch_with_loss(params, batch, cfg.local_lr, cfg.local_batch_size, rng)
        losses.append(epoch_loss)
    return LocalUpdate(shard.device_id, len(shard) if count is None else count, params, losses[0])


def aggregate(updates: list[LocalUpdate]) -> ModelParams:
    """Weighted average ``sum_m (n_m / N_t) w_m`` over the updates.

    Reduction runs in device-id order and is anchored at the first update, so
    identical inputs reproduce exactly; the result is clipped to the
    coordinate-wise [min, max] of the inputs to absorb last-bit rounding.
    """
    if not updates:
        raise ValueError("cannot aggregate an empty list of updates")
    ordered = sorted(updates, key=lambda u: u.device_id)
    ref = ordered[0].params
    for u in ordered[1:]:
        if not u.params.same_layout(ref):
            raise ValueError(f"layout mismatch for device {u.device_id!r}")
    total = float(sum(u.count for u in ordered))
    anchor = ref.values
    acc = np.zeros_like(anchor)
    lo = anchor.copy()
    hi = anchor.copy()
    for u in ordered[1:]:
        acc += (u.count / total) * (u.params.values - anchor)
        np.minimum(lo, u.params.values, out=lo)
        np.maximum(hi, u.params.values, out=hi)
    return ref.replace(np.clip(anchor + acc, lo, hi))


def _cohort_updates(
    state: ServerState,
    population: Population,
    strategy: SelectionStrategy,
    cfg: RoundConfig,
    rng: np.random.Generator,
    salt: str,
    workers: int,
    cache: ShardCache | None,
    rank_counts: Mapping[str, int] | None,
    weight_counts: Mapping[str, int] | None,
) -> list[LocalUpdate]:
    counts = device_counts(population)
    probs = selection_probabilities(strategy, counts, rank_counts)
    plan = select_cohort(probs, cfg.cohort_size, rng)
    cache = cache or ShardCache(population)
    # empty shards selected under uniform sampling contribute nothing
    members = [d for d in plan.devices if counts[d] > 0]

    def work(device_id: str) -> LocalUpdate:
        local_rng = np.random.default_rng(derive_seed(cfg.seed, salt, state.round, device_id))
        n_m = counts[device_id] if weight_counts is None else weight_counts[device_id]
        return local_update(
            population.shard(device_id), state.params, cfg, local_rng,
            batch=cache.batch(device_id), count=n_m,
        )

    if workers > 1 and len(members) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(work, members))
    return [work(d) for d in members]


def _diagnostics(round_index: int, updates: list[LocalUpdate]) -> RoundDiagnostics:
    if not updates:
        return RoundDiagnostics(round_index, 0, 0, math.nan, skipped=True)
    total = sum(u.count for u in updates)
    mean_loss = math.fsum(u.count * u.loss for u in sorted(updates, key=lambda u: u.device_id)) / total
    return RoundDiagnostics(round_index, len(updates), total, mean_loss)


def fedavg_round(
    state: ServerState,
    population: Population,
    strategy: SelectionStrategy,
    cfg: RoundConfig,
    rng: np.random.Generator,
    *,
    salt: str = "",
    workers: int = 1,
    cache: ShardCache | None = None,
    rank_counts: Mapping[str, int] | None = None,
    weight_counts: Mapping[str, int] | None = None,
) -> ServerState:
    updates = _cohort_updates(state, population, strategy, cfg, rng, salt, workers, cache, rank_counts, weight_counts)
    diag = _diagnostics(state.round, updates)
    if not updates:
        log.warning("round %d: every selected device was empty, round skipped", state.round)
        return replace(state, round=state.round + 1, diagnostics=diag)
    return replace(state, round=state.round + 1, params=aggregate(updates), diagnostics=diag)


def server_adam_step(state: ServerState, aggregated: ModelParams, cfg: RoundConfig) -> ServerState:
    """FedAdam on the pseudo-gradient ``w_t - aggregated`` (no bias correction)."""
    w = state.params.values
    delta = w - aggregated.values
    m = state.first_moment if state.first_moment is not None else np.zeros_like(w)
    v = state.second_moment if state.second_moment is not None else np.zeros_like(w)
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * delta
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * delta * delta
    w_next = w - cfg.server_lr * m / (np.sqrt(v) + cfg.tau)
    return replace(state, params=state.params.replace(w_next), first_moment=m, second_moment=v)


def fedopt_round(
    state: ServerState,
    population: Population,
    strategy: SelectionStrategy,
    cfg: RoundConfig,
    rng: np.random.Generator,
    *,
    salt: str = "",
    workers: int = 1,
    cache: ShardCache | None = None,
    rank_counts: Mapping[str, int] | None = None,
    weight_counts: Mapping[str, int] | None = None,
) -> ServerState:
    updates = _cohort_updates(state, population, strategy, cfg, rng, salt, workers, cache, rank_counts, weight_counts)
    diag = _diagnostics(state.round, updates)
    if not updates:
        log.warning("round %d: every selected device was empty, round skipped", state.round)
        return replace(state, round=state.round + 1, diagnostics=diag)
    stepped = server_adam_step(state, aggregate(updates), cfg)
    return replace(stepped, round=state.round + 1, diagnostics=diag)


ROUND_FUNCTIONS: dict[str, Callable[..., ServerState]] = {"fedavg": fedavg_round, "fedopt": fedopt_round}


def _run_rounds(
    population: Population,
    strategy: SelectionStrategy,
    algorithm: str,
    cfg: RoundConfig,
    init: ModelParams,
    rounds: int,
    salt: str,
    workers: int,
    rank_counts: Mapping[str, int] | None,
    weight_counts: Mapping[str, int] | None,
) -> RunResult:
    if algorithm not in ROUND_FUNCTIONS:
        raise ValueError(f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}")
    step = ROUND_FUNCTIONS[algorithm]
    state = ServerState.initial(init, algorithm)
    cache = ShardCache(population)
    diagnostics = []
    for t in range(rounds):
        rng = np.random.default_rng(derive_seed(cfg.seed, salt, t, "cohort"))
        state = step(
            state, population, strategy, cfg, rng, salt=salt, workers=workers, cache=cache,
            rank_counts=rank_counts, weight_counts=weight_counts,
        )
        diagnostics.append(state.diagnostics)
    return RunResult(init, state.params, diagnostics)


def _provenance(strategy, algorithm, cfg, windows, **extra) -> dict:
    out = {
        "strategy": strategy.to_config(),
        "algorithm": algorithm,
        "seed": cfg.seed,
        "windows": [[w.start_day, w.end_day] for w in windows],
    }
    out.update(extra)
    return out


def run_one_shot(
    population: Population,
    train_window: TimeWindow,
    strategy: SelectionStrategy,
    algorithm: str,
    cfg: RoundConfig,
    init: ModelParams,
    *,
    workers: int = 1,
) -> RunResult:
    """``cfg.rounds`` rounds over all data in ``train_window``."""
    strategy = SelectionStrategy.parse(strategy)
    data = restrict_to_window(population, train_window)
    result = _run_rounds(data, strategy, algorithm, cfg, init, cfg.rounds, "segment-0", workers, None, None)
    result.provenance = _provenance(strategy, algorithm, cfg, [train_window], mode="one_shot")
    return result


def run_continual(
    population: Population,
    train_window: TimeWindow,
    delta_months: int,
    strategy: SelectionStrategy,
    algorithm: str,
    cfg: RoundConfig,
    init: ModelParams,
    *,
    rounds_per_segment: int | None = None,
    rank_scope: str = "segment",
    count_scope: str = "segment",
    workers: int = 1,
) -> list[RunResult]:
    """Train segment by segment, each starting from the previous segment's final model.

    ``rank_scope`` / ``count_scope`` choose whether heavy/light ranking and
    aggregation weights use the segment's own counts (``"segment"``) or the
    counts over the whole ``train_window`` (``"window"``). The server optimizer
    state is reset at each segment boundary; only the model carries over.
    """
    strategy = SelectionStrategy.parse(strategy)
    for name, value in (("rank_scope", rank_scope), ("count_scope", count_scope)):
        if value not in ("segment", "window"):
            raise ValueError(f"{name} must be 'segment' or 'window', got {value!r}")
    segments = segment_periods(population, train_window, delta_months)
    window_counts = None
    if "window" in (rank_scope, count_scope):
        window_counts = device_counts(restrict_to_window(population, train_window))
    rounds = cfg.rounds if rounds_per_segment is None else rounds_per_segment
    results = []
    params = init
    for i, segment in enumerate(segments):
        window = TimeWindow(*segment.time_range)
        result = _run_rounds(
            segment, strategy, algorithm, cfg, params, rounds, f"segment-{i}", workers,
            window_counts if rank_scope == "window" else None,
            window_counts if count_scope == "window" else None,
        )
        result.provenance = _provenance(
            strategy, algorithm, cfg, [window], mode="continual", period=i + 1,
            rank_scope=rank_scope, count_scope=count_scope,
        )
        results.append(result)
        params = result.params
    return results
