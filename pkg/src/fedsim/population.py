"""Device populations: utterances over time, synthetic generation, temporal splits.

Time is measured in integer days. A simulated month is 30 days, so a window
expressed in months ``[a, b)`` covers days ``[30a, 30b)``.
"""

from __future__ import annotations

import json
import os
import tempfile
import warnings
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

DAYS_PER_MONTH = 30
MAX_UTTERANCE_LENGTH = 16


class PopulationFormatError(ValueError):
    """Raised when a dataset file cannot be parsed."""


@dataclass(frozen=True)
class Utterance:
    device_id: str
    day: int
    tokens: tuple[int, ...]

    def __post_init__(self):
        if not self.tokens:
            raise ValueError(f"utterance of device {self.device_id!r} has no tokens")


@dataclass(frozen=True)
class DeviceShard:
    device_id: str
    utterances: tuple[Utterance, ...] = ()

    def __post_init__(self):
        for utt in self.utterances:
            if utt.device_id != self.device_id:
                raise ValueError(
                    f"utterance of {utt.device_id!r} placed in shard {self.device_id!r}"
                )

    @property
    def count(self) -> int:
        return len(self.utterances)

    def __len__(self) -> int:
        return len(self.utterances)


@dataclass(frozen=True)
class TimeWindow:
    """Half-open day interval ``[start_day, end_day)``."""

    start_day: int
    end_day: int

    def __post_init__(self):
        if self.start_day >= self.end_day:
            raise ValueError(f"empty time window [{self.start_day}, {self.end_day})")

    @classmethod
    def months(cls, start_month: int, end_month: int) -> "TimeWindow":
        return cls(start_month * DAYS_PER_MONTH, end_month * DAYS_PER_MONTH)

    @property
    def length(self) -> int:
        return self.end_day - self.start_day

    def __contains__(self, day: int) -> bool:
        return self.start_day <= day < self.end_day

    def overlaps(self, start_day: int, end_day: int) -> bool:
        return self.start_day < end_day and start_day < self.end_day


@dataclass(frozen=True)
class Population:
    shards: tuple[DeviceShard, ...]
    vocab_size: int
    time_range: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "shards", tuple(self.shards))
        object.__setattr__(self, "time_range", tuple(self.time_range))
        start, end = self.time_range
        seen = set()
        for shard in self.shards:
            if shard.device_id in seen:
                raise ValueError(f"duplicate device id {shard.device_id!r}")
            seen.add(shard.device_id)
            for utt in shard.utterances:
                if not start <= utt.day < end:
                    raise ValueError(
                        f"utterance on day {utt.day} outside time range [{start}, {end})"
                    )
                if max(utt.tokens) >= self.vocab_size or min(utt.tokens) < 0:
                    raise ValueError(
                        f"token id out of range [0, {self.vocab_size}) on device {utt.device_id!r}"
                    )

    @property
    def device_count(self) -> int:
        return len(self.shards)

    @property
    def size(self) -> int:
        return sum(len(s) for s in self.shards)

    @cached_property
    def by_id(self) -> dict[str, DeviceShard]:
        return {s.device_id: s for s in self.shards}

    def shard(self, device_id: str) -> DeviceShard:
        return self.by_id[device_id]

    @property
    def device_ids(self) -> list[str]:
        return [s.device_id for s in self.shards]

    def utterances(self) -> Iterable[Utterance]:
        for shard in self.shards:
            yield from shard.utterances


@dataclass(frozen=True)
class DatasetSpec:
    """Parameters of the synthetic population generator.

    Per-device activity follows a Zipf law with exponent ``zipf_exponent``
    truncated to ``[min_count, max_count]``. Token ``i`` of an utterance is
    drawn from ``mixing * device_unigram + (1 - mixing) * shared_transition[prev]``.
    With probability ``1 - novelty_rate`` an utterance repeats an earlier one
    verbatim, taken from the device's own history or from the global history.
    """

    device_count: int = 10_000
    vocab_size: int = 200
    months: int = 12
    zipf_exponent: float = 1.6
    min_count: int = 1
    max_count: int = 10_000
    non_iid_mixing: float = 0.5
    novelty_rate: float = 0.3
    mean_length: float = 3.0
    seed: int = 0

    def validate(self) -> None:
        if self.device_count < 1:
            raise ValueError("device_count must be >= 1")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.months < 1:
            raise ValueError("months must be >= 1")
        if self.min_count < 0:
            raise ValueError("min_count must be >= 0")
        if self.min_count > self.max_count:
            raise ValueError("min_count must not exceed max_count")
        if not 0.0 <= self.non_iid_mixing <= 1.0:
            raise ValueError("non_iid_mixing must lie in [0, 1]")
        if not 0.0 <= self.novelty_rate <= 1.0:
            raise ValueError("novelty_rate must lie in [0, 1]")
        if self.zipf_exponent < 0:
            raise ValueError("zipf_exponent must be >= 0")
        if self.mean_length < 1:
            raise ValueError("mean_length must be >= 1")

    @property
    def time_range(self) -> tuple[int, int]:
        return (0, self.months * DAYS_PER_MONTH)


def device_name(index: int, total: int) -> str:
    width = max(5, len(str(total - 1)))
    return f"d{index:0{width}d}"


def _activity_counts(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    support = np.arange(spec.min_count, spec.max_count + 1)
    # count 0 has no Zipf mass of its own; give it the mass of count 1
    ranks = np.maximum(support, 1).astype(float)
    probs = ranks ** (-spec.zipf_exponent)
    probs /= probs.sum()
    return rng.choice(support, size=spec.device_count, p=probs)


def _shared_transitions(vocab_size: int, rng: np.random.Generator) -> np.ndarray:
    """Row ``v`` is the next-token distribution after ``v``; row ``V`` follows BOS."""
    unigram = 1.0 / np.arange(1, vocab_size + 1) ** 1.1
    unigram = rng.permutation(unigram / unigram.sum())
    sparse = rng.dirichlet(np.full(vocab_size, 0.05), size=vocab_size + 1)
    return 0.7 * sparse + 0.3 * unigram[None, :]


def _sample_sequences(
    n: int,
    device_cdf: np.ndarray,
    transition_cdf: np.ndarray,
    mixing: float,
    mean_length: float,
    rng: np.random.Generator,
) -> list[tuple[int, ...]]:
    vocab_size = device_cdf.shape[0]
    lengths = np.minimum(1 + rng.poisson(mean_length - 1.0, size=n), MAX_UTTERANCE_LENGTH)
    max_len = int(lengths.max())
    tokens = np.empty((n, max_len), dtype=np.int64)
    prev = np.full(n, vocab_size, dtype=np.int64)
    for pos in range(max_len):
        use_device = rng.random(n) < mixing
        u = rng.random(n)
        from_device = np.searchsorted(device_cdf, u, side="right")
        from_shared = (transition_cdf[prev] <= u[:, None]).sum(axis=1)
        step = np.where(use_device, from_device, from_shared)
        np.minimum(step, vocab_size - 1, out=step)
        tokens[:, pos] = step
        prev = step
    return [tuple(int(t) for t in row[:length]) for row, length in zip(tokens, lengths)]


def generate_population(spec: DatasetSpec) -> Population:
    """Generate a heavy-tailed, non-IID synthetic population. Deterministic in ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    num_days = spec.months * DAYS_PER_MONTH
    vocab = spec.vocab_size

    counts = _activity_counts(spec, rng)
    transition_cdf = np.cumsum(_shared_transitions(vocab, rng), axis=1)
    ids = [device_name(i, spec.device_count) for i in range(spec.device_count)]

    # Fresh candidate sequences per device; whether each is used or replaced
    # by a repeat is decided in the chronological pass below.
    candidates: list[list[tuple[int, ...]]] = []
    days: list[np.ndarray] = []
    for count in counts:
        device_cdf = np.cumsum(rng.dirichlet(np.full(vocab, 0.2)))
        days.append(np.sort(rng.integers(0, num_days, size=count)))
        if count:
            candidates.append(
                _sample_sequences(
                    int(count), device_cdf, transition_cdf,
                    spec.non_iid_mixing, spec.mean_length, rng,
                )
            )
        else:
            candidates.append([])

    order = sorted(
        ((int(d), dev, j) for dev, dev_days in enumerate(days) for j, d in enumerate(dev_days))
    )
    total = len(order)
    fresh_draw = rng.random(total)
    self_draw = rng.random(total)
    pick_draw = rng.random(total)

    global_pool: list[tuple[int, ...]] = []
    own_pool: list[list[tuple[int, ...]]] = [[] for _ in ids]
    generated: list[list[Utterance]] = [[] for _ in ids]
    for i, (day, dev, j) in enumerate(order):
        if fresh_draw[i] < spec.novelty_rate or not global_pool:
            tokens = candidates[dev][j]
        else:
            pool = own_pool[dev] if own_pool[dev] and self_draw[i] < 0.5 else global_pool
            tokens = pool[int(pick_draw[i] * len(pool))]
        own_pool[dev].append(tokens)
        global_pool.append(tokens)
        generated[dev].append(Utterance(ids[dev], day, tokens))

    shards = tuple(DeviceShard(ids[k], tuple(generated[k])) for k in range(len(ids)))
    return Population(shards, vocab, spec.time_range)


def _check_window(pop: Population, window: TimeWindow) -> None:
    if not window.overlaps(*pop.time_range):
        raise ValueError(
            f"window [{window.start_day}, {window.end_day}) is disjoint from "
            f"population range {list(pop.time_range)}"
        )


def restrict_to_window(pop: Population, window: TimeWindow) -> Population:
    """Keep only utterances inside ``window``. Devices left empty are retained."""
    _check_window(pop, window)
    shards = tuple(
        DeviceShard(s.device_id, tuple(u for u in s.utterances if u.day in window))
        for s in pop.shards
    )
    start = max(window.start_day, pop.time_range[0])
    end = min(window.end_day, pop.time_range[1])
    return Population(shards, pop.vocab_size, (start, end))


def segment_periods(pop: Population, train_window: TimeWindow, delta_months: int) -> list[Population]:
    """Split ``train_window`` into consecutive ``delta_months``-month segments."""
    if delta_months < 1:
        raise ValueError("delta_months must be >= 1")
    step = delta_months * DAYS_PER_MONTH
    if train_window.length % step:
        raise ValueError(
            f"window of {train_window.length} days is not divisible into {delta_months}-month segments"
        )
    return [
        restrict_to_window(pop, TimeWindow(start, start + step))
        for start in range(train_window.start_day, train_window.end_day, step)
    ]


def device_counts(pop: Population) -> dict[str, int]:
    return {s.device_id: len(s) for s in pop.shards}


def merge_populations(pops: list[Population]) -> Population:
    """Concatenate shards of populations over the same device set (e.g. segments)."""
    if not pops:
        raise ValueError("nothing to merge")
    ids: list[str] = []
    merged: dict[str, list[Utterance]] = {}
    for pop in pops:
        for s in pop.shards:
            if s.device_id not in merged:
                ids.append(s.device_id)
                merged[s.device_id] = []
            merged[s.device_id].extend(s.utterances)
    start = min(p.time_range[0] for p in pops)
    end = max(p.time_range[1] for p in pops)
    shards = tuple(DeviceShard(i, tuple(merged[i])) for i in ids)
    return Population(shards, pops[0].vocab_size, (start, end))


# -- JSON-lines persistence ---------------------------------------------------

def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"))


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_population(pop: Population) -> str:
    header = {
        "vocab_size": pop.vocab_size,
        "start_day": pop.time_range[0],
        "end_day": pop.time_range[1],
        "devices": pop.device_ids,
    }
    lines = [_dumps(header)]
    for shard in pop.shards:
        for utt in shard.utterances:
            lines.append(_dumps({"device": utt.device_id, "day": utt.day, "tokens": list(utt.tokens)}))
    return "\n".join(lines) + "\n"


def save_population(pop: Population, path: str | os.PathLike) -> None:
    atomic_write_text(path, dumps_population(pop))


def _field(record: Mapping, key: str, kind: type, lineno: int):
    if key not in record:
        raise PopulationFormatError(f"line {lineno}: missing {key!r} field")
    value = record[key]
    if kind is int and (not isinstance(value, int) or isinstance(value, bool)):
        raise PopulationFormatError(f"line {lineno}: {key!r} must be an integer")
    if kind is str and not isinstance(value, str):
        raise PopulationFormatError(f"line {lineno}: {key!r} must be a string")
    return value


def load_population(path: str | os.PathLike) -> Population:
    """Read a JSON-lines dataset. Line 0 is the header; errors name the 0-based line."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    lines = [(i, ln) for i, ln in enumerate(lines) if ln.strip()]
    if not lines:
        warnings.warn(f"{path}: empty dataset file, population has 0 devices", stacklevel=2)
        return Population((), 0, (0, 0))

    def parse(lineno: int, text: str) -> dict:
        try:
            record = json.loads(text)
        except json.JSONDecodeError as exc:
            raise PopulationFormatError(f"line {lineno}: invalid JSON ({exc.msg})") from None
        if not isinstance(record, dict):
            raise PopulationFormatError(f"line {lineno}: expected a JSON object")
        return record

    head_no, head_text = lines[0]
    header = parse(head_no, head_text)
    vocab = _field(header, "vocab_size", int, head_no)
    start = _field(header, "start_day", int, head_no)
    end = _field(header, "end_day", int, head_no)
    order: list[str] = list(header.get("devices", []))
    utts: dict[str, list[Utterance]] = {d: [] for d in order}
    for lineno, text in lines[1:]:
        record = parse(lineno, text)
        device = _field(record, "device", str, lineno)
        day = _field(record, "day", int, lineno)
        tokens = _field(record, "tokens", list, lineno)
        if not tokens:
            raise PopulationFormatError(f"line {lineno}: 'tokens' is empty")
        for tok in tokens:
            if not isinstance(tok, int) or isinstance(tok, bool) or tok < 0:
                raise PopulationFormatError(f"line {lineno}: token ids must be non-negative integers")
            if tok >= vocab:
                raise PopulationFormatError(
                    f"line {lineno}: token id {tok} >= vocab_size {vocab}"
                )
        if not start <= day < end:
            raise PopulationFormatError(f"line {lineno}: day {day} outside [{start}, {end})")
        if device not in utts:
            order.append(device)
            utts[device] = []
        utts[device].append(Utterance(device, day, tuple(tokens)))
    shards = tuple(DeviceShard(d, tuple(utts[d])) for d in order)
    pop = Population(shards, vocab, (start, end))
    if pop.device_count == 0:
        warnings.warn(f"{path}: population has 0 devices", stacklevel=2)
    return pop
