"""Evaluation protocol: pooled perplexity by activity decile, relative change in
perplexity against a baseline, and the innovation repartition of utterances."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import models
from .models import Batch, ModelParams
from .population import Population, device_counts, merge_populations

N_DECILES = 10


def decile_groups(counts: Mapping[str, int]) -> list[list[str]]:
    """Sort devices by (count asc, id asc) and cut into 10 groups whose sizes differ by <= 1."""
    ordered = [d for _, d in sorted((c, d) for d, c in counts.items())]
    m = len(ordered)
    if m < N_DECILES:
        raise ValueError(f"need at least {N_DECILES} devices for a decile split, got {m}")
    bounds = [i * m // N_DECILES for i in range(N_DECILES + 1)]
    return [ordered[bounds[i]:bounds[i + 1]] for i in range(N_DECILES)]


def decile_split(test_pop: Population) -> list[list[str]]:
    """Decile groups of the devices that have at least one test utterance."""
    counts = {d: c for d, c in device_counts(test_pop).items() if c > 0}
    return decile_groups(counts)


@dataclass(frozen=True)
class DecileStats:
    devices: int
    utterances: int
    tokens: int
    nll: float
    perplexity: float


@dataclass(frozen=True)
class DecileReport:
    deciles: list[DecileStats]
    overall: DecileStats

    @property
    def overall_perplexity(self) -> float:
        return self.overall.perplexity


def evaluate(params: ModelParams, test_pop: Population) -> DecileReport:
    """Per-decile and overall perplexity pooled over all utterances of the group."""
    groups = decile_split(test_pop)
    stats = []
    for group in groups:
        utts = [u for d in group for u in test_pop.shard(d).utterances]
        total, tokens = models.total_nll(params, Batch.from_utterances(utts, params.vocab_size))
        stats.append(DecileStats(len(group), len(utts), tokens, total, math.exp(total / tokens)))
    total = math.fsum(s.nll for s in stats)
    tokens = sum(s.tokens for s in stats)
    overall = DecileStats(
        sum(s.devices for s in stats), sum(s.utterances for s in stats), tokens, total, math.exp(total / tokens)
    )
    return DecileReport(stats, overall)


@dataclass(frozen=True)
class RcpReport:
    deciles: list[float]
    overall: float
    baseline: str = ""


def relative_change(value: float, baseline: float) -> float:
    return 100.0 * (value - baseline) / baseline


def rcp(report: DecileReport, baseline_overall_perplexity: float, baseline: str = "") -> RcpReport:
    """Percent change of every cell against the baseline's overall perplexity."""
    if not baseline_overall_perplexity > 0:
        raise ValueError("baseline perplexity must be positive")
    return RcpReport(
        [relative_change(s.perplexity, baseline_overall_perplexity) for s in report.deciles],
        relative_change(report.overall.perplexity, baseline_overall_perplexity),
        baseline,
    )


# -- innovation repartition ----------------------------------------------------

Triple = tuple[float, float, float]


@dataclass(frozen=True)
class InnovationReport:
    """(seen_by_self, seen_by_others, completely_new) proportions.

    ``per_period`` has one overall triple per evaluated period (periods 2..P);
    ``deciles`` is empty when fewer than 10 devices are active.
    """

    overall: Triple
    deciles: list[Triple]
    per_period: list[Triple]
    per_device: dict[str, list[Triple]]


def device_repartition(
    unique: set[tuple[int, ...]],
    own_history: set[tuple[int, ...]],
    global_history: set[tuple[int, ...]],
) -> Triple:
    seen_self = sum(1 for u in unique if u in own_history)
    seen_others = sum(1 for u in unique if u not in own_history and u in global_history)
    n = len(unique)
    return (seen_self / n, seen_others / n, (n - seen_self - seen_others) / n)


def _mean_triple(triples: Sequence[Triple], weights: Sequence[float] | None = None) -> Triple | None:
    if not triples:
        return None
    arr = np.asarray(triples, dtype=float)
    w = np.ones(len(triples)) if weights is None else np.asarray(weights, dtype=float)
    mean = (arr * w[:, None]).sum(axis=0) / w.sum()
    return tuple(float(x) for x in mean)


def innovation(segments: Sequence[Population], weighting: str = "device") -> InnovationReport:
    """Classify each device's unique utterances of period ``p >= 2`` against earlier periods.

    ``weighting="device"`` averages devices equally; ``"utterance"`` weights each
    device by its number of unique utterances in the period. Devices without
    utterances in a period are left out of that period's averages.
    """
    if len(segments) < 2:
        raise ValueError("innovation needs at least 2 periods")
    if weighting not in ("device", "utterance"):
        raise ValueError(f"weighting must be 'device' or 'utterance', got {weighting!r}")

    merged = merge_populations(list(segments))
    active = {d: c for d, c in device_counts(merged).items() if c > 0}
    groups = decile_groups(active) if len(active) >= N_DECILES else []
    decile_of = {d: i for i, g in enumerate(groups) for d in g}

    own: dict[str, set] = {}
    seen: set = set()
    per_device: dict[str, list[Triple]] = {}
    per_period: list[Triple] = []
    decile_period: list[list[Triple]] = [[] for _ in groups]

    for index, segment in enumerate(segments):
        uniques = {s.device_id: {u.tokens for u in s.utterances} for s in segment.shards if len(s)}
        if index > 0:
            triples, weights = [], []
            by_decile: list[tuple[list, list]] = [([], []) for _ in groups]
            for device in sorted(uniques):
                unique = uniques[device]
                t = device_repartition(unique, own.get(device, set()), seen)
                w = 1.0 if weighting == "device" else float(len(unique))
                per_device.setdefault(device, []).append(t)
                triples.append(t)
                weights.append(w)
                if device in decile_of:
                    by_decile[decile_of[device]][0].append(t)
                    by_decile[decile_of[device]][1].append(w)
            period_mean = _mean_triple(triples, weights)
            if period_mean is not None:
                per_period.append(period_mean)
            for i, (ts, ws) in enumerate(by_decile):
                mean = _mean_triple(ts, ws)
                if mean is not None:
                    decile_period[i].append(mean)
        for device, unique in uniques.items():
            own.setdefault(device, set()).update(unique)
            seen.update(unique)

    overall = _mean_triple(per_period) or (0.0, 0.0, 0.0)
    deciles = [_mean_triple(ps) or (math.nan,) * 3 for ps in decile_period]
    return InnovationReport(overall, deciles, per_period, per_device)


# -- CSV serialization ---------------------------------------------------------

DECILE_COLUMNS = ("decile", "devices", "utterances", "perplexity", "rcp_percent")
INNOVATION_COLUMNS = ("decile", "seen_self", "seen_others", "new")


def _csv(rows: list[Sequence], header: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def decile_report_csv(report: DecileReport, rcp_report: RcpReport) -> str:
    rows = [
        (i + 1, s.devices, s.utterances, repr(s.perplexity), repr(r))
        for i, (s, r) in enumerate(zip(report.deciles, rcp_report.deciles))
    ]
    o = report.overall
    rows.append(("all", o.devices, o.utterances, repr(o.perplexity), repr(rcp_report.overall)))
    return _csv(rows, DECILE_COLUMNS)


def innovation_csv(report: InnovationReport) -> str:
    rows = [(i + 1, *map(repr, t)) for i, t in enumerate(report.deciles)]
    rows.append(("all", *map(repr, report.overall)))
    return _csv(rows, INNOVATION_COLUMNS)
