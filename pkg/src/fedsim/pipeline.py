"""gen -> train -> eval -> report over an output directory.

Layout under ``out``::

    config.json                              resolved configuration
    datasets/seed_<s>.jsonl                  one synthetic population per replication seed
    runs/<mode>/<algorithm>-<strategy>/seed_<s>/
        final.ckpt | P1.ckpt P2.ckpt ...     checkpoints
        diagnostics.csv                      per-round training diagnostics
        manifest.json                        everything needed to rerun the cell
        timing.json                          wall time (the only nondeterministic file)
        decile_report[_P<i>].csv             written by eval
    eval/summary.csv, eval/innovation*.csv
    report/fig_*.csv, report/findings.txt
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

from . import __version__
from .config import Cell, ExperimentConfig, build_config
from .engine import RunResult, run_continual, run_one_shot
from .evaluation import (
    DecileReport,
    decile_report_csv,
    evaluate,
    innovation,
    innovation_csv,
    rcp,
)
from .models import init_params, load_checkpoint, save_checkpoint
from .strategies import SelectionStrategy
from .population import (
    atomic_write_text,
    device_counts,
    generate_population,
    load_population,
    restrict_to_window,
    save_population,
    segment_periods,
)

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


def worker_count() -> int:
    value = os.environ.get("FEDSIM_THREADS")
    cpus = os.cpu_count() or 1
    if not value:
        return cpus
    try:
        n = int(value)
    except ValueError:
        raise PipelineError(f"FEDSIM_THREADS must be an integer, got {value!r}") from None
    return max(1, n)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _num(x: float) -> str:
    return repr(float(x))


def dataset_path(cfg: ExperimentConfig, out: Path, seed: int) -> Path:
    if cfg.dataset_path is not None:
        return Path(cfg.dataset_path)
    return out / "datasets" / f"seed_{seed}.jsonl"


def run_dir(out: Path, mode: str, cell: Cell, seed: int) -> Path:
    return out / "runs" / mode / cell.name / f"seed_{seed}"


def checkpoint_names(cfg: ExperimentConfig, mode: str) -> list[str]:
    if mode == "one_shot":
        return ["final"]
    return [f"P{i + 1}" for i in range(cfg.n_segments)]


def _write_config(cfg: ExperimentConfig, out: Path) -> None:
    atomic_write_text(out / "config.json", _json(cfg.raw))


def load_run_config(out: Path) -> ExperimentConfig:
    path = out / "config.json"
    if not path.exists():
        raise PipelineError(f"{path} not found; run 'train' first")
    return build_config(json.loads(path.read_text()))


# -- gen -----------------------------------------------------------------------

@dataclass
class GenSummary:
    path: Path
    devices: int
    utterances: int
    spread: float


def cmd_gen(cfg: ExperimentConfig, out: Path, force: bool = False) -> list[GenSummary]:
    """Write one dataset file per replication seed."""
    if cfg.dataset_path is not None:
        raise PipelineError("config names an existing dataset_path; nothing to generate")
    summaries = []
    for seed in cfg.seeds:
        path = dataset_path(cfg, out, seed)
        if path.exists() and not force:
            raise PipelineError(f"{path} exists; pass --force to overwrite")
        pop = generate_population(cfg.dataset_for(seed))
        save_population(pop, path)
        nonzero = [c for c in device_counts(pop).values() if c > 0]
        spread = max(nonzero) / min(nonzero) if nonzero else math.nan
        summaries.append(GenSummary(path, pop.device_count, pop.size, spread))
    _write_config(cfg, out)
    return summaries


# -- train ---------------------------------------------------------------------

@lru_cache(maxsize=4)
def _load_cached(path: str, mtime_ns: int, size: int):
    return load_population(path)


def _population(path: str):
    # keyed on file identity so a regenerated dataset is never served stale
    st = os.stat(path)
    return _load_cached(path, st.st_mtime_ns, st.st_size)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _diagnostics_rows(results: list[RunResult], names: list[str]):
    for name, result in zip(names, results):
        for d in result.diagnostics:
            yield (name, d.round, d.cohort_size, d.total_count, _num(d.mean_loss), int(d.skipped))


def train_cell(cfg: ExperimentConfig, out: Path, mode: str, cell: Cell, seed: int) -> Path:
    started = time.perf_counter()
    data_file = dataset_path(cfg, out, seed)
    if not data_file.exists():
        raise PipelineError(f"dataset {data_file} not found; run 'gen' first")
    pop = _population(str(data_file))
    round_cfg = cfg.round_for(seed)
    init = init_params(cfg.model_kind, pop.vocab_size, cfg.model_dim, cfg.init_seed)
    if mode == "one_shot":
        results = [run_one_shot(pop, cfg.train_window, cell.strategy, cell.algorithm, round_cfg, init)]
    else:
        results = run_continual(
            pop, cfg.train_window, cfg.delta_months, cell.strategy, cell.algorithm, round_cfg, init,
            rounds_per_segment=cfg.rounds_per_segment, rank_scope=cfg.rank_scope, count_scope=cfg.count_scope,
        )
    names = checkpoint_names(cfg, mode)
    target = run_dir(out, mode, cell, seed)
    for name, result in zip(names, results):
        save_checkpoint(result.params, target / f"{name}.ckpt")
    atomic_write_text(
        target / "diagnostics.csv",
        _csv_text(("period", "round", "cohort_size", "total_count", "mean_loss", "skipped"),
                  _diagnostics_rows(results, names)),
    )
    manifest = {
        "code_version": __version__,
        "config_sha256": cfg.digest(),
        "mode": mode,
        "algorithm": cell.algorithm,
        "strategy": cell.strategy.to_config(),
        "seed": seed,
        "dataset": {"path": os.path.relpath(data_file, out), "sha256": _sha256(data_file)},
        "train_window_months": cfg.raw["train_window"],
        "test_window_months": cfg.raw["test_window"],
        "round_config": asdict(round_cfg),
        "model": {"kind": cfg.model_kind, "dim": cfg.model_dim, "init_seed": cfg.init_seed},
        "periods": [
            {"name": name, "checkpoint": f"{name}.ckpt", **result.provenance,
             "rounds": len(result.diagnostics)}
            for name, result in zip(names, results)
        ],
    }
    atomic_write_text(target / "manifest.json", _json(manifest))
    atomic_write_text(target / "timing.json", _json({"wall_time_s": time.perf_counter() - started}))
    return target


def _train_task(args):
    raw, out, mode, (algorithm, strategy), seed = args
    cfg = build_config(raw)
    cell = Cell(algorithm, SelectionStrategy.parse(strategy))
    try:
        train_cell(cfg, Path(out), mode, cell, seed)
        return None
    except Exception as exc:  # reported per cell; other cells keep running
        log.exception("cell %s/%s seed %s failed", mode, cell.name, seed)
        return f"{mode}/{cell.name}/seed_{seed}: {exc}"


def cmd_train(cfg: ExperimentConfig, out: Path) -> list[str]:
    """Train every (mode, cell, seed). Returns failure messages (empty on success)."""
    _write_config(cfg, out)
    tasks = [
        (cfg.raw, str(out), mode, (cell.algorithm, cell.strategy.to_config()), seed)
        for mode in cfg.modes
        for cell in cfg.cells
        for seed in cfg.seeds
    ]
    workers = min(worker_count(), len(tasks))
    if workers <= 1:
        outcomes = [_train_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_train_task, tasks))
    return [o for o in outcomes if o is not None]


# -- eval ----------------------------------------------------------------------

def _std(values: list[float]) -> float:
    return statistics.stdev(values) if len(values) > 1 else 0.0


def _baseline_cell(cfg: ExperimentConfig, mode: str) -> Cell:
    if mode not in cfg.baseline:
        raise PipelineError(f"no baseline configured for mode {mode!r}")
    return cfg.baseline[mode]


def cmd_eval(cfg: ExperimentConfig, out: Path) -> Path:
    """Decile reports for every checkpoint, RCP against the configured one-shot baseline,
    mean/std across seeds, and the innovation table when continual mode is on."""
    tests = {}
    for seed in cfg.seeds:
        data_file = dataset_path(cfg, out, seed)
        if not data_file.exists():
            raise PipelineError(f"dataset {data_file} not found")
        tests[seed] = restrict_to_window(_population(str(data_file)), cfg.test_window)

    baseline_ppl: dict[tuple[str, int], float] = {}
    for mode in cfg.modes:
        base = _baseline_cell(cfg, mode)
        for seed in cfg.seeds:
            ckpt = run_dir(out, "one_shot", base, seed) / "final.ckpt"
            if not ckpt.exists():
                raise PipelineError(f"baseline checkpoint {ckpt} is missing")
            baseline_ppl[mode, seed] = evaluate(load_checkpoint(ckpt), tests[seed]).overall_perplexity

    summary_rows = []
    for mode in cfg.modes:
        base_name = f"one_shot/{_baseline_cell(cfg, mode).name}"
        for cell in cfg.cells:
            for name in checkpoint_names(cfg, mode):
                per_seed: list[tuple[DecileReport, list[float], float]] = []
                for seed in cfg.seeds:
                    folder = run_dir(out, mode, cell, seed)
                    ckpt = folder / f"{name}.ckpt"
                    if not ckpt.exists():
                        raise PipelineError(f"checkpoint {ckpt} is missing; run 'train' first")
                    report = evaluate(load_checkpoint(ckpt), tests[seed])
                    rel = rcp(report, baseline_ppl[mode, seed], base_name)
                    suffix = "" if mode == "one_shot" else f"_{name}"
                    atomic_write_text(folder / f"decile_report{suffix}.csv", decile_report_csv(report, rel))
                    per_seed.append((report, rel.deciles + [rel.overall], baseline_ppl[mode, seed]))
                period = "one_shot" if mode == "one_shot" else name
                labels = [str(i + 1) for i in range(10)] + ["all"]
                for j, label in enumerate(labels):
                    rcps = [r[1][j] for r in per_seed]
                    ppls = [(r[0].deciles + [r[0].overall])[j].perplexity for r in per_seed]
                    summary_rows.append((
                        mode, cell.algorithm, cell.strategy.name, period, label,
                        _num(statistics.fmean(rcps)), _num(_std(rcps)),
                        _num(statistics.fmean(ppls)), _num(_std(ppls)), len(per_seed), base_name,
                    ))
    eval_dir = out / "eval"
    atomic_write_text(
        eval_dir / "summary.csv",
        _csv_text(("mode", "algorithm", "strategy", "period", "decile", "rcp_mean", "rcp_std",
                   "perplexity_mean", "perplexity_std", "n_seeds", "baseline"), summary_rows),
    )
    if "continual" in cfg.modes:
        cmd_innovation(cfg, out)
    return eval_dir / "summary.csv"


def cmd_innovation(cfg: ExperimentConfig, out: Path) -> Path:
    """Innovation repartition over the continual segments of the train window, per seed and averaged."""
    if cfg.n_segments < 2:
        raise PipelineError(
            f"innovation needs at least 2 periods; train window splits into {cfg.n_segments}"
        )
    per_seed = []
    for seed in cfg.seeds:
        data_file = dataset_path(cfg, out, seed)
        if not data_file.exists():
            raise PipelineError(f"dataset {data_file} not found")
        segments = segment_periods(_population(str(data_file)), cfg.train_window, cfg.delta_months)
        report = innovation(segments, cfg.innovation_weighting)
        atomic_write_text(out / "eval" / f"innovation_seed_{seed}.csv", innovation_csv(report))
        per_seed.append(report)
    rows = []
    n_rows = len(per_seed[0].deciles)
    for i in range(n_rows + 1):
        label = str(i + 1) if i < n_rows else "all"
        triples = [r.deciles[i] if i < n_rows else r.overall for r in per_seed]
        valid = [t for t in triples if not any(math.isnan(x) for x in t)]
        mean = [statistics.fmean(t[k] for t in valid) if valid else math.nan for k in range(3)]
        rows.append((label, *map(_num, mean)))
    path = out / "eval" / "innovation.csv"
    atomic_write_text(path, _csv_text(("decile", "seen_self", "seen_others", "new"), rows))
    return path


# -- report --------------------------------------------------------------------

def cmd_report(out: Path) -> Path:
    """Turn eval CSVs into long-format per-figure tables plus a plain-text findings digest."""
    summary = out / "eval" / "summary.csv"
    if not summary.exists():
        raise PipelineError(f"{summary} not found; run 'eval' first")
    rows = _read_csv(summary)
    if not rows:
        raise PipelineError(f"{summary} is empty")
    report_dir = out / "report"
    keys = ("mode", "algorithm", "strategy", "period")
    curves = [
        tuple(r[k] for k in keys) + (r["decile"], r["rcp_mean"], r["rcp_std"])
        for r in rows if r["decile"] != "all"
    ]
    overall = [
        tuple(r[k] for k in keys) + (r["rcp_mean"], r["rcp_std"], r["perplexity_mean"])
        for r in rows if r["decile"] == "all"
    ]
    atomic_write_text(report_dir / "fig_decile_curves.csv",
                      _csv_text(keys + ("decile", "rcp_mean", "rcp_std"), curves))
    atomic_write_text(report_dir / "fig_overall.csv",
                      _csv_text(keys + ("rcp_mean", "rcp_std", "perplexity_mean"), overall))
    innovation_file = out / "eval" / "innovation.csv"
    if innovation_file.exists():
        atomic_write_text(report_dir / "fig_innovation.csv", innovation_file.read_text())
    training = out / "runs"
    atomic_write_text(report_dir / "findings.txt", _findings(rows, training))
    return report_dir


def _findings(rows: list[dict], runs: Path) -> str:
    """Directional observations; reported, never asserted."""
    lines = ["Directional observations (data-dependent, not claims):", ""]
    overall = [r for r in rows if r["decile"] == "all"]
    groups: dict[tuple[str, str, str], list[dict]] = {}
    for r in overall:
        groups.setdefault((r["mode"], r["algorithm"], r["period"]), []).append(r)
    for (mode, algorithm, period), items in sorted(groups.items()):
        ranked = sorted(items, key=lambda r: float(r["rcp_mean"]))
        order = ", ".join(f"{r['strategy']} {float(r['rcp_mean']):+.2f}%" for r in ranked)
        lines.append(f"[{mode} {algorithm} {period}] overall RCP, best first: {order}")
        by_name = {r["strategy"]: float(r["rcp_mean"]) for r in items}
        if "invlog" in by_name and "uniform" in by_name:
            verdict = "better" if by_name["invlog"] < by_name["uniform"] else "not better"
            lines.append(f"  invlog vs uniform: {verdict} "
                         f"({by_name['invlog']:+.2f}% vs {by_name['uniform']:+.2f}%)")
    lines.append("")
    for path in sorted(runs.glob("*/*/seed_*/diagnostics.csv")):
        diag = [d for d in _read_csv(path) if d["skipped"] == "0"]
        if diag:
            first, last = float(diag[0]["mean_loss"]), float(diag[-1]["mean_loss"])
            rel = path.parent.relative_to(runs)
            lines.append(f"training loss {rel}: first round {first:.4f}, last round {last:.4f}")
    return "\n".join(lines) + "\n"
