import csv
import hashlib
import json

import pytest

from fedsim.cli import main
from fedsim.models import init_params, load_checkpoint
from fedsim.population import load_population

TINY = {
    "preset": "desk",
    "dataset": {"device_count": 40, "vocab_size": 12, "max_count": 80, "zipf_exponent": 1.5},
    "round": {"cohort_size": 6, "rounds": 3, "local_batch_size": 16},
    "model": {"kind": "bigram", "dim": 4, "init_seed": 0},
    "algorithms": ["fedavg"],
    "strategies": ["uniform", "log"],
    "seeds": [0, 1, 2],
}


@pytest.fixture(autouse=True)
def single_worker(monkeypatch):
    monkeypatch.setenv("FEDSIM_THREADS", "1")


def write_config(tmp_path, **changes):
    cfg = {**TINY, **changes}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def run(*args):
    return main([str(a) for a in args])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture
def pipeline_out(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    assert run("gen", "--config", cfg, "--out", out) == 0
    assert run("train", "--out", out) == 0
    assert run("eval", "--out", out) == 0
    assert run("report", "--out", out) == 0
    return out


def test_gen_default_preset_has_ten_thousand_devices(tmp_path, capsys):
    out = tmp_path / "out"
    assert run("gen", "--out", out, "--seed", "0") == 0
    pop = load_population(out / "datasets" / "seed_0.jsonl")
    assert pop.device_count == 10_000
    assert "M=10000" in capsys.readouterr().out


def test_gen_same_seed_same_hash(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    assert run("gen", "--config", cfg, "--out", out, "--seed", "4") == 0
    first = sha(out / "datasets" / "seed_4.jsonl")
    assert run("gen", "--config", cfg, "--out", out, "--seed", "4", "--force") == 0
    assert sha(out / "datasets" / "seed_4.jsonl") == first


def test_gen_refuses_overwrite(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = tmp_path / "out"
    assert run("gen", "--config", cfg, "--out", out, "--seed", "0") == 0
    assert run("gen", "--config", cfg, "--out", out, "--seed", "0") == 2
    assert "--force" in capsys.readouterr().err


@pytest.mark.parametrize(
    "changes",
    [
        {"dataset": {"device_count": 0}},
        {"dataset": {"vocab_size": 1}},
        {"train_window": [5, 20]},
        {"seeds": [1, 1]},
        {"strategies": ["exponential"]},
        {"delta_months": 4},
        {"colour": "blue"},
    ],
)
def test_invalid_config_exit_code(tmp_path, capsys, changes):
    cfg = write_config(tmp_path, **changes)
    assert run("gen", "--config", cfg, "--out", tmp_path / "out") == 1
    assert "config error" in capsys.readouterr().err


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1


def test_train_requires_dataset(tmp_path):
    cfg = write_config(tmp_path)
    assert run("train", "--config", cfg, "--out", tmp_path / "out") == 2


def test_zero_rounds_checkpoint_is_init(tmp_path):
    cfg = write_config(tmp_path, round={"rounds": 0}, modes=["one_shot"], seeds=[0])
    out = tmp_path / "out"
    assert run("gen", "--config", cfg, "--out", out) == 0
    assert run("train", "--out", out) == 0
    ckpt = load_checkpoint(out / "runs" / "one_shot" / "fedavg-uniform" / "seed_0" / "final.ckpt")
    assert ckpt == init_params("bigram", 12, 4, 0)


def test_pipeline_outputs(pipeline_out):
    out = pipeline_out
    cell = out / "runs" / "continual" / "fedavg-log" / "seed_1"
    assert sorted(p.name for p in cell.glob("*.ckpt")) == ["P1.ckpt", "P2.ckpt", "P3.ckpt"]
    manifest = json.loads((cell / "manifest.json").read_text())
    assert manifest["seed"] == 1 and manifest["code_version"] and len(manifest["config_sha256"]) == 64
    assert [p["period"] for p in manifest["periods"]] == [1, 2, 3]
    assert "wall_time_s" in json.loads((cell / "timing.json").read_text())
    assert "wall_time_s" not in (cell / "manifest.json").read_text()

    rows = read_csv(out / "eval" / "summary.csv")
    base = [r for r in rows if r["mode"] == "one_shot" and r["strategy"] == "uniform" and r["decile"] == "all"]
    assert float(base[0]["rcp_mean"]) == 0.0 and float(base[0]["rcp_std"]) == 0.0
    assert all(r["n_seeds"] == "3" for r in rows)
    log_rows = [r for r in rows if r["strategy"] == "log" and r["mode"] == "one_shot"]
    assert any(float(r["rcp_std"]) > 0 for r in log_rows)

    curves = read_csv(out / "report" / "fig_decile_curves.csv")
    one_shot = [r for r in curves if r["mode"] == "one_shot"]
    assert len(one_shot) == 20
    overall = [r for r in read_csv(out / "report" / "fig_overall.csv") if r["mode"] == "continual"]
    assert sorted((r["strategy"], r["period"]) for r in overall) == [
        (s, p) for s in ("log", "uniform") for p in ("P1", "P2", "P3")
    ]
    for r in read_csv(out / "report" / "fig_innovation.csv"):
        assert abs(float(r["seen_self"]) + float(r["seen_others"]) + float(r["new"]) - 1.0) <= 1e-12
    assert (out / "report" / "findings.txt").read_text().startswith("Directional")


def test_retrain_reproduces_checkpoints(pipeline_out):
    ckpts = sorted(pipeline_out.glob("runs/*/*/seed_*/*.ckpt"))
    before = {p: sha(p) for p in ckpts}
    assert run("train", "--out", pipeline_out) == 0
    assert {p: sha(p) for p in ckpts} == before


def test_decile_report_columns(pipeline_out):
    path = pipeline_out / "runs" / "one_shot" / "fedavg-log" / "seed_0" / "decile_report.csv"
    rows = read_csv(path)
    assert list(rows[0]) == ["decile", "devices", "utterances", "perplexity", "rcp_percent"]
    assert [r["decile"] for r in rows] == [str(i) for i in range(1, 11)] + ["all"]
    assert (pipeline_out / "runs" / "continual" / "fedavg-log" / "seed_0" / "decile_report_P2.csv").exists()


def test_missing_baseline(tmp_path, capsys):
    cfg = write_config(tmp_path, strategies=["log"], modes=["one_shot"], seeds=[0])
    out = tmp_path / "out"
    assert run("gen", "--config", cfg, "--out", out) == 0
    assert run("train", "--out", out) == 0
    assert run("eval", "--out", out) == 2
    assert "baseline" in capsys.readouterr().err


def test_innovation_needs_two_segments(tmp_path, capsys):
    cfg = write_config(tmp_path, delta_months=6, seeds=[0])
    out = tmp_path / "out"
    assert run("gen", "--config", cfg, "--out", out) == 0
    assert run("innovation", "--out", out) == 2
    assert "at least 2 periods" in capsys.readouterr().err


def test_innovation_command(tmp_path):
    cfg = write_config(tmp_path, seeds=[0])
    out = tmp_path / "out"
    assert run("gen", "--config", cfg, "--out", out) == 0
    assert run("innovation", "--out", out) == 0
    rows = read_csv(out / "eval" / "innovation.csv")
    assert len(rows) == 11 and rows[-1]["decile"] == "all"


def test_report_on_empty_dir(tmp_path):
    assert run("report", "--out", tmp_path / "nothing") == 2


def test_failed_cells_reported_others_continue(tmp_path, capsys):
    cfg = write_config(tmp_path, modes=["one_shot"], seeds=[0, 1])
    out = tmp_path / "out"
    assert run("gen", "--config", cfg, "--out", out) == 0
    (out / "datasets" / "seed_1.jsonl").unlink()
    assert run("train", "--out", out) == 2
    err = capsys.readouterr().err
    assert err.count("FAILED") == 2
    assert (out / "runs" / "one_shot" / "fedavg-log" / "seed_0" / "final.ckpt").exists()


def test_bad_thread_count(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, seeds=[0])
    out = tmp_path / "out"
    assert run("gen", "--config", cfg, "--out", out) == 0
    monkeypatch.setenv("FEDSIM_THREADS", "many")
    assert run("train", "--out", out) == 2


def test_cli_seed_override_on_train(tmp_path):
    cfg = write_config(tmp_path, modes=["one_shot"])
    out = tmp_path / "out"
    assert run("gen", "--config", cfg, "--out", out) == 0
    assert run("train", "--out", out, "--seed", "2") == 0
    assert not (out / "runs" / "one_shot" / "fedavg-log" / "seed_0").exists()
    assert (out / "runs" / "one_shot" / "fedavg-log" / "seed_2" / "final.ckpt").exists()


def test_module_entry_point():
    import subprocess
    import sys

    proc = subprocess.run([sys.executable, "-m", "fedsim", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gen" in proc.stdout
