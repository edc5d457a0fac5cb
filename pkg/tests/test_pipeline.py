import json

from bnalab import cli
from bnalab.config import ExperimentConfig
from bnalab.pipeline import run_pipeline

SMALL = dict(train_per_class=150, test_per_class=60, train_epochs=8, re_steps=150, strip_blend_count=4)

EXPECTED_FILES = {
    "config.txt", "dataset.csv", "dataset.json", "model.json", "detection.json", "detection_scores.csv",
    "divergence.csv", "metrics.json", "timings.json",
}


def test_rerun_gives_byte_identical_metrics(tmp_path):
    cfg = ExperimentConfig(seed=4, **SMALL)
    a = run_pipeline(cfg, tmp_path / "a")
    b = run_pipeline(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()
    assert a.checks == b.checks


def test_run_directory_contents_carry_provenance(tmp_path):
    cfg = ExperimentConfig(seed=2, **SMALL)
    res = run_pipeline(cfg, tmp_path / "r")
    names = {p.name for p in (tmp_path / "r").iterdir()}
    assert EXPECTED_FILES <= names
    assert res.mitigation  # seed 2 at this size detects the target
    assert {"mitigation.json", "loss_history.csv", "histograms.csv"} <= names
    metrics = json.loads((tmp_path / "r" / "metrics.json").read_text())
    assert metrics["config_hash"] == cfg.hash() and metrics["seed"] == 2
    assert {"vanilla", "mitigated", "strip", "checks"} <= set(metrics)
    for csv_name in ("divergence.csv", "detection_scores.csv"):
        first = (tmp_path / "r" / csv_name).read_text().splitlines()[0]
        assert first == f"# config_hash={cfg.hash()} seed=2"


def test_clean_run_is_pass_through(tmp_path):
    res = run_pipeline(ExperimentConfig(seed=0, poison_count=0, **SMALL), tmp_path / "c")
    assert res.outcome.is_clean
    assert res.mitigated.acc == res.vanilla.acc
    assert res.mitigation == {}
    assert res.checks["clean_passthrough"]


def test_pipeline_command_exit_status(tmp_path, capsys):
    flags = [f"--{k.replace('_', '-')}={v}" for k, v in SMALL.items()]
    code = cli.main(["pipeline", "--seed", "2", "--run-dir", str(tmp_path / "p"), *flags])
    out = capsys.readouterr().out
    assert code == 0
    assert "vanilla" in out and "mitigated" in out
