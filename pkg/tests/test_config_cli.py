import csv
import json

import pytest
from hypothesis import given, settings, strategies as st

from bnalab import cli
from bnalab.config import ExperimentConfig, parse_flat
from bnalab.pipeline import SWEEP_HEADER, StageError, run_pipeline, run_sweep

SMALL = dict(train_per_class=150, test_per_class=60, train_epochs=8, re_steps=150, strip_blend_count=4)


def small_flags():
    return [f"--{k.replace('_', '-')}={v}" for k, v in SMALL.items()]


def test_flat_and_json_forms_agree(tmp_path):
    cfg = ExperimentConfig(seed=3, hidden=(16, 8), tau=200.0, divergence="js")
    (tmp_path / "c.txt").write_text("# comment line\n" + cfg.to_text())
    (tmp_path / "c.json").write_text(cfg.to_json())
    a, b = ExperimentConfig.load(tmp_path / "c.txt"), ExperimentConfig.load(tmp_path / "c.json")
    assert a == b == cfg
    assert a.hash() == cfg.hash()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(1, 1e4), st.sampled_from(["tv", "js", "kl"]),
       st.lists(st.integers(1, 64), min_size=1, max_size=3))
def test_text_round_trip(seed, tau, kind, hidden):
    cfg = ExperimentConfig(seed=seed, tau=tau, divergence=kind, hidden=tuple(hidden))
    assert ExperimentConfig.from_text(cfg.to_text()) == cfg


def test_hash_ignores_output_dir_only():
    base = ExperimentConfig()
    assert base.hash() == base.replace(output_dir="elsewhere").hash()
    assert base.hash() != base.replace(seed=1).hash()


def test_config_validation():
    with pytest.raises(KeyError):
        ExperimentConfig.from_dict({"nonsense": 1})
    with pytest.raises(ValueError):
        ExperimentConfig(divergence="hellinger")
    with pytest.raises(ValueError):
        ExperimentConfig(tau=0)
    with pytest.raises(ValueError):
        parse_flat("seed 3")


def test_pipeline_requires_seed(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["pipeline"])
    assert info.value.code == 2
    assert "--seed" in capsys.readouterr().err


def test_flags_override_config_file(tmp_path):
    (tmp_path / "c.txt").write_text("tau = 20\ndelta_b = 0.2\n")
    args = cli.make_parser().parse_args(["gen", "--out", "x", "--config", str(tmp_path / "c.txt"),
                                         "--delta-b", "0.15", "--set", "hidden=8,4"])
    cfg = cli.build_config(args)
    assert (cfg.tau, cfg.delta_b, cfg.hidden) == (20.0, 0.15, (8, 4))


def test_empty_sweep_writes_header_only(tmp_path):
    out = tmp_path / "s.csv"
    assert cli.main(["sweep", "--axis", "tau", "--values", "", "--out", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    assert rows == [SWEEP_HEADER]


def test_failed_sweep_cell_is_recorded(tmp_path):
    rows, results = run_sweep(ExperimentConfig(**SMALL), "divergence", ["hellinger"], tmp_path / "s.csv")
    assert rows[0][4] == "failed" and results == [None]


def test_stage_failure_is_tagged(tmp_path):
    with pytest.raises(StageError) as info:
        run_pipeline(ExperimentConfig(**{**SMALL, "poison_count": 10**6}), tmp_path / "r")
    assert info.value.stage == "generate"


def test_stage_by_stage_cli(tmp_path):
    f = small_flags()
    data, model = str(tmp_path / "d.csv"), str(tmp_path / "m.json")
    det, mit, ev = (str(tmp_path / n) for n in ("det.json", "mit.json", "eval.json"))
    assert cli.main(["gen", "--out", data, *f]) == 0
    assert cli.main(["train", "--data", data, "--out", model, *f]) == 0
    assert cli.main(["detect", "--data", data, "--model", model, "--out", det, "--scores", str(tmp_path / "s.csv"), *f]) == 0
    assert cli.main(["mitigate", "--data", data, "--model", model, "--detection", det, "--out", mit, *f]) == 0
    assert cli.main(["eval", "--data", data, "--model", model, "--detection", det, "--mitigation", mit, "--out", ev, *f]) == 0
    report = json.loads(open(ev).read())
    assert {"vanilla", "mitigated", "config_hash", "seed"} <= set(report)


def test_certify_command(tmp_path, capsys):
    out = tmp_path / "cert.json"
    assert cli.main(["certify", "--settings", "5", "--mc-samples", "0", "--out", str(out)]) == 0
    rep = json.loads(out.read_text())
    assert rep["certified"] == 5 and rep["planted"]["status"] == "assumptions unmet"
