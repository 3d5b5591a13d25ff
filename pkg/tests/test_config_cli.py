import csv
import json

import pytest

from trips.cli import main
from trips.config import ExperimentConfig, from_dict, load_config, loads
from trips.errors import ConfigError
from trips.evaluation import aggregate_rotations, read_metrics_csv
from trips.runner import OUTPUT_ROOT_ENV

FAST = ["train.max_iters=20", "train.val_period=10", "synthetic.samples_per_cell=12",
        'scenario.test_domains=["d0"]', "output.workers=1"]


def run_args(out, extra=()):
    args = ["run", "--out", str(out)]
    for item in [*FAST, *extra]:
        args += ["--set", item]
    return args


def test_default_config_is_valid():
    cfg = load_config()
    assert cfg.losses.lambda_dist == 30.0 and cfg.drift.sigma_bandwidth == 0.5
    assert cfg.train.val_period == 50


def test_config_round_trip():
    cfg = load_config(overrides=["train.lr=0.5", "scenario.seeds=[1, 2]"])
    text = cfg.dumps()
    again = from_dict(loads(text))
    assert again == cfg and again.dumps() == text


@pytest.mark.parametrize("doc", [
    {"nonsense": {}},
    {"train": {"learning_rate": 1.0}},
    {"train": {"max_iters": "many"}},
    {"drift": {"eta": 2.0}},
    {"eval": {"protocol": "whenever"}},
])
def test_config_rejects_bad_documents(doc):
    with pytest.raises(ConfigError):
        from_dict(doc)


def test_int_promoted_to_float():
    assert from_dict({"train": {"lr": 1}}).train.lr == 1.0


def test_bad_override_syntax():
    with pytest.raises(ConfigError):
        load_config(overrides=["lr=3"])


def test_run_writes_artifacts_and_is_deterministic(tmp_path, capsys):
    assert main(run_args(tmp_path / "a", ["train.max_iters=10"])) == 0
    assert main(run_args(tmp_path / "b", ["train.max_iters=10"])) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    for name in ("manifest.json", "metrics.csv", "summary.json", "config.toml"):
        assert (a / name).exists()
    assert (a / "seed_0" / "d0" / "step_2" / "checkpoint.npz").exists()
    assert (a / "seed_0" / "d0" / "step_1" / "curve.csv").exists()
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["config"]["train"]["max_iters"] == 10
    audit = manifest["rotations"][0]["audit"]
    assert audit["test_domain_samples"] == 0 and audit["pseudo_size_mismatches"] == 0


def test_run_config_error_exit(tmp_path, capsys):
    assert main(run_args(tmp_path, ["train.bogus=1"])) == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("error:") and "\n" not in err


def test_run_runtime_error_exit(tmp_path, capsys):
    assert main(run_args(tmp_path, [f'scenario.data="{tmp_path}/missing.csv"'])) == 2


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    monkeypatch.chdir(tmp_path)
    args = ["run"]
    for item in [*FAST, "train.max_iters=10", 'output.dir="rel"']:
        args += ["--set", item]
    assert main(args) == 0
    assert (tmp_path / "rel" / "metrics.csv").exists()


def test_report_matches_csv(tmp_path, capsys):
    out = tmp_path / "run"
    extra = ['scenario.test_domains=["d0", "d2"]', "train.max_iters=10"]
    assert main(run_args(out, extra)) == 0
    capsys.readouterr()
    assert main(["report", str(out), "--curves"]) == 0
    text = capsys.readouterr().out
    agg = aggregate_rotations(read_metrics_csv(out / "metrics.csv")[0])
    for t, avg in enumerate(agg.step_average):
        assert f"{100 * avg:6.2f}" in text
    with open(out / "plots" / "steps_seed_0.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["avg_acc"]) for r in rows] == agg.step_average


def test_report_missing_and_truncated(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == 1
    (tmp_path / "metrics.csv").write_text("seed,step,test_domain,avg_acc,harm_acc,n_classes,old_acc,new_acc\n0,0,d0,")
    assert main(["report", str(tmp_path)]) == 1
    assert "metrics.csv" in capsys.readouterr().err


def test_gradcheck_cli(capsys):
    assert main(["gradcheck", "--instances", "2"]) == 0
    out = capsys.readouterr().out
    for name in ("classification", "distillation", "trips_base", "pseudo", "trips_incr", "total"):
        assert name in out


def test_gradcheck_cli_corrupted(capsys):
    assert main(["gradcheck", "--instances", "1", "--corrupt", "distillation"]) == 3
    err = capsys.readouterr().err
    assert "distillation" in err and "[" in err


def test_samplecheck_cli(capsys):
    assert main(["samplecheck", "--dim", "4", "--draws", "100000", "--seed", "1"]) == 0
    first = capsys.readouterr().out
    main(["samplecheck", "--dim", "4", "--draws", "100000", "--seed", "1"])
    assert capsys.readouterr().out == first


def test_samplecheck_refuses_few_draws():
    with pytest.raises(SystemExit) as info:
        main(["samplecheck", "--draws", "10"])
    assert info.value.code == 2


def test_synth_cli(tmp_path):
    out = tmp_path / "d.csv"
    assert main(["synth", "--out", str(out), "--set", "synthetic.samples_per_cell=2"]) == 0
    assert out.read_text().startswith("f0,")


def test_experiment_config_sections():
    assert set(ExperimentConfig().to_dict()) == {"scenario", "synthetic", "train", "losses",
                                                 "drift", "eval", "output"}
