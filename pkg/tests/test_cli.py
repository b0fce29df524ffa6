import json
import logging

import pandas as pd
import pytest

from htscluster.cli import main, overprovisioned_k, parse_k_per_level
from htscluster.errors import UsageError

SIM = ["--offsets", "0", "20", "--instances-per-cluster", "3", "--length-range", "12", "14",
       "--noise-std", "0.3", "--branching", "2", "--seed", "1"]


@pytest.fixture(autouse=True)
def reset_logging():
    yield
    logging.basicConfig(level=logging.WARNING, handlers=[logging.NullHandler()], force=True)


def last_error(capsys):
    lines = [l for l in capsys.readouterr().err.splitlines() if l.startswith("{")]
    return json.loads(lines[-1])


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", *SIM, "--output-dir", str(out), "-q"]) == 0
    return out


def test_simulate_writes_dataset_labels_and_manifest(sim_dir):
    assert sorted(p.name for p in sim_dir.iterdir()) == ["dataset.json", "labels.json", "manifest.json"]
    manifest = json.loads((sim_dir / "manifest.json").read_text())
    assert manifest["command"] == "simulate"
    assert manifest["seed"] == 1
    assert "threads" not in manifest["config"]
    labels = json.loads((sim_dir / "labels.json").read_text())
    assert len(labels["2"]) == 12


def test_simulate_is_reproducible(sim_dir, tmp_path):
    assert main(["simulate", *SIM, "--threads", "2", "--output-dir", str(tmp_path), "-q"]) == 0
    for name in ("dataset.json", "labels.json", "manifest.json"):
        assert (tmp_path / name).read_bytes() == (sim_dir / name).read_bytes()


def run_cluster(sim_dir, out, *extra):
    return main(["cluster", "--input", str(sim_dir / "dataset.json"), "--k-per-level", "2",
                 "--output-dir", str(out), "-q", *extra])


def test_cluster_outputs_are_byte_identical_across_runs_and_threads(sim_dir, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cluster(sim_dir, a, "--threads", "1") == 0
    assert run_cluster(sim_dir, b, "--threads", "2") == 0
    for name in ("model.json", "loss_trace.csv", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    trace = pd.read_csv(a / "loss_trace.csv")
    assert list(trace.columns) == ["level", "iteration", "loss"]
    assert set(trace.level) == {1, 2}


def test_evaluate_a_saved_model(sim_dir, tmp_path):
    assert run_cluster(sim_dir, tmp_path / "fit") == 0
    out = tmp_path / "eval"
    code = main(["evaluate", "--input", str(sim_dir / "dataset.json"), "--labels", str(sim_dir / "labels.json"),
                 "--model", str(tmp_path / "fit" / "model.json"), "--output-dir", str(out), "-q"])
    assert code == 0
    metrics = json.loads((out / "metrics.json").read_text())
    levels = metrics["methods"]["hts-cluster"]["levels"]
    assert set(levels) == {"1", "2"}
    assert levels["2"]["ari"] >= 0.9


def test_evaluate_compares_methods(sim_dir, tmp_path):
    code = main(["evaluate", "--input", str(sim_dir / "dataset.json"), "--labels", str(sim_dir / "labels.json"),
                 "--k-per-level", "l1=2,l2=2", "--methods", "hts-cluster", "soft-dtw", "--repeats", "2",
                 "--output-dir", str(tmp_path), "-q"])
    assert code == 0
    table = pd.read_csv(tmp_path / "metrics.csv")
    assert set(table.method) == {"hts-cluster", "soft-dtw"}
    assert {"nmi_mean", "nmi_std", "ari_mean", "seconds"} <= set(table.columns)
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["repeats"] == 2


def test_evaluate_overprovisions_k_from_labels(sim_dir, tmp_path):
    code = main(["evaluate", "--input", str(sim_dir / "dataset.json"), "--labels", str(sim_dir / "labels.json"),
                 "--output-dir", str(tmp_path), "-q"])
    assert code == 0
    config = json.loads((tmp_path / "manifest.json").read_text())["config"]["cluster"]
    assert config["k_per_level"] == {"1": 4, "2": 4}
    assert config["postprocess"] is True
    levels = json.loads((tmp_path / "metrics.json").read_text())["methods"]["hts-cluster"]["levels"]
    assert set(levels) == {"1", "2"}


def test_cluster_still_requires_k(sim_dir, tmp_path, capsys):
    code = main(["cluster", "--input", str(sim_dir / "dataset.json"), "--output-dir", str(tmp_path)])
    assert code == 1
    assert last_error(capsys)["error"] == "usage_error"


def test_incomplete_labels(sim_dir, tmp_path, capsys):
    labels = json.loads((sim_dir / "labels.json").read_text())
    labels["2"].pop(sorted(labels["2"])[0])
    path = tmp_path / "labels.json"
    path.write_text(json.dumps(labels))
    code = main(["evaluate", "--input", str(sim_dir / "dataset.json"), "--labels", str(path),
                 "--k-per-level", "2", "--output-dir", str(tmp_path / "out")])
    assert code == 1
    assert last_error(capsys)["error"] == "labels_incomplete"


def test_model_from_another_dataset(sim_dir, tmp_path, capsys):
    assert run_cluster(sim_dir, tmp_path / "fit") == 0
    other = tmp_path / "other"
    assert main(["simulate", *SIM[:-1], "2", "--output-dir", str(other), "-q"]) == 0
    code = main(["evaluate", "--input", str(other / "dataset.json"), "--labels", str(other / "labels.json"),
                 "--model", str(tmp_path / "fit" / "model.json"), "--output-dir", str(tmp_path / "out")])
    assert code == 1
    assert last_error(capsys)["error"] == "manifest_mismatch"


def test_usage_errors(sim_dir, tmp_path, capsys):
    assert main(["cluster", "--input", str(sim_dir / "dataset.json"), "--bogus"]) == 1
    assert last_error(capsys)["error"] == "usage_error"
    assert main(["cluster", "--k-per-level", "2"]) == 1
    assert "--input" in last_error(capsys)["message"]
    assert main(["cluster", "--input", str(tmp_path / "missing.json"), "--k-per-level", "2"]) == 1
    assert main(["cluster", "--input", str(sim_dir / "dataset.json"), "--k-per-level", "l1=x"]) == 1


def test_numerical_failure_exits_two(sim_dir, tmp_path, capsys):
    assert run_cluster(sim_dir, tmp_path, "--remove-eps", "1000") == 2
    assert last_error(capsys)["error"] == "cluster_collapse"


def test_config_file_supplies_defaults(sim_dir, tmp_path):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(f"input: {sim_dir / 'dataset.json'}\nk_per_level: 2\nseed: 5\ngamma: 0.5\n")
    assert main(["cluster", "--config", str(cfg), "--seed", "6", "--output-dir", str(tmp_path / "a"), "-q"]) == 0
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seed"] == 6
    assert manifest["config"]["sdtw"]["gamma"] == 0.5

    bad = tmp_path / "bad.yaml"
    bad.write_text("gama: 0.5\n")
    assert main(["cluster", "--config", str(bad), "--output-dir", str(tmp_path / "b")]) == 1


def test_forecast_with_per_series_baseline(sim_dir, tmp_path):
    code = main(["forecast", "--input", str(sim_dir / "dataset.json"), "--k-per-level", "2",
                 "--horizon", "3", "--baseline", "per-series", "--output-dir", str(tmp_path), "-q"])
    assert code == 0
    names = {p.name for p in tmp_path.iterdir()}
    assert {"forecasts.csv", "timing.json", "forecasts_per_series.csv", "timing_per_series.json",
            "manifest.json"} <= names
    clustered = json.loads((tmp_path / "timing.json").read_text())
    direct = json.loads((tmp_path / "timing_per_series.json").read_text())
    assert clustered["fits"] <= 4
    assert direct["fits"] == direct["nodes"] == 18
    frame = pd.read_csv(tmp_path / "forecasts.csv")
    assert len(frame) == 18 * 3


def test_parse_k_per_level():
    assert parse_k_per_level("l1=4,l2=8", 2) == {1: 4, 2: 8}
    assert parse_k_per_level("1=4,2=8", 2) == {1: 4, 2: 8}
    assert parse_k_per_level("3", 2) == {1: 3, 2: 3}
    assert parse_k_per_level({"l1": 2, "2": 5}, 2) == {1: 2, 2: 5}
    with pytest.raises(UsageError):
        parse_k_per_level("l1", 2)
    with pytest.raises(UsageError):
        parse_k_per_level(None, 2)


def test_overprovisioned_k():
    truth = {1: {"a": 0, "b": 1, "c": "1"}, 2: {"a/x": 0, "a/y": 2, "b/x": 1, "c/x": 1}}
    assert overprovisioned_k(truth) == {1: 4, 2: 6}
