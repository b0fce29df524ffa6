import json

import numpy as np
import pytest

from htscluster.cluster import ClusterConfig, cluster_hts
from htscluster.errors import ManifestMismatchError, ParseError, SchemaError, UsageError
from htscluster.modelio import (
    MODEL_FORMAT,
    config_from_dict,
    config_to_dict,
    load_model,
    model_to_dict,
    save_model,
)
from htscluster.sdtw import SdtwConfig


@pytest.fixture(scope="module")
def model(small_benchmark):
    return cluster_hts(small_benchmark.dataset, ClusterConfig(k_per_level={1: 2, 2: 2}, seed=0))


def test_round_trip_keeps_labels_and_centers(model, small_benchmark, tmp_path):
    path = tmp_path / "model.json"
    save_model(model, path, small_benchmark.dataset)
    loaded = load_model(path, small_benchmark.dataset)
    assert loaded.method == model.method
    assert loaded.config == model.config
    for level, lm in model.per_level.items():
        other = loaded.per_level[level]
        assert np.array_equal(other.labels, lm.labels)
        assert other.keys == lm.keys
        assert other.loss_trace == lm.loss_trace
        for a, b in zip(other.raw_means, lm.raw_means):
            assert np.array_equal(a.values, b.values)
        for a, b in zip(other.barycenters, lm.barycenters):
            assert np.array_equal(a.weights, b.weights)
    assert model_to_dict(loaded) == model_to_dict(model)


def test_equal_models_write_equal_bytes(model, small_benchmark, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    save_model(model, a, small_benchmark.dataset)
    save_model(model, b, small_benchmark.dataset)
    assert a.read_bytes() == b.read_bytes()
    obj = json.loads(a.read_text())
    assert obj["format"] == MODEL_FORMAT
    assert "threads" not in obj["config"]
    assert "timings" not in obj


def test_model_from_another_dataset_is_refused(model, small_benchmark, three_level_benchmark, tmp_path):
    path = tmp_path / "model.json"
    save_model(model, path, small_benchmark.dataset)
    with pytest.raises(ManifestMismatchError) as info:
        load_model(path, three_level_benchmark.dataset)
    assert info.value.exit_code == 1
    assert load_model(path).per_level[1].k == model.per_level[1].k


def test_bad_model_files(tmp_path):
    path = tmp_path / "model.json"
    path.write_text('{"format": "something-else"}')
    with pytest.raises(SchemaError):
        load_model(path)
    path.write_text("{")
    with pytest.raises(ParseError):
        load_model(path)
    with pytest.raises(UsageError):
        load_model(tmp_path / "missing.json")


def test_config_dicts():
    cfg = ClusterConfig(k_per_level={1: 3, 2: 5}, sdtw=SdtwConfig(0.5, 2), seed=4, threads=8)
    obj = config_to_dict(cfg)
    assert obj["k_per_level"] == {"1": 3, "2": 5}
    assert "threads" not in obj
    back = config_from_dict(obj)
    assert back.sdtw == cfg.sdtw and back.k_per_level == cfg.k_per_level and back.seed == 4

    partial = config_from_dict({"sdtw": {"gamma": 0.1}, "k_per_level": {"1": 2}})
    assert partial.sdtw.gamma == 0.1 and partial.max_outer_iter == 100

    with pytest.raises(UsageError):
        config_from_dict({"gama": 1.0})
    with pytest.raises(UsageError):
        config_from_dict({"sdtw": {"gama": 1.0}})
    with pytest.raises(SchemaError):
        config_from_dict([1])
