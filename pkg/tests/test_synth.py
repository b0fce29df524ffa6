import numpy as np
import pytest

from htscluster.errors import SchemaError, UsageError
from htscluster.hierarchy import check_coherence, dataset_fingerprint, validate_hierarchy
from htscluster.synth import (
    SynthConfig,
    generate_benchmark,
    labels_from_dict,
    labels_to_dict,
    simulate_arma,
)


def test_noise_free_series_settle_at_the_offset_mean():
    # mean of the recursion is c / (1 - 0.75 + 0.25)
    x = simulate_arma(100, 5.0, noise_std=0.0, seed=0)
    np.testing.assert_allclose(x, 10.0, atol=1e-6)
    np.testing.assert_array_equal(simulate_arma(20, 0.0, noise_std=0.0, seed=0), np.zeros(20))


def test_simulation_follows_the_recursion():
    T = 30
    x = simulate_arma(T, 2.0, noise_std=0.5, burnin=0, seed=9)
    e = 0.5 * np.random.default_rng(9).standard_normal(T)
    ref = np.zeros(T)
    for t in range(T):
        ref[t] = 2.0 + e[t]
        if t >= 1:
            ref[t] += 0.75 * ref[t - 1] + 0.65 * e[t - 1]
        if t >= 2:
            ref[t] += -0.25 * ref[t - 2] + 0.35 * e[t - 2]
    np.testing.assert_allclose(x, ref, rtol=1e-12, atol=1e-12)


def test_simulation_is_deterministic():
    a = simulate_arma(50, 1.0, rng=np.random.default_rng(4))
    b = simulate_arma(50, 1.0, rng=np.random.default_rng(4))
    assert np.array_equal(a, b)
    assert a.shape == (50,)
    with pytest.raises(UsageError):
        simulate_arma(0, 1.0)


def test_cluster_means_follow_offsets():
    means = [np.mean(simulate_arma(2000, c, seed=1)) for c in (0.0, 8.0)]
    assert abs(means[0]) < 1.0
    assert abs(means[1] - 16.0) < 1.0


def test_default_two_level_benchmark_shape():
    bench = generate_benchmark(SynthConfig.preset("two-level", length_range=(20, 24)))
    ds = bench.dataset
    assert ds.N == 120 and ds.levels == 2
    assert sum(inst.hierarchy.m for inst in ds.instances) == 480
    assert set(bench.labels) == {1, 2}
    assert len(bench.labels[2]) == 480
    counts = np.bincount(list(bench.labels[1].values()))
    assert counts.tolist() == [30, 30, 30, 30]


@pytest.mark.parametrize("preset,levels", [("two-level", 2), ("multilevel", 4), ("moderate", 2)])
def test_dataset_level_count_is_tree_depth(preset, levels):
    bench = generate_benchmark(SynthConfig.preset(preset, instances_per_cluster=1, length_range=(8, 9)))
    assert bench.dataset.levels == levels
    assert sorted(bench.labels) == list(range(1, levels + 1))


def test_benchmark_instances_are_valid_and_coherent(three_level_benchmark):
    ds = three_level_benchmark.dataset
    for inst in ds.instances:
        assert validate_hierarchy(inst.hierarchy).ok
        assert check_coherence(inst, tol=0.0).ok
        assert 10 <= inst.length <= 12
    # every node of an instance carries that instance's cluster
    for level, labels in three_level_benchmark.labels.items():
        by_instance = {}
        for key, cluster in labels.items():
            by_instance.setdefault(key.split("/")[0], set()).add(cluster)
        assert all(len(c) == 1 for c in by_instance.values())


def test_instance_order_is_shuffled_across_clusters(small_benchmark):
    top = [small_benchmark.labels[1][inst.node_key(0)] for inst in small_benchmark.dataset.instances]
    assert sorted(top) == [0, 0, 0, 1, 1, 1]
    assert [inst.id for inst in small_benchmark.dataset.instances] == [f"hts{i}" for i in range(6)]


def test_single_cluster_benchmark():
    bench = generate_benchmark(SynthConfig(offsets=(3.0,), instances_per_cluster=4, length_range=(5, 6), branching=(2,)))
    assert set(bench.labels[1].values()) == {0}


def test_noise_free_bottoms_are_identical():
    bench = generate_benchmark(
        SynthConfig(offsets=(0.0, 4.0), instances_per_cluster=2, length_range=(8, 8), branching=(3,), noise_std=0.0)
    )
    for inst in bench.dataset.instances:
        bottoms = inst.bottom_values()
        assert all(np.array_equal(b, bottoms[0]) for b in bottoms)


def test_same_seed_same_dataset_any_thread_count():
    cfg = SynthConfig(offsets=(0.0, 5.0), instances_per_cluster=3, length_range=(6, 9), branching=(2, 2), seed=12)
    a = generate_benchmark(cfg)
    b = generate_benchmark(SynthConfig(**{**cfg.__dict__, "threads": 3}))
    assert dataset_fingerprint(a.dataset) == dataset_fingerprint(b.dataset)
    assert a.labels == b.labels
    c = generate_benchmark(SynthConfig(**{**cfg.__dict__, "seed": 13}))
    assert dataset_fingerprint(a.dataset) != dataset_fingerprint(c.dataset)


def test_config_validation():
    with pytest.raises(UsageError):
        SynthConfig(offsets=())
    with pytest.raises(UsageError):
        SynthConfig(offsets=(1.0, 1.0))
    with pytest.raises(UsageError):
        SynthConfig(length_range=(10, 5))
    with pytest.raises(UsageError):
        SynthConfig(branching=(2, 0))
    with pytest.raises(UsageError):
        SynthConfig.preset("huge")
    assert SynthConfig.preset("moderate").offsets == (0.0, 3.0, 6.0, 9.0)
    assert SynthConfig.preset("multilevel").levels == 4


def test_labels_round_trip(small_benchmark):
    obj = labels_to_dict(small_benchmark.labels)
    assert list(obj) == ["1", "2"]
    assert labels_from_dict(obj) == small_benchmark.labels
    with pytest.raises(SchemaError):
        labels_from_dict([1, 2])
