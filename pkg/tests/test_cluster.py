import copy
import logging

import numpy as np
import pytest

from htscluster.cluster import (
    MERGE_EPS_FLOOR,
    ClusterConfig,
    LevelClusterModel,
    MultiLevelClusterModel,
    cluster_aggregated_level,
    cluster_bottom_level,
    cluster_hts,
    concat_series,
    default_merge_eps,
    kmeanspp,
    level_points,
    lift_to_measures,
    lloyd,
    make_space,
    merge_remove_postprocess,
    objective_value,
    two_level_alternating,
)
from htscluster.errors import ClusterCollapseError, InvariantError, UsageError
from htscluster.hierarchy import HtsDataset, TimeSeries, level_series
from htscluster.metrics import Partition, ari
from htscluster.modelio import model_to_dict
from htscluster.transport import AtomRegistry


def nonincreasing(trace, slack=1e-10):
    return all(b <= a + slack for a, b in zip(trace, trace[1:]))


def level_ari(model, truth, level):
    return ari(Partition(truth[level]), Partition(model.per_level[level].label_map()))


@pytest.fixture(scope="module")
def two_cluster_model(small_benchmark):
    cfg = ClusterConfig(k_per_level={1: 2, 2: 2}, seed=0)
    return cluster_hts(small_benchmark.dataset, cfg)


def test_config_validation():
    with pytest.raises(UsageError):
        ClusterConfig(k_per_level={1: 0})
    with pytest.raises(UsageError):
        ClusterConfig(fuzziness=1.0)
    with pytest.raises(UsageError):
        ClusterConfig(remove_eps=1.5)
    with pytest.raises(UsageError):
        ClusterConfig().k_for(1)
    assert ClusterConfig(k_per_level={"2": "3"}).k_for(2) == 3


def test_recovers_well_separated_clusters(two_cluster_model, small_benchmark):
    for level in (1, 2):
        assert level_ari(two_cluster_model, small_benchmark.labels, level) >= 0.9


def test_model_shape(two_cluster_model, small_benchmark):
    ds = small_benchmark.dataset
    bottom, top = two_cluster_model.per_level[2], two_cluster_model.per_level[1]
    assert bottom.kind == "series" and top.kind == "measure"
    assert bottom.keys == ds.node_keys(2)
    assert top.keys == ds.node_keys(1)
    assert len(bottom.labels) == 2 * ds.N
    assert len(top.raw_means) == top.k
    assert set(two_cluster_model.timings) == {1, 2}
    assert float(np.sum(top.cluster_weights())) == pytest.approx(1.0)


def test_loss_traces_are_nonincreasing(two_cluster_model, three_level_benchmark):
    for lm in two_cluster_model.per_level.values():
        assert nonincreasing(lm.loss_trace)
    cfg = ClusterConfig(k_per_level={1: 2, 2: 2, 3: 2}, seed=1)
    model = cluster_hts(three_level_benchmark.dataset, cfg)
    assert sorted(model.per_level) == [1, 2, 3]
    for lm in model.per_level.values():
        assert nonincreasing(lm.loss_trace)
        assert lm.loss_trace[-1] >= -1e-9


def test_objective_matches_final_losses(two_cluster_model, small_benchmark):
    report = objective_value(small_benchmark.dataset, two_cluster_model)
    for level, lm in two_cluster_model.per_level.items():
        assert report.per_level[level] == pytest.approx(lm.loss_trace[-1], rel=1e-8, abs=1e-8)
    assert report.total == pytest.approx(sum(report.per_level.values()), rel=1e-12)


def test_same_seed_same_model(small_benchmark):
    cfg = ClusterConfig(k_per_level={1: 2, 2: 2}, seed=7)
    a = model_to_dict(cluster_hts(small_benchmark.dataset, cfg))
    b = model_to_dict(cluster_hts(small_benchmark.dataset, cfg))
    assert a == b


def test_thread_count_does_not_change_results(small_benchmark):
    one = cluster_hts(small_benchmark.dataset, ClusterConfig(k_per_level={1: 2, 2: 2}, seed=2, threads=1))
    two = cluster_hts(small_benchmark.dataset, ClusterConfig(k_per_level={1: 2, 2: 2}, seed=2, threads=2))
    assert model_to_dict(one) == model_to_dict(two)


def test_k_bounds(small_benchmark):
    series = [e.series for e in level_series(small_benchmark.dataset, 2)][:3]
    with pytest.raises(UsageError):
        cluster_bottom_level(series, 4)
    with pytest.raises(UsageError):
        cluster_bottom_level(series, 0)


def test_k_above_series_count_is_clamped_in_the_pipeline(small_benchmark, caplog):
    ds = small_benchmark.dataset
    with caplog.at_level(logging.WARNING, logger="htscluster.cluster"):
        model = cluster_hts(ds, ClusterConfig(k_per_level={1: ds.N + 5, 2: 2}))
    assert model.per_level[1].k <= ds.N
    assert "clamped" in caplog.text


def test_one_cluster_per_series_has_zero_loss(small_benchmark):
    series = [e.series for e in level_series(small_benchmark.dataset, 2)][:4]
    model = cluster_bottom_level(series, 4, ClusterConfig(seed=0))
    assert sorted(model.labels.tolist()) == [0, 1, 2, 3]
    assert model.loss_trace[-1] == 0.0
    assert model.converged


def test_single_cluster(small_benchmark):
    series = [e.series for e in level_series(small_benchmark.dataset, 2)]
    model = cluster_bottom_level(series, 1, ClusterConfig(seed=0))
    assert set(model.labels.tolist()) == {0}
    assert nonincreasing(model.loss_trace)


def test_empty_cluster_is_reseeded():
    points = [TimeSeries("a", [0.0, 0.0, 0.0]), TimeSeries("b", [0.1, 0.0, 0.0]), TimeSeries("c", [5.0, 5.0, 5.0])]
    cfg = ClusterConfig()
    space = make_space("series", cfg, AtomRegistry(cfg.sdtw))
    centers = [TimeSeries("m0", points[0].values), TimeSeries("m1", points[0].values)]
    res = lloyd(space, points, centers, 5, 0, np.random.default_rng(0), "test")
    reseeds = [e for e in res.events if e["kind"] == "reseed"]
    assert reseeds and reseeds[0]["point"] == 2
    assert res.labels[2] != res.labels[0]
    assert res.labels[0] == res.labels[1]
    assert nonincreasing(res.loss_trace)


def test_kmeanspp_picks_distinct_points():
    points = [TimeSeries(str(i), [float(i), float(i)]) for i in range(6)]
    cfg = ClusterConfig()
    space = make_space("series", cfg, AtomRegistry(cfg.sdtw))
    seeds = kmeanspp(space, points, 6, np.random.default_rng(3), "s")
    assert len({tuple(s.values) for s in seeds}) == 6


def test_lifted_measures_weight_children_by_cluster(small_benchmark):
    ds = small_benchmark.dataset
    bottom = cluster_bottom_level(
        [e.series for e in level_series(ds, 2)], 2, ClusterConfig(seed=0), keys=ds.node_keys(2), level=2
    )
    measures = lift_to_measures(ds, 1, bottom)
    assert len(measures) == ds.N
    label_of = bottom.label_map()
    for inst, m in zip(ds.instances, measures):
        children = inst.hierarchy.children(0)
        counts = np.bincount([label_of[inst.node_key(c)] for c in children], minlength=2)
        expected = sorted(c / len(children) for c in counts if c > 0)
        assert sorted(m.weights.tolist()) == pytest.approx(expected)


def test_lifting_needs_every_child(small_benchmark):
    ds = small_benchmark.dataset
    bottom = cluster_bottom_level([e.series for e in level_series(ds, 2)], 2, ClusterConfig(seed=0))
    # keys default to series ids; drop one to break the map
    bottom.keys = bottom.keys[:-1] + ["nowhere"]
    with pytest.raises(InvariantError):
        lift_to_measures(ds, 1, bottom)


def test_aggregated_level_alone(small_benchmark):
    ds = small_benchmark.dataset
    cfg = ClusterConfig(seed=0)
    bottom = cluster_bottom_level([e.series for e in level_series(ds, 2)], 2, cfg, keys=ds.node_keys(2), level=2)
    top = cluster_aggregated_level(lift_to_measures(ds, 1, bottom), 2, cfg, keys=ds.node_keys(1), level=1, support_size=2)
    assert top.kind == "measure"
    assert len(top.barycenters) == top.k
    assert nonincreasing(top.loss_trace)


def test_concat_series_joins_bottom_children(tree_dataset):
    joined = concat_series(tree_dataset, 2)
    inst = tree_dataset.instances[0]
    assert [s.id for s in joined] == ["hts0/A", "hts0/B"]
    np.testing.assert_array_equal(
        joined[1].values, np.concatenate([inst.series[6].values, inst.series[7].values])
    )


def test_merge_with_large_eps_keeps_one_cluster(two_cluster_model, small_benchmark):
    bottom = two_cluster_model.per_level[2]
    points = [e.series for e in level_series(small_benchmark.dataset, 2)]
    merged = merge_remove_postprocess(bottom, points, merge_eps=1e12, remove_eps=0)
    assert merged.k == 1
    assert any(e["kind"] == "merge" for e in merged.events)


def test_nothing_to_do_returns_the_model(two_cluster_model, small_benchmark):
    bottom = two_cluster_model.per_level[2]
    points = [e.series for e in level_series(small_benchmark.dataset, 2)]
    assert merge_remove_postprocess(bottom, points, merge_eps=0.0, remove_eps=0) is bottom


def test_removing_every_cluster_is_an_error(two_cluster_model, small_benchmark):
    bottom = two_cluster_model.per_level[2]
    points = [e.series for e in level_series(small_benchmark.dataset, 2)]
    with pytest.raises(ClusterCollapseError) as info:
        merge_remove_postprocess(bottom, points, merge_eps=0.0, remove_eps=1000)
    assert info.value.exit_code == 2


def test_postprocess_in_pipeline(small_benchmark):
    cfg = ClusterConfig(k_per_level={1: 3, 2: 3}, seed=0, postprocess=True, remove_eps=1)
    model = cluster_hts(small_benchmark.dataset, cfg)
    for lm in model.per_level.values():
        assert 1 <= lm.k <= 3
        assert np.all(lm.sizes() > 0)
        assert nonincreasing(lm.loss_trace)


def test_two_level_alternating(small_benchmark):
    cfg = ClusterConfig(k_per_level={1: 2, 2: 2}, seed=0, max_outer_iter=10)
    model = two_level_alternating(small_benchmark.dataset, 2, 2, cfg)
    assert isinstance(model, MultiLevelClusterModel)
    assert model.method == "two-level-alt"
    assert nonincreasing(model.per_level[2].loss_trace)
    assert nonincreasing(model.per_level[1].loss_trace)
    assert len(model.per_level[1].raw_means) == model.per_level[1].k
    assert level_ari(model, small_benchmark.labels, 2) >= 0.9


def test_two_level_alternating_needs_two_levels(three_level_benchmark):
    with pytest.raises(UsageError):
        two_level_alternating(three_level_benchmark.dataset, 2, 2, ClusterConfig(k_per_level={1: 2, 2: 2}))


def test_instance_order_does_not_change_the_partition(small_benchmark):
    ds = small_benchmark.dataset
    cfg = ClusterConfig(k_per_level={1: 2, 2: 2}, seed=0)
    forward = cluster_hts(ds, cfg)
    backward = cluster_hts(HtsDataset(tuple(reversed(ds.instances)), ds.levels), cfg)
    for level in (1, 2):
        a = Partition(forward.per_level[level].label_map())
        b = Partition(backward.per_level[level].label_map())
        assert ari(a, b) == pytest.approx(1.0)


def test_no_single_reassignment_lowers_the_objective(two_cluster_model, small_benchmark):
    ds = small_benchmark.dataset
    cfg = two_cluster_model.config
    registry = AtomRegistry(cfg.sdtw)
    for level, lm in two_cluster_model.per_level.items():
        points = level_points(ds, level, lm.representation, two_cluster_model.per_level.get(level + 1))
        space = make_space(lm.kind, cfg, registry)
        D = space.distance_matrix(points, lm.centers)
        chosen = D[np.arange(len(points)), lm.labels]
        assert np.all(chosen <= D.min(axis=1) + 1e-12)


def test_moving_a_mean_off_its_optimum_raises_the_objective(two_cluster_model, small_benchmark):
    ds = small_benchmark.dataset
    before = objective_value(ds, two_cluster_model).per_level[2]
    bottom = copy.copy(two_cluster_model.per_level[2])
    first = bottom.raw_means[0]
    bottom.raw_means = [TimeSeries(first.id, first.values + 0.5)] + list(bottom.raw_means[1:])
    moved = MultiLevelClusterModel({**two_cluster_model.per_level, 2: bottom}, two_cluster_model.config)
    assert objective_value(ds, moved).per_level[2] > before


def test_identical_means_merge_under_default_eps():
    cfg = ClusterConfig(seed=0)
    points = [TimeSeries("a", [0.0, 1.0, 0.0, 1.0, 0.0]), TimeSeries("b", [0.1, 1.0, 0.0, 1.0, 0.1])]
    mean = TimeSeries("m0", [0.05, 1.0, 0.0, 1.0, 0.05])
    model = LevelClusterModel(2, "series", ["i/a", "i/b"], np.array([0, 1]),
                              raw_means=[mean, TimeSeries("m1", mean.values)])
    space = make_space("series", cfg, AtomRegistry(cfg.sdtw))
    assert default_merge_eps(space, model.centers) == MERGE_EPS_FLOOR

    merged = merge_remove_postprocess(model, points, remove_eps=0, cfg=cfg)
    assert merged.k == 1
    assert merged.labels.tolist() == [0, 0]
    assert [e["clusters"] for e in merged.events if e["kind"] == "merge"] == [[0, 1]]


def test_singleton_cluster_is_removed():
    sizes = [2, 2, 2, 2, 1]
    points, labels = [], []
    for c, size in enumerate(sizes):
        for j in range(size):
            points.append(TimeSeries(f"p{c}{j}", 10.0 * c + 0.1 * j + np.sin(np.arange(6.0))))
            labels.append(c)
    firsts = np.cumsum([0] + sizes[:-1])
    means = [TimeSeries(f"m{c}", points[i].values) for c, i in enumerate(firsts)]
    model = LevelClusterModel(2, "series", [p.id for p in points], np.array(labels), raw_means=means)

    out = merge_remove_postprocess(model, points, merge_eps=0.0, remove_eps=1, cfg=ClusterConfig(seed=0))
    assert out.k == 4
    assert np.bincount(out.labels).tolist() == [2, 2, 2, 3]
    assert any(e["kind"] == "remove" and e["clusters"] == [4] for e in out.events)


def test_two_level_alternating_keeps_the_outer_history(small_benchmark):
    cfg = ClusterConfig(k_per_level={1: 2, 2: 2}, seed=0, max_outer_iter=10)
    top = two_level_alternating(small_benchmark.dataset, 2, 2, cfg).per_level[1]
    assert len(top.outer_trace) == 1 + 3 * top.iterations
    assert top.outer_trace[-3:] == top.loss_trace
    outer = [e["top_loss"] for e in top.events if e["kind"] == "outer"]
    assert outer == top.outer_trace[3::3]
