import pytest

from htscluster.baselines import METHODS, run_method
from htscluster.cluster import ClusterConfig
from htscluster.errors import UsageError
from htscluster.metrics import Partition, ari


CFG = ClusterConfig(k_per_level={1: 2, 2: 2}, seed=0)


@pytest.mark.parametrize("method", sorted(METHODS))
def test_every_method_returns_a_full_model(method, small_benchmark):
    ds = small_benchmark.dataset
    model = run_method(method, ds, CFG)
    assert model.method == method
    assert sorted(model.per_level) == [1, 2]
    for level, lm in model.per_level.items():
        assert lm.keys == ds.node_keys(level)
        assert len(lm.labels) == len(lm.keys)
        assert all(b <= a + 1e-10 for a, b in zip(lm.loss_trace, lm.loss_trace[1:]))


def test_concat_represents_aggregates_by_their_bottoms(small_benchmark):
    model = run_method("concat", small_benchmark.dataset, CFG)
    assert model.per_level[2].representation == "series"
    assert model.per_level[1].representation == "concat"
    assert model.per_level[1].kind == "series"
    # concatenated means span every bottom child
    assert len(model.per_level[1].raw_means[0]) > len(model.per_level[2].raw_means[0])


def test_independent_levels_use_raw_series(small_benchmark):
    model = run_method("soft-dtw", small_benchmark.dataset, CFG)
    for lm in model.per_level.values():
        assert lm.kind == "series" and lm.representation == "series"
    truth = small_benchmark.labels
    assert ari(Partition(truth[2]), Partition(model.per_level[2].label_map())) >= 0.9


def test_unknown_method(small_benchmark):
    with pytest.raises(UsageError):
        run_method("kmeans", small_benchmark.dataset, CFG)
