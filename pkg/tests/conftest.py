import numpy as np
import pytest

from htscluster.hierarchy import Hierarchy, HtsDataset, instance_from_bottom
from htscluster.synth import SynthConfig, generate_benchmark

# Total -> A, B; A -> AA, AB, AC; B -> BA, BB
TREE_IDS = ["T", "A", "B", "AA", "AB", "AC", "BA", "BB"]
TREE_LEVELS = [1, 2, 2, 3, 3, 3, 3, 3]
TREE_PARENTS = [None, 0, 0, 1, 1, 1, 2, 2]


@pytest.fixture
def tree_hierarchy():
    return Hierarchy.from_parents(TREE_IDS, TREE_LEVELS, TREE_PARENTS)


@pytest.fixture
def tree_instance(tree_hierarchy):
    rng = np.random.default_rng(11)
    bottoms = [rng.normal(size=9) for _ in range(tree_hierarchy.m)]
    return instance_from_bottom("hts0", tree_hierarchy, bottoms)


@pytest.fixture
def tree_dataset(tree_instance):
    return HtsDataset((tree_instance,))


@pytest.fixture(scope="session")
def small_benchmark():
    """Two well separated clusters, three instances each, two bottom series per instance."""
    cfg = SynthConfig(
        offsets=(0.0, 20.0),
        instances_per_cluster=3,
        length_range=(12, 16),
        branching=(2,),
        noise_std=0.3,
        seed=3,
    )
    return generate_benchmark(cfg)


@pytest.fixture(scope="session")
def three_level_benchmark():
    cfg = SynthConfig(
        offsets=(0.0, 20.0),
        instances_per_cluster=3,
        length_range=(10, 12),
        branching=(2, 2),
        noise_std=0.3,
        seed=5,
    )
    return generate_benchmark(cfg)
