"""Comparison pipelines sharing the clustering engine and model type.

``soft-dtw`` clusters every level independently on its raw series. ``concat`` clusters
every aggregated node by the concatenation of its bottom series. Neither lifts measures.
"""

from __future__ import annotations

import logging
import time
from typing import Callable, Dict

from .cluster import (
    ClusterConfig,
    LevelClusterModel,
    MultiLevelClusterModel,
    resolve_k,
    postprocess_level,
    cluster_bottom_level,
    cluster_hts,
    concat_series,
    two_level_alternating,
)
from .errors import HtsError, UsageError
from .hierarchy import HtsDataset, level_series
from .runs import make_rng
from .transport import AtomRegistry

logger = logging.getLogger(__name__)


def _cluster_levels(ds: HtsDataset, cfg: ClusterConfig, method: str, points_of) -> MultiLevelClusterModel:
    registry = AtomRegistry(cfg.sdtw)
    models: Dict[int, LevelClusterModel] = {}
    timings: Dict[int, float] = {}
    for level in range(ds.levels, 0, -1):
        start = time.perf_counter()
        points, representation = points_of(level)
        try:
            model = cluster_bottom_level(
                points, resolve_k(cfg, level, len(points)), cfg, registry,
                make_rng(cfg.seed, "init", level), ds.node_keys(level), level, representation,
            )
            if cfg.postprocess:
                model = postprocess_level(model, points, cfg, registry, level)
        except HtsError as exc:
            raise exc.annotate(level=level, method=method)
        models[level] = model
        timings[level] = time.perf_counter() - start
    return MultiLevelClusterModel(models, cfg, method, timings)


def cluster_levelwise_independent(ds: HtsDataset, cfg: ClusterConfig) -> MultiLevelClusterModel:
    """Soft-DTW K-means on the raw series of every level, levels independent."""
    return _cluster_levels(
        ds, cfg, "soft-dtw", lambda level: ([e.series for e in level_series(ds, level)], "series")
    )


def cluster_concat(ds: HtsDataset, cfg: ClusterConfig) -> MultiLevelClusterModel:
    """Soft-DTW K-means on bottom series and on concatenated descendants above."""

    def points_of(level: int):
        if level == ds.levels:
            return [e.series for e in level_series(ds, level)], "series"
        return concat_series(ds, level), "concat"

    return _cluster_levels(ds, cfg, "concat", points_of)


def _two_level(ds: HtsDataset, cfg: ClusterConfig) -> MultiLevelClusterModel:
    return two_level_alternating(ds, cfg.k_for(1), cfg.k_for(2), cfg)


METHODS: Dict[str, Callable[[HtsDataset, ClusterConfig], MultiLevelClusterModel]] = {
    "hts-cluster": cluster_hts,
    "two-level-alt": _two_level,
    "soft-dtw": cluster_levelwise_independent,
    "concat": cluster_concat,
}


def run_method(name: str, ds: HtsDataset, cfg: ClusterConfig) -> MultiLevelClusterModel:
    if name not in METHODS:
        raise UsageError(f"unknown method '{name}'; choose from {sorted(METHODS)}")
    logger.info(f"Running {name} on {ds.N} instances with {ds.levels} levels")
    return METHODS[name](ds, cfg)
