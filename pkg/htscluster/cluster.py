"""Bottom-up clustering of hierarchical time series.

The bottom level is clustered by Soft-DTW K-means. Every aggregated node is then lifted
to the empirical measure of its children's cluster means and the level is clustered by
Wasserstein K-means with free-support barycenters as centers. Both loops run on one Lloyd
engine over a ``SeriesSpace`` or ``MeasureSpace``; every loss they record is a full
recomputation of the level objective, and centering updates that would raise it are
rejected, so the traces are nonincreasing.
"""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .errors import ClusterCollapseError, HtsError, InvariantError, UsageError
from .hierarchy import HtsDataset, TimeSeries, level_series
from .runs import make_rng, parallel_map
from .sdtw import OptimizerConfig, SdtwConfig, mean_length, medoid_init, sdtw_mean
from .spaces import MeasureSpace, SeriesSpace, cluster_cost, members_of
from .transport import (
    AtomRegistry,
    BarycenterConfig,
    DiscreteMeasure,
    OtConfig,
    barycenter_support_size,
)

logger = logging.getLogger(__name__)

MERGE_EPS_FLOOR = 1e-12


@dataclass(frozen=True)
class ClusterConfig:
    k_per_level: Mapping[int, int] = field(default_factory=dict)
    sdtw: SdtwConfig = SdtwConfig()
    ot: OtConfig = OtConfig()
    barycenter: BarycenterConfig = BarycenterConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    max_outer_iter: int = 100
    assignment_stable_threshold: int = 0
    seed: int = 0
    fuzziness: float = 2.0
    merge_eps: Optional[float] = None
    remove_eps: int = 1
    postprocess: bool = False
    calibration_ratio: float = 0.9
    support_size: Optional[int] = None
    threads: Optional[int] = 1

    def __post_init__(self):
        object.__setattr__(self, "k_per_level", {int(l): int(k) for l, k in dict(self.k_per_level).items()})
        for level, k in self.k_per_level.items():
            if k < 1:
                raise UsageError(f"k for level {level} must be >= 1, got {k}")
        if self.max_outer_iter < 0 or self.assignment_stable_threshold < 0:
            raise UsageError("max_outer_iter and assignment_stable_threshold must be >= 0")
        if self.merge_eps is not None and self.merge_eps < 0:
            raise UsageError(f"merge_eps must be >= 0, got {self.merge_eps}")
        if int(self.remove_eps) != self.remove_eps or self.remove_eps < 0:
            raise UsageError(f"remove_eps must be a nonnegative integer, got {self.remove_eps}")
        if not self.fuzziness > 1:
            raise UsageError(f"fuzziness must be > 1, got {self.fuzziness}")
        if self.support_size is not None and self.support_size < 1:
            raise UsageError("support_size must be >= 1")

    def k_for(self, level: int) -> int:
        if level not in self.k_per_level:
            raise UsageError(f"no k given for level {level}", {"level": level})
        return self.k_per_level[level]


@dataclass
class LevelClusterModel:
    level: int
    kind: str
    keys: List[str]
    labels: np.ndarray
    raw_means: List[TimeSeries] = field(default_factory=list)
    barycenters: List[DiscreteMeasure] = field(default_factory=list)
    loss_trace: List[float] = field(default_factory=list)
    events: List[Dict[str, Any]] = field(default_factory=list)
    representation: str = "series"
    converged: bool = False
    iterations: int = 0
    outer_trace: List[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.centers)

    @property
    def centers(self) -> List[Any]:
        return self.barycenters if self.kind == "measure" else self.raw_means

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)

    def cluster_weights(self) -> np.ndarray:
        """Cluster-size fractions (the weights of the level's measure over its centers)."""
        return self.sizes() / float(len(self.labels))

    def label_map(self) -> Dict[str, int]:
        return {k: int(v) for k, v in zip(self.keys, self.labels)}


@dataclass
class MultiLevelClusterModel:
    per_level: Dict[int, LevelClusterModel]
    config: ClusterConfig
    method: str = "hts-cluster"
    timings: Dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        levels = sorted(self.per_level)
        if levels != list(range(1, len(levels) + 1)):
            raise InvariantError(f"model levels {levels} are not 1..L")

    @property
    def levels(self) -> int:
        return max(self.per_level)


class LloydResult(NamedTuple):
    labels: np.ndarray
    centers: List[Any]
    loss_trace: List[float]
    events: List[Dict[str, Any]]
    iterations: int
    converged: bool


# ---------------------------------------------------------------------------
# Lloyd engine

def _loss(space, points: Sequence, centers: Sequence, labels: np.ndarray) -> float:
    total = 0.0
    for i, c in enumerate(labels):
        total += space.distance(points[i], centers[int(c)])
    return total


def _loss_from(D: np.ndarray, labels: np.ndarray) -> float:
    total = 0.0
    for i, c in enumerate(labels):
        total += float(D[i, int(c)])
    return total


def kmeanspp(space, points: Sequence, k: int, rng: np.random.Generator, name: str) -> List[Any]:
    """k-means++ seeding with the space's divergence as the sampling weight."""
    n = len(points)
    chosen = [int(rng.integers(n))]
    d = np.asarray(
        parallel_map(lambda p: space.distance(p, points[chosen[0]]), points, space.threads)
    )
    while len(chosen) < k:
        w = np.maximum(d, 0.0)
        w[chosen] = 0.0
        total = float(np.sum(w))
        if total > 0:
            idx = int(rng.choice(n, p=w / total))
        else:
            idx = next(i for i in range(n) if i not in chosen)
        chosen.append(idx)
        d_new = np.asarray(
            parallel_map(lambda p: space.distance(p, points[idx]), points, space.threads)
        )
        d = np.minimum(d, d_new)
    return [space.as_center(points[i], f"{name}/{j}") for j, i in enumerate(chosen)]


def _assign(space, points, centers, events, name, iteration) -> Tuple[np.ndarray, np.ndarray]:
    D = space.distance_matrix(points, centers)
    labels = np.argmin(D, axis=1).astype(np.int64)
    _reseed_empty(space, points, centers, D, labels, events, name, iteration)
    return labels, D


def _reseed_empty(space, points, centers, D, labels, events, name, iteration) -> None:
    """Move the point farthest from its centroid into each empty cluster, in place."""
    n, k = D.shape
    for c in range(k):
        if np.any(labels == c):
            continue
        sizes = np.bincount(labels, minlength=k)
        current = D[np.arange(n), labels]
        candidates = np.where(sizes[labels] > 1, current, -np.inf)
        far = int(np.argmax(candidates))
        if not candidates[far] > 0:
            events.append({"kind": "empty", "cluster": c, "iteration": iteration})
            continue
        centers[c] = space.as_center(points[far], f"{name}/{c}")
        D[:, c] = parallel_map(lambda p: space.distance(p, centers[c]), points, space.threads)
        labels[far] = c
        events.append({"kind": "reseed", "cluster": c, "point": far, "iteration": iteration})
        logger.warning(f"{name}: cluster {c} went empty, reseeded with point {far}")


def _center_step(space, points, labels, centers, rng, name, events, iteration) -> List[Any]:
    base = int(rng.integers(2 ** 32))

    def work(c: int):
        members = members_of(points, labels, c)
        current = centers[c]
        if not members:
            return current, None
        local = np.random.default_rng([base, iteration, c])
        cand = space.center(members, current, local, f"{name}/{c}")
        if cand is current:
            return current, None
        old = cluster_cost(space, members, current)
        new = cluster_cost(space, members, cand)
        if new <= old:
            return cand, None
        return current, {"kind": "reject", "cluster": c, "iteration": iteration,
                         "old": old, "new": new}

    out = parallel_map(work, range(len(centers)), space.threads)
    for _, event in out:
        if event is not None:
            events.append(event)
            logger.debug(f"{name}: rejected center update for cluster {event['cluster']}")
    return [c for c, _ in out]


def _compact(labels: np.ndarray, centers: List[Any], events: List[Dict[str, Any]]):
    keep = [c for c in range(len(centers)) if np.any(labels == c)]
    if len(keep) == len(centers):
        return labels, centers
    remap = np.full(len(centers), -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    dropped = [c for c in range(len(centers)) if c not in keep]
    events.append({"kind": "drop", "clusters": dropped})
    return remap[labels], [centers[c] for c in keep]


def lloyd(
    space,
    points: Sequence,
    centers: Sequence,
    max_outer_iter: int,
    stable_threshold: int,
    rng: np.random.Generator,
    name: str,
    labels0: Optional[np.ndarray] = None,
) -> LloydResult:
    """Alternate nearest-center assignment and re-centering.

    The loss is recorded after every assignment and every centering step. The loop stops
    when an assignment changes at most ``stable_threshold`` labels or after
    ``max_outer_iter`` centering steps.
    """
    centers = list(centers)
    labels = None if labels0 is None else np.asarray(labels0, dtype=np.int64).copy()
    trace: List[float] = []
    events: List[Dict[str, Any]] = []
    converged = False
    iteration = 0
    while True:
        new, D = _assign(space, points, centers, events, name, iteration)
        trace.append(_loss_from(D, new))
        stable = labels is not None and int(np.sum(new != labels)) <= stable_threshold
        labels = new
        if stable:
            converged = True
            break
        if iteration >= max_outer_iter:
            break
        iteration += 1
        centers = _center_step(space, points, labels, centers, rng, name, events, iteration)
        trace.append(_loss(space, points, centers, labels))
        logger.debug(f"{name}: iteration {iteration} loss {trace[-1]:.8g}")
    labels, centers = _compact(labels, centers, events)
    return LloydResult(labels, centers, trace, events, iteration, converged)


# ---------------------------------------------------------------------------
# spaces and level data

def make_space(kind: str, cfg: ClusterConfig, registry: AtomRegistry, support_size: int = 1):
    if kind == "measure":
        return MeasureSpace(cfg.sdtw, cfg.ot, cfg.barycenter, cfg.optimizer, registry,
                            support_size, cfg.threads)
    return SeriesSpace(cfg.sdtw, cfg.optimizer, registry, cfg.threads)


def level_support_size(ds: HtsDataset, level: int, cfg: ClusterConfig) -> int:
    if cfg.support_size is not None:
        return cfg.support_size
    counts = [
        len(ds.instances[e.instance].hierarchy.children(e.node)) for e in level_series(ds, level)
    ]
    return barycenter_support_size(counts)


def concat_series(ds: HtsDataset, level: int) -> List[TimeSeries]:
    """Each node at ``level`` as the left-to-right concatenation of its bottom series."""
    out = []
    for e in level_series(ds, level):
        inst = ds.instances[e.instance]
        parts = [inst.series[b].values for b in inst.hierarchy.descendants(e.node)]
        out.append(TimeSeries(inst.node_key(e.node), np.concatenate(parts)))
    return out


def level_points(ds: HtsDataset, level: int, representation: str,
                 lower: Optional[LevelClusterModel] = None) -> List[Any]:
    if representation == "measure":
        if lower is None:
            raise InvariantError(f"level {level} needs the level below to lift measures")
        return lift_to_measures(ds, level, lower)
    if representation == "concat":
        return concat_series(ds, level)
    return [e.series for e in level_series(ds, level)]


def _check_k(k: int, n: int, level: Optional[int]) -> None:
    if not 1 <= k <= n:
        raise UsageError(f"k={k} must lie in 1..{n} (number of series)", {"level": level, "k": k})


def resolve_k(cfg: ClusterConfig, level: int, n: int) -> int:
    k = cfg.k_for(level)
    if k > n:
        logger.warning(f"Level {level}: k={k} exceeds {n} series; clamped to {n}")
        k = n
    return k


# ---------------------------------------------------------------------------
# level operations

def cluster_bottom_level(
    series: Sequence[TimeSeries],
    k: int,
    cfg: ClusterConfig = ClusterConfig(),
    registry: Optional[AtomRegistry] = None,
    rng: Optional[np.random.Generator] = None,
    keys: Optional[Sequence[str]] = None,
    level: int = 0,
    representation: str = "series",
) -> LevelClusterModel:
    """Soft-DTW K-means over raw series."""
    _check_k(k, len(series), level)
    registry = registry if registry is not None else AtomRegistry(cfg.sdtw)
    rng = rng if rng is not None else make_rng(cfg.seed, "init", level)
    space = make_space("series", cfg, registry)
    name = f"L{level}/mu"
    seeds = kmeanspp(space, series, k, rng, name)
    res = lloyd(space, series, seeds, cfg.max_outer_iter, cfg.assignment_stable_threshold, rng, name)
    logger.info(
        f"Level {level}: {len(series)} series into {len(res.centers)} clusters, "
        f"{res.iterations} iterations, loss {res.loss_trace[-1]:.6g}"
    )
    return LevelClusterModel(
        level=level,
        kind="series",
        keys=list(keys) if keys is not None else [s.id for s in series],
        labels=res.labels,
        raw_means=list(res.centers),
        loss_trace=res.loss_trace,
        events=res.events,
        representation=representation,
        converged=res.converged,
        iterations=res.iterations,
    )


def lift_to_measures(ds: HtsDataset, level: int, lower: LevelClusterModel) -> List[DiscreteMeasure]:
    """Each node at ``level`` as the measure over its children's cluster means.

    The weight of a mean is the fraction of the node's children assigned to its cluster.
    """
    if not lower.raw_means:
        raise InvariantError(f"level {lower.level} has no cluster means to lift onto")
    label_of = lower.label_map()
    out = []
    for e in level_series(ds, level):
        inst = ds.instances[e.instance]
        counts = np.zeros(len(lower.raw_means))
        for child in inst.hierarchy.children(e.node):
            key = inst.node_key(child)
            if key not in label_of:
                raise InvariantError(
                    f"child {key} has no cluster at level {lower.level}",
                    {"node": key, "level": level},
                )
            counts[label_of[key]] += 1
        out.append(DiscreteMeasure.from_counts(lower.raw_means, counts))
    return out


def cluster_aggregated_level(
    measures: Sequence[DiscreteMeasure],
    k: int,
    cfg: ClusterConfig = ClusterConfig(),
    registry: Optional[AtomRegistry] = None,
    rng: Optional[np.random.Generator] = None,
    keys: Optional[Sequence[str]] = None,
    level: int = 0,
    support_size: int = 1,
) -> LevelClusterModel:
    """Wasserstein K-means over lifted measures with barycenter centers."""
    _check_k(k, len(measures), level)
    registry = registry if registry is not None else AtomRegistry(cfg.sdtw)
    rng = rng if rng is not None else make_rng(cfg.seed, "init", level)
    space = make_space("measure", cfg, registry, support_size)
    name = f"L{level}/nu"
    seeds = kmeanspp(space, measures, k, rng, name)
    res = lloyd(space, measures, seeds, cfg.max_outer_iter, cfg.assignment_stable_threshold, rng, name)
    logger.info(
        f"Level {level}: {len(measures)} measures into {len(res.centers)} clusters, "
        f"{res.iterations} iterations, loss {res.loss_trace[-1]:.6g}"
    )
    return LevelClusterModel(
        level=level,
        kind="measure",
        keys=list(keys) if keys is not None else [str(i) for i in range(len(measures))],
        labels=res.labels,
        barycenters=list(res.centers),
        loss_trace=res.loss_trace,
        events=res.events,
        representation="measure",
        converged=res.converged,
        iterations=res.iterations,
    )


def refine_level_means(
    ds: HtsDataset,
    level: int,
    model: LevelClusterModel,
    cfg: ClusterConfig = ClusterConfig(),
    rng: Optional[np.random.Generator] = None,
) -> List[TimeSeries]:
    """Soft-DTW mean of the original level series in every cluster."""
    entries = level_series(ds, level)
    rng = rng if rng is not None else make_rng(cfg.seed, "init", level)
    base = int(rng.integers(2 ** 32))

    def work(c: int) -> TimeSeries:
        members = [entries[i].series.values for i in np.flatnonzero(model.labels == c)]
        if not members:
            raise InvariantError(f"cluster {c} at level {level} is empty", {"level": level})
        local = np.random.default_rng([base, c])
        init = medoid_init(members, cfg.sdtw, local, length=mean_length([m.size for m in members]))
        result = sdtw_mean(members, init, cfg.sdtw, cfg.optimizer)
        return TimeSeries(f"L{level}/mean/{c}", result.values)

    return parallel_map(work, range(model.k), cfg.threads)


# ---------------------------------------------------------------------------
# post-processing

class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i: int, j: int) -> None:
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[max(ri, rj)] = min(ri, rj)


def default_merge_eps(space, centers: Sequence) -> float:
    """0.01 x the median pairwise distance between centers, at least ``MERGE_EPS_FLOOR``
    so coinciding centers always merge."""
    if len(centers) < 2:
        return 0.0
    d = [space.distance(centers[i], centers[j])
         for i in range(len(centers)) for j in range(i + 1, len(centers))]
    return max(0.01 * float(np.median(d)), MERGE_EPS_FLOOR)


def merge_remove_postprocess(
    model: LevelClusterModel,
    points: Sequence,
    merge_eps: Optional[float] = None,
    remove_eps: Optional[int] = None,
    cfg: ClusterConfig = ClusterConfig(),
    registry: Optional[AtomRegistry] = None,
    rng: Optional[np.random.Generator] = None,
    support_size: int = 1,
) -> LevelClusterModel:
    """Merge clusters whose centers are closer than ``merge_eps`` (transitively), remove
    clusters with at most ``remove_eps`` members, then fine-tune by assign, center, assign.

    Returns ``model`` itself when nothing was merged or removed.
    """
    registry = registry if registry is not None else AtomRegistry(cfg.sdtw)
    rng = rng if rng is not None else make_rng(cfg.seed, "init", model.level, 1)
    space = make_space(model.kind, cfg, registry, support_size)
    name = f"L{model.level}/{'nu' if model.kind == 'measure' else 'mu'}"
    centers = list(model.centers)
    labels = model.labels.copy()
    k = len(centers)
    eps_m = merge_eps if merge_eps is not None else cfg.merge_eps
    if eps_m is None:
        eps_m = default_merge_eps(space, centers)
    eps_r = int(remove_eps if remove_eps is not None else cfg.remove_eps)
    events: List[Dict[str, Any]] = []

    uf = _UnionFind(k)
    for i in range(k):
        for j in range(i + 1, k):
            if space.distance(centers[i], centers[j]) < eps_m:
                uf.union(i, j)
    groups: Dict[int, List[int]] = {}
    for c in range(k):
        groups.setdefault(uf.find(c), []).append(c)
    ordered = sorted(groups.values(), key=lambda g: g[0])
    sizes = np.bincount(labels, minlength=k)
    remap = np.empty(k, dtype=np.int64)
    merged_centers = []
    for new_index, group in enumerate(ordered):
        remap[group] = new_index
        if len(group) == 1:
            merged_centers.append(centers[group[0]])
            continue
        members = [points[i] for i in np.flatnonzero(np.isin(labels, group))]
        anchor = max(group, key=lambda c: (sizes[c], -c))
        merged_centers.append(space.center(members, centers[anchor], rng, f"{name}/{new_index}"))
        events.append({"kind": "merge", "clusters": group, "eps": eps_m})
        logger.info(f"{name}: merged clusters {group}")
    labels = remap[labels]
    centers = merged_centers

    sizes = np.bincount(labels, minlength=len(centers))
    removed = [c for c in range(len(centers)) if sizes[c] <= eps_r]
    if len(removed) == len(centers):
        raise ClusterCollapseError(
            f"epsilon_R={eps_r} too aggressive: every cluster would be removed",
            {"level": model.level, "remove_eps": eps_r},
        )
    if removed:
        survivors = [c for c in range(len(centers)) if c not in removed]
        orphans = np.flatnonzero(np.isin(labels, removed))
        D = space.distance_matrix([points[i] for i in orphans], [centers[c] for c in survivors])
        nearest = np.asarray(survivors)[np.argmin(D, axis=1)]
        labels[orphans] = nearest
        events.append({"kind": "remove", "clusters": removed, "reassigned": int(orphans.size)})
        logger.info(f"{name}: removed clusters {removed}, reassigned {orphans.size} members")
        labels, centers = _compact(labels, centers, [])

    if not events:
        return model
    fine = lloyd(space, points, centers, 1, 0, rng, name)
    out = copy.copy(model)
    out.labels = fine.labels
    out.loss_trace = fine.loss_trace
    out.events = model.events + events + fine.events
    if model.kind == "measure":
        out.barycenters = list(fine.centers)
        out.raw_means = []
    else:
        out.raw_means = list(fine.centers)
    return out


# ---------------------------------------------------------------------------
# pipelines

def postprocess_level(model, points, cfg, registry, level, support_size=1):
    return merge_remove_postprocess(
        model, points, cfg=cfg, registry=registry,
        rng=make_rng(cfg.seed, "init", level, 1), support_size=support_size,
    )


def cluster_hts(ds: HtsDataset, cfg: ClusterConfig) -> MultiLevelClusterModel:
    """Cluster every level bottom-up: K-means at the bottom, then lift, cluster and
    refine means at each aggregated level."""
    registry = AtomRegistry(cfg.sdtw)
    L = ds.levels
    models: Dict[int, LevelClusterModel] = {}
    timings: Dict[int, float] = {}

    start = time.perf_counter()
    try:
        entries = level_series(ds, L)
        series = [e.series for e in entries]
        model = cluster_bottom_level(
            series, resolve_k(cfg, L, len(series)), cfg, registry,
            make_rng(cfg.seed, "init", L), ds.node_keys(L), L,
        )
        if cfg.postprocess:
            model = postprocess_level(model, series, cfg, registry, L)
        models[L] = model
    except HtsError as exc:
        raise exc.annotate(level=L)
    timings[L] = time.perf_counter() - start

    for level in range(L - 1, 0, -1):
        start = time.perf_counter()
        try:
            measures = lift_to_measures(ds, level, models[level + 1])
            support = level_support_size(ds, level, cfg)
            model = cluster_aggregated_level(
                measures, resolve_k(cfg, level, len(measures)), cfg, registry,
                make_rng(cfg.seed, "init", level), ds.node_keys(level), level, support,
            )
            if cfg.postprocess:
                model = postprocess_level(model, measures, cfg, registry, level, support)
            model.raw_means = refine_level_means(ds, level, model, cfg, make_rng(cfg.seed, "init", level, 2))
            models[level] = model
        except HtsError as exc:
            raise exc.annotate(level=level)
        timings[level] = time.perf_counter() - start
    logger.info(f"Clustered {L} levels; registry holds {len(registry)} divergences")
    return MultiLevelClusterModel(models, cfg, "hts-cluster", timings)


def _lift_from(ds: HtsDataset, keys, labels, means) -> List[DiscreteMeasure]:
    tmp = LevelClusterModel(0, "series", list(keys), labels, raw_means=list(means))
    return lift_to_measures(ds, 1, tmp)


def _calibrate(space, points, keys, labels, centers, D, top_of_parent, ratio, rng, iteration):
    """Move boundary bottom series toward the cluster favored by their top-level group.

    Returns ``(labels, centers, loss)`` of the tentative state, or None if nothing moves.
    """
    n, k = D.shape
    if k < 2:
        return None
    order = np.argsort(D, axis=1, kind="stable")[:, :2]
    group = np.array([top_of_parent[key] for key in keys])
    counts: Dict[int, np.ndarray] = {}
    for i in range(n):
        counts.setdefault(int(group[i]), np.zeros(k, dtype=np.int64))[labels[i]] += 1
    new = labels.copy()
    for i in range(n):
        a, b = int(order[i, 0]), int(order[i, 1])
        d1, d2 = D[i, a], D[i, b]
        boundary = d2 <= 0 or d1 / d2 > ratio
        if not boundary:
            continue
        c = counts[int(group[i])].copy()
        c[labels[i]] -= 1
        if c[a] > c[b]:
            target = a
        elif c[b] > c[a]:
            target = b
        else:
            continue
        new[i] = target
    changed = np.flatnonzero(new != labels)
    if changed.size == 0 or len(np.unique(new)) < len(np.unique(labels)):
        return None
    affected = sorted(set(labels[changed].tolist()) | set(new[changed].tolist()))
    # clusters outside ``affected`` get no members and keep their centers
    only_affected = np.where(np.isin(new, affected), new, -1)
    cand = _center_step(space, points, only_affected, centers, rng, "calibration", [], iteration)
    return new, cand, _loss(space, points, cand, new)


def two_level_alternating(ds: HtsDataset, k1: int, k2: int, cfg: ClusterConfig) -> MultiLevelClusterModel:
    """Alternate one bottom step and one top step until both assignments are stable.

    ``k1`` is the number of top-level clusters and ``k2`` the number of bottom clusters.
    Between the bottom and the top step, boundary bottom series are calibrated against
    the previous top-level assignment; a calibration is kept only if it does not raise
    the bottom loss. The top-level ``loss_trace`` covers the last outer iteration, whose
    lifted measures are fixed; ``outer_trace`` holds the top-level losses of every outer
    iteration in order, starting from the initial assignment.
    """
    if ds.levels != 2:
        raise UsageError(f"two-level alternation needs L=2, dataset has L={ds.levels}")
    registry = AtomRegistry(cfg.sdtw)
    rng_b = make_rng(cfg.seed, "init", 2)
    rng_t = make_rng(cfg.seed, "init", 1)
    keys_b, keys_t = ds.node_keys(2), ds.node_keys(1)
    points_b = [e.series for e in level_series(ds, 2)]
    _check_k(k2, len(points_b), 2)
    _check_k(k1, len(keys_t), 1)
    support = level_support_size(ds, 1, cfg)
    bspace = make_space("series", cfg, registry)
    tspace = make_space("measure", cfg, registry, support)
    parent_key = {}
    for inst in ds.instances:
        h = inst.hierarchy
        for node in h.nodes_at_level(2):
            parent_key[inst.node_key(node)] = inst.node_key(h.parents[node])

    b_events: List[Dict[str, Any]] = []
    t_events: List[Dict[str, Any]] = []
    mu = kmeanspp(bspace, points_b, k2, rng_b, "L2/mu")
    zb, Db = _assign(bspace, points_b, mu, b_events, "L2/mu", 0)
    b_trace = [_loss_from(Db, zb)]
    measures = _lift_from(ds, keys_b, zb, mu)
    nu = kmeanspp(tspace, measures, k1, rng_t, "L1/nu")
    zt, Dt = _assign(tspace, measures, nu, t_events, "L1/nu", 0)
    t_trace = [_loss_from(Dt, zt)]
    t_history = list(t_trace)

    converged = False
    iteration = 0
    while iteration < cfg.max_outer_iter:
        iteration += 1
        zb_start, zt_start = zb.copy(), zt.copy()

        mu = _center_step(bspace, points_b, zb, mu, rng_b, "L2/mu", b_events, iteration)
        b_trace.append(_loss(bspace, points_b, mu, zb))
        zb, Db = _assign(bspace, points_b, mu, b_events, "L2/mu", iteration)
        b_trace.append(_loss_from(Db, zb))

        top_of_parent = dict(zip(keys_t, zt.tolist()))
        by_child = {key: top_of_parent[parent_key[key]] for key in keys_b}
        cal = _calibrate(bspace, points_b, keys_b, zb, mu, Db, by_child,
                         cfg.calibration_ratio, rng_b, iteration)
        if cal is not None:
            new_zb, new_mu, new_loss = cal
            if new_loss <= b_trace[-1]:
                moved = int(np.sum(new_zb != zb))
                zb, mu = new_zb, new_mu
                b_trace.append(new_loss)
                b_events.append({"kind": "calibration", "iteration": iteration, "moved": moved})
                logger.info(f"Calibration moved {moved} boundary series")
            else:
                b_events.append({"kind": "calibration_rejected", "iteration": iteration})
                logger.warning(f"Calibration at iteration {iteration} raised the loss; reverted")

        measures = _lift_from(ds, keys_b, zb, mu)
        t_trace = [_loss(tspace, measures, nu, zt)]
        nu = _center_step(tspace, measures, zt, nu, rng_t, "L1/nu", t_events, iteration)
        t_trace.append(_loss(tspace, measures, nu, zt))
        zt, Dt = _assign(tspace, measures, nu, t_events, "L1/nu", iteration)
        t_trace.append(_loss_from(Dt, zt))
        t_history.extend(t_trace)
        t_events.append({"kind": "outer", "iteration": iteration,
                         "bottom_loss": b_trace[-1], "top_loss": t_trace[-1]})
        logger.info(f"Outer iteration {iteration}: bottom {b_trace[-1]:.6g}, top {t_trace[-1]:.6g}")
        if np.array_equal(zb, zb_start) and np.array_equal(zt, zt_start):
            converged = True
            break

    zb, mu = _compact(zb, mu, b_events)
    zt, nu = _compact(zt, nu, t_events)
    bottom = LevelClusterModel(2, "series", keys_b, zb, raw_means=list(mu), loss_trace=b_trace,
                               events=b_events, converged=converged, iterations=iteration)
    top = LevelClusterModel(1, "measure", keys_t, zt, barycenters=list(nu), loss_trace=t_trace,
                            events=t_events, representation="measure",
                            converged=converged, iterations=iteration, outer_trace=t_history)
    if cfg.postprocess:
        bottom = postprocess_level(bottom, points_b, cfg, registry, 2)
        measures = lift_to_measures(ds, 1, bottom)
        res = lloyd(tspace, measures, top.barycenters, cfg.max_outer_iter,
                    cfg.assignment_stable_threshold, rng_t, "L1/nu")
        top.labels, top.barycenters, top.loss_trace = res.labels, list(res.centers), res.loss_trace
        top.events = top.events + res.events
        top = postprocess_level(top, measures, cfg, registry, 1, support)
    top.raw_means = refine_level_means(ds, 1, top, cfg, make_rng(cfg.seed, "init", 1, 2))
    return MultiLevelClusterModel({1: top, 2: bottom}, cfg, "two-level-alt")


# ---------------------------------------------------------------------------
# objective

class ObjectiveReport(NamedTuple):
    per_level: Dict[int, float]
    total: float


def objective_value(
    ds: HtsDataset,
    model: MultiLevelClusterModel,
    cfg: Optional[ClusterConfig] = None,
) -> ObjectiveReport:
    """Recompute every level loss from scratch and their sum.

    Series levels contribute sum_i D(x_i, mu_{z_i}); measure levels contribute
    sum_i W(lifted_i, nu_{z_i}) with measures lifted from the level below.
    """
    cfg = cfg if cfg is not None else model.config
    registry = AtomRegistry(cfg.sdtw)
    per_level: Dict[int, float] = {}
    for level in sorted(model.per_level, reverse=True):
        lm = model.per_level[level]
        lower = model.per_level.get(level + 1)
        points = level_points(ds, level, lm.representation, lower)
        support = level_support_size(ds, level, cfg) if lm.kind == "measure" else 1
        space = make_space(lm.kind, cfg, registry, support)
        per_level[level] = _loss(space, points, lm.centers, lm.labels)
    total = 0.0
    for level in sorted(per_level, reverse=True):
        total += per_level[level]
    return ObjectiveReport(per_level, total)
