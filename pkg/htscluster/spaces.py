"""Point spaces the clustering engine runs in.

A space knows how far a point is from a center, how to turn a point into a center and
how to re-center a set of members. ``SeriesSpace`` works on raw series under the Soft-DTW
divergence; ``MeasureSpace`` works on lifted measures under the transport cost.
"""

from __future__ import annotations

import logging
from typing import List, Optional, Sequence

import numpy as np

from .hierarchy import TimeSeries
from .runs import parallel_map
from .sdtw import OptimizerConfig, SdtwConfig, mean_length, medoid_init, sdtw_mean
from .transport import (
    AtomRegistry,
    BarycenterConfig,
    DiscreteMeasure,
    OtConfig,
    distinct_atoms,
    free_support_barycenter,
    ground_cost_matrix,
    ot_cost,
)

logger = logging.getLogger(__name__)


class SeriesSpace:
    kind = "series"

    def __init__(
        self,
        sdtw_cfg: SdtwConfig,
        opt: OptimizerConfig,
        registry: AtomRegistry,
        threads: Optional[int] = 1,
    ):
        self.sdtw_cfg = sdtw_cfg
        self.opt = opt
        self.registry = registry
        self.threads = threads

    def distance(self, point: TimeSeries, center: TimeSeries) -> float:
        return self.registry.divergence(point, center)

    def as_center(self, point: TimeSeries, name: str) -> TimeSeries:
        return TimeSeries(name, point.values)

    def center(
        self,
        members: Sequence[TimeSeries],
        current: Optional[TimeSeries],
        rng: Optional[np.random.Generator],
        name: str,
    ) -> TimeSeries:
        """Soft-DTW mean of ``members``, warm-started from ``current`` when lengths match."""
        target = mean_length([len(m) for m in members])
        if current is not None and len(current) == target:
            init = current.values
        else:
            init = medoid_init(members, self.sdtw_cfg, rng, length=target)
        result = sdtw_mean([m.values for m in members], init, self.sdtw_cfg, self.opt)
        if current is not None and np.array_equal(result.values, current.values):
            return current
        return TimeSeries(name, result.values)

    def distance_matrix(self, points: Sequence[TimeSeries], centers: Sequence[TimeSeries]) -> np.ndarray:
        rows = parallel_map(
            lambda p: [self.distance(p, c) for c in centers], points, self.threads
        )
        return np.asarray(rows, dtype=np.float64).reshape(len(points), len(centers))


class MeasureSpace:
    kind = "measure"

    def __init__(
        self,
        sdtw_cfg: SdtwConfig,
        ot_cfg: OtConfig,
        bar_cfg: BarycenterConfig,
        opt: OptimizerConfig,
        registry: AtomRegistry,
        support_size: int,
        threads: Optional[int] = 1,
    ):
        self.sdtw_cfg = sdtw_cfg
        self.ot_cfg = ot_cfg
        self.bar_cfg = bar_cfg
        self.opt = opt
        self.registry = registry
        self.support_size = support_size
        self.threads = threads

    def distance(self, point: DiscreteMeasure, center: DiscreteMeasure) -> float:
        M = ground_cost_matrix(point, center, self.sdtw_cfg, self.registry)
        return ot_cost(point, center, M, self.ot_cfg).cost

    def as_center(self, point: DiscreteMeasure, name: str) -> DiscreteMeasure:
        return point

    def center(
        self,
        members: Sequence[DiscreteMeasure],
        current: Optional[DiscreteMeasure],
        rng: Optional[np.random.Generator],
        name: str,
    ) -> DiscreteMeasure:
        """Free-support barycenter of ``members`` with uniform member weights."""
        distinct, _ = distinct_atoms(members, np.full(len(members), 1.0 / len(members)))
        target = min(self.support_size, len(distinct))
        init = current if current is not None and current.k == target else None
        result = free_support_barycenter(
            members,
            None,
            target,
            self.sdtw_cfg,
            self.ot_cfg,
            self.bar_cfg,
            self.opt,
            registry=self.registry,
            init=init,
            threads=1,
            name=name,
        )
        return result.measure

    def distance_matrix(
        self, points: Sequence[DiscreteMeasure], centers: Sequence[DiscreteMeasure]
    ) -> np.ndarray:
        rows = parallel_map(
            lambda p: [self.distance(p, c) for c in centers], points, self.threads
        )
        return np.asarray(rows, dtype=np.float64).reshape(len(points), len(centers))


def cluster_cost(space, members: Sequence, center) -> float:
    total = 0.0
    for m in members:
        total += space.distance(m, center)
    return total


def members_of(points: Sequence, labels: np.ndarray, c: int) -> List:
    return [points[i] for i in np.flatnonzero(labels == c)]
