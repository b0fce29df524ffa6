"""Synthetic HTS benchmark: ARMA(2,2) bottom series separated by per-cluster offsets."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, NamedTuple, Optional, Tuple

import numpy as np
from scipy.signal import lfilter
from statsmodels.tsa.arima_process import ArmaProcess

from .errors import SchemaError, UsageError
from .hierarchy import HtsDataset, HtsInstance, instance_from_bottom, tree_hierarchy
from .runs import make_rng, parallel_map

logger = logging.getLogger(__name__)

# x_t = 0.75 x_{t-1} - 0.25 x_{t-2} + e_t + 0.65 e_{t-1} + 0.35 e_{t-2} + c
AR = np.array([1.0, -0.75, 0.25])
MA = np.array([1.0, 0.65, 0.35])

PRESETS: Dict[str, Dict] = {
    "two-level": {"branching": (4,)},
    "multilevel": {"branching": (3, 3, 2)},
    "moderate": {"branching": (4,), "offsets": (0.0, 3.0, 6.0, 9.0)},
}


@dataclass(frozen=True)
class SynthConfig:
    offsets: Tuple[float, ...] = (0.0, 8.0, 16.0, 24.0)
    instances_per_cluster: int = 30
    length_range: Tuple[int, int] = (80, 300)
    branching: Tuple[int, ...] = (3, 3, 2)
    noise_std: float = 1.0
    burnin: int = 50
    seed: int = 0
    threads: Optional[int] = 1

    def __post_init__(self):
        if not self.offsets:
            raise UsageError("at least one cluster offset is required")
        if len(set(self.offsets)) != len(self.offsets):
            raise UsageError(f"cluster offsets must be distinct, got {self.offsets}")
        lo, hi = self.length_range
        if lo < 3 or hi < lo:
            raise UsageError(f"length range must satisfy 3 <= lo <= hi, got {self.length_range}")
        if self.instances_per_cluster < 1:
            raise UsageError("instances_per_cluster must be >= 1")
        if self.noise_std < 0 or self.burnin < 0:
            raise UsageError("noise_std and burnin must be non-negative")
        if any(b < 1 for b in self.branching):
            raise UsageError(f"branching factors must be >= 1, got {self.branching}")

    @property
    def levels(self) -> int:
        return len(self.branching) + 1

    @classmethod
    def preset(cls, name: str, **overrides) -> "SynthConfig":
        if name not in PRESETS:
            raise UsageError(f"unknown preset '{name}'", {"presets": sorted(PRESETS)})
        return cls(**{**PRESETS[name], **overrides})


def simulate_arma(
    T: int,
    c: float,
    noise_std: float = 1.0,
    rng: Optional[np.random.Generator] = None,
    burnin: int = 50,
    seed: Optional[int] = None,
) -> np.ndarray:
    """``T`` values of the offset ARMA(2,2) recursion started from zeros.

    The first ``burnin`` steps are simulated and discarded.
    """
    if T < 1:
        raise UsageError(f"T must be >= 1, got {T}")
    if rng is None:
        rng = np.random.default_rng(seed)
    n = T + burnin
    noise = ArmaProcess(AR, MA).generate_sample(
        nsample=n, scale=noise_std, distrvs=rng.standard_normal
    )
    drift = lfilter([1.0], AR, np.full(n, float(c)))
    return np.ascontiguousarray((noise + drift)[burnin:], dtype=np.float64)


class Benchmark(NamedTuple):
    """Dataset plus true labels: level -> node key -> cluster."""

    dataset: HtsDataset
    labels: Dict[int, Dict[str, int]]


def generate_benchmark(cfg: SynthConfig) -> Benchmark:
    hierarchy = tree_hierarchy(cfg.branching)
    K = len(cfg.offsets)
    total = K * cfg.instances_per_cluster
    order = make_rng(cfg.seed, "simulate").permutation(total)
    width = len(str(total - 1))

    def build(slot: int) -> Tuple[HtsInstance, int]:
        source = int(order[slot])
        cluster = source // cfg.instances_per_cluster
        rng = make_rng(cfg.seed, "simulate", source)
        T = int(rng.integers(cfg.length_range[0], cfg.length_range[1] + 1))
        bottoms = [
            simulate_arma(T, cfg.offsets[cluster], cfg.noise_std, rng, cfg.burnin)
            for _ in range(hierarchy.m)
        ]
        return instance_from_bottom(f"hts{slot:0{width}d}", hierarchy, bottoms), cluster

    built = parallel_map(build, range(total), cfg.threads)
    ds = HtsDataset(tuple(inst for inst, _ in built), hierarchy.depth)
    labels: Dict[int, Dict[str, int]] = {}
    for level in range(1, hierarchy.depth + 1):
        nodes = hierarchy.nodes_at_level(level)
        labels[level] = {inst.node_key(i): cluster for inst, cluster in built for i in nodes}
    logger.info(
        f"Generated {total} instances ({K} clusters, {hierarchy.depth} levels, "
        f"{hierarchy.m} bottom series each)"
    )
    return Benchmark(ds, labels)


def labels_to_dict(labels: Dict[int, Dict[str, int]]) -> Dict[str, Dict[str, int]]:
    return {str(level): dict(sorted(m.items())) for level, m in sorted(labels.items())}


def labels_from_dict(obj) -> Dict[int, Dict[str, int]]:
    if not isinstance(obj, dict):
        raise SchemaError("labels file must be an object keyed by level")
    try:
        return {int(level): {str(k): v for k, v in m.items()} for level, m in obj.items()}
    except (ValueError, AttributeError) as exc:
        raise SchemaError(f"malformed labels file: {exc}") from exc
