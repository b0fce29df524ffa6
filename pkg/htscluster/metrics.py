"""External clustering indices: NMI, AMI and ARI over label maps."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, Hashable, List, Mapping, NamedTuple, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.metrics import adjusted_mutual_info_score, adjusted_rand_score, normalized_mutual_info_score
from sklearn.metrics.cluster import contingency_matrix

from .errors import LabelsError, UsageError

logger = logging.getLogger(__name__)

NMI_AVERAGES = ("geometric", "arithmetic", "min", "max")


@dataclass(frozen=True)
class Partition:
    labels: Mapping[str, Hashable]

    def __post_init__(self):
        if not self.labels:
            raise UsageError("a partition needs at least one item")

    @property
    def item_count(self) -> int:
        return len(self.labels)

    @property
    def n_clusters(self) -> int:
        return len(set(self.labels.values()))

    @classmethod
    def from_sequence(cls, labels: Sequence[Hashable]) -> "Partition":
        return cls({str(i): lab for i, lab in enumerate(labels)})


def _aligned(a: Partition, b: Partition) -> Tuple[List, List]:
    if set(a.labels) != set(b.labels):
        missing = sorted(set(a.labels) ^ set(b.labels))
        raise LabelsError(
            f"partitions cover different items ({len(missing)} differ)",
            {"examples": missing[:5]},
        )
    items = sorted(a.labels)
    # labels may mix types across sources; compare them as strings
    return [str(a.labels[i]) for i in items], [str(b.labels[i]) for i in items]


def contingency(a: Partition, b: Partition) -> np.ndarray:
    """Counts n_ij of items in cluster i of ``a`` and cluster j of ``b``."""
    la, lb = _aligned(a, b)
    return np.asarray(contingency_matrix(la, lb), dtype=np.int64)


def nmi(a: Partition, b: Partition, average: str = "geometric") -> float:
    if average not in NMI_AVERAGES:
        raise UsageError(f"unknown NMI normalization '{average}'")
    la, lb = _aligned(a, b)
    return float(normalized_mutual_info_score(la, lb, average_method=average))


def ami(a: Partition, b: Partition) -> float:
    la, lb = _aligned(a, b)
    return float(adjusted_mutual_info_score(la, lb, average_method="max"))


def ari(a: Partition, b: Partition) -> float:
    la, lb = _aligned(a, b)
    return float(adjusted_rand_score(la, lb))


class Scores(NamedTuple):
    nmi: float
    ami: float
    ari: float


def score(truth: Partition, predicted: Partition, average: str = "geometric") -> Scores:
    return Scores(nmi(truth, predicted, average), ami(truth, predicted), ari(truth, predicted))


def score_levels(
    truth: Mapping[int, Mapping[str, Hashable]],
    predicted: Mapping[int, Mapping[str, Hashable]],
    average: str = "geometric",
) -> Dict[int, Scores]:
    """Per-level indices; a level missing from either side raises ``LabelsError``."""
    if set(truth) != set(predicted):
        raise LabelsError(
            "ground truth and model cover different levels",
            {"truth": sorted(truth), "predicted": sorted(predicted)},
        )
    out = {}
    for level in sorted(truth):
        try:
            out[level] = score(Partition(truth[level]), Partition(predicted[level]), average)
        except LabelsError as exc:
            raise exc.annotate(level=level)
    return out


def summarize_runs(runs: Sequence[Mapping[int, Scores]]) -> pd.DataFrame:
    """Mean and standard deviation of each index per level across repeated runs."""
    rows = []
    for r, per_level in enumerate(runs):
        for level, s in per_level.items():
            rows.append({"run": r, "level": level, **s._asdict()})
    frame = pd.DataFrame(rows, columns=["run", "level", "nmi", "ami", "ari"])
    summary = frame.groupby("level")[["nmi", "ami", "ari"]].agg(["mean", "std"])
    summary.columns = [f"{metric}_{stat}" for metric, stat in summary.columns]
    return summary.fillna(0.0).reset_index()
