"""Hierarchical time series data model, validation and dataset I/O.

Nodes are indexed in level-order traversal, left to right per level, with the root at
level 1 and the bottom series at level L. The summation matrix ``S`` maps the ``m``
bottom series to all ``n`` nodes: ``x = S @ b``.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import InvariantError, ParseError, SchemaError, UsageError

logger = logging.getLogger(__name__)

CSV_COLUMNS = ["instance_id", "node_id", "level", "parent_id", "t", "value"]


@dataclass(frozen=True)
class TimeSeries:
    id: str
    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64).reshape(-1)
        if arr.size < 1:
            raise InvariantError(f"series {self.id} is empty", {"series": self.id})
        if not np.all(np.isfinite(arr)):
            raise InvariantError(
                f"series {self.id} contains non-finite values", {"series": self.id}
            )
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.values
        return self.values.astype(dtype)


SeriesLike = Union[TimeSeries, np.ndarray, Sequence[float]]


def as_values(x: SeriesLike) -> np.ndarray:
    """Contiguous float64 view of a series or array-like."""
    if isinstance(x, TimeSeries):
        return x.values
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64).reshape(-1))


@dataclass(frozen=True)
class Hierarchy:
    node_ids: Tuple[str, ...]
    levels: Tuple[int, ...]
    parents: Tuple[Optional[int], ...]
    summation: np.ndarray

    @classmethod
    def from_parents(
        cls,
        node_ids: Sequence[str],
        levels: Sequence[int],
        parents: Sequence[Optional[int]],
    ) -> "Hierarchy":
        """Build a hierarchy and derive ``S`` from the parent links.

        Bottom nodes are the nodes at the deepest level; each row of ``S`` marks the
        bottom descendants of that node.
        """
        n = len(node_ids)
        depth = max(levels) if n else 0
        bottom = [i for i in range(n) if levels[i] == depth]
        col_of = {node: j for j, node in enumerate(bottom)}
        summation = np.zeros((n, len(bottom)), dtype=np.int8)
        for node in bottom:
            cur: Optional[int] = node
            seen = 0
            while cur is not None and seen <= n:
                summation[cur, col_of[node]] = 1
                cur = parents[cur]
                seen += 1
        return cls(tuple(node_ids), tuple(int(v) for v in levels), tuple(parents), summation)

    @property
    def n(self) -> int:
        return len(self.node_ids)

    @property
    def m(self) -> int:
        return int(self.summation.shape[1])

    @property
    def l(self) -> int:
        return self.n - self.m

    @property
    def depth(self) -> int:
        return max(self.levels)

    @property
    def bottom_offset(self) -> int:
        return self.n - self.m

    def nodes_at_level(self, level: int) -> Tuple[int, ...]:
        return tuple(i for i, lv in enumerate(self.levels) if lv == level)

    def children(self, node: int) -> Tuple[int, ...]:
        return tuple(i for i, p in enumerate(self.parents) if p == node)

    def descendants(self, node: int) -> Tuple[int, ...]:
        """Bottom node indices under ``node`` (F(i)), left to right."""
        cols = np.flatnonzero(self.summation[node])
        return tuple(int(self.bottom_offset + c) for c in cols)

    def is_bottom(self, node: int) -> bool:
        return node >= self.bottom_offset


class HierarchyReport(NamedTuple):
    ok: bool
    violation: Optional[str] = None
    detail: Optional[str] = None


def validate_hierarchy(h: Hierarchy) -> HierarchyReport:
    """Return the first violated structural invariant, or ok."""
    n = len(h.node_ids)
    if n == 0 or len(h.levels) != n or len(h.parents) != n:
        return HierarchyReport(False, "shape", "node, level and parent lists differ in length")
    if len(set(h.node_ids)) != n:
        return HierarchyReport(False, "shape", "duplicate node ids")
    depth = max(h.levels)
    m = sum(1 for lv in h.levels if lv == depth)
    S = np.asarray(h.summation)
    if S.ndim != 2 or S.shape != (n, m):
        return HierarchyReport(False, "shape", f"S has shape {S.shape}, expected {(n, m)}")
    if not np.all((S == 0) | (S == 1)):
        return HierarchyReport(False, "shape", "S is not binary")

    if h.levels[0] != 1 or h.parents[0] is not None:
        return HierarchyReport(False, "root", "node 0 must be the root at level 1")
    if sum(1 for p in h.parents if p is None) != 1 or h.levels.count(1) != 1:
        return HierarchyReport(False, "root", "exactly one root is required")

    for i in range(1, n):
        p = h.parents[i]
        if h.levels[i] < h.levels[i - 1]:
            return HierarchyReport(False, "level order", f"node {i} breaks level order")
        if p is None or not (0 <= p < i):
            return HierarchyReport(False, "level order", f"node {i} has an invalid parent")
        if h.levels[i] == h.levels[i - 1] and h.parents[i - 1] is not None and p < h.parents[i - 1]:
            return HierarchyReport(False, "level order", f"node {i} is not left to right")
        if h.levels[p] != h.levels[i] - 1:
            return HierarchyReport(False, "parent level", f"node {i} is not one level below its parent")

    has_child = [False] * n
    for p in h.parents:
        if p is not None:
            has_child[p] = True
    for i in range(n):
        if h.levels[i] < depth and not has_child[i]:
            return HierarchyReport(False, "ragged depth", f"leaf {i} above the bottom level")

    if not np.array_equal(S[n - m:], np.eye(m, dtype=S.dtype)):
        return HierarchyReport(False, "bottom identity", "bottom rows of S are not the identity")

    for i in range(n - m):
        kids = [c for c in range(n) if h.parents[c] == i]
        expected = np.sum(S[kids], axis=0) if kids else np.zeros(m, dtype=S.dtype)
        if not np.array_equal(S[i], expected):
            return HierarchyReport(
                False, "aggregation consistency", f"row {i} is not the sum of its children"
            )
    return HierarchyReport(True)


def sum_bottom(h: Hierarchy, bottom_values: Sequence[np.ndarray], node: int) -> np.ndarray:
    """Sum of the bottom descendants of ``node``, accumulated left to right.

    ``bottom_values[j]`` is the j-th bottom series (column j of S). The accumulation
    order is fixed so that sums are reproducible bit for bit.
    """
    cols = np.flatnonzero(h.summation[node])
    total = np.array(bottom_values[cols[0]], dtype=np.float64, copy=True)
    for c in cols[1:]:
        total += bottom_values[c]
    return total


@dataclass(frozen=True)
class HtsInstance:
    id: str
    hierarchy: Hierarchy
    series: Tuple[TimeSeries, ...]

    def __post_init__(self):
        if len(self.series) != self.hierarchy.n:
            raise InvariantError(
                f"instance {self.id} has {len(self.series)} series for {self.hierarchy.n} nodes",
                {"instance": self.id},
            )
        lengths = {len(s) for s in self.series}
        if len(lengths) != 1:
            raise InvariantError(
                f"instance {self.id} mixes series lengths {sorted(lengths)}",
                {"instance": self.id},
            )

    @property
    def length(self) -> int:
        return len(self.series[0])

    def node_key(self, node: int) -> str:
        return f"{self.id}/{self.hierarchy.node_ids[node]}"

    def bottom_values(self) -> List[np.ndarray]:
        off = self.hierarchy.bottom_offset
        return [self.series[off + j].values for j in range(self.hierarchy.m)]


class CoherenceReport(NamedTuple):
    ok: bool
    worst_node: Optional[int]
    worst_gap: float


def coherence_tolerance(values: np.ndarray) -> float:
    return 1e-6 * (1.0 + float(np.max(np.abs(values))))


def check_coherence(instance: HtsInstance, tol: Optional[float] = None) -> CoherenceReport:
    """Opt-in check that every aggregated series equals the sum of its bottom series.

    With ``tol=None`` each node uses 1e-6 * (1 + max|value|); an explicit ``tol`` is an
    absolute bound (0 demands exact equality under the fixed summation order).
    """
    h = instance.hierarchy
    bottoms = instance.bottom_values()
    worst_node, worst_gap, ok = None, 0.0, True
    for i in range(h.bottom_offset):
        values = instance.series[i].values
        gap = float(np.max(np.abs(values - sum_bottom(h, bottoms, i))))
        bound = coherence_tolerance(values) if tol is None else tol
        if gap > worst_gap or worst_node is None:
            worst_node, worst_gap = i, gap
        if gap > bound:
            ok = False
    return CoherenceReport(ok, worst_node, worst_gap)


@dataclass(frozen=True)
class HtsDataset:
    instances: Tuple[HtsInstance, ...]
    levels: int = field(default=0)

    def __post_init__(self):
        if len(self.instances) < 1:
            raise SchemaError("a dataset needs at least one instance")
        depths = {inst.hierarchy.depth for inst in self.instances}
        if len(depths) != 1:
            raise InvariantError(f"instances disagree on depth: {sorted(depths)}")
        depth = depths.pop()
        if self.levels == 0:
            object.__setattr__(self, "levels", depth)
        elif self.levels != depth:
            raise InvariantError(f"dataset declares {self.levels} levels, instances have {depth}")

    @property
    def N(self) -> int:
        return len(self.instances)

    def node_keys(self, level: int) -> List[str]:
        return [self.instances[e.instance].node_key(e.node) for e in level_series(self, level)]


class LevelEntry(NamedTuple):
    instance: int
    node: int
    series: TimeSeries


def level_series(ds: HtsDataset, level: int) -> List[LevelEntry]:
    """All series at ``level``: by instance index, then level-order node index."""
    if not (1 <= level <= ds.levels):
        raise UsageError(f"level {level} outside 1..{ds.levels}", {"level": level})
    out: List[LevelEntry] = []
    for j, inst in enumerate(ds.instances):
        for node in inst.hierarchy.nodes_at_level(level):
            out.append(LevelEntry(j, node, inst.series[node]))
    return out


# ---------------------------------------------------------------------------
# construction helpers

def build_instance(instance_id: str, nodes: Sequence[Dict[str, Any]]) -> HtsInstance:
    """Build an instance from node records ``{id, level, parent, values}`` in level order."""
    index: Dict[str, int] = {}
    ids, levels, parents, series = [], [], [], []
    for pos, rec in enumerate(nodes):
        nid = str(rec["id"])
        if nid in index:
            raise InvariantError(f"duplicate node {nid} in instance {instance_id}",
                                 {"instance": instance_id, "node": nid})
        parent = rec.get("parent")
        if parent is None:
            pidx = None
        else:
            if str(parent) not in index:
                raise InvariantError(
                    f"node {nid} refers to parent {parent} that does not precede it",
                    {"instance": instance_id, "node": nid},
                )
            pidx = index[str(parent)]
        try:
            level = int(rec["level"])
        except (TypeError, ValueError):
            raise SchemaError(
                f"node {nid} in instance {instance_id} has non-integer level {rec['level']!r}",
                {"instance": instance_id, "node": nid},
            ) from None
        index[nid] = pos
        ids.append(nid)
        levels.append(level)
        parents.append(pidx)
        series.append(TimeSeries(f"{instance_id}/{nid}", rec["values"]))
    hierarchy = Hierarchy.from_parents(ids, levels, parents)
    report = validate_hierarchy(hierarchy)
    if not report.ok:
        raise InvariantError(
            f"instance {instance_id}: {report.violation} ({report.detail})",
            {"instance": instance_id, "violation": report.violation},
        )
    return HtsInstance(instance_id, hierarchy, tuple(series))


def instance_from_bottom(
    instance_id: str,
    hierarchy: Hierarchy,
    bottom_values: Sequence[np.ndarray],
) -> HtsInstance:
    """Instance whose aggregated series are exact sums of ``bottom_values``."""
    bottoms = [np.asarray(b, dtype=np.float64) for b in bottom_values]
    series = []
    for i, nid in enumerate(hierarchy.node_ids):
        if hierarchy.is_bottom(i):
            values = bottoms[i - hierarchy.bottom_offset]
        else:
            values = sum_bottom(hierarchy, bottoms, i)
        series.append(TimeSeries(f"{instance_id}/{nid}", values))
    return HtsInstance(instance_id, hierarchy, tuple(series))


def tree_hierarchy(branching: Sequence[int]) -> Hierarchy:
    """Regular tree: root, then each node at depth d has ``branching[d]`` children."""
    ids, levels, parents = ["0"], [1], [None]
    frontier = [0]
    for depth, width in enumerate(branching, start=2):
        nxt = []
        for p in frontier:
            for c in range(width):
                ids.append(f"{ids[p]}.{c}")
                levels.append(depth)
                parents.append(p)
                nxt.append(len(ids) - 1)
        frontier = nxt
    return Hierarchy.from_parents(ids, levels, parents)


def replace_series(ds: HtsDataset, values_of) -> HtsDataset:
    """New dataset with every series replaced by ``values_of(instance, node, values)``."""
    instances = []
    for inst in ds.instances:
        series = tuple(
            TimeSeries(s.id, values_of(inst, i, s.values)) for i, s in enumerate(inst.series)
        )
        instances.append(HtsInstance(inst.id, inst.hierarchy, series))
    return HtsDataset(tuple(instances), ds.levels)


def split_dataset(
    ds: HtsDataset, ratios: Tuple[float, float, float] = (0.6, 0.2, 0.2)
) -> Tuple[HtsDataset, HtsDataset, HtsDataset]:
    """Split every instance along time into train / validation / test parts."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise UsageError(f"bad split ratios {ratios}")
    cuts = {}
    for inst in ds.instances:
        T = inst.length
        a = int(round(ratios[0] * T))
        b = int(round((ratios[0] + ratios[1]) * T))
        a = min(max(a, 1), T - 2)
        b = min(max(b, a + 1), T - 1)
        if a < 1 or b >= T:
            raise InvariantError(f"instance {inst.id} is too short to split (T={T})")
        cuts[inst.id] = (a, b)
    train = replace_series(ds, lambda inst, i, v: v[: cuts[inst.id][0]])
    valid = replace_series(ds, lambda inst, i, v: v[cuts[inst.id][0]: cuts[inst.id][1]])
    test = replace_series(ds, lambda inst, i, v: v[cuts[inst.id][1]:])
    return train, valid, test


def concat_datasets(first: HtsDataset, second: HtsDataset) -> HtsDataset:
    """Time-wise concatenation of two datasets over the same instances."""
    by_id = {inst.id: inst for inst in second.instances}
    return replace_series(
        first,
        lambda inst, i, v: np.concatenate([v, by_id[inst.id].series[i].values]),
    )


# ---------------------------------------------------------------------------
# I/O

def dataset_to_dict(ds: HtsDataset) -> Dict[str, Any]:
    instances = []
    for inst in ds.instances:
        h = inst.hierarchy
        nodes = []
        for i, nid in enumerate(h.node_ids):
            p = h.parents[i]
            nodes.append({
                "id": nid,
                "level": h.levels[i],
                "parent": None if p is None else h.node_ids[p],
                "values": [float(v) for v in inst.series[i].values],
            })
        instances.append({"id": inst.id, "nodes": nodes})
    return {"levels": ds.levels, "instances": instances}


def dataset_from_dict(obj: Any) -> HtsDataset:
    if not isinstance(obj, dict):
        raise SchemaError("dataset must be a JSON object")
    for key in ("levels", "instances"):
        if key not in obj:
            raise SchemaError(f"missing field '{key}'", {"field": key})
    if not isinstance(obj["instances"], list) or not obj["instances"]:
        raise SchemaError("'instances' must be a non-empty list")
    if not isinstance(obj["levels"], int) or obj["levels"] < 1:
        raise SchemaError("'levels' must be a positive integer")
    instances = []
    for k, rec in enumerate(obj["instances"]):
        if not isinstance(rec, dict) or "id" not in rec or "nodes" not in rec:
            raise SchemaError(f"instance #{k} needs 'id' and 'nodes'", {"instance": k})
        nodes = rec["nodes"]
        if not isinstance(nodes, list) or not nodes:
            raise SchemaError(f"instance {rec['id']} has no nodes", {"instance": rec["id"]})
        for node in nodes:
            missing = [f for f in ("id", "level", "parent", "values") if f not in node]
            if missing:
                raise SchemaError(
                    f"node in instance {rec['id']} is missing {missing}",
                    {"instance": rec["id"], "fields": missing},
                )
            vals = node["values"]
            if not isinstance(vals, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in vals
            ):
                raise SchemaError(
                    f"node {node['id']} in instance {rec['id']} has non-numeric values",
                    {"instance": rec["id"], "node": node["id"]},
                )
        instances.append(build_instance(str(rec["id"]), nodes))
    return HtsDataset(tuple(instances), obj["levels"])


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def dataset_fingerprint(ds: HtsDataset) -> str:
    return hashlib.sha256(canonical_json(dataset_to_dict(ds)).encode("utf-8")).hexdigest()


def _infer_format(path: Path, fmt: Optional[str]) -> str:
    if fmt:
        return fmt.lower()
    return "csv" if path.suffix.lower() == ".csv" else "json"


def load_dataset(path: Union[str, Path], format: Optional[str] = None) -> HtsDataset:
    """Load and fully validate a dataset from the JSON or CSV long format."""
    path = Path(path)
    fmt = _infer_format(path, format)
    logger.info(f"Loading {fmt} dataset from {path}")
    if fmt == "json":
        try:
            obj = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed JSON in {path}: {exc}", {"path": str(path)}) from exc
        ds = dataset_from_dict(obj)
    elif fmt == "csv":
        ds = _load_csv(path)
    else:
        raise UsageError(f"unknown dataset format '{fmt}'")
    logger.info(f"Loaded {ds.N} instances with {ds.levels} levels")
    return ds


def _load_csv(path: Path) -> HtsDataset:
    try:
        df = pd.read_csv(path, dtype={"instance_id": str, "node_id": str, "parent_id": str},
                         float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise ParseError(f"malformed CSV in {path}: {exc}", {"path": str(path)}) from exc
    missing = [c for c in CSV_COLUMNS if c not in df.columns]
    if missing:
        raise SchemaError(f"CSV is missing columns {missing}", {"fields": missing})
    if df.empty:
        raise SchemaError("CSV has no rows")
    try:
        df["value"] = pd.to_numeric(df["value"], errors="raise").astype(np.float64)
        df["t"] = pd.to_numeric(df["t"], errors="raise").astype(np.int64)
        df["level"] = pd.to_numeric(df["level"], errors="raise").astype(np.int64)
    except (ValueError, TypeError) as exc:
        raise SchemaError(f"non-numeric entries in CSV: {exc}") from exc

    instances = []
    for inst_id in pd.unique(df["instance_id"]):
        part = df[df["instance_id"] == inst_id]
        nodes = []
        for node_id in pd.unique(part["node_id"]):
            rows = part[part["node_id"] == node_id].sort_values("t", kind="stable")
            if rows["t"].duplicated().any():
                raise SchemaError(f"duplicate time steps for {inst_id}/{node_id}")
            parent = rows["parent_id"].iloc[0]
            nodes.append({
                "id": node_id,
                "level": int(rows["level"].iloc[0]),
                "parent": None if pd.isna(parent) or parent == "" else str(parent),
                "values": rows["value"].to_numpy(dtype=np.float64),
            })
        instances.append(build_instance(str(inst_id), nodes))
    levels = max(inst.hierarchy.depth for inst in instances)
    return HtsDataset(tuple(instances), levels)


def save_dataset(ds: HtsDataset, path: Union[str, Path], format: Optional[str] = None) -> Path:
    from .runs import atomic_write_text

    path = Path(path)
    fmt = _infer_format(path, format)
    if fmt == "json":
        text = json.dumps(dataset_to_dict(ds), allow_nan=False)
    elif fmt == "csv":
        rows: List[Dict[str, Any]] = []
        for inst in ds.instances:
            h = inst.hierarchy
            for i, nid in enumerate(h.node_ids):
                p = h.parents[i]
                for t, v in enumerate(inst.series[i].values):
                    rows.append({
                        "instance_id": inst.id,
                        "node_id": nid,
                        "level": h.levels[i],
                        "parent_id": "" if p is None else h.node_ids[p],
                        "t": t,
                        "value": float(v),
                    })
        text = pd.DataFrame(rows, columns=CSV_COLUMNS).to_csv(index=False)
    else:
        raise UsageError(f"unknown dataset format '{fmt}'")
    atomic_write_text(path, text)
    logger.info(f"Wrote {fmt} dataset with {ds.N} instances to {path}")
    return path
