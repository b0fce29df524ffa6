"""Cluster-accelerated forecasting.

Every cluster mean is forecast once; a node's forecast is the fuzzy-weighted combination
of the mean forecasts at its level, and each instance is then made coherent by
recomputing aggregated forecasts from the bottom ones.
"""

from __future__ import annotations

import abc
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import logsumexp
from statsmodels.tsa.ar_model import AutoReg

from .cluster import MultiLevelClusterModel
from .errors import DimensionError, ForecastError, HtsError, MaseUndefinedError, UsageError
from .hierarchy import (
    Hierarchy,
    HtsDataset,
    SeriesLike,
    as_values,
    concat_datasets,
    level_series,
    replace_series,
    split_dataset,
    sum_bottom,
)
from .runs import atomic_write_json, atomic_write_text, parallel_map
from .sdtw import SdtwConfig
from .transport import AtomRegistry

logger = logging.getLogger(__name__)


class Forecaster(abc.ABC):
    """Fit on one history, then predict a horizon. Implementations are deterministic."""

    @abc.abstractmethod
    def fit(self, history: SeriesLike) -> "Forecaster":
        ...

    @abc.abstractmethod
    def predict(self, horizon: int) -> np.ndarray:
        ...


class NaiveForecaster(Forecaster):
    """Repeats the last observed value."""

    def fit(self, history: SeriesLike) -> "NaiveForecaster":
        self.last = float(as_values(history)[-1])
        return self

    def predict(self, horizon: int) -> np.ndarray:
        return np.full(horizon, self.last)


class AutoRegForecaster(Forecaster):
    """AR(p) with a constant, least squares, recursive multi-step forecasts.

    Histories too short for the regression, or constant ones, fall back to the naive
    forecast.
    """

    def __init__(self, lags: int = 2):
        self.lags = lags
        self._result = None
        self._naive: Optional[NaiveForecaster] = None

    def fit(self, history: SeriesLike) -> "AutoRegForecaster":
        y = np.asarray(as_values(history), dtype=np.float64)
        if y.size < 2 * self.lags + 2 or np.ptp(y) == 0:
            self._naive = NaiveForecaster().fit(y)
            self._result = None
            return self
        self._result = AutoReg(y, lags=self.lags, trend="c").fit()
        self._naive = None
        return self

    def predict(self, horizon: int) -> np.ndarray:
        if self._naive is not None:
            return self._naive.predict(horizon)
        if self._result is None:
            raise ForecastError("predict called before fit")
        return np.asarray(self._result.forecast(steps=horizon), dtype=np.float64)


ForecasterFactory = Callable[[], Forecaster]

FORECASTERS: Dict[str, ForecasterFactory] = {
    "ar2": lambda: AutoRegForecaster(2),
    "naive": NaiveForecaster,
}


@dataclass(frozen=True)
class ForecastConfig:
    fuzziness: float = 2.0
    forecaster: str = "ar2"
    split: tuple = (0.6, 0.2, 0.2)
    threads: Optional[int] = 1

    def __post_init__(self):
        if not self.fuzziness > 1:
            raise UsageError(f"fuzziness must be > 1, got {self.fuzziness}")
        if self.forecaster not in FORECASTERS:
            raise UsageError(f"unknown forecaster '{self.forecaster}'")

    def factory(self) -> ForecasterFactory:
        return FORECASTERS[self.forecaster]


def fuzzy_weights(distances: Sequence[float], m: float = 2.0) -> np.ndarray:
    """Fuzzy memberships w_j = 1 / sum_k (d_j / d_k)^(2/(m-1)).

    Zero distances give the hard limit: uniform weight over the zero set.
    """
    if not m > 1:
        raise UsageError(f"fuzziness must be > 1, got {m}")
    d = np.maximum(np.asarray(distances, dtype=np.float64), 0.0)
    zero = d == 0
    if np.any(zero):
        w = zero.astype(np.float64)
    else:
        p = 2.0 / (m - 1.0)
        logits = -p * np.log(d)
        w = np.exp(logits - logsumexp(logits))
    return w / np.sum(w)


def combine_forecasts(
    weights: Sequence[float], mean_forecasts: Sequence[np.ndarray], horizon: int
) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if len(mean_forecasts) != w.size:
        raise DimensionError(f"{w.size} weights for {len(mean_forecasts)} forecasts")
    out = np.zeros(horizon)
    for wj, f in zip(w, mean_forecasts):
        f = np.asarray(f, dtype=np.float64)
        if f.shape != (horizon,):
            raise DimensionError(
                f"mean forecast has length {f.shape[0]}, expected {horizon}",
                {"horizon": horizon},
            )
        out += wj * f
    return out


def coherent_projection(
    per_node: Sequence[Optional[np.ndarray]], hierarchy: Hierarchy
) -> List[np.ndarray]:
    """Replace every aggregated forecast by the left-to-right sum of its bottom forecasts."""
    if len(per_node) != hierarchy.n:
        raise DimensionError(f"{len(per_node)} forecasts for {hierarchy.n} nodes")
    off = hierarchy.bottom_offset
    bottoms = []
    for j in range(hierarchy.m):
        f = per_node[off + j]
        if f is None:
            raise ForecastError(
                f"missing forecast for bottom node {hierarchy.node_ids[off + j]}",
                {"node": hierarchy.node_ids[off + j]},
            )
        bottoms.append(np.asarray(f, dtype=np.float64))
    out = [sum_bottom(hierarchy, bottoms, i) for i in range(off)]
    out.extend(b.copy() for b in bottoms)
    return out


def mase(actual: SeriesLike, forecast: SeriesLike, insample: SeriesLike) -> float:
    """Mean absolute error scaled by the in-sample one-step naive error."""
    a, f, x = as_values(actual), as_values(forecast), as_values(insample)
    if a.shape != f.shape:
        raise DimensionError(f"actual has length {a.size}, forecast {f.size}")
    if x.size < 2:
        raise MaseUndefinedError("MASE undefined: in-sample history shorter than 2")
    scale = float(np.mean(np.abs(np.diff(x))))
    if scale == 0:
        raise MaseUndefinedError("MASE undefined: constant in-sample history")
    return float(np.mean(np.abs(a - f))) / scale


# ---------------------------------------------------------------------------
# pipelines

class TimingReport(NamedTuple):
    fits: int
    wall_ms: int
    fits_per_level: Dict[int, int]
    nodes: int


class ForecastResult(NamedTuple):
    forecasts: Dict[str, List[np.ndarray]]
    report: TimingReport


Horizon = Union[int, Mapping[str, int]]


def holdout(
    ds: HtsDataset,
    horizon: Optional[int] = None,
    split: Tuple[float, float, float] = (0.6, 0.2, 0.2),
) -> Tuple[HtsDataset, HtsDataset, Dict[str, int]]:
    """(history, test, horizons): the last ``horizon`` steps of every instance are held out,
    or, without a horizon, the test part of a train / validation / test split.
    """
    if horizon is None:
        train, valid, test = split_dataset(ds, split)
        history = concat_datasets(train, valid)
    else:
        if horizon < 1:
            raise UsageError(f"horizon must be >= 1, got {horizon}")
        short = [inst.id for inst in ds.instances if inst.length < horizon + 2]
        if short:
            raise UsageError(
                f"{len(short)} instances are too short for horizon {horizon}",
                {"instances": short[:5]},
            )
        history = replace_series(ds, lambda inst, i, v: v[:-horizon])
        test = replace_series(ds, lambda inst, i, v: v[-horizon:])
    return history, test, {inst.id: inst.length for inst in test.instances}


def _horizon_of(horizon: Horizon, instance_id: str) -> int:
    h = horizon if isinstance(horizon, int) else horizon[instance_id]
    if h < 1:
        raise UsageError(f"horizon must be >= 1, got {h}", {"instance": instance_id})
    return int(h)


def _fit_predict(factory: ForecasterFactory, series: np.ndarray, horizon: int, label: str) -> np.ndarray:
    try:
        out = np.asarray(factory().fit(series).predict(horizon), dtype=np.float64)
    except HtsError as exc:
        raise exc.annotate(target=label)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise ForecastError(f"forecaster failed on {label}: {exc}", {"target": label}) from exc
    if out.shape != (horizon,) or not np.all(np.isfinite(out)):
        raise ForecastError(f"forecaster returned an invalid forecast for {label}", {"target": label})
    return out


def forecast_with_clusters(
    ds: HtsDataset,
    model: MultiLevelClusterModel,
    factory: ForecasterFactory,
    horizon: Horizon,
    m: float = 2.0,
    sdtw_cfg: Optional[SdtwConfig] = None,
    threads: Optional[int] = 1,
) -> ForecastResult:
    """Forecast every cluster mean once and rebuild coherent per-node forecasts."""
    start = time.perf_counter()
    sdtw_cfg = sdtw_cfg if sdtw_cfg is not None else model.config.sdtw
    registry = AtomRegistry(sdtw_cfg)
    h_max = max(_horizon_of(horizon, inst.id) for inst in ds.instances)
    fits_per_level: Dict[int, int] = {}
    mean_forecasts: Dict[int, List[np.ndarray]] = {}
    for level in range(1, ds.levels + 1):
        lm = model.per_level[level]
        if lm.representation == "concat" or not lm.raw_means:
            raise UsageError(f"level {level} has no per-level cluster means to forecast")
        tasks = list(enumerate(lm.raw_means))
        mean_forecasts[level] = parallel_map(
            lambda t: _fit_predict(factory, t[1].values, h_max, f"level {level} cluster {t[0]}"),
            tasks, threads,
        )
        fits_per_level[level] = len(tasks)

    per_node: Dict[str, List[Optional[np.ndarray]]] = {
        inst.id: [None] * inst.hierarchy.n for inst in ds.instances
    }
    for level in range(1, ds.levels + 1):
        means = model.per_level[level].raw_means
        forecasts = mean_forecasts[level]
        entries = level_series(ds, level)

        def rebuild(e):
            d = [registry.divergence(e.series, mu) for mu in means]
            w = fuzzy_weights(d, m)
            return combine_forecasts(w, forecasts, h_max)

        for e, f in zip(entries, parallel_map(rebuild, entries, threads)):
            inst = ds.instances[e.instance]
            per_node[inst.id][e.node] = f[: _horizon_of(horizon, inst.id)]

    out = {
        inst.id: coherent_projection(per_node[inst.id], inst.hierarchy) for inst in ds.instances
    }
    fits = sum(fits_per_level.values())
    nodes = sum(inst.hierarchy.n for inst in ds.instances)
    report = TimingReport(fits, int(round(1000 * (time.perf_counter() - start))), fits_per_level, nodes)
    logger.info(f"Clustered forecasting: {fits} fits for {nodes} nodes in {report.wall_ms} ms")
    return ForecastResult(out, report)


def forecast_per_series(
    ds: HtsDataset,
    factory: ForecasterFactory,
    horizon: Horizon,
    threads: Optional[int] = 1,
) -> ForecastResult:
    """One fit per node, then the same bottom-up projection."""
    start = time.perf_counter()
    tasks = [(inst, i) for inst in ds.instances for i in range(inst.hierarchy.n)]
    raw = parallel_map(
        lambda t: _fit_predict(factory, t[0].series[t[1]].values, _horizon_of(horizon, t[0].id),
                               t[0].node_key(t[1])),
        tasks, threads,
    )
    per_node: Dict[str, List[Optional[np.ndarray]]] = {
        inst.id: [None] * inst.hierarchy.n for inst in ds.instances
    }
    for (inst, i), f in zip(tasks, raw):
        per_node[inst.id][i] = f
    out = {
        inst.id: coherent_projection(per_node[inst.id], inst.hierarchy) for inst in ds.instances
    }
    fits_per_level: Dict[int, int] = {}
    for inst, i in tasks:
        level = inst.hierarchy.levels[i]
        fits_per_level[level] = fits_per_level.get(level, 0) + 1
    report = TimingReport(len(tasks), int(round(1000 * (time.perf_counter() - start))),
                          fits_per_level, len(tasks))
    logger.info(f"Per-series forecasting: {len(tasks)} fits in {report.wall_ms} ms")
    return ForecastResult(out, report)


def evaluate_forecasts(
    actual: HtsDataset,
    forecasts: Mapping[str, Sequence[np.ndarray]],
    history: HtsDataset,
) -> Dict[int, Optional[float]]:
    """Mean MASE per level; nodes whose MASE is undefined are skipped with a warning."""
    hist = {inst.id: inst for inst in history.instances}
    out: Dict[int, Optional[float]] = {}
    for level in range(1, actual.levels + 1):
        scores = []
        for e in level_series(actual, level):
            inst = actual.instances[e.instance]
            try:
                scores.append(mase(e.series, forecasts[inst.id][e.node], hist[inst.id].series[e.node]))
            except MaseUndefinedError:
                logger.warning(f"MASE undefined for {inst.node_key(e.node)}; skipped")
        out[level] = float(np.mean(scores)) if scores else None
    return out


def forecasts_frame(ds: HtsDataset, forecasts: Mapping[str, Sequence[np.ndarray]]) -> pd.DataFrame:
    """Long table ``instance_id,node_id,t,forecast``; ``t`` continues the history index."""
    rows = []
    for inst in ds.instances:
        for i, nid in enumerate(inst.hierarchy.node_ids):
            for step, v in enumerate(forecasts[inst.id][i]):
                rows.append((inst.id, nid, inst.length + step, float(v)))
    return pd.DataFrame(rows, columns=["instance_id", "node_id", "t", "forecast"])


def write_forecasts(path: Union[str, Path], ds: HtsDataset, forecasts) -> Path:
    frame = forecasts_frame(ds, forecasts)
    return atomic_write_text(path, frame.to_csv(index=False, float_format="%.17g"))


def read_forecasts(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path, dtype={"instance_id": str, "node_id": str}, float_precision="round_trip")


def timing_dict(report: TimingReport, mase_per_level: Mapping[int, Optional[float]]) -> Dict:
    return {
        "fits": report.fits,
        "wall_ms": report.wall_ms,
        "mase_per_level": [mase_per_level[l] for l in sorted(mase_per_level)],
        "fits_per_level": {str(l): n for l, n in sorted(report.fits_per_level.items())},
        "nodes": report.nodes,
    }


def write_timing(path: Union[str, Path], report: TimingReport, mase_per_level, extra=None) -> Path:
    body = timing_dict(report, mase_per_level)
    body.update(extra or {})
    return atomic_write_json(path, body)
