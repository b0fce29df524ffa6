"""Soft-DTW value, gradient, divergence and cluster means for univariate series.

The ground cost is the squared difference per time step. All soft-min reductions are
shifted by their minimum before exponentiation, so small ``gamma`` does not underflow.
Kernels are compiled with numba and release the GIL, so pairwise batches can run on a
thread pool.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from numba import njit

from .errors import UsageError
from .hierarchy import SeriesLike, as_values

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SdtwConfig:
    gamma: float = 1.0
    band: Optional[int] = None

    def __post_init__(self):
        if not (self.gamma > 0 and np.isfinite(self.gamma)):
            raise UsageError(f"gamma must be positive, got {self.gamma}")
        if self.band is not None and self.band < 0:
            raise UsageError(f"band width must be >= 0, got {self.band}")

    def band_for(self, t1: int, t2: int) -> int:
        """Effective band half-width for a T1 x T2 problem, -1 for unconstrained."""
        if self.band is None:
            return -1
        return max(int(self.band), abs(t1 - t2))


@dataclass(frozen=True)
class OptimizerConfig:
    max_iter: int = 200
    tol: float = 1e-6
    step: float = 1e-2
    shrink: float = 0.5
    armijo: float = 1e-4
    max_backtracks: int = 30
    max_step_factor: float = 1e3

    def __post_init__(self):
        if self.max_iter < 0 or self.max_backtracks < 1:
            raise UsageError("max_iter must be >= 0 and max_backtracks >= 1")
        if not (0 < self.shrink < 1) or self.step <= 0 or self.tol < 0:
            raise UsageError("invalid line-search parameters")


@dataclass(frozen=True)
class CostMatrix:
    entries: np.ndarray
    cost_kind: str = "sqeuclidean"

    @property
    def shape(self) -> Tuple[int, int]:
        return self.entries.shape


class MeanResult(NamedTuple):
    values: np.ndarray
    objective: float
    history: List[float]
    converged: bool
    iterations: int


# ---------------------------------------------------------------------------
# numba kernels

@njit(cache=True, nogil=True)
def _sq_cost(x, y):
    t1 = x.shape[0]
    t2 = y.shape[0]
    C = np.empty((t1, t2))
    for i in range(t1):
        for j in range(t2):
            d = x[i] - y[j]
            C[i, j] = d * d
    return C


@njit(cache=True, nogil=True)
def _softmin3(diag, up, left, gamma):
    # up and left enter symmetrically so that transposed problems agree bit for bit
    m = min(diag, min(up, left))
    if m == np.inf:
        return np.inf
    s = np.exp(-(diag - m) / gamma) + (np.exp(-(up - m) / gamma) + np.exp(-(left - m) / gamma))
    return m - gamma * np.log(s)


@njit(cache=True, nogil=True)
def _forward(C, gamma, band):
    t1, t2 = C.shape
    R = np.full((t1 + 1, t2 + 1), np.inf)
    R[0, 0] = 0.0
    for i in range(1, t1 + 1):
        for j in range(1, t2 + 1):
            if band >= 0 and abs(i - j) > band:
                continue
            R[i, j] = C[i - 1, j - 1] + _softmin3(R[i - 1, j - 1], R[i - 1, j], R[i, j - 1], gamma)
    return R


@njit(cache=True, nogil=True)
def _backward(C, R, gamma, band):
    """Expected alignment matrix E = dSDTW/dC."""
    t1, t2 = C.shape
    Rp = np.full((t1 + 2, t2 + 2), -np.inf)
    Cp = np.zeros((t1 + 2, t2 + 2))
    for i in range(1, t1 + 1):
        for j in range(1, t2 + 1):
            r = R[i, j]
            Rp[i, j] = -np.inf if r == np.inf else r
            Cp[i, j] = C[i - 1, j - 1]
    Rp[t1 + 1, t2 + 1] = R[t1, t2]
    E = np.zeros((t1 + 2, t2 + 2))
    E[t1 + 1, t2 + 1] = 1.0
    for i in range(t1, 0, -1):
        for j in range(t2, 0, -1):
            if Rp[i, j] == -np.inf or (band >= 0 and abs(i - j) > band):
                continue
            a = np.exp((Rp[i + 1, j] - Rp[i, j] - Cp[i + 1, j]) / gamma)
            b = np.exp((Rp[i, j + 1] - Rp[i, j] - Cp[i, j + 1]) / gamma)
            c = np.exp((Rp[i + 1, j + 1] - Rp[i, j] - Cp[i + 1, j + 1]) / gamma)
            E[i, j] = a * E[i + 1, j] + b * E[i, j + 1] + c * E[i + 1, j + 1]
    return E[1:t1 + 1, 1:t2 + 1]


@njit(cache=True, nogil=True)
def _value_grad(x, y, gamma, band, both_slots):
    C = _sq_cost(x, y)
    R = _forward(C, gamma, band)
    E = _backward(C, R, gamma, band)
    t1, t2 = C.shape
    g = np.zeros(t1)
    for i in range(t1):
        acc = 0.0
        for j in range(t2):
            acc += E[i, j] * 2.0 * (x[i] - y[j])
        g[i] = acc
    if both_slots:
        # x == y: add the derivative through the second argument
        for j in range(t2):
            acc = 0.0
            for i in range(t1):
                acc += E[i, j] * 2.0 * (y[j] - x[i])
            g[j] += acc
    return R[t1, t2], g


@njit(cache=True, nogil=True)
def _value(x, y, gamma, band):
    R = _forward(_sq_cost(x, y), gamma, band)
    return R[x.shape[0], y.shape[0]]


# ---------------------------------------------------------------------------
# public operations

def cost_matrix(x: SeriesLike, y: SeriesLike) -> CostMatrix:
    return CostMatrix(_sq_cost(as_values(x), as_values(y)))


def soft_dtw(c, cfg: SdtwConfig = SdtwConfig()) -> float:
    """SDTW_gamma of a cost matrix (``CostMatrix`` or 2-d array)."""
    entries = c.entries if isinstance(c, CostMatrix) else np.ascontiguousarray(c, dtype=np.float64)
    t1, t2 = entries.shape
    R = _forward(entries, float(cfg.gamma), cfg.band_for(t1, t2))
    return float(R[t1, t2])


def sdtw_value(x: SeriesLike, y: SeriesLike, cfg: SdtwConfig = SdtwConfig()) -> float:
    xv, yv = as_values(x), as_values(y)
    return float(_value(xv, yv, float(cfg.gamma), cfg.band_for(xv.size, yv.size)))


def sdtw_self(x: SeriesLike, cfg: SdtwConfig = SdtwConfig()) -> float:
    """SDTW_gamma(C(x, x)), the self-term of the divergence."""
    return sdtw_value(x, x, cfg)


def soft_dtw_grad(
    x: SeriesLike, y: SeriesLike, cfg: SdtwConfig = SdtwConfig()
) -> Tuple[float, np.ndarray]:
    xv, yv = as_values(x), as_values(y)
    value, g = _value_grad(xv, yv, float(cfg.gamma), cfg.band_for(xv.size, yv.size), False)
    return float(value), g


def _self_value_grad(x: np.ndarray, cfg: SdtwConfig) -> Tuple[float, np.ndarray]:
    value, g = _value_grad(x, x, float(cfg.gamma), cfg.band_for(x.size, x.size), True)
    return float(value), g


def combine_divergence(cross: float, self_x: float, self_y: float) -> float:
    """a - (a_xx + a_yy) / 2, written so that it is symmetric and zero on the diagonal."""
    return cross - 0.5 * (self_x + self_y)


def sdtw_divergence(x: SeriesLike, y: SeriesLike, cfg: SdtwConfig = SdtwConfig()) -> float:
    xv, yv = as_values(x), as_values(y)
    return combine_divergence(sdtw_value(xv, yv, cfg), sdtw_self(xv, cfg), sdtw_self(yv, cfg))


def sdtw_divergence_grad(
    x: SeriesLike, y: SeriesLike, cfg: SdtwConfig = SdtwConfig()
) -> Tuple[float, np.ndarray]:
    xv, yv = as_values(x), as_values(y)
    cross, g_cross = soft_dtw_grad(xv, yv, cfg)
    self_x, g_self = _self_value_grad(xv, cfg)
    self_y = sdtw_self(yv, cfg)
    return combine_divergence(cross, self_x, self_y), g_cross - 0.5 * g_self


# ---------------------------------------------------------------------------
# cluster means

def mean_length(lengths: Sequence[int]) -> int:
    """Median member length, snapped to the nearest existing length (shorter on ties)."""
    arr = np.asarray(lengths, dtype=np.int64)
    med = float(np.median(arr))
    candidates = np.unique(arr)
    return int(candidates[np.argmin(np.abs(candidates - med))])


def medoid_init(
    series: Sequence[SeriesLike],
    cfg: SdtwConfig = SdtwConfig(),
    rng: Optional[np.random.Generator] = None,
    subsample: int = 10,
    length: Optional[int] = None,
) -> np.ndarray:
    """Member of the target length with the smallest total divergence to a subsample."""
    values = [as_values(s) for s in series]
    target = mean_length([v.size for v in values]) if length is None else length
    candidates = [i for i, v in enumerate(values) if v.size == target]
    if not candidates:
        raise UsageError(f"no member has the target length {target}")
    if len(values) <= subsample:
        pool = list(range(len(values)))
    elif rng is None:
        pool = list(range(subsample))
    else:
        pool = sorted(int(i) for i in rng.choice(len(values), size=subsample, replace=False))
    selfs = {i: sdtw_self(values[i], cfg) for i in set(pool) | set(candidates)}
    best, best_score = candidates[0], np.inf
    for c in candidates:
        score = 0.0
        for p in pool:
            score += combine_divergence(sdtw_value(values[c], values[p], cfg), selfs[c], selfs[p])
        if score < best_score:
            best, best_score = c, score
    return values[best].copy()


class _MeanObjective:
    """Weighted divergence sum; member self-terms are computed once."""

    def __init__(self, members: List[np.ndarray], weights: np.ndarray, cfg: SdtwConfig):
        self.members = members
        self.weights = weights
        self.cfg = cfg
        self.selfs = [sdtw_self(m, cfg) for m in members]

    def value(self, mu: np.ndarray) -> float:
        s_mu = sdtw_self(mu, self.cfg)
        total = 0.0
        for m, w, s in zip(self.members, self.weights, self.selfs):
            total += w * combine_divergence(sdtw_value(mu, m, self.cfg), s_mu, s)
        return total

    def value_grad(self, mu: np.ndarray) -> Tuple[float, np.ndarray]:
        s_mu, g_self = _self_value_grad(mu, self.cfg)
        total = 0.0
        grad = np.zeros_like(mu)
        for m, w, s in zip(self.members, self.weights, self.selfs):
            v, g = soft_dtw_grad(mu, m, self.cfg)
            total += w * combine_divergence(v, s_mu, s)
            grad += w * g
        grad -= 0.5 * float(np.sum(self.weights)) * g_self
        return total, grad


def mean_objective(
    series: Sequence[SeriesLike],
    mu: SeriesLike,
    cfg: SdtwConfig = SdtwConfig(),
    weights: Optional[Sequence[float]] = None,
) -> float:
    members, w = _normalize_members(series, weights)
    return _MeanObjective(members, w, cfg).value(as_values(mu))


def _normalize_members(series, weights):
    members = [as_values(s) for s in series]
    if not members:
        raise UsageError("sdtw_mean needs at least one series")
    if weights is None:
        w = np.full(len(members), 1.0 / len(members))
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(members),) or np.any(w < 0) or not np.sum(w) > 0:
            raise UsageError("member weights must be nonnegative with a positive sum")
        w = w / np.sum(w)
    keep = [i for i in range(len(members)) if w[i] > 0]
    return [members[i] for i in keep], w[keep]


def mean_step_scale(members: Sequence[np.ndarray]) -> float:
    """Spread of the members' values; the line search starts at ``opt.step`` times this."""
    spread = float(np.std(np.concatenate([np.ravel(m) for m in members])))
    return spread if spread > 0 else 1.0


def sdtw_mean(
    series: Sequence[SeriesLike],
    init: SeriesLike,
    cfg: SdtwConfig = SdtwConfig(),
    opt: OptimizerConfig = OptimizerConfig(),
    weights: Optional[Sequence[float]] = None,
) -> MeanResult:
    """Minimize sum_i w_i D(x_i, mu) over mu by gradient descent with Armijo backtracking.

    Only steps that satisfy the sufficient-decrease test are taken, so ``history`` is
    nonincreasing and the returned objective never exceeds the objective at ``init``.
    """
    members, w = _normalize_members(series, weights)
    objective = _MeanObjective(members, w, cfg)
    mu = np.array(as_values(init), dtype=np.float64, copy=True)
    f, g = objective.value_grad(mu)
    history = [f]
    step = opt.step * mean_step_scale(members)
    max_step = step * opt.max_step_factor
    converged = False
    it = 0
    while it < opt.max_iter:
        gnorm2 = float(np.dot(g, g))
        if f == 0.0 or gnorm2 == 0.0:
            converged = True
            break
        accepted = False
        t = step
        for _ in range(opt.max_backtracks):
            trial = mu - t * g
            f_trial = objective.value(trial)
            if f_trial <= f - opt.armijo * t * gnorm2:
                accepted = True
                break
            t *= opt.shrink
        if not accepted:
            logger.debug(f"Line search stalled after {it} iterations at objective {f:.6g}")
            break
        it += 1
        prev = f
        mu = trial
        f, g = objective.value_grad(mu)
        history.append(f)
        step = min(2.0 * t, max_step)
        if abs(prev - f) <= opt.tol * max(abs(prev), 1e-300):
            converged = True
            break
    else:
        if opt.max_iter > 0:
            logger.warning(f"sdtw_mean hit max_iter={opt.max_iter} at objective {f:.6g}")
    mu.setflags(write=False)
    return MeanResult(mu, float(history[-1]), history, converged, it)


