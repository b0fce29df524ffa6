"""Discrete optimal transport with a Soft-DTW divergence ground cost.

Measures are finite weighted sets of series (or, for the second-order distance, of
measures). Exact problems go to POT's network simplex, entropic ones to its log-domain
Sinkhorn. Pairwise divergences between atoms are memoized in an ``AtomRegistry`` that
several threads may share.
"""

from __future__ import annotations

import hashlib
import logging
import math
import threading
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import ot

from .errors import ConvergenceError, DimensionError, InvariantError, UsageError
from .hierarchy import TimeSeries
from .runs import parallel_map
from .sdtw import (
    CostMatrix,
    OptimizerConfig,
    SdtwConfig,
    combine_divergence,
    sdtw_mean,
    sdtw_self,
    sdtw_value,
)

logger = logging.getLogger(__name__)

SINKHORN_METHODS = ("sinkhorn_log", "sinkhorn_epsilon_scaling", "sinkhorn_stabilized")


@dataclass(frozen=True)
class OtConfig:
    epsilon: float = 0.0
    max_iter: int = 10000
    tol: float = 1e-8
    exact_size_limit: int = 64
    cost_power: int = 1
    method: str = "sinkhorn_log"

    def __post_init__(self):
        if self.epsilon < 0:
            raise UsageError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.cost_power not in (1, 2):
            raise UsageError(f"cost_power must be 1 or 2, got {self.cost_power}")
        if self.method not in SINKHORN_METHODS:
            raise UsageError(f"unknown Sinkhorn method {self.method}")
        if self.max_iter < 1 or self.tol <= 0:
            raise UsageError("max_iter must be >= 1 and tol > 0")


@dataclass(frozen=True)
class BarycenterConfig:
    max_iter: int = 20
    tol: float = 1e-7
    weights: str = "uniform"
    slack: float = 1e-10

    def __post_init__(self):
        if self.weights not in ("uniform", "mass"):
            raise UsageError(f"barycenter weights must be 'uniform' or 'mass', got {self.weights}")
        if self.max_iter < 1:
            raise UsageError("barycenter max_iter must be >= 1")


Atom = Union[TimeSeries, "DiscreteMeasure"]


@dataclass(frozen=True)
class DiscreteMeasure:
    atoms: Tuple[Atom, ...]
    weights: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        if len(self.atoms) == 0:
            raise InvariantError("a measure needs at least one atom")
        if w.shape[0] != len(self.atoms):
            raise InvariantError(f"{len(self.atoms)} atoms but {w.shape[0]} weights")
        if np.any(w < 0) or abs(float(np.sum(w)) - 1.0) > 1e-12:
            raise InvariantError("measure weights must lie on the simplex", {"sum": float(np.sum(w))})
        keys = [atom_key(a) for a in self.atoms]
        if len(set(keys)) != len(keys):
            raise InvariantError("duplicate atoms in a measure")
        w.setflags(write=False)
        object.__setattr__(self, "atoms", tuple(self.atoms))
        object.__setattr__(self, "weights", w)

    @property
    def k(self) -> int:
        return len(self.atoms)

    @classmethod
    def from_counts(cls, atoms: Sequence[Atom], counts: Sequence[float]) -> "DiscreteMeasure":
        """Empirical measure with weights proportional to ``counts``.

        Zero counts are dropped and atoms with equal values are merged.
        """
        c = np.asarray(counts, dtype=np.float64)
        merged: Dict[str, int] = {}
        keep: List[int] = []
        totals: List[float] = []
        for i in range(len(atoms)):
            if c[i] <= 0:
                continue
            key = atom_key(atoms[i])
            if key in merged:
                totals[merged[key]] += float(c[i])
            else:
                merged[key] = len(keep)
                keep.append(i)
                totals.append(float(c[i]))
        w = np.asarray(totals) / float(np.sum(totals))
        # exact simplex despite rounding: put the residual on the heaviest atom
        w[int(np.argmax(w))] += 1.0 - float(np.sum(w))
        return cls(tuple(atoms[i] for i in keep), w)

    @classmethod
    def point_mass(cls, atom: Atom) -> "DiscreteMeasure":
        return cls((atom,), np.ones(1))

    @classmethod
    def uniform(cls, atoms: Sequence[Atom]) -> "DiscreteMeasure":
        return cls.from_counts(atoms, np.ones(len(atoms)))


class TransportPlan(NamedTuple):
    plan: np.ndarray
    cost: float
    dual_gap: Optional[float] = None
    marginal_violation: float = 0.0


def _digest(values: np.ndarray) -> str:
    return hashlib.blake2b(np.ascontiguousarray(values).tobytes(), digest_size=16).hexdigest()


def atom_key(atom: Atom) -> str:
    """Content key of an atom: equal values share a key whatever their ids."""
    if isinstance(atom, TimeSeries):
        return "s:" + _digest(atom.values)
    inner = "|".join(f"{atom_key(a)}@{w!r}" for a, w in zip(atom.atoms, atom.weights))
    return "m:" + hashlib.blake2b(inner.encode("ascii"), digest_size=16).hexdigest()


class AtomRegistry:
    """Memoized pairwise divergences keyed by the unordered atom pair, for one config."""

    def __init__(self, sdtw_cfg: SdtwConfig = SdtwConfig()):
        self.sdtw_cfg = sdtw_cfg
        self._selfs: Dict[str, float] = {}
        self._pairs: Dict[Tuple[str, str], float] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def clear(self) -> None:
        with self._lock:
            self._selfs.clear()
            self._pairs.clear()
            self.hits = self.misses = 0

    def __len__(self) -> int:
        return len(self._pairs)

    def self_term(self, series: TimeSeries) -> float:
        key = atom_key(series)
        with self._lock:
            hit = self._selfs.get(key)
        if hit is not None:
            return hit
        value = sdtw_self(series.values, self.sdtw_cfg)
        with self._lock:
            self._selfs.setdefault(key, value)
        return value

    def divergence(self, x: TimeSeries, y: TimeSeries) -> float:
        kx, ky = atom_key(x), atom_key(y)
        if kx == ky:
            return 0.0
        pair = (kx, ky) if kx < ky else (ky, kx)
        with self._lock:
            hit = self._pairs.get(pair)
            if hit is not None:
                self.hits += 1
                return hit
        a, b = (x, y) if kx < ky else (y, x)
        value = combine_divergence(
            sdtw_value(a.values, b.values, self.sdtw_cfg), self.self_term(a), self.self_term(b)
        )
        with self._lock:
            self.misses += 1
            self._pairs.setdefault(pair, value)
        return value


# ---------------------------------------------------------------------------
# transport

def ground_cost_matrix(
    P: DiscreteMeasure,
    Q: DiscreteMeasure,
    cfg: SdtwConfig = SdtwConfig(),
    registry: Optional[AtomRegistry] = None,
) -> CostMatrix:
    """Divergence between every atom of ``P`` and every atom of ``Q``."""
    reg = registry if registry is not None else AtomRegistry(cfg)
    M = np.empty((P.k, Q.k))
    for i, a in enumerate(P.atoms):
        for j, b in enumerate(Q.atoms):
            M[i, j] = reg.divergence(a, b)
    return CostMatrix(M, "sdtw_divergence")


def ot_cost(
    P: DiscreteMeasure,
    Q: DiscreteMeasure,
    ground_cost: Union[CostMatrix, np.ndarray],
    cfg: OtConfig = OtConfig(),
) -> TransportPlan:
    """Optimal coupling between ``P`` and ``Q`` and its cost under ``ground_cost``."""
    if isinstance(ground_cost, CostMatrix):
        ground_cost = ground_cost.entries
    M = np.asarray(ground_cost, dtype=np.float64)
    if M.shape != (P.k, Q.k):
        raise DimensionError(
            f"ground cost has shape {M.shape}, measures have {P.k} and {Q.k} atoms",
            {"shape": list(M.shape), "k1": P.k, "k2": Q.k},
        )
    if cfg.cost_power == 2:
        M = np.maximum(M, 0.0) ** 2
    return _solve(np.array(P.weights), np.array(Q.weights), np.ascontiguousarray(M), cfg)


def _solve(a: np.ndarray, b: np.ndarray, M: np.ndarray, cfg: OtConfig) -> TransportPlan:
    if M.size == 1 or a.size == 1 or b.size == 1:
        # a single row or column admits exactly one coupling
        plan = np.outer(a, b)
        return TransportPlan(plan, float(np.sum(plan * M)), 0.0, 0.0)
    if cfg.epsilon == 0:
        if max(M.shape) > cfg.exact_size_limit:
            raise UsageError(
                f"exact transport limited to {cfg.exact_size_limit} atoms, got {M.shape}; "
                f"use a positive epsilon",
                {"shape": list(M.shape)},
            )
        plan, log = ot.emd(a, b, M, log=True)
        if log.get("warning"):
            raise ConvergenceError(f"network simplex: {log['warning']}", {"shape": list(M.shape)})
        cost = float(np.sum(plan * M))
        dual = float(np.dot(a, log["u"]) + np.dot(b, log["v"]))
        gap = cost - dual
        if abs(gap) > 1e-8 * (1.0 + abs(cost)):
            logger.warning(f"Exact transport duality gap {gap:.3g} on a {M.shape} problem")
        return TransportPlan(plan, cost, gap, _violation(plan, a, b))

    plan, log = ot.sinkhorn(
        a, b, M, cfg.epsilon,
        method=cfg.method,
        numItermax=cfg.max_iter,
        stopThr=cfg.tol * 0.1,
        log=True,
        warn=False,
    )
    violation = _violation(plan, a, b)
    if not np.isfinite(violation) or violation > cfg.tol:
        raise ConvergenceError(
            f"Sinkhorn did not reach marginal tolerance {cfg.tol} in {cfg.max_iter} iterations",
            {"marginal_violation": float(violation), "epsilon": cfg.epsilon},
        )
    return TransportPlan(plan, float(np.sum(plan * M)), None, violation)


def _violation(plan: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return float(max(np.max(np.abs(plan.sum(axis=1) - a)), np.max(np.abs(plan.sum(axis=0) - b))))


def w_sdtw(
    P: DiscreteMeasure,
    Q: DiscreteMeasure,
    sdtw_cfg: SdtwConfig = SdtwConfig(),
    ot_cfg: OtConfig = OtConfig(),
    registry: Optional[AtomRegistry] = None,
) -> float:
    """Transport cost between two measures over series, divergence as ground cost."""
    return ot_cost(P, Q, ground_cost_matrix(P, Q, sdtw_cfg, registry), ot_cfg).cost


def w_sdtw2(
    P: DiscreteMeasure,
    Q: DiscreteMeasure,
    sdtw_cfg: SdtwConfig = SdtwConfig(),
    ot_cfg: OtConfig = OtConfig(),
    registry: Optional[AtomRegistry] = None,
) -> float:
    """Second-order distance between measures whose atoms are themselves measures."""
    reg = registry if registry is not None else AtomRegistry(sdtw_cfg)
    M = np.empty((P.k, Q.k))
    for i, a in enumerate(P.atoms):
        for j, b in enumerate(Q.atoms):
            if atom_key(a) == atom_key(b):
                M[i, j] = 0.0
            else:
                M[i, j] = w_sdtw(a, b, sdtw_cfg, ot_cfg, reg)
    return ot_cost(P, Q, M, ot_cfg).cost


# ---------------------------------------------------------------------------
# barycenters

class BarycenterResult(NamedTuple):
    measure: DiscreteMeasure
    objective: float
    history: List[float]
    iterations: int


def distinct_atoms(measures: Sequence[DiscreteMeasure], lam: np.ndarray):
    """Distinct atoms in first-appearance order with their lambda-weighted total mass."""
    order: List[TimeSeries] = []
    mass: Dict[str, float] = {}
    for m, l in zip(measures, lam):
        for atom, w in zip(m.atoms, m.weights):
            key = atom_key(atom)
            if key not in mass:
                order.append(atom)
                mass[key] = 0.0
            mass[key] += float(l) * float(w)
    return order, mass


def _initial_support(measures, lam, support_size):
    atoms, mass = distinct_atoms(measures, lam)
    if support_size > len(atoms):
        logger.warning(
            f"Barycenter support size {support_size} exceeds {len(atoms)} distinct atoms; clamped"
        )
        support_size = len(atoms)
    ranked = sorted(range(len(atoms)), key=lambda i: (-mass[atom_key(atoms[i])], i))
    chosen = sorted(ranked[:support_size])
    return [atoms[i] for i in chosen]


class _BarycenterProblem:
    def __init__(self, measures, lam, sdtw_cfg, ot_cfg, registry, threads):
        self.measures = measures
        self.lam = lam
        self.sdtw_cfg = sdtw_cfg
        self.ot_cfg = ot_cfg
        self.registry = registry
        self.threads = threads

    def plans(self, nu: DiscreteMeasure) -> List[TransportPlan]:
        def solve(P):
            return ot_cost(P, nu, ground_cost_matrix(P, nu, self.sdtw_cfg, self.registry), self.ot_cfg)

        return parallel_map(solve, self.measures, self.threads)

    def objective(self, plans: Sequence[TransportPlan]) -> float:
        total = 0.0
        for l, p in zip(self.lam, plans):
            total += float(l) * p.cost
        return total


def free_support_barycenter(
    measures: Sequence[DiscreteMeasure],
    lam: Optional[Sequence[float]] = None,
    support_size: int = 1,
    sdtw_cfg: SdtwConfig = SdtwConfig(),
    ot_cfg: OtConfig = OtConfig(),
    bar_cfg: BarycenterConfig = BarycenterConfig(),
    opt: OptimizerConfig = OptimizerConfig(),
    registry: Optional[AtomRegistry] = None,
    init: Optional[DiscreteMeasure] = None,
    threads: Optional[int] = 1,
    name: str = "bary",
) -> BarycenterResult:
    """Minimize sum_i lambda_i W(P_i, nu) over the atoms of nu, weights held fixed.

    Each outer iteration computes the plans from every input to the current barycenter,
    then moves every barycenter atom to the Soft-DTW mean of the input atoms weighted by
    the mass they send to it. An update that raises the objective is rolled back and ends
    the iteration, so ``history`` is nonincreasing.
    """
    if not measures:
        raise UsageError("barycenter of an empty list of measures")
    if support_size < 1:
        raise UsageError(f"support size must be >= 1, got {support_size}")
    lam_arr = np.full(len(measures), 1.0 / len(measures)) if lam is None else np.asarray(lam, float)
    if lam_arr.shape != (len(measures),) or np.any(lam_arr < 0) or abs(lam_arr.sum() - 1.0) > 1e-9:
        raise UsageError("barycenter weights lambda must lie on the simplex")
    reg = registry if registry is not None else AtomRegistry(sdtw_cfg)
    problem = _BarycenterProblem(list(measures), lam_arr, sdtw_cfg, ot_cfg, reg, threads)

    if init is not None:
        nu = init
    else:
        nu = DiscreteMeasure.uniform(_initial_support(measures, lam_arr, support_size))
        if bar_cfg.weights == "mass":
            nu = _try_mass_weights(problem, nu, None)
    plans = problem.plans(nu)
    f = problem.objective(plans)
    history = [f]
    iterations = 0
    for iterations in range(1, bar_cfg.max_iter + 1):
        candidate = _update_support(problem, nu, plans, opt, name)
        if candidate is None:
            iterations -= 1
            break
        cand_plans = problem.plans(candidate)
        f_new = problem.objective(cand_plans)
        if f_new > f + bar_cfg.slack:
            logger.debug(f"Barycenter support update raised objective {f:.6g} -> {f_new:.6g}; kept")
            iterations -= 1
            break
        if bar_cfg.weights == "mass":
            candidate, cand_plans, f_new = _try_mass_weights(problem, candidate, (cand_plans, f_new))
        prev = f
        nu, plans, f = candidate, cand_plans, f_new
        history.append(f)
        if abs(prev - f) <= bar_cfg.tol * max(abs(prev), 1e-300):
            break
    logger.debug(f"Barycenter finished after {iterations} iterations, objective {f:.6g}")
    return BarycenterResult(nu, f, history, iterations)


def _update_support(problem, nu, plans, opt, name) -> Optional[DiscreteMeasure]:
    def move(k: int) -> TimeSeries:
        members, weights = [], []
        for l, P, plan in zip(problem.lam, problem.measures, plans):
            for a, atom in enumerate(P.atoms):
                mass = float(l) * float(plan.plan[a, k])
                if mass > 0:
                    members.append(atom.values)
                    weights.append(mass)
        current = nu.atoms[k]
        if not members:
            return current
        result = sdtw_mean(members, current.values, problem.sdtw_cfg, opt, weights)
        if np.array_equal(result.values, current.values):
            return current
        return TimeSeries(f"{name}/{k}", result.values)

    moved = parallel_map(move, range(nu.k), problem.threads)
    if all(m is a for m, a in zip(moved, nu.atoms)):
        return None
    if len({atom_key(m) for m in moved}) != len(moved):
        # two atoms collapsed onto the same series; keep the current support
        return None
    return DiscreteMeasure(tuple(moved), nu.weights)


def _try_mass_weights(problem, nu, current):
    """Re-estimate weights from each input atom's nearest barycenter atom, if it helps."""
    mass = np.zeros(nu.k)
    for l, P in zip(problem.lam, problem.measures):
        for atom, w in zip(P.atoms, P.weights):
            d = [problem.registry.divergence(atom, b) for b in nu.atoms]
            mass[int(np.argmin(d))] += float(l) * float(w)
    # atoms receiving no mass keep a zero weight and are dropped from the measure
    candidate = DiscreteMeasure.from_counts(nu.atoms, mass)
    if current is None:
        return candidate
    cand_plans = problem.plans(candidate)
    f_new = problem.objective(cand_plans)
    if f_new <= current[1]:
        return candidate, cand_plans, f_new
    return (nu, *current)


def barycenter_support_size(child_counts: Sequence[int]) -> int:
    """ceil of the mean number of children."""
    return max(1, int(math.ceil(float(np.mean(child_counts)) - 1e-12)))
