"""Calibration objective and population-based optimizers.

The objective is the RMSE of the bumper-to-bumper spacing between a simulated
follower and the observed one. Whole populations are evaluated in one harness
run, one candidate per lane.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels as K
from .models import (AmaxSchedule, ConfigurationError, EidmParams, IdmParams, KraussParams,
                     ParameterSet, default_parameters)
from .sim import CalibrationHarness, HarnessLog
from .trajectory import LeaderFollowerPair

Objective = Callable[[np.ndarray], np.ndarray]

DEFAULT_BOUNDS = {
    "a_max": (0.3, 4.0),
    "b": (0.5, 5.0),
    "T": (0.1, 3.0),
    "tau": (0.1, 3.0),
    "F_v": (0.7, 1.4),
    "delta": (1.0, 10.0),
    "t_AP": (None, 2.0),  # lower bound is the simulation step
    "t_reac": (0.0, 1.5),
    "t_start": (0.0, 2.5),
    "M_bg": (0.0, 1.0),
    "t_amax": (0.1, 8.0),
}

CALIBRATED = {
    "krauss": ("a_max", "b", "tau", "F_v", "t_AP"),
    "idm": ("a_max", "b", "T", "F_v", "delta", "t_AP"),
    "iidm": ("a_max", "b", "T", "F_v", "delta", "t_AP"),
    "eidm": ("a_max", "T", "F_v", "delta", "t_reac", "t_start", "M_bg", "t_amax"),
}

_ROW_INDEX = {"a_max": K.A_MAX, "b": K.B, "T": K.T, "tau": K.T, "F_v": K.F_V, "delta": K.DELTA,
              "t_AP": K.T_AP, "t_reac": K.T_REAC, "t_start": K.T_START, "M_bg": K.M_BG,
              "t_amax": K.T_AMAX}


@dataclass(frozen=True)
class ParameterBounds:
    names: tuple[str, ...]
    lb: np.ndarray
    ub: np.ndarray

    def __post_init__(self):
        lb, ub = np.asarray(self.lb, float), np.asarray(self.ub, float)
        if lb.shape != ub.shape or lb.shape != (len(self.names),):
            raise ConfigurationError("bounds must have one (lb, ub) pair per parameter")
        if not np.all(np.isfinite(lb)) or not np.all(np.isfinite(ub)) or np.any(lb >= ub):
            raise ConfigurationError("bounds need finite lb < ub for every parameter")
        object.__setattr__(self, "lb", lb)
        object.__setattr__(self, "ub", ub)

    @property
    def dim(self) -> int:
        return len(self.names)

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[float, float]], names: Optional[Sequence[str]] = None):
        arr = np.asarray(pairs, dtype=float).reshape(-1, 2)
        names = tuple(names) if names is not None else tuple(f"x{i}" for i in range(len(arr)))
        return cls(names, arr[:, 0], arr[:, 1])

    def clamp(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.lb, self.ub)

    def to_dict(self) -> dict:
        return {n: [float(a), float(b)] for n, a, b in zip(self.names, self.lb, self.ub)}


def reflect(x: np.ndarray, lb: np.ndarray, ub: np.ndarray) -> np.ndarray:
    """Fold out-of-bounds coordinates back into ``[lb, ub]`` by mirror reflection."""
    w = ub - lb
    y = np.mod(x - lb, 2.0 * w)
    y = np.where(y > w, 2.0 * w - y, y)
    return lb + y


@dataclass
class ModelSpace:
    """Maps between optimizer vectors and parameter sets for one model variant."""

    model: str
    names: tuple[str, ...]
    bounds: ParameterBounds
    base: ParameterSet
    schedule_speeds: tuple[float, ...] = ()

    def _index(self, name: str) -> int:
        if name.startswith("amax_"):
            return K.SCHED_A + int(name.split("_")[1])
        return _ROW_INDEX[name]

    def rows(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Kernel kinds and parameter rows for a batch of vectors."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        rows = np.tile(self.base.row(), (len(X), 1))
        for j, name in enumerate(self.names):
            rows[:, self._index(name)] = X[:, j]
        kinds = np.full(len(X), self.base.kind_code, dtype=np.int64)
        return kinds, rows

    def to_params(self, x: np.ndarray) -> ParameterSet:
        values = dict(zip(self.names, (float(v) for v in x)))
        p = self.base.params
        if isinstance(p, KraussParams):
            return ParameterSet(self.model, KraussParams(**{**p.__dict__, **values}))
        if isinstance(p, IdmParams):
            return ParameterSet(self.model, IdmParams(**{**p.__dict__, **values}))
        base_names = IdmParams.__dataclass_fields__.keys()
        base = IdmParams(**{**p.base.__dict__, **{k: v for k, v in values.items() if k in base_names}})
        extra = {k: v for k, v in values.items() if k in ("t_reac", "t_start", "M_bg", "t_amax")}
        sched = p.amax_schedule
        if self.schedule_speeds:
            sched = AmaxSchedule(tuple((s, values[f"amax_{i}"]) for i, s in enumerate(self.schedule_speeds)))
        return ParameterSet("eidm", EidmParams(base=base, t_reac=extra.get("t_reac", p.t_reac),
                                               t_start=extra.get("t_start", p.t_start),
                                               M_bg=extra.get("M_bg", p.M_bg),
                                               t_amax=extra.get("t_amax", p.t_amax),
                                               amax_schedule=sched))

    def to_vector(self, ps: ParameterSet) -> np.ndarray:
        row = ps.row()
        return np.array([row[self._index(n)] for n in self.names])

    def seed_vector(self, features: dict[str, float]) -> np.ndarray:
        """Bounds-clamped starting point: defaults overridden by observed features."""
        x = self.to_vector(self.base)
        for j, name in enumerate(self.names):
            key = "a_max" if name.startswith("amax_") else name
            key = "T" if key == "tau" else key
            if key in features and math.isfinite(features[key]):
                x[j] = features[key]
        return self.bounds.clamp(x)


def model_space(model: str, schedule_speeds: Optional[Sequence[float]] = None,
                bounds: Optional[dict] = None, dt: float = 0.04,
                names: Optional[Sequence[str]] = None) -> ModelSpace:
    """Calibrated parameter subset and bounds for ``model``.

    ``model`` is one of krauss, idm, iidm, eidm, or eidm_sched (EIDM whose
    maximum acceleration is a speed schedule with one value per breakpoint).
    """
    if model == "eidm_sched":
        if not schedule_speeds:
            raise ConfigurationError("eidm_sched needs schedule breakpoints")
        model = "eidm"
    if model not in CALIBRATED:
        raise ConfigurationError(f"unknown model kind {model!r}")
    speeds = tuple(float(s) for s in schedule_speeds or ())
    if speeds and model != "eidm":
        raise ConfigurationError("acceleration schedules are only supported by eidm")
    if len(speeds) > K.MAX_BREAKPOINTS:
        raise ConfigurationError(f"at most {K.MAX_BREAKPOINTS} schedule breakpoints")
    chosen = list(names) if names is not None else list(CALIBRATED[model])
    if speeds:
        chosen = [n for n in chosen if n != "a_max"] + [f"amax_{i}" for i in range(len(speeds))]
    table = dict(DEFAULT_BOUNDS)
    table.update(bounds or {})
    lb, ub = [], []
    for name in chosen:
        key = "a_max" if name.startswith("amax_") and name not in table else name
        if key not in table:
            raise ConfigurationError(f"no bounds for parameter {name!r}")
        lo, hi = table[key]
        lb.append(dt if lo is None else lo)
        ub.append(hi)
    return ModelSpace(model, tuple(chosen), ParameterBounds(tuple(chosen), np.array(lb), np.array(ub)),
                      default_parameters(model, speeds or None), speeds)


# --------------------------------------------------------------------------- objective


def ground_truth_spacing(pair: LeaderFollowerPair) -> np.ndarray:
    """Observed MoP: spacing to the leader, or distance to the stop position for free leaders."""
    if pair.leader is None:
        return pair.stop_position - pair.follower.driven_distance
    return pair.spacing


def spacing_mop(log: HarnessLog, pair: LeaderFollowerPair, lane: int) -> np.ndarray:
    """Simulated bumper-to-bumper spacing of ``lane`` on the pair's time grid."""
    if not 0 <= lane < log.n_lanes:
        raise IndexError(f"lane {lane} not in log with {log.n_lanes} lanes")
    if pair.leader is None:
        return pair.stop_position - log.follower_x[lane]
    return log.leader_x - log.leader_length - log.follower_x[lane]


def rmse(gt: np.ndarray, sim: np.ndarray) -> float:
    gt = np.asarray(gt, dtype=float)
    sim = np.asarray(sim, dtype=float)
    if gt.shape != sim.shape or gt.size == 0:
        raise ValueError(f"rmse needs equal non-empty series, got {gt.shape} and {sim.shape}")
    return float(np.sqrt(np.mean((sim - gt) ** 2)))


def _gofs(log: HarnessLog, pair: LeaderFollowerPair) -> np.ndarray:
    gt = ground_truth_spacing(pair)
    out = np.empty(log.n_lanes)
    for j in range(log.n_lanes):
        if log.collided[j]:
            out[j] = np.inf
        else:
            v = rmse(gt, spacing_mop(log, pair, j))
            out[j] = v if math.isfinite(v) else np.inf
    return out


def evaluate_population(pair: LeaderFollowerPair, candidates: Sequence[ParameterSet],
                        jobs: int = 1) -> np.ndarray:
    """GoF per candidate from one harness run; collisions score +inf."""
    log = CalibrationHarness(pair, list(candidates)).run(jobs)
    return _gofs(log, pair)


@dataclass
class PairObjective:
    """Vectorized objective ``X (n, d) -> GoF (n,)`` for one pair and model space."""

    pair: LeaderFollowerPair
    space: ModelSpace
    jobs: int = 1
    evaluations: int = 0

    def __call__(self, X: np.ndarray) -> np.ndarray:
        kinds, rows = self.space.rows(X)
        self.evaluations += len(kinds)
        log = CalibrationHarness(self.pair, kinds=kinds, rows=rows).run(self.jobs)
        return _gofs(log, self.pair)


# --------------------------------------------------------------------------- optimizers


@dataclass
class CalibrationResult:
    best_vector: np.ndarray
    gof: float
    trace: np.ndarray
    evaluations: int
    seed: int
    algorithm: str
    config: dict
    names: tuple[str, ...] = ()
    best_params: Optional[ParameterSet] = None
    pair_id: str = ""
    model: str = ""
    dt: float = math.nan
    wall_time: float = 0.0

    def to_dict(self, include_wall_time: bool = False) -> dict:
        d = {
            "pair_id": self.pair_id,
            "model": self.model,
            "algorithm": self.algorithm,
            "config": self.config,
            "seed": self.seed,
            "dt": None if math.isnan(self.dt) else self.dt,
            "gof": self.gof,
            "evaluations": self.evaluations,
            "names": list(self.names),
            "best_vector": [float(v) for v in self.best_vector],
            "trace": [float(v) for v in self.trace],
            "best_params": None if self.best_params is None else self.best_params.to_dict(),
        }
        if include_wall_time:
            d["wall_time"] = self.wall_time
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationResult":
        return cls(best_vector=np.asarray(d["best_vector"], float), gof=float(d["gof"]),
                   trace=np.asarray(d["trace"], float), evaluations=int(d["evaluations"]),
                   seed=int(d["seed"]), algorithm=d["algorithm"], config=d.get("config", {}),
                   names=tuple(d.get("names", ())),
                   best_params=None if d.get("best_params") is None
                   else ParameterSet.from_dict(d["best_params"]),
                   pair_id=d.get("pair_id", ""), model=d.get("model", ""),
                   dt=math.nan if d.get("dt") is None else float(d["dt"]),
                   wall_time=float(d.get("wall_time", 0.0)))


def _initial_population(rng, bounds: ParameterBounds, pop: int, init: Optional[np.ndarray]):
    X = rng.uniform(bounds.lb, bounds.ub, size=(pop, bounds.dim))
    if init is not None:
        init = np.atleast_2d(np.asarray(init, dtype=float))
        X[:len(init)] = bounds.clamp(init[:pop])
    return X


def differential_evolution(objective: Objective, bounds: ParameterBounds, pop: int = 200,
                           iters: int = 50, F: float = 0.8, CR: float = 0.9, seed: int = 0,
                           init: Optional[np.ndarray] = None) -> CalibrationResult:
    """DE/rand/1/bin with reflection at the bounds and greedy one-to-one selection.

    ``init`` rows replace the first members of the random initial population.
    ``trace[k]`` is the best GoF after ``k`` generations.
    """
    if pop < 4:
        raise ConfigurationError("population too small: differential evolution needs pop >= 4")
    if iters < 0:
        raise ConfigurationError("iterations must be non-negative")
    rng = np.random.default_rng(seed)
    d = bounds.dim
    X = _initial_population(rng, bounds, pop, init)
    f = np.asarray(objective(X), dtype=float)
    evals = pop
    trace = [float(np.min(f))]
    idx = np.arange(pop)
    for _ in range(iters):
        # three distinct partners per member, none equal to the member itself
        r = np.empty((pop, 3), dtype=np.int64)
        for i in range(pop):
            r[i] = rng.choice(pop - 1, 3, replace=False)
        r += r >= idx[:, None]
        mutant = X[r[:, 0]] + F * (X[r[:, 1]] - X[r[:, 2]])
        cross = rng.random((pop, d)) < CR
        cross[idx, rng.integers(0, d, pop)] = True
        trial = reflect(np.where(cross, mutant, X), bounds.lb, bounds.ub)
        ft = np.asarray(objective(trial), dtype=float)
        evals += pop
        better = ft <= f
        X[better] = trial[better]
        f[better] = ft[better]
        trace.append(float(np.min(f)))
    best = int(np.argmin(f))
    return CalibrationResult(X[best].copy(), float(f[best]), np.minimum.accumulate(trace), evals,
                             seed, "de", {"pop": pop, "iters": iters, "F": F, "CR": CR},
                             bounds.names)


def genetic_algorithm(objective: Objective, bounds: ParameterBounds, pop: int = 500,
                      iters: int = 50, tournament: int = 3, alpha: float = 0.5,
                      mutation_rate: Optional[float] = None, mutation_scale: float = 0.1,
                      crossover_rate: float = 1.0, elitism: int = 1, seed: int = 0,
                      init: Optional[np.ndarray] = None) -> CalibrationResult:
    """Real-coded GA: tournament selection, blend (BLX-alpha) crossover, Gaussian mutation.

    The random stream of generation ``k`` does not depend on ``iters``, so a
    longer run passes through exactly the states of a shorter one.
    """
    if pop < 2:
        raise ConfigurationError("population too small: genetic algorithm needs pop >= 2")
    if not 0 <= elitism < pop:
        raise ConfigurationError("elitism must be in [0, pop)")
    rng = np.random.default_rng(seed)
    d = bounds.dim
    rate = 1.0 / d if mutation_rate is None else mutation_rate
    sigma = mutation_scale * (bounds.ub - bounds.lb)
    X = _initial_population(rng, bounds, pop, init)
    f = np.asarray(objective(X), dtype=float)
    evals = pop
    trace = [float(np.min(f))]
    n_child = pop - elitism
    for _ in range(iters):
        contenders = rng.integers(0, pop, size=(2 * n_child, tournament))
        winners = contenders[np.arange(2 * n_child), np.argmin(f[contenders], axis=1)]
        p1, p2 = X[winners[:n_child]], X[winners[n_child:]]
        lo, hi = np.minimum(p1, p2), np.maximum(p1, p2)
        span = hi - lo
        u = rng.random((n_child, d))
        blend = lo - alpha * span + u * (1.0 + 2.0 * alpha) * span
        do_cross = rng.random(n_child) < crossover_rate
        child = np.where(do_cross[:, None], blend, p1)
        mutate = rng.random((n_child, d)) < rate
        child = child + mutate * rng.normal(0.0, 1.0, (n_child, d)) * sigma
        child = reflect(child, bounds.lb, bounds.ub)
        fc = np.asarray(objective(child), dtype=float) if n_child else np.empty(0)
        evals += n_child
        elite = np.argsort(f, kind="stable")[:elitism]
        X = np.vstack([X[elite], child])
        f = np.concatenate([f[elite], fc])
        trace.append(float(np.min(f)))
    best = int(np.argmin(f))
    return CalibrationResult(X[best].copy(), float(f[best]), np.minimum.accumulate(trace), evals,
                             seed, "ga", {"pop": pop, "iters": iters, "tournament": tournament,
                                          "alpha": alpha, "mutation_rate": rate,
                                          "mutation_scale": mutation_scale,
                                          "crossover_rate": crossover_rate, "elitism": elitism},
                             bounds.names)


ALGO_DEFAULTS = {"de": {"pop": 200, "iters": 50}, "ga": {"pop": 500, "iters": 50}}


def calibrate_pair(pair: LeaderFollowerPair, model: str, algo: str = "de", pop: Optional[int] = None,
                   iters: Optional[int] = None, seed: int = 0,
                   schedule_speeds: Optional[Sequence[float]] = None, bounds: Optional[dict] = None,
                   jobs: int = 1, **algo_kw) -> CalibrationResult:
    """Estimate a starting point, optimize, and return the best parameter set found."""
    from .trajectory import observed_features

    if algo not in ALGO_DEFAULTS:
        raise ConfigurationError(f"unknown algorithm {algo!r}")
    space = model_space(model, schedule_speeds, bounds, dt=pair.dt)
    objective = PairObjective(pair, space, jobs)
    x0 = space.seed_vector(observed_features(pair))
    pop = ALGO_DEFAULTS[algo]["pop"] if pop is None else pop
    iters = ALGO_DEFAULTS[algo]["iters"] if iters is None else iters
    optimizer = differential_evolution if algo == "de" else genetic_algorithm
    start = time.perf_counter()
    res = optimizer(objective, space.bounds, pop=pop, iters=iters, seed=seed, init=x0, **algo_kw)
    res.wall_time = time.perf_counter() - start
    res.best_params = space.to_params(res.best_vector)
    res.pair_id = pair.pair_id
    res.model = "eidm_sched" if space.schedule_speeds else space.model
    res.dt = pair.dt
    res.config = {**res.config, "bounds": space.bounds.to_dict(),
                  "schedule_speeds": list(space.schedule_speeds)}
    return res


def summarize(results: Sequence[CalibrationResult]) -> dict:
    g = np.array([r.gof for r in results], dtype=float)
    if g.size == 0:
        return {"n": 0}
    finite = g[np.isfinite(g)]
    return {"n": int(g.size), "n_finite": int(finite.size),
            "mean_rmse": float(np.mean(finite)) if finite.size else None,
            "median_rmse": float(np.median(finite)) if finite.size else None,
            "min_rmse": float(np.min(finite)) if finite.size else None,
            "max_rmse": float(np.max(finite)) if finite.size else None}


@dataclass
class ComparisonReport:
    pair_ids: list[str]
    de_gof: np.ndarray
    ga_gof: dict[int, np.ndarray]
    de_iters: int
    ga_budgets: tuple[int, ...]
    de_results: list[CalibrationResult] = field(default_factory=list)

    def de_wins(self, budget: int) -> int:
        return int(np.sum(self.de_gof < self.ga_gof[budget]))

    def ga_wins(self, budget: int) -> int:
        return int(np.sum(self.ga_gof[budget] < self.de_gof))

    def mean_relative_gap(self, budget: int) -> float:
        """Mean of (DE - GA) / DE; positive when GA is better."""
        de, ga = self.de_gof, self.ga_gof[budget]
        ok = np.isfinite(de) & np.isfinite(ga) & (de > 0)
        return float(np.mean((de[ok] - ga[ok]) / de[ok])) if np.any(ok) else math.nan

    def to_dict(self) -> dict:
        return {"n_pairs": len(self.pair_ids), "pair_ids": self.pair_ids,
                "de_iters": self.de_iters, "de_gof": self.de_gof.tolist(),
                "ga": {str(b): {"gof": self.ga_gof[b].tolist(), "de_wins": self.de_wins(b),
                                "ga_wins": self.ga_wins(b),
                                "mean_relative_gap": self.mean_relative_gap(b)}
                       for b in self.ga_budgets}}


def compare_optimizers(pairs: Sequence[LeaderFollowerPair], model: str = "eidm",
                       de_pop: int = 200, de_iters: int = 50, ga_pop: int = 500,
                       ga_budgets: Sequence[int] = (50, 300), seed: int = 0, jobs: int = 1,
                       de_results: Optional[Sequence[CalibrationResult]] = None,
                       schedule_speeds=None) -> ComparisonReport:
    """DE at one budget against GA read off a single long run at several budgets.

    Pair ``k`` is optimized with seed ``seed + k`` by both algorithms.
    """
    if len(pairs) < 2:
        raise ConfigurationError("optimizer comparison needs at least two pairs")
    budgets = tuple(sorted(set(int(b) for b in ga_budgets)))
    de_list = list(de_results) if de_results is not None else [
        calibrate_pair(p, model, "de", de_pop, de_iters, seed + k, schedule_speeds, jobs=jobs)
        for k, p in enumerate(pairs)]
    ga_gof = {b: np.empty(len(pairs)) for b in budgets}
    for k, p in enumerate(pairs):
        res = calibrate_pair(p, model, "ga", ga_pop, budgets[-1], seed + k, schedule_speeds, jobs=jobs)
        for b in budgets:
            ga_gof[b][k] = res.trace[b]
    return ComparisonReport([p.pair_id for p in pairs], np.array([r.gof for r in de_list]),
                            ga_gof, de_iters, budgets, de_list)


def results_to_json(results: Sequence[CalibrationResult]) -> str:
    return json.dumps([r.to_dict() for r in results], indent=1, sort_keys=True)


def results_from_json(text: str) -> list[CalibrationResult]:
    return [CalibrationResult.from_dict(d) for d in json.loads(text)]
