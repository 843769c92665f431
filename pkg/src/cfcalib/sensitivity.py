"""Parameter screening: one-at-a-time sweeps and Sobol total-order indices."""
from __future__ import annotations

import io
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import qmc

from .calibration import PairObjective, model_space
from .trajectory import LeaderFollowerPair, observed_features

Objective = Callable[[np.ndarray], np.ndarray]

SCREENED = {
    "krauss": ("a_max", "b", "tau", "F_v", "t_AP"),
    "idm": ("a_max", "b", "T", "F_v", "delta", "t_AP"),
    "iidm": ("a_max", "b", "T", "F_v", "delta", "t_AP"),
    "eidm": ("a_max", "b", "T", "F_v", "delta", "t_reac", "t_start", "M_bg", "t_amax"),
}


@dataclass
class SensitivityReport:
    names: tuple[str, ...]
    lb: np.ndarray
    ub: np.ndarray
    oat: Optional[np.ndarray] = None
    sobol_total: Optional[np.ndarray] = None
    n_base: int = 0
    evaluations: int = 0
    zero_variance: bool = False
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else [float(v) for v in a]

        return {"names": list(self.names), "lb": arr(self.lb), "ub": arr(self.ub),
                "oat_index": arr(self.oat), "sobol_total": arr(self.sobol_total),
                "n_base": self.n_base, "evaluations": self.evaluations,
                "zero_variance": self.zero_variance, **self.extra}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("parameter,oat_index,sobol_total\n")
        for i, name in enumerate(self.names):
            o = "" if self.oat is None else repr(float(self.oat[i]))
            s = "" if self.sobol_total is None else repr(float(self.sobol_total[i]))
            buf.write(f"{name},{o},{s}\n")
        return buf.getvalue()


def _finite(y: np.ndarray) -> np.ndarray:
    """Replace failed evaluations (+inf) by the worst finite value of the batch."""
    y = np.asarray(y, dtype=float)
    bad = ~np.isfinite(y)
    if np.any(bad):
        ok = y[~bad]
        y = y.copy()
        y[bad] = ok.max() if ok.size else 0.0
    return y


def oat_sensitivity(objective: Objective, lb, ub, baseline, grid_n: int = 11,
                    names: Optional[Sequence[str]] = None) -> SensitivityReport:
    """Sweep each parameter over its range with the others at ``baseline``.

    Index = (max GoF - min GoF) / baseline GoF. When the baseline GoF is zero
    the swing is normalized by the mean GoF of the sweep instead.
    """
    lb, ub, x0 = (np.asarray(a, dtype=float) for a in (lb, ub, baseline))
    d = len(lb)
    names = tuple(names) if names is not None else tuple(f"x{i}" for i in range(d))
    if grid_n < 2:
        raise ValueError("grid needs at least 2 points")
    f0 = float(_finite(objective(x0[None, :]))[0])
    X = np.repeat(x0[None, :], d * grid_n, axis=0)
    for j in range(d):
        X[j * grid_n:(j + 1) * grid_n, j] = np.linspace(lb[j], ub[j], grid_n)
    y = _finite(objective(X)).reshape(d, grid_n)
    swing = y.max(axis=1) - y.min(axis=1)
    scale = f0 if f0 > 0 else float(np.mean(y))
    index = swing / scale if scale > 0 else np.zeros(d)
    return SensitivityReport(names, lb, ub, oat=index, evaluations=1 + d * grid_n,
                             extra={"baseline": [float(v) for v in x0], "baseline_gof": f0,
                                    "grid_n": grid_n})


def saltelli_design(lb, ub, n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """A, B and the stacked AB_i matrices (column i of A replaced by B's)."""
    lb, ub = np.asarray(lb, float), np.asarray(ub, float)
    d = len(lb)
    base = qmc.Sobol(2 * d, scramble=True, seed=seed).random(n)
    A = qmc.scale(base[:, :d], lb, ub)
    B = qmc.scale(base[:, d:], lb, ub)
    AB = np.repeat(A[None, :, :], d, axis=0)
    for i in range(d):
        AB[i, :, i] = B[:, i]
    return A, B, AB


def sobol_total_order(objective: Objective, lb, ub, n: int = 1024, seed: int = 0,
                      names: Optional[Sequence[str]] = None) -> SensitivityReport:
    """Total-order indices from a Saltelli design with the Jansen estimator.

    Uses exactly ``n * (d + 2)`` objective evaluations. ``n`` is rounded down
    to a power of two.
    """
    lb, ub = np.asarray(lb, float), np.asarray(ub, float)
    d = len(lb)
    names = tuple(names) if names is not None else tuple(f"x{i}" for i in range(d))
    if n < 2:
        raise ValueError("need at least 2 base samples")
    m = 1 << int(math.floor(math.log2(n)))
    if m != n:
        warnings.warn(f"base sample count {n} rounded down to power of two {m}", stacklevel=2)
    A, B, AB = saltelli_design(lb, ub, m, seed)
    y = _finite(objective(np.vstack([A, B, AB.reshape(d * m, d)])))
    fA, fB, fAB = y[:m], y[m:2 * m], y[2 * m:].reshape(d, m)
    var = np.var(np.concatenate([fA, fB]), ddof=1)
    zero = not var > (1e-12 * max(1.0, float(np.mean(np.abs(y))))) ** 2
    if zero:
        st = np.zeros(d)
    else:
        st = 0.5 * np.mean((fA[None, :] - fAB) ** 2, axis=1) / var
    return SensitivityReport(names, lb, ub, sobol_total=st, n_base=m, evaluations=len(y),
                             zero_variance=bool(zero), extra={"seed": seed, "variance": float(var)})


def rank_parameters(report: SensitivityReport, threshold: float = 0.05,
                    exclude: Sequence[str] = ()) -> list[str]:
    """Parameters whose index exceeds ``threshold``, most influential first.

    Total-order indices are used when present, otherwise the OAT indices.
    """
    idx = report.sobol_total if report.sobol_total is not None else report.oat
    if idx is None:
        return []
    order = np.argsort(-idx, kind="stable")
    return [report.names[i] for i in order if idx[i] > threshold and report.names[i] not in exclude]


def pair_objective(pair: LeaderFollowerPair, model: str, include_amax: bool = True,
                   names: Optional[Sequence[str]] = None, jobs: int = 1):
    """Objective, bounds and baseline for screening ``model`` on one pair."""
    chosen = list(names) if names is not None else list(SCREENED[model])
    if not include_amax:
        chosen = [n for n in chosen if n != "a_max"]
    space = model_space(model, dt=pair.dt, names=chosen)
    return PairObjective(pair, space, jobs), space, space.seed_vector(observed_features(pair))


def merge(a: SensitivityReport, b: SensitivityReport) -> SensitivityReport:
    """Combine an OAT report and a Sobol report over the same parameters."""
    if a.names != b.names:
        raise ValueError("reports cover different parameters")
    oat = a.oat if a.oat is not None else b.oat
    st = a.sobol_total if a.sobol_total is not None else b.sobol_total
    n_base = a.n_base or b.n_base
    return SensitivityReport(a.names, a.lb, a.ub, oat, st, n_base, a.evaluations + b.evaluations,
                             a.zero_variance or b.zero_variance, {**a.extra, **b.extra})


def ishigami(X: np.ndarray, a: float = 7.0, b: float = 0.1) -> np.ndarray:
    X = np.atleast_2d(X)
    return np.sin(X[:, 0]) + a * np.sin(X[:, 1]) ** 2 + b * X[:, 2] ** 4 * np.sin(X[:, 0])


def ishigami_total_indices(a: float = 7.0, b: float = 0.1) -> np.ndarray:
    """Analytic total-order indices of the Ishigami function on [-pi, pi]^3."""
    pi = math.pi
    v1 = 0.5 * (1 + b * pi ** 4 / 5) ** 2
    v2 = a * a / 8
    v13 = b * b * pi ** 8 * (1 / 18 - 1 / 50)
    v = v1 + v2 + v13
    return np.array([(v1 + v13) / v, v2 / v, v13 / v])
