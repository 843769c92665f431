"""Synthetic leader-follower pairs with known ground-truth drivers.

A drive-off pair mimics the first seconds after a signal turns green: the
leader waits, then accelerates towards a cruising speed; the follower starts
queued behind it and is driven by a known EIDM parameter set.
"""
from __future__ import annotations

from typing import Optional

import numpy as np

from . import _kernels as K
from .models import AmaxSchedule, EidmParams, IdmParams, ParameterSet
from .trajectory import DEFAULT_SPEED_LIMIT, LeaderFollowerPair

DURATION = 25.0
DT = 0.04
VEHICLE_LENGTH = 5.0

# interior sampling ranges, well inside the calibration bounds
TRUTH_RANGES = {
    "a_max": (1.0, 3.0),
    "T": (0.8, 2.0),
    "F_v": (0.9, 1.2),
    "delta": (2.0, 6.0),
    "t_reac": (0.2, 1.0),
    "t_start": (0.3, 1.5),
    "M_bg": (0.2, 0.8),
    "t_amax": (1.0, 5.0),
}
# speed-dependent truth: strong launch, softer acceleration at speed
TRUTH_SCHEDULE_SPEEDS = (3.0, 8.0, 14.0)
TRUTH_SCHEDULE_RANGES = ((2.4, 3.6), (1.4, 2.4), (0.6, 1.4))


def drive_off_leader(t: np.ndarray, wait: float, v_cruise: float, a_lead: float,
                     x0: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Leader standing until ``wait``, then accelerating smoothly to ``v_cruise``.

    The acceleration ramps up and decays like a free-road IDM driver with a
    short ramp-in, so the speed profile has no kinks.
    """
    dt = t[1] - t[0]
    v = np.zeros(len(t))
    x = np.full(len(t), float(x0))
    for k in range(len(t) - 1):
        tau = t[k] - wait
        if tau < 0:
            acc = 0.0
        else:
            ramp = min(1.0, tau / 1.5)
            acc = a_lead * ramp * (1.0 - (v[k] / v_cruise) ** 4)
        v[k + 1] = max(0.0, v[k] + acc * dt)
        x[k + 1] = x[k] + v[k + 1] * dt
    return x, v


def sample_truth(rng: np.random.Generator, schedule: bool = False) -> ParameterSet:
    """Random in-bounds EIDM driver."""
    vals = {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in TRUTH_RANGES.items()}
    base = IdmParams(a_max=vals["a_max"], T=vals["T"], F_v=vals["F_v"], delta=vals["delta"])
    sched = None
    if schedule:
        sched = AmaxSchedule(tuple((s, float(rng.uniform(lo, hi)))
                                   for s, (lo, hi) in zip(TRUTH_SCHEDULE_SPEEDS, TRUTH_SCHEDULE_RANGES)))
    return ParameterSet("eidm", EidmParams(base=base, t_reac=vals["t_reac"], t_start=vals["t_start"],
                                           M_bg=vals["M_bg"], t_amax=vals["t_amax"],
                                           amax_schedule=sched))


def follow(leader_x: np.ndarray, leader_v: np.ndarray, t: np.ndarray, driver: ParameterSet,
           x0: float, v0: float = 0.0, leader_length: float = VEHICLE_LENGTH,
           v_limit: float = DEFAULT_SPEED_LIMIT) -> tuple[np.ndarray, np.ndarray]:
    """Trajectory of ``driver`` behind a given leader, via the harness kernel."""
    n = len(t)
    out_x = np.empty((1, n))
    out_v = np.empty((1, n))
    kinds = np.array([driver.kind_code], dtype=np.int64)
    rows = driver.row()[None, :]
    collided = K.run_followers(kinds, rows, float(x0), float(v0), np.ascontiguousarray(leader_x),
                               np.ascontiguousarray(leader_v), np.zeros(n, dtype=np.int64),
                               float(leader_length), float(v_limit), float(t[0]), float(t[1] - t[0]),
                               out_x, out_v)
    if collided[0]:
        raise RuntimeError("ground-truth follower collided")
    return out_x[0], out_v[0]


def drive_off_pair(seed: int, truth: Optional[ParameterSet] = None, schedule: bool = False,
                   duration: float = DURATION, dt: float = DT,
                   v_limit: float = DEFAULT_SPEED_LIMIT) -> tuple[LeaderFollowerPair, ParameterSet]:
    """One synthetic drive-off pair and the driver that produced it."""
    rng = np.random.default_rng([seed, 7])
    sampled = sample_truth(rng, schedule)
    truth = sampled if truth is None else truth
    wait = float(rng.uniform(0.5, 2.5))
    v_cruise = float(rng.uniform(9.0, 12.0))
    a_lead = float(rng.uniform(1.0, 1.8))
    gap0 = float(rng.uniform(2.2, 3.5))
    t = np.round(np.arange(int(round(duration / dt)) + 1) * dt, 10)
    lx, lv = drive_off_leader(t, wait, v_cruise, a_lead, x0=gap0 + VEHICLE_LENGTH)
    fx, fv = follow(lx, lv, t, truth, 0.0, 0.0, v_limit=v_limit)
    pair = LeaderFollowerPair.from_series(t, lx, lv, fx, fv, leader_length=VEHICLE_LENGTH,
                                          v_limit=v_limit, leader_id=f"L{seed}",
                                          follower_id=f"F{seed}")
    return pair, truth


def drive_off_corpus(n: int, seed: int = 0, schedule: bool = False,
                     **kw) -> list[tuple[LeaderFollowerPair, ParameterSet]]:
    return [drive_off_pair(seed * 1000 + i, schedule=schedule, **kw) for i in range(n)]


def tracks_from_log(log, lane_id: str = "1", t_max: Optional[float] = None) -> list:
    """Vehicle tracks with per-sample leader ids from a straight-lane scenario log."""
    from .trajectory import Trajectory

    r = log.records
    keep = np.ones(len(r["t"]), dtype=bool) if t_max is None else r["t"] <= t_max + 1e-9
    t, vid, x, v = r["t"][keep], r["vehicle_id"][keep], r["x"][keep], r["v"][keep]
    leader = np.full(len(t), -1, dtype=np.int64)
    order = np.lexsort((-x, t))
    ts = t[order]
    for idx in np.split(order, np.flatnonzero(np.diff(ts) != 0) + 1):
        leader[idx[1:]] = vid[idx[:-1]]
    length = log.config.vehicle_length
    tracks = []
    order = np.lexsort((t, vid))
    for idx in np.split(order, np.flatnonzero(np.diff(vid[order]) != 0) + 1):
        if idx.size < 2:
            continue
        lead = np.array(["" if l < 0 else f"v{l}" for l in leader[idx]], dtype=object)
        tracks.append(Trajectory(f"v{vid[idx[0]]}", t[idx], x[idx], np.zeros(idx.size), x[idx],
                                 v[idx], np.full(idx.size, lane_id, dtype=object), float(length),
                                 lead))
    return tracks
