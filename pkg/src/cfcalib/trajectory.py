"""Trajectory ingestion and leader/follower candidate selection.

Input is a long-format CSV with one row per vehicle and frame::

    track_id,frame,t,x,y,speed,lane_id,length,leader_id

Positions refer to the front bumper, so the bumper-to-bumper gap between a
leader and its follower is ``leader_dd - follower_dd - leader_length`` once
both driven distances live in a common frame.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

CSV_COLUMNS = ("track_id", "frame", "t", "x", "y", "speed", "lane_id", "length", "leader_id")
DEFAULT_SPEED_LIMIT = 50 / 3.6


class SchemaError(ValueError):
    """The input table does not match the configured schema."""


@dataclass(frozen=True)
class TrackSchema:
    """Column names of the input table; override to adapt other datasets."""

    track_id: str = "track_id"
    frame: str = "frame"
    t: str = "t"
    x: str = "x"
    y: str = "y"
    speed: str = "speed"
    lane_id: str = "lane_id"
    length: str = "length"
    leader_id: str = "leader_id"
    driven_distance: Optional[str] = None

    def required(self) -> list[str]:
        return [self.track_id, self.frame, self.t, self.x, self.y, self.speed, self.lane_id,
                self.length, self.leader_id]


@dataclass
class Trajectory:
    vehicle_id: str
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    driven_distance: np.ndarray
    v: np.ndarray
    lane_id: np.ndarray
    vehicle_length: float
    leader_id: np.ndarray

    def __len__(self):
        return len(self.t)

    def to_dict(self) -> dict:
        return {
            "vehicle_id": self.vehicle_id,
            "vehicle_length": self.vehicle_length,
            "t": self.t.tolist(),
            "x": self.x.tolist(),
            "y": self.y.tolist(),
            "driven_distance": self.driven_distance.tolist(),
            "v": self.v.tolist(),
            "lane_id": [str(s) for s in self.lane_id],
            "leader_id": [str(s) for s in self.leader_id],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        return cls(
            vehicle_id=str(d["vehicle_id"]),
            t=np.asarray(d["t"], dtype=float),
            x=np.asarray(d["x"], dtype=float),
            y=np.asarray(d["y"], dtype=float),
            driven_distance=np.asarray(d["driven_distance"], dtype=float),
            v=np.asarray(d["v"], dtype=float),
            lane_id=np.asarray(d["lane_id"], dtype=object),
            vehicle_length=float(d["vehicle_length"]),
            leader_id=np.asarray(d["leader_id"], dtype=object),
        )


@dataclass
class LeaderFollowerPair:
    """A calibration candidate on a uniform time grid.

    Driven distances of leader and follower share one frame (follower starts at
    zero). Free leaders have no leader trajectory; they are calibrated behind a
    virtual stop at ``stop_position`` that is released at ``green_time``.
    """

    follower: Trajectory
    leader: Optional[Trajectory] = None
    is_free_leader: bool = False
    lane_id: str = ""
    v_limit: float = DEFAULT_SPEED_LIMIT
    stop_position: float = math.nan
    green_time: float = math.nan

    @property
    def t(self) -> np.ndarray:
        return self.follower.t

    @property
    def t_start(self) -> float:
        return float(self.follower.t[0])

    @property
    def t_end(self) -> float:
        return float(self.follower.t[-1])

    @property
    def dt(self) -> float:
        return float(self.follower.t[1] - self.follower.t[0])

    @property
    def pair_id(self) -> str:
        lead = self.leader.vehicle_id if self.leader is not None else "free"
        return f"{lead}->{self.follower.vehicle_id}"

    @property
    def spacing(self) -> Optional[np.ndarray]:
        if self.leader is None:
            return None
        return self.leader.driven_distance - self.follower.driven_distance - self.leader.vehicle_length

    def leader_series(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
        """Leader front position, speed, identity segment and length on the pair grid."""
        if self.leader is not None:
            n = len(self.t)
            return (self.leader.driven_distance, self.leader.v, np.zeros(n, dtype=np.int64),
                    self.leader.vehicle_length)
        released = self.t >= self.green_time
        x = np.where(released, np.inf, self.stop_position)
        return x, np.zeros(len(self.t)), released.astype(np.int64), 0.0

    def to_dict(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "lane_id": self.lane_id,
            "is_free_leader": self.is_free_leader,
            "v_limit": self.v_limit,
            "stop_position": None if math.isnan(self.stop_position) else self.stop_position,
            "green_time": None if math.isnan(self.green_time) else self.green_time,
            "follower": self.follower.to_dict(),
            "leader": None if self.leader is None else self.leader.to_dict(),
            "spacing": None if self.leader is None else self.spacing.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LeaderFollowerPair":
        def num(v):
            return math.nan if v is None else float(v)

        return cls(
            follower=Trajectory.from_dict(d["follower"]),
            leader=None if d.get("leader") is None else Trajectory.from_dict(d["leader"]),
            is_free_leader=bool(d.get("is_free_leader", False)),
            lane_id=str(d.get("lane_id", "")),
            v_limit=float(d.get("v_limit", DEFAULT_SPEED_LIMIT)),
            stop_position=num(d.get("stop_position")),
            green_time=num(d.get("green_time")),
        )

    @classmethod
    def from_series(cls, t, leader_x, leader_v, follower_x, follower_v, leader_length=5.0,
                    follower_length=5.0, lane_id="1", v_limit=DEFAULT_SPEED_LIMIT,
                    leader_id="L", follower_id="F") -> "LeaderFollowerPair":
        """Build a pair from arrays already on a uniform grid (synthetic data, tests)."""
        t = np.asarray(t, dtype=float)
        n = len(t)

        def traj(vid, xs, vs, length, lead):
            xs = np.asarray(xs, dtype=float)
            return Trajectory(vid, t, xs, np.zeros(n), xs, np.asarray(vs, dtype=float),
                              np.full(n, lane_id, dtype=object), float(length),
                              np.full(n, lead, dtype=object))

        return cls(follower=traj(follower_id, follower_x, follower_v, follower_length, leader_id),
                   leader=traj(leader_id, leader_x, leader_v, leader_length, ""),
                   lane_id=lane_id, v_limit=v_limit)


def _driven_distance(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.concatenate([[0.0], np.cumsum(np.hypot(np.diff(x), np.diff(y)))])


def read_tracks(path, schema: Optional[TrackSchema] = None) -> tuple[list[Trajectory], dict[str, str]]:
    """Load all tracks; returns accepted trajectories and ``{track_id: reason}`` for rejected ones."""
    schema = schema or TrackSchema()
    df = pd.read_csv(path, dtype={schema.track_id: str, schema.lane_id: str, schema.leader_id: str},
                     keep_default_na=False, na_values={c: [""] for c in
                                                       (schema.t, schema.x, schema.y, schema.speed,
                                                        schema.length, schema.frame)})
    missing = [c for c in schema.required() if c not in df.columns]
    if schema.driven_distance and schema.driven_distance not in df.columns:
        missing.append(schema.driven_distance)
    if missing:
        raise SchemaError(f"missing columns: {', '.join(missing)}")

    tracks, rejected = [], {}
    numeric = [schema.frame, schema.t, schema.x, schema.y, schema.speed, schema.length]
    for tid, g in df.groupby(schema.track_id, sort=True):
        try:
            vals = g[numeric].astype(float)
        except ValueError:
            rejected[tid] = "non-numeric field"
            continue
        if vals.isna().to_numpy().any():
            rejected[tid] = "nan field"
            continue
        g = g.assign(**{c: vals[c] for c in numeric}).sort_values([schema.t, schema.frame], kind="stable")
        t = g[schema.t].to_numpy(float)
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            rejected[tid] = "non-monotonic time"
            continue
        v = g[schema.speed].to_numpy(float)
        if np.any(v < 0):
            rejected[tid] = "negative speed"
            continue
        x = g[schema.x].to_numpy(float)
        y = g[schema.y].to_numpy(float)
        if schema.driven_distance:
            dd = g[schema.driven_distance].astype(float).to_numpy()
            if np.any(np.diff(dd) < 0):
                rejected[tid] = "decreasing driven distance"
                continue
        else:
            dd = _driven_distance(x, y)
        tracks.append(Trajectory(
            vehicle_id=str(tid), t=t, x=x, y=y, driven_distance=dd, v=v,
            lane_id=g[schema.lane_id].to_numpy(object),
            vehicle_length=float(g[schema.length].iloc[0]),
            leader_id=g[schema.leader_id].to_numpy(object),
        ))
    for tid, reason in rejected.items():
        log.info("track %s rejected: %s", tid, reason)
    return tracks, rejected


def load_dataset(path, schema: Optional[TrackSchema] = None) -> list[Trajectory]:
    return read_tracks(path, schema)[0]


def write_tracks(tracks: Iterable[Trajectory], path) -> None:
    """Write trajectories in the input CSV schema (frames numbered per track)."""
    rows = []
    for tr in tracks:
        for i in range(len(tr)):
            rows.append((tr.vehicle_id, i, tr.t[i], tr.x[i], tr.y[i], tr.v[i], tr.lane_id[i],
                         tr.vehicle_length, tr.leader_id[i]))
    pd.DataFrame(rows, columns=list(CSV_COLUMNS)).to_csv(path, index=False, float_format="%.6f")


def _previous_sample(t: np.ndarray, grid: np.ndarray) -> np.ndarray:
    return np.clip(np.searchsorted(t, grid + 1e-9, side="right") - 1, 0, len(t) - 1)


def resample(traj: Trajectory, dt: float, t0: Optional[float] = None,
             t1: Optional[float] = None) -> Trajectory:
    """Linear interpolation onto ``t0 + k*dt``; categorical columns take the previous sample."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if len(traj) < 2:
        raise ValueError("fewer than 2 samples")
    t0 = traj.t[0] if t0 is None else t0
    t1 = traj.t[-1] if t1 is None else t1
    n = int(math.floor((t1 - t0) / dt + 1e-9)) + 1
    grid = t0 + dt * np.arange(n)
    idx = _previous_sample(traj.t, grid)
    return Trajectory(
        vehicle_id=traj.vehicle_id,
        t=grid,
        x=np.interp(grid, traj.t, traj.x),
        y=np.interp(grid, traj.t, traj.y),
        driven_distance=np.interp(grid, traj.t, traj.driven_distance),
        v=np.interp(grid, traj.t, traj.v),
        lane_id=traj.lane_id[idx],
        vehicle_length=traj.vehicle_length,
        leader_id=traj.leader_id[idx],
    )


@dataclass(frozen=True)
class StopLine:
    """Stop line through ``(x, y)``; ``(ux, uy)`` is the direction of travel."""

    x: float
    y: float = 0.0
    ux: float = 1.0
    uy: float = 0.0

    def signed_distance(self, px, py):
        norm = math.hypot(self.ux, self.uy)
        return ((np.asarray(px) - self.x) * self.ux + (np.asarray(py) - self.y) * self.uy) / norm


@dataclass(frozen=True)
class SelectionConfig:
    v_stop: float = 0.1
    min_stop_duration: float = 0.5
    max_jump: float = 5.0
    max_gap_factor: float = 2.0
    dt: float = 0.04
    v_limit: float = DEFAULT_SPEED_LIMIT


@dataclass
class SelectionResult:
    pairs: list[LeaderFollowerPair]
    rejected: dict[str, list[str]] = field(default_factory=dict)

    def report(self) -> dict:
        return {
            "accepted": len(self.pairs),
            "rejected": len(self.rejected),
            "reasons": {k: v for k, v in sorted(self.rejected.items())},
        }


def tracking_ok(tr: Trajectory, cfg: SelectionConfig = SelectionConfig()) -> bool:
    if len(tr) < 2:
        return False
    dts = np.diff(tr.t)
    if np.any(dts > cfg.max_gap_factor * np.median(dts)):
        return False
    return not np.any(np.hypot(np.diff(tr.x), np.diff(tr.y)) > cfg.max_jump)


def stop_line_crossings(tr: Trajectory, line: StopLine) -> list[int]:
    """Sample indices at which the vehicle moves from before the line to on/after it."""
    s = line.signed_distance(tr.x, tr.y)
    return [int(i) + 1 for i in np.flatnonzero((s[:-1] < 0) & (s[1:] >= 0))]


def full_stop_interval(tr: Trajectory, cfg: SelectionConfig = SelectionConfig()) -> Optional[tuple[int, int]]:
    """First run of samples slower than ``v_stop`` lasting at least ``min_stop_duration``."""
    slow = tr.v < cfg.v_stop
    i, n = 0, len(tr)
    while i < n:
        if slow[i]:
            j = i
            while j + 1 < n and slow[j + 1]:
                j += 1
            if tr.t[j] - tr.t[i] >= cfg.min_stop_duration - 1e-9:
                return i, j
            i = j + 1
        else:
            i += 1
    return None


def _leader_window(tr: Trajectory, stop_idx: int) -> tuple[str, int, int]:
    """Leader id at the stop and the contiguous sample range following that leader."""
    lead = str(tr.leader_id[stop_idx])
    same = np.array([str(s) == lead for s in tr.leader_id])
    i = j = stop_idx
    while i > 0 and same[i - 1]:
        i -= 1
    while j + 1 < len(tr) and same[j + 1]:
        j += 1
    return lead, i, j


def _rebase(tr: Trajectory, origin: float, offset: float) -> Trajectory:
    return replace(tr, driven_distance=tr.driven_distance - origin + offset)


def select_candidates(tracks: Sequence[Trajectory], lanes: Optional[Iterable[str]],
                      stop_lines: Mapping[str, StopLine],
                      cfg: SelectionConfig = SelectionConfig()) -> SelectionResult:
    """Filter tracks into calibration candidates.

    A candidate is kept only if it is on a selected lane, it and its leader
    are tracked without gaps or jumps, it crosses the stop line exactly once,
    it comes to a full stop, it never changes lane and the bumper-to-bumper
    spacing to its leader is never negative. Vehicles without a leader while
    stopped are emitted as free leaders.
    """
    lanes = None if lanes is None else {str(l) for l in lanes}
    by_id = {tr.vehicle_id: tr for tr in tracks}
    accepted: list[tuple[tuple, LeaderFollowerPair]] = []
    rejected: dict[str, list[str]] = {}

    for tr in tracks:
        reasons = []
        lane = str(tr.lane_id[0]) if len(tr) else ""
        if lanes is not None and lane not in lanes:
            reasons.append("lane not selected")
        if not tracking_ok(tr, cfg):
            reasons.append("tracking error")
        line = stop_lines.get(lane)
        crossings = stop_line_crossings(tr, line) if line is not None and len(tr) else []
        if line is None:
            reasons.append("no stop line for lane")
        elif len(crossings) != 1:
            reasons.append("stop line crossings != 1")
        stop = full_stop_interval(tr, cfg) if len(tr) else None
        if stop is None:
            reasons.append("no full stop")
        if len(tr) and any(str(l) != lane for l in tr.lane_id):
            reasons.append("lane change")
        if reasons:
            rejected[tr.vehicle_id] = reasons
            continue

        lead_id, i0, i1 = _leader_window(tr, stop[0])
        if lead_id == "":
            pair = _free_leader_pair(tr, i0, i1, stop, line, lane, cfg)
        else:
            leader = by_id.get(lead_id)
            if leader is None:
                rejected[tr.vehicle_id] = ["leader missing"]
                continue
            if not tracking_ok(leader, cfg):
                rejected[tr.vehicle_id] = ["tracking error"]
                continue
            t0 = max(tr.t[i0], leader.t[0])
            t1 = min(tr.t[i1], leader.t[-1])
            if t1 - t0 < 2 * cfg.dt:
                rejected[tr.vehicle_id] = ["no common window"]
                continue
            f = resample(tr, cfg.dt, t0, t1)
            l = resample(leader, cfg.dt, t0, t1)
            s_l = line.signed_distance(l.x[0], l.y[0])
            s_f = line.signed_distance(f.x[0], f.y[0])
            f = _rebase(f, f.driven_distance[0], 0.0)
            l = _rebase(l, l.driven_distance[0], float(s_l - s_f))
            pair = LeaderFollowerPair(follower=f, leader=l, lane_id=lane, v_limit=cfg.v_limit)
            if np.any(pair.spacing < 0):
                rejected[tr.vehicle_id] = ["negative spacing"]
                continue
        key = (lane, float(tr.t[crossings[0]]), tr.vehicle_id)
        accepted.append((key, pair))

    accepted.sort(key=lambda kv: kv[0])
    return SelectionResult([p for _, p in accepted], rejected)


def _free_leader_pair(tr, i0, i1, stop, line, lane, cfg) -> LeaderFollowerPair:
    f = resample(tr, cfg.dt, tr.t[i0], tr.t[i1])
    f = _rebase(f, f.driven_distance[0], 0.0)
    s = line.signed_distance(f.x, f.y)
    # the vehicle is stopped before the line; the virtual stop sits on the line
    stop_position = float(f.driven_distance[0] - s[0])
    moving = np.flatnonzero((f.t > tr.t[stop[1]] - 1e-9) & (f.v >= cfg.v_stop))
    green = float(f.t[moving[0]]) if len(moving) else float(f.t[-1])
    return LeaderFollowerPair(follower=f, leader=None, is_free_leader=True, lane_id=lane,
                              v_limit=cfg.v_limit, stop_position=stop_position, green_time=green)


def observed_features(pair: LeaderFollowerPair, steady_speed: float = 5.0,
                      s0: float = 2.0, v_stop: float = 0.1) -> dict[str, float]:
    """Raw behavioural statistics used to seed the optimizer.

    Keys are only present when the data supports them.
    """
    f = pair.follower
    out: dict[str, float] = {}
    if len(f) < 3 or np.max(f.v) < v_stop:
        return out
    acc = np.gradient(f.v, f.t)
    if np.any(acc > 0):
        out["a_max"] = float(np.percentile(acc[acc > 0], 95))
    out["F_v"] = float(np.max(f.v) / pair.v_limit)
    if pair.leader is not None:
        gap = pair.spacing
        m = f.v > steady_speed
        if np.any(m):
            out["T"] = float(np.median((gap[m] - s0) / f.v[m]))
        lead_go = np.flatnonzero(pair.leader.v >= v_stop)
        foll_go = np.flatnonzero(f.v >= v_stop)
        if len(lead_go) and len(foll_go) and f.v[0] < v_stop:
            out["t_start"] = float(max(0.0, f.t[foll_go[0]] - pair.t[lead_go[0]]))
    else:
        foll_go = np.flatnonzero(f.v >= v_stop)
        if len(foll_go):
            out["t_start"] = 0.0
    return out


def estimate_initial_params(pair: LeaderFollowerPair, model: str, schedule_speeds=None,
                            bounds=None):
    """Heuristic seed parameter set, clamped into the calibration bounds."""
    from .calibration import model_space

    space = model_space(model, schedule_speeds=schedule_speeds, bounds=bounds)
    return space.to_params(space.seed_vector(observed_features(pair)))
