"""Macroscopic post-processing of simulation logs."""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .sim import DetectorRecord, SignalPlan, SimulationLog, green_onsets

V_CONGESTED = 2.0
V_STOP = 0.1


@dataclass(frozen=True)
class FdPoint:
    zone_id: int
    window_start: float
    density: float  # veh/km
    flow: float  # veh/h
    mean_speed: float  # km/h


def fundamental_diagram(records: Sequence[DetectorRecord] | SimulationLog) -> list[FdPoint]:
    """Flow, space-mean speed and density per detector window; empty windows are omitted."""
    if isinstance(records, SimulationLog):
        records = records.detector_records
    pts = []
    for r in records:
        if r.count == 0 or r.mean_speed <= 0:
            continue
        flow = r.count * 3600.0 / r.window_length
        speed = r.mean_speed * 3.6
        pts.append(FdPoint(r.zone_id, r.window_start, flow / speed, flow, speed))
    return pts


@dataclass
class CapacityDrop:
    q_free_max: float
    q_discharge: float
    drop: float
    breakdown_time: float
    n_free: int
    n_congested: int

    @property
    def valid(self) -> bool:
        return self.n_free > 0 and self.n_congested > 0


def first_congested_window(points: Sequence[FdPoint], speed_limit: float,
                           congested_share: float = 0.5) -> float:
    """Start of the earliest window slower than ``congested_share`` of the limit (inf if none)."""
    v_c = congested_share * speed_limit * 3.6
    starts = [p.window_start for p in points if p.mean_speed < v_c]
    return min(starts) if starts else math.inf


def capacity_drop(points: Sequence[FdPoint], speed_limit: float,
                  breakdown_time: Optional[float] = None,
                  congested_share: float = 0.5) -> CapacityDrop:
    """Pre-breakdown maximum flow against the mean flow of later congested windows.

    A window is congested when its mean speed is below ``congested_share`` of
    the limit. Breakdown defaults to the first congested window. Without
    congested windows the drop is NaN.
    """
    v_c = congested_share * speed_limit * 3.6
    if breakdown_time is None:
        breakdown_time = first_congested_window(points, speed_limit, congested_share)
    free = [p.flow for p in points if p.window_start < breakdown_time]
    cong = [p.flow for p in points if p.window_start >= breakdown_time and p.mean_speed < v_c]
    q_free = max(free) if free else math.nan
    q_dis = float(np.mean(cong)) if cong else math.nan
    drop = 1.0 - q_dis / q_free if free and cong and q_free > 0 else math.nan
    return CapacityDrop(q_free, q_dis, drop, float(breakdown_time), len(free), len(cong))


@dataclass
class WaveEstimate:
    speed: float
    r2: float
    slope: float
    samples: np.ndarray  # (k, 2) of (t, front_x)
    valid: bool
    reason: str = ""

    def to_dict(self) -> dict:
        return {"speed": self.speed, "r2": self.r2, "slope": self.slope, "valid": self.valid,
                "reason": self.reason, "n_samples": int(len(self.samples))}


def _frames(log: SimulationLog):
    r = log.records
    t = r["t"]
    if t.size == 0:
        return
    order = np.lexsort((-r["x"], t))
    ts = t[order]
    cuts = np.flatnonzero(np.diff(ts) != 0) + 1
    for idx in np.split(order, cuts):
        yield float(t[idx[0]]), r["x"][idx], r["v"][idx], r["gap"][idx]


def jam_front(x: np.ndarray, v: np.ndarray, v_c: float, link_gap: float = 30.0,
              edge: str = "tail") -> Optional[float]:
    """Front of the largest jam cluster in one frame, ``x`` sorted downstream-first.

    Slow vehicles (``v < v_c``) closer than ``link_gap`` to each other belong to
    one cluster. ``edge="tail"`` returns the rearmost member, ``"head"`` the
    most downstream one.
    """
    slow = np.flatnonzero(v < v_c)
    if slow.size == 0:
        return None
    xs = x[slow]
    breaks = np.flatnonzero(-np.diff(xs) > link_gap) + 1
    clusters = np.split(xs, breaks)
    best = max(clusters, key=len)
    return float(best.min() if edge == "tail" else best.max())


def fit_front(samples: np.ndarray, min_samples: int = 10) -> WaveEstimate:
    samples = np.asarray(samples, dtype=float).reshape(-1, 2)
    if len(samples) < min_samples:
        return WaveEstimate(math.nan, math.nan, math.nan, samples, False,
                            f"only {len(samples)} front samples")
    t, x = samples[:, 0], samples[:, 1]
    slope, icpt = np.polyfit(t, x, 1)
    resid = x - (slope * t + icpt)
    ss_tot = float(np.sum((x - x.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return WaveEstimate(abs(float(slope)), r2, float(slope), samples, True)


def wave_speed(log: SimulationLog, v_c: float = V_CONGESTED, t_from: Optional[float] = None,
               edge: str = "head", link_gap: float = 30.0, min_samples: int = 10) -> WaveEstimate:
    """Upstream propagation speed of the jam released when the closure reopens.

    The front is tracked per recorded frame from ``t_from`` (default: end of
    the first closure) until the jam dissolves; the speed is the magnitude of
    the least-squares slope of front position over time.
    """
    if t_from is None:
        cs = log.config.closure_schedule
        t_from = float(cs[0][0] + cs[0][1]) if cs else 0.0
    samples = []
    seen = False
    for t, x, v, _ in _frames(log):
        if t < t_from:
            continue
        f = jam_front(x, v, v_c, link_gap, edge)
        if f is None:
            if seen:
                break
            continue
        seen = True
        samples.append((t, f))
    return fit_front(np.array(samples), min_samples)


@dataclass
class QueueStats:
    rows: list[tuple[int, int, float, float, float]]  # cycle, position, headway, speed, accel
    accel_curves: dict[int, np.ndarray] = field(default_factory=dict)  # position -> mean accel
    curve_t: np.ndarray = field(default_factory=lambda: np.empty(0))

    def per_position(self) -> dict[int, dict[str, float]]:
        out: dict[int, dict[str, float]] = {}
        arr = np.array(self.rows, dtype=float).reshape(-1, 5)
        for pos in np.unique(arr[:, 1]).astype(int):
            m = arr[:, 1] == pos
            out[int(pos)] = {"n": int(m.sum()), "headway": float(arr[m, 2].mean()),
                             "speed": float(arr[m, 3].mean()), "accel": float(arr[m, 4].mean())}
        return out

    def peak_time(self, position: int) -> float:
        """Time after green at which the mean acceleration curve peaks."""
        c = self.accel_curves.get(position)
        if c is None or not np.any(np.isfinite(c)):
            return math.nan
        return float(self.curve_t[int(np.nanargmax(c))])


def _vehicle_tracks(log: SimulationLog):
    r = log.records
    order = np.lexsort((r["t"], r["vehicle_id"]))
    vid = r["vehicle_id"][order]
    cuts = np.flatnonzero(np.diff(vid) != 0) + 1
    for idx in np.split(order, cuts):
        if idx.size:
            yield int(r["vehicle_id"][idx[0]]), r["t"][idx], r["x"][idx], r["v"][idx], r["a"][idx]


def stop_line_crossings(log: SimulationLog, stop_line: float) -> list[tuple[float, int, float, float]]:
    """``(time, vehicle_id, speed, accel)`` at each stop-line crossing, time-ordered."""
    out = []
    for vid, t, x, v, a in _vehicle_tracks(log):
        k = np.flatnonzero((x[:-1] < stop_line) & (x[1:] >= stop_line))
        if k.size == 0:
            continue
        k = int(k[0])
        w = (stop_line - x[k]) / (x[k + 1] - x[k])
        out.append((float(t[k] + w * (t[k + 1] - t[k])), vid,
                    float(v[k] + w * (v[k + 1] - v[k])), float(a[k + 1])))
    out.sort()
    return out


def queue_discharge_stats(log: SimulationLog, stop_line: Optional[float] = None,
                          plan: Optional[SignalPlan] = None, max_position: int = 20,
                          curve_length: float = 20.0) -> QueueStats:
    """Per-cycle crossing headway, speed and acceleration by queue position.

    Position k is the k-th vehicle to cross the stop line during a green
    phase; its headway is measured from the previous crossing, or from the
    start of green for position 1. Acceleration curves are averaged per
    position over cycles on the record grid, time zero at start of green.
    """
    plan = plan or log.config.signal_plan
    if plan is None:
        raise ValueError("queue statistics need a signal plan")
    stop_line = plan.stop_line if stop_line is None else stop_line
    crossings = stop_line_crossings(log, stop_line)
    onsets = green_onsets(plan, log.config.duration)
    ct = np.array([c[0] for c in crossings])
    rows = []
    members: dict[int, list[tuple[int, float]]] = {}
    for cyc, g in enumerate(onsets):
        m = np.flatnonzero((ct >= g) & (ct < g + plan.green))
        prev = g
        for pos, i in enumerate(m[:max_position], start=1):
            tc, vid, v, a = crossings[i]
            rows.append((cyc, pos, tc - prev, v, a))
            members.setdefault(pos, []).append((vid, g))
            prev = tc
    dt_rec = log.config.record_interval or log.config.dt
    grid = np.arange(0.0, curve_length + 1e-9, dt_rec)
    tracks = {vid: (t, a) for vid, t, _, _, a in _vehicle_tracks(log)}
    curves = {}
    for pos, lst in members.items():
        acc = []
        for vid, g in lst:
            t, a = tracks[vid]
            acc.append(np.interp(g + grid, t, a, left=np.nan, right=np.nan))
        curves[pos] = np.nanmean(np.array(acc), axis=0) if acc else np.full(len(grid), np.nan)
    return QueueStats(rows, curves, grid)


def scenario_metrics(log: SimulationLog) -> dict:
    """Collision and emergency-stop counts and mean discharge per lane and green phase."""
    out = {"collisions": log.count("collision"), "emergency_stops": log.count("emergency_stop"),
           "insertions_blocked": log.count("insertion_blocked")}
    plan = log.config.signal_plan
    if plan is not None:
        crossings = stop_line_crossings(log, plan.stop_line)
        ct = np.array([c[0] for c in crossings])
        onsets = [g for g in green_onsets(plan, log.config.duration) if g + plan.cycle <= log.config.duration + 1e-9]
        counts = [int(np.sum((ct >= g) & (ct < g + plan.cycle))) for g in onsets]
        out["cycles"] = len(counts)
        out["vehicles_per_lane_cycle"] = float(np.mean(counts)) if counts else 0.0
    return out


# --------------------------------------------------------------------------- writers


def fd_csv(points: Sequence[FdPoint]) -> str:
    buf = io.StringIO()
    buf.write("zone_id,window_start,density,flow,mean_speed\n")
    for p in points:
        buf.write(f"{p.zone_id},{p.window_start!r},{p.density!r},{p.flow!r},{p.mean_speed!r}\n")
    return buf.getvalue()


def wave_csv(est: WaveEstimate) -> str:
    buf = io.StringIO()
    buf.write("t,front_x\n")
    for t, x in est.samples:
        buf.write(f"{float(t)!r},{float(x)!r}\n")
    return buf.getvalue()


def queue_csv(stats: QueueStats) -> str:
    buf = io.StringIO()
    buf.write("cycle,position,headway,speed,accel\n")
    for cyc, pos, h, v, a in stats.rows:
        buf.write(f"{cyc},{pos},{float(h)!r},{float(v)!r},{float(a)!r}\n")
    return buf.getvalue()


def _plain(obj):
    """JSON-safe copy: non-finite floats become null."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def metrics_json(metrics: dict) -> str:
    return json.dumps(_plain(metrics), indent=1, sort_keys=True, allow_nan=False)
