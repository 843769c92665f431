"""Fixed-timestep single-lane traffic simulation.

Two engines share the model kernels:

* the calibration harness, which drives one follower per lane behind a leader
  replayed from ground truth, with every lane fully independent;
* the scenario engine (signalized queue, ring road, stop-and-go road) with
  insertion, virtual obstacles (red signal, road closure), detectors and an
  event log.

Kinematics are semi-implicit: ``v' = max(0, v + a*dt)`` then ``x' = x + v'*dt``.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels as K
from .models import ConfigurationError, ParameterSet, pack_rows
from .trajectory import LeaderFollowerPair, Trajectory

COLLISION_MARGIN = 0.01
INSERTION_STEPS = 10
VEHICLE_LENGTH = 5.0
# A follower closer to its leader than this fraction of its minimum gap counts as
# a collision. Krauss has no mechanism to undercut the minimum gap, the IDM family
# may dip into it under strong braking.
COLLISION_GAP_FACTOR = {K.KRAUSS: 1.0, K.IDM: 0.5, K.IIDM: 0.5, K.EIDM: 0.5}
RECORD_FIELDS = ("t", "vehicle_id", "lane_id", "x", "odometer", "v", "a", "gap")


def replay_leader(traj: Trajectory, t: float) -> tuple[float, float]:
    """Ground-truth leader position (driven distance) and speed at ``t``.

    Outside the recording the first/last sample is held.
    """
    return (float(np.interp(t, traj.t, traj.driven_distance)), float(np.interp(t, traj.t, traj.v)))


# --------------------------------------------------------------------------- harness


@dataclass
class HarnessLog:
    """Output of one calibration-harness run: one follower per lane."""

    t: np.ndarray
    leader_x: np.ndarray
    leader_v: np.ndarray
    leader_length: float
    follower_x: np.ndarray
    follower_v: np.ndarray
    collided: np.ndarray

    @property
    def n_lanes(self) -> int:
        return self.follower_x.shape[0]


@dataclass
class CalibrationHarness:
    """N isolated lanes, each with a replayed leader and one candidate follower."""

    pair: LeaderFollowerPair
    candidates: Sequence[ParameterSet] = ()
    kinds: Optional[np.ndarray] = None
    rows: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kinds is None:
            if not self.candidates:
                raise ConfigurationError("calibration harness needs at least one lane")
            self.kinds, self.rows = pack_rows(self.candidates)
        if len(self.kinds) == 0:
            raise ConfigurationError("calibration harness needs at least one lane")

    @property
    def n_lanes(self) -> int:
        return len(self.kinds)

    def run(self, jobs: int = 1) -> HarnessLog:
        pair = self.pair
        lx, lv, seg, llen = pair.leader_series()
        lx = np.ascontiguousarray(lx, dtype=np.float64)
        lv = np.ascontiguousarray(lv, dtype=np.float64)
        seg = np.ascontiguousarray(seg, dtype=np.int64)
        n = len(pair.t)
        N = self.n_lanes
        out_x = np.empty((N, n))
        out_v = np.empty((N, n))
        collided = np.zeros(N, dtype=bool)
        x0 = float(pair.follower.driven_distance[0])
        v0 = float(pair.follower.v[0])
        args = (lx, lv, seg, float(llen), float(pair.v_limit), float(pair.t[0]), float(pair.dt))

        def chunk(lo, hi):
            collided[lo:hi] = K.run_followers(self.kinds[lo:hi], self.rows[lo:hi], x0, v0, *args,
                                              out_x[lo:hi], out_v[lo:hi])

        jobs = max(1, min(int(jobs), N))
        if jobs == 1:
            chunk(0, N)
        else:
            edges = np.linspace(0, N, jobs + 1).astype(int)
            with ThreadPoolExecutor(jobs) as ex:
                list(ex.map(lambda i: chunk(edges[i], edges[i + 1]), range(jobs)))
        return HarnessLog(pair.t, lx, lv, float(llen), out_x, out_v, collided)


def build_calibration_harness(pair: LeaderFollowerPair,
                              candidates: Sequence[ParameterSet]) -> CalibrationHarness:
    """One lane per candidate; each follower starts from the ground-truth state."""
    return CalibrationHarness(pair, list(candidates))


# --------------------------------------------------------------------------- scenarios


@dataclass(frozen=True)
class SignalPlan:
    cycle: float
    green: float
    stop_line: float
    offset: float = 0.0

    def __post_init__(self):
        if not 0 < self.green <= self.cycle:
            raise ConfigurationError("green must lie in (0, cycle]")


def signal_controller(plan: SignalPlan, t: float) -> str:
    """``"green"`` for the first ``green`` seconds of every cycle, else ``"red"``."""
    phase = (t - plan.offset) % plan.cycle
    return "green" if phase < plan.green - 1e-9 else "red"


def green_onsets(plan: SignalPlan, duration: float) -> np.ndarray:
    k0 = math.ceil((0.0 - plan.offset) / plan.cycle - 1e-9)
    k1 = math.floor((duration - plan.offset) / plan.cycle - 1e-9)
    return plan.offset + plan.cycle * np.arange(k0, k1 + 1)


@dataclass
class ScenarioConfig:
    kind: str
    dt: float
    duration: float
    lane_length: float
    speed_limit: float
    fleet: list[ParameterSet]
    insertion_interval: Optional[float] = None
    closure_schedule: list[tuple[float, float, float]] = field(default_factory=list)
    signal_plan: Optional[SignalPlan] = None
    detector_zones: list[tuple[float, float]] = field(default_factory=list)
    ring: bool = False
    fleet_weights: Optional[list[float]] = None
    fleet_mode: str = "random"
    record_interval: Optional[float] = None
    detector_window: float = 60.0
    vehicle_length: float = VEHICLE_LENGTH
    krauss_leader_decel: bool = True
    first_insertion: float = 0.0
    insertion_speed: str | float = "desired"

    def validate(self):
        if self.dt <= 0 or self.duration < 0:
            raise ConfigurationError("dt must be positive and duration non-negative")
        if self.lane_length <= 0 or self.speed_limit <= 0:
            raise ConfigurationError("lane length and speed limit must be positive")
        for start, length in self.detector_zones:
            if start < 0 or start + length > self.lane_length:
                raise ConfigurationError(f"detector zone ({start}, {length}) outside lane")
        for _, _, pos in self.closure_schedule:
            if not 0 <= pos <= self.lane_length:
                raise ConfigurationError(f"closure position {pos} outside lane")
        if self.insertion_interval is not None and not self.fleet:
            raise ConfigurationError("insertion requires a non-empty fleet")
        if self.fleet_mode not in ("random", "round_robin"):
            raise ConfigurationError(f"unknown fleet mode {self.fleet_mode!r}")

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("fleet", "signal_plan")}
        d["fleet"] = [ps.to_dict() for ps in self.fleet]
        d["signal_plan"] = None if self.signal_plan is None else asdict(self.signal_plan)
        d["closure_schedule"] = [list(c) for c in self.closure_schedule]
        d["detector_zones"] = [list(z) for z in self.detector_zones]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        d["fleet"] = [ParameterSet.from_dict(p) for p in d.get("fleet", [])]
        if d.get("signal_plan"):
            d["signal_plan"] = SignalPlan(**d["signal_plan"])
        d["closure_schedule"] = [tuple(c) for c in d.get("closure_schedule", [])]
        d["detector_zones"] = [tuple(z) for z in d.get("detector_zones", [])]
        return cls(**d)


@dataclass
class DetectorRecord:
    zone_id: int
    window_start: float
    window_length: float
    count: int
    mean_speed: float
    density: float


@dataclass
class SimulationLog:
    config: ScenarioConfig
    seed: int
    records: dict[str, np.ndarray]
    events: list[tuple[float, str, int]]
    detector_records: list[DetectorRecord]

    def count(self, kind: str) -> int:
        return sum(1 for e in self.events if e[1] == kind)

    def records_csv(self) -> str:
        buf = io.StringIO()
        write_records(buf, self.records, header=True)
        return buf.getvalue()

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in RECORD_FIELDS:
            h.update(np.ascontiguousarray(self.records[name]).tobytes())
        h.update(repr(self.events).encode())
        h.update(repr([asdict(d) for d in self.detector_records]).encode())
        return h.hexdigest()

    def save(self, out_dir, records: bool = True) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if records:
            with open(out / "records.csv", "w", newline="") as fh:
                write_records(fh, self.records, header=True)
        write_events(out / "events.csv", self.events)
        write_detectors(out / "detectors.csv", self.detector_records)
        (out / "scenario.json").write_text(json.dumps(
            {"seed": self.seed, "config": self.config.to_dict()}, indent=1, sort_keys=True))

    @classmethod
    def load(cls, out_dir) -> "SimulationLog":
        out = Path(out_dir)
        meta = json.loads((out / "scenario.json").read_text())
        recs = {k: np.empty(0) for k in RECORD_FIELDS}
        rec_path = out / "records.csv"
        if rec_path.exists() and rec_path.stat().st_size > 0:
            data = np.genfromtxt(rec_path, delimiter=",", names=True, ndmin=1)
            if data.size:
                recs = {k: np.asarray(data[k], dtype=float) for k in RECORD_FIELDS}
            recs["vehicle_id"] = recs["vehicle_id"].astype(np.int64)
            recs["lane_id"] = recs["lane_id"].astype(np.int64)
        events = []
        with open(out / "events.csv") as fh:
            for row in csv.DictReader(fh):
                events.append((float(row["t"]), row["kind"], int(row["vehicle_id"])))
        dets = []
        with open(out / "detectors.csv") as fh:
            for row in csv.DictReader(fh):
                dets.append(DetectorRecord(int(row["zone_id"]), float(row["window_start"]),
                                           float(row["window_length"]), int(row["count"]),
                                           float(row["mean_speed"]), float(row["density"])))
        return cls(ScenarioConfig.from_dict(meta["config"]), int(meta["seed"]), recs, events, dets)


def _fmt(x) -> str:
    return repr(float(x))


def write_records(fh, records: dict[str, np.ndarray], header: bool) -> None:
    if header:
        fh.write(",".join(RECORD_FIELDS) + "\n")
    cols = [records[k] for k in RECORD_FIELDS]
    for row in zip(*cols):
        fh.write(f"{_fmt(row[0])},{int(row[1])},{int(row[2])},{_fmt(row[3])},{_fmt(row[4])},"
                 f"{_fmt(row[5])},{_fmt(row[6])},{_fmt(row[7])}\n")


def write_events(path, events) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("t,kind,vehicle_id\n")
        for t, kind, vid in events:
            fh.write(f"{_fmt(t)},{kind},{vid}\n")


def write_detectors(path, dets: Sequence[DetectorRecord]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("zone_id,window_start,window_length,count,mean_speed,density\n")
        for d in dets:
            fh.write(f"{d.zone_id},{_fmt(d.window_start)},{_fmt(d.window_length)},{d.count},"
                     f"{_fmt(d.mean_speed)},{_fmt(d.density)}\n")


@dataclass
class Obstacle:
    """Stationary virtual leader (red signal or closed segment)."""

    position: float
    key: int
    committed: set = field(default_factory=set)


@dataclass
class LaneState:
    """Vehicles on one lane, ordered downstream-first."""

    length: float
    v_limit: float
    ring: bool = False
    krauss_leader_decel: bool = True
    ids: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    x: np.ndarray = field(default_factory=lambda: np.empty(0))
    odo: np.ndarray = field(default_factory=lambda: np.empty(0))
    v: np.ndarray = field(default_factory=lambda: np.empty(0))
    a: np.ndarray = field(default_factory=lambda: np.empty(0))
    veh_len: np.ndarray = field(default_factory=lambda: np.empty(0))
    kinds: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    params: np.ndarray = field(default_factory=lambda: np.empty((0, K.N_PARAMS)))
    states: np.ndarray = field(default_factory=lambda: np.empty((0, K.N_STATE)))
    leader_key: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))
    obstacles: list[Obstacle] = field(default_factory=list)

    colliding: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=bool))

    ARRAYS = ("ids", "x", "odo", "v", "a", "veh_len", "kinds", "params", "states", "leader_key",
              "colliding")

    def __len__(self):
        return len(self.ids)

    def take(self, idx) -> None:
        for name in self.ARRAYS:
            setattr(self, name, getattr(self, name)[idx])

    def add(self, vid: int, x: float, v: float, ps: ParameterSet, length: float = VEHICLE_LENGTH):
        """Insert a vehicle keeping the downstream-first ordering."""
        pos = int(np.searchsorted(-self.x, -x, side="right"))
        st = K.new_states(1)[0]

        def ins(arr, val):
            return np.insert(arr, pos, val, axis=0)

        self.ids = ins(self.ids, vid)
        self.x = ins(self.x, x)
        self.odo = ins(self.odo, 0.0)
        self.v = ins(self.v, v)
        self.a = ins(self.a, 0.0)
        self.veh_len = ins(self.veh_len, length)
        self.kinds = ins(self.kinds, ps.kind_code)
        self.params = ins(self.params, ps.row())
        self.states = ins(self.states, st)
        self.leader_key = ins(self.leader_key, -999)
        self.colliding = ins(self.colliding, False)

    def gaps(self) -> np.ndarray:
        """Bumper-to-bumper gap to the vehicle in front (inf for an open-lane head)."""
        n = len(self)
        g = np.full(n, np.inf)
        if n:
            g[1:] = self.x[:-1] - self.veh_len[:-1] - self.x[1:]
            if self.ring:
                g[0] = self.x[-1] + self.length - self.veh_len[-1] - self.x[0]
        return g

    def obstacle_distance(self, ob: Obstacle) -> np.ndarray:
        d = ob.position - self.x
        if self.ring:
            d = np.mod(d, self.length)
        return d

    def activate_obstacle(self, position: float, key: int, dt: float) -> Obstacle:
        """Place a virtual stop; drivers that cannot stop within their comfortable deceleration pass it."""
        ob = Obstacle(position, key)
        d = self.obstacle_distance(ob)
        for i in range(len(self)):
            if d[i] < 0:
                continue
            p = self.params[i]
            acc = K.probe_acc(self.kinds[i], p, self.v[i], d[i], 0.0, self.v_limit, p[K.B], dt)
            if acc < -p[K.B]:
                ob.committed.add(int(self.ids[i]))
        self.obstacles.append(ob)
        return ob

    def remove_obstacle(self, key: int) -> None:
        self.obstacles = [o for o in self.obstacles if o.key != key]


def collision_gap(kinds: np.ndarray, params: np.ndarray) -> np.ndarray:
    factor = np.array([COLLISION_GAP_FACTOR[int(k)] for k in range(4)])
    return factor[kinds] * params[:, K.S0]


def step_lane(lane: LaneState, t: float, dt: float, rng: Optional[np.random.Generator] = None,
              on_move: Optional[Callable] = None) -> list[tuple[float, str, int]]:
    """Advance every vehicle on ``lane`` from ``t`` to ``t + dt``.

    Controls are computed in parallel from the state at ``t``. Returns the
    events raised during the step. ``on_move(ids, x_old, x_new_unwrapped)`` is
    called before ring wrap-around and exits are applied.
    """
    n = len(lane)
    events: list[tuple[float, str, int]] = []
    if n == 0:
        return events
    t_new = t + dt
    gap = lane.gaps()
    vl = np.empty(n)
    key = np.empty(n, dtype=np.int64)
    vl[1:] = lane.v[:-1]
    key[1:] = lane.ids[:-1]
    own_b = lane.params[:, K.B]
    b_lead = own_b.copy()
    if lane.krauss_leader_decel:
        b_lead[1:] = lane.params[:-1, K.B]
    if lane.ring:
        vl[0], key[0] = lane.v[-1], lane.ids[-1]
        if lane.krauss_leader_decel:
            b_lead[0] = lane.params[-1, K.B]
    else:
        vl[0], key[0] = lane.v[0], -1

    bound_to = np.full(n, -1)
    for j, ob in enumerate(lane.obstacles):
        d = lane.obstacle_distance(ob)
        free = np.array([int(i) not in ob.committed for i in lane.ids]) if ob.committed else True
        m = (d >= 0) & free
        if not np.any(m):
            continue
        # a stop ahead binds whenever it asks for harder braking than the current leader
        behind_leader = m & (d >= gap)
        if np.any(behind_leader):
            idx = np.flatnonzero(behind_leader)
            a_lead = np.empty(len(idx))
            a_stop = np.empty(len(idx))
            K.probe_all(lane.kinds[idx], lane.params[idx], lane.v[idx], gap[idx], vl[idx],
                        lane.v_limit, b_lead[idx], dt, a_lead)
            K.probe_all(lane.kinds[idx], lane.params[idx], lane.v[idx], d[idx], np.zeros(len(idx)),
                        lane.v_limit, own_b[idx], dt, a_stop)
            m[idx[a_stop >= a_lead]] = False
        if np.any(m):
            gap[m] = d[m]
            vl[m] = 0.0
            key[m] = ob.key
            b_lead[m] = own_b[m]
            bound_to[m] = j

    changed = key != lane.leader_key
    lane.leader_key = key
    eps = lane.params[:, K.EPSILON]
    eta = rng.random(n) if (rng is not None and np.any(eps > 0)) else np.zeros(n)
    acc = np.empty(n)
    onset = np.zeros(n, dtype=np.bool_)
    K.control_all(lane.kinds, lane.params, lane.states, t, lane.odo, lane.v, gap, vl,
                  lane.v_limit, b_lead, changed, eta, dt, acc, onset)
    for i in np.flatnonzero(onset):
        events.append((t, "emergency_stop", int(lane.ids[i])))

    v_new = np.maximum(0.0, lane.v + acc * dt)
    x_new = lane.x + v_new * dt

    hit = np.zeros(n, dtype=bool)
    new_gap = np.full(n, np.inf)
    new_gap[1:] = x_new[:-1] - lane.veh_len[:-1] - x_new[1:]
    if np.any(new_gap[1:] <= 0):
        for i in range(1, n):
            g = x_new[i - 1] - lane.veh_len[i - 1] - x_new[i]
            if g <= 0:
                hit[i] = True
                x_new[i] = x_new[i - 1] - lane.veh_len[i - 1] - COLLISION_MARGIN
                v_new[i] = v_new[i - 1]
            new_gap[i] = x_new[i - 1] - lane.veh_len[i - 1] - x_new[i]
    if lane.ring and n > 1:
        g0 = x_new[-1] + lane.length - lane.veh_len[-1] - x_new[0]
        if g0 <= 0:
            hit[0] = True
            x_new[0] = x_new[-1] + lane.length - lane.veh_len[-1] - COLLISION_MARGIN
            v_new[0] = v_new[-1]
            g0 = -COLLISION_MARGIN
        new_gap[0] = g0
    for i in np.flatnonzero(bound_to >= 0):
        if x_new[i] - lane.x[i] > gap[i]:
            hit[i] = True
            x_new[i] = lane.x[i] + max(0.0, gap[i] - COLLISION_MARGIN)
            v_new[i] = 0.0
    hit |= new_gap < collision_gap(lane.kinds, lane.params)
    for i in np.flatnonzero(hit & ~lane.colliding):
        events.append((t_new, "collision", int(lane.ids[i])))
    lane.colliding = hit

    lane.a = (v_new - lane.v) / dt
    lane.odo = lane.odo + (x_new - lane.x)
    if on_move is not None:
        on_move(lane.ids, lane.x, x_new)
    lane.v = v_new
    lane.x = x_new
    if lane.ring:
        wrapped = lane.x >= lane.length
        if np.any(wrapped):
            lane.x = np.where(wrapped, lane.x - lane.length, lane.x)
            lane.take(np.argsort(-lane.x, kind="stable"))
    else:
        keep = lane.x <= lane.length
        if not np.all(keep):
            lane.take(keep)
    return events


class _Detectors:
    def __init__(self, zones, window, ring, length):
        self.zones = list(zones)
        self.window = window
        self.ring = ring
        self.length = length
        self.entry: list[dict[int, float]] = [dict() for _ in self.zones]
        self.bins: dict[tuple[int, int], list[float]] = {}

    def _crossing(self, x_old, x_new, p):
        if self.ring:
            return ((x_old < p) & (x_new >= p)) | ((x_old < p + self.length) & (x_new >= p + self.length))
        return (x_old < p) & (x_new >= p)

    def _time(self, t, dt, x_old, x_new, p):
        dx = x_new - x_old
        xo = np.where(x_old >= p, x_old - self.length, x_old) if self.ring else x_old
        frac = np.where(dx > 0, (p - xo) / np.where(dx > 0, dx, 1.0), 1.0)
        return t + dt * np.clip(frac, 0.0, 1.0)

    def update(self, t, dt, ids, x_old, x_new):
        for z, (start, length) in enumerate(self.zones):
            end = start + length
            ent = self._crossing(x_old, x_new, start)
            if np.any(ent):
                times = self._time(t, dt, x_old[ent], x_new[ent], start)
                for vid, te in zip(ids[ent], times):
                    self.entry[z][int(vid)] = float(te)
            ex = self._crossing(x_old, x_new, end)
            if np.any(ex):
                times = self._time(t, dt, x_old[ex], x_new[ex], end)
                for vid, tx in zip(ids[ex], times):
                    te = self.entry[z].pop(int(vid), None)
                    if te is None or tx <= te:
                        continue
                    b = self.bins.setdefault((z, int(tx // self.window)), [0, 0.0])
                    b[0] += 1
                    b[1] += tx - te

    def records(self, duration) -> list[DetectorRecord]:
        out = []
        n_win = int(math.ceil(duration / self.window - 1e-9))
        for z, (_, length) in enumerate(self.zones):
            for w in range(n_win):
                count, total = self.bins.get((z, w), (0, 0.0))
                if count:
                    speed = count * length / total
                    density = count / (max(speed, 0.1) * self.window) * 1000.0
                else:
                    speed, density = 0.0, 0.0
                out.append(DetectorRecord(z, w * self.window, self.window, int(count), speed, density))
        return out


class Simulation:
    """Scenario engine. ``sink(records_chunk)`` receives records incrementally if given."""

    CHUNK_STEPS = 2000

    def __init__(self, cfg: ScenarioConfig, seed: int = 0, sink: Optional[Callable] = None):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.sink = sink
        self.rng = np.random.default_rng(seed)
        self.fleet_rng = np.random.default_rng([seed, 1])
        self.lane = LaneState(cfg.lane_length, cfg.speed_limit, ring=cfg.ring,
                              krauss_leader_decel=cfg.krauss_leader_decel)
        self.events: list[tuple[float, str, int]] = []
        self.detectors = _Detectors(cfg.detector_zones, cfg.detector_window, cfg.ring, cfg.lane_length)
        self.next_id = 0
        self.n_inserted = 0
        self._chunks: list[dict[str, np.ndarray]] = []
        self._pending: list[tuple] = []

    def _pick_driver(self) -> ParameterSet:
        fleet = self.cfg.fleet
        if self.cfg.fleet_mode == "round_robin":
            return fleet[self.n_inserted % len(fleet)]
        w = self.cfg.fleet_weights
        p = None if w is None else np.asarray(w, float) / np.sum(w)
        return fleet[int(self.fleet_rng.choice(len(fleet), p=p))]

    def _insertion_ok(self, ps: ParameterSet, x_ins: float, v_ins: float, t: float) -> bool:
        lane = self.lane
        p = ps.row()
        s0, T, b = p[K.S0], p[K.T], p[K.B]

        def needed(v, v_lead, s0_, T_, b_):
            return s0_ + v * T_ + max(0.0, v * v - v_lead * v_lead) / (2.0 * b_)

        L = lane.length
        if len(lane):
            d_ahead = lane.x - x_ins
            d_behind = x_ins - lane.x
            if lane.ring:
                d_ahead = np.mod(d_ahead, L)
                d_behind = np.mod(d_behind, L)
            in_front = d_ahead >= 0
            if np.any(in_front):
                i = int(np.argmin(np.where(in_front, d_ahead, np.inf)))
                gap = d_ahead[i] - lane.veh_len[i]
                if gap < needed(v_ins, lane.v[i], s0, T, b):
                    return False
            behind = d_behind > 0
            if lane.ring and np.any(behind):
                j = int(np.argmin(np.where(behind, d_behind, np.inf)))
                gap = d_behind[j] - self.cfg.vehicle_length
                pj = lane.params[j]
                if gap < needed(lane.v[j], v_ins, pj[K.S0], pj[K.T], pj[K.B]):
                    return False
        for ob in lane.obstacles:
            d = ob.position - x_ins
            if lane.ring:
                d %= L
            if d >= 0 and d < needed(v_ins, 0.0, s0, T, b):
                return False
        return True

    def _try_insert(self, t: float) -> None:
        ps = self._pick_driver()
        p = ps.row()
        v_des = min(self.cfg.speed_limit, p[K.F_V] * self.cfg.speed_limit)
        if self.cfg.insertion_speed == "desired":
            ladder = [v_des]
        elif self.cfg.insertion_speed == "max_safe":
            ladder = [v_des * (1.0 - k / INSERTION_STEPS) for k in range(INSERTION_STEPS + 1)]
        else:
            ladder = [min(v_des, float(self.cfg.insertion_speed))]
        vid = self.next_id
        self.next_id += 1
        for v_ins in ladder:
            if self._insertion_ok(ps, 0.0, v_ins, t):
                self.lane.add(vid, 0.0, v_ins, ps, self.cfg.vehicle_length)
                self.n_inserted += 1
                return
        self.events.append((t, "insertion_blocked", vid))

    def _record(self, t: float) -> None:
        lane = self.lane
        n = len(lane)
        if n == 0:
            return
        g = lane.gaps()
        self._pending.append((np.full(n, t), lane.ids.copy(), np.zeros(n, dtype=np.int64),
                              lane.x.copy(), lane.odo.copy(), lane.v.copy(), lane.a.copy(), g))

    def _flush(self, final: bool = False) -> None:
        if self._pending:
            chunk = {name: np.concatenate([p[i] for p in self._pending])
                     for i, name in enumerate(RECORD_FIELDS)}
            self._pending = []
            if self.sink is not None:
                self.sink(chunk)
            else:
                self._chunks.append(chunk)

    def _obstacle_schedule(self, t: float) -> dict[int, float]:
        """Obstacles that should be active at ``t``: ``{key: position}``."""
        want = {}
        plan = self.cfg.signal_plan
        if plan is not None and signal_controller(plan, t) == "red":
            want[-100] = plan.stop_line
        for k, (start, dur, pos) in enumerate(self.cfg.closure_schedule):
            if start - 1e-9 <= t < start + dur - 1e-9:
                want[-200 - k] = pos
        return want

    def run(self) -> SimulationLog:
        cfg = self.cfg
        dt = cfg.dt
        steps = int(round(cfg.duration / dt))
        rec_every = max(1, int(round((cfg.record_interval or dt) / dt)))
        next_insert = cfg.first_insertion if cfg.insertion_interval else math.inf
        active: dict[int, float] = {}
        lane = self.lane

        def on_move(ids, x_old, x_new):
            self.detectors.update(t, dt, ids, x_old, x_new)

        for k in range(steps):
            t = k * dt
            want = self._obstacle_schedule(t)
            for key in [key for key in active if key not in want]:
                lane.remove_obstacle(key)
                del active[key]
            for key, pos in want.items():
                if key not in active:
                    lane.activate_obstacle(pos, key, dt)
                    active[key] = pos
            if t >= next_insert - 1e-9:
                self._try_insert(t)
                next_insert += cfg.insertion_interval
            self.events.extend(step_lane(lane, t, dt, self.rng,
                                         on_move if cfg.detector_zones else None))
            if (k + 1) % rec_every == 0:
                self._record((k + 1) * dt)
            if len(self._pending) >= self.CHUNK_STEPS:
                self._flush()
        self._flush(final=True)
        if self._chunks:
            records = {name: np.concatenate([c[name] for c in self._chunks]) for name in RECORD_FIELDS}
        else:
            records = {name: np.empty(0, dtype=np.int64 if name in ("vehicle_id", "lane_id") else float)
                       for name in RECORD_FIELDS}
        return SimulationLog(cfg, self.seed, records, self.events,
                             self.detectors.records(cfg.duration))


def run_scenario(cfg: ScenarioConfig, seed: int = 0, sink: Optional[Callable] = None) -> SimulationLog:
    """Run a scenario; identical ``(cfg, seed)`` give identical logs."""
    return Simulation(cfg, seed, sink).run()


# --------------------------------------------------------------------------- builders

SPEED_LIMIT = 50 / 3.6
QUEUE_DURATION = 2600.0
QUEUE_GREEN_PHASES = 43
RING_LENGTH = 3400.0
RING_DURATION = 4200.0
RING_INSERTION = 5.0
RING_CLOSURE_PERIOD = 250.0
RING_CLOSURE_DURATION = 25.0
STOPGO_LENGTH = 5000.0
STOPGO_CLOSURE = 3500.0
SCENARIO_DT = 0.1


def queue_scenario(fleet: Sequence[ParameterSet], duration: float = QUEUE_DURATION,
                   dt: float = SCENARIO_DT, approach: float = 300.0, downstream: float = 200.0,
                   cycle: Optional[float] = None, green_share: float = 0.5,
                   insertion_interval: float = 2.5, **kw) -> ScenarioConfig:
    """Signalized approach: single lane, stop line ``approach`` metres from the entry."""
    cycle = cycle if cycle is not None else QUEUE_DURATION / QUEUE_GREEN_PHASES
    plan = SignalPlan(cycle=cycle, green=cycle * green_share, stop_line=approach)
    kw.setdefault("record_interval", dt)
    return ScenarioConfig(kind="queue", dt=dt, duration=duration, lane_length=approach + downstream,
                          speed_limit=kw.pop("speed_limit", SPEED_LIMIT), fleet=list(fleet),
                          insertion_interval=insertion_interval, signal_plan=plan, **kw)


def ring_closures(duration: float, period: float = RING_CLOSURE_PERIOD,
                  length: float = RING_CLOSURE_DURATION, position: float = 3300.0):
    return [(s, length, position) for s in np.arange(period, duration, period).tolist()]


def ring_scenario(fleet: Sequence[ParameterSet], duration: float = RING_DURATION,
                  dt: float = SCENARIO_DT, length: float = RING_LENGTH,
                  insertion_interval: Optional[float] = RING_INSERTION,
                  closure_position: float = 3300.0,
                  detector_starts: Sequence[float] = (600.0, 1600.0, 2500.0),
                  zone_length: float = 50.0, **kw) -> ScenarioConfig:
    """Closed loop with periodic short closures and three measurement zones."""
    kw.setdefault("record_interval", 1.0)
    kw.setdefault("insertion_speed", "max_safe")
    closures = kw.pop("closure_schedule", ring_closures(duration, position=closure_position))
    return ScenarioConfig(kind="ring", dt=dt, duration=duration, lane_length=length,
                          speed_limit=kw.pop("speed_limit", SPEED_LIMIT), fleet=list(fleet),
                          insertion_interval=insertion_interval, ring=True,
                          closure_schedule=closures,
                          detector_zones=[(s, zone_length) for s in detector_starts], **kw)


def stopgo_scenario(fleet: Sequence[ParameterSet], duration: float = 1200.0,
                    dt: float = SCENARIO_DT, length: float = STOPGO_LENGTH,
                    closure_position: float = STOPGO_CLOSURE, closure_start: float = 400.0,
                    closure_duration: float = 120.0, insertion_interval: float = 3.0,
                    **kw) -> ScenarioConfig:
    """Straight road with one temporary closure; the jam released at reopening forms the wave."""
    kw.setdefault("record_interval", 0.5)
    return ScenarioConfig(kind="stopgo", dt=dt, duration=duration, lane_length=length,
                          speed_limit=kw.pop("speed_limit", SPEED_LIMIT), fleet=list(fleet),
                          insertion_interval=insertion_interval,
                          closure_schedule=[(closure_start, closure_duration, closure_position)], **kw)
