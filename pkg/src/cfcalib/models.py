"""Car-following models: Krauss, IDM, Improved IDM and the extended EIDM.

The public functions here are pure: they take a :class:`FollowerContext`, a
parameter object and (for EIDM) a :class:`DriverState`, and return new values
without touching their inputs. The engines call the same compiled kernels in
bulk, so a value computed here is bit-identical to one computed inside a
simulation.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional, Sequence, Union

import numpy as np

from . import _kernels as K

B_EMERGENCY = K.B_EMERGENCY
V_STOP = K.V_STOP
DEFAULT_S0 = 2.0

MODEL_KINDS = ("krauss", "idm", "iidm", "eidm")
_KIND_CODES = {"krauss": K.KRAUSS, "idm": K.IDM, "iidm": K.IIDM, "eidm": K.EIDM}


class ConfigurationError(ValueError):
    """Invalid model, scenario or optimizer configuration."""


class CollisionError(RuntimeError):
    """Raised when a model is queried with a non-positive gap."""


@dataclass(frozen=True)
class AmaxSchedule:
    """Piecewise-linear maximum acceleration over speed, constant outside the breakpoints."""

    breakpoints: tuple[tuple[float, float], ...]

    def __post_init__(self):
        bps = tuple((float(v), float(a)) for v, a in self.breakpoints)
        object.__setattr__(self, "breakpoints", bps)
        if not bps:
            raise ConfigurationError("acceleration schedule needs at least one breakpoint")
        if len(bps) > K.MAX_BREAKPOINTS:
            raise ConfigurationError(f"at most {K.MAX_BREAKPOINTS} breakpoints are supported")
        speeds = [v for v, _ in bps]
        if any(b <= a for a, b in zip(speeds, speeds[1:])):
            raise ConfigurationError("schedule speeds must be strictly increasing")
        if any(a <= 0 for _, a in bps):
            raise ConfigurationError("schedule accelerations must be positive")

    @property
    def speeds(self) -> list[float]:
        return [v for v, _ in self.breakpoints]

    @property
    def accelerations(self) -> list[float]:
        return [a for _, a in self.breakpoints]


@dataclass(frozen=True)
class IdmParams:
    """IDM / Improved-IDM parameters.

    ``t_AP`` is the action step length; any value at or below the simulation
    step means the command is recomputed every step.
    """

    a_max: float = 2.6
    b: float = 4.5
    T: float = 1.0
    delta: float = 4.0
    F_v: float = 1.0
    s0: float = DEFAULT_S0
    t_AP: float = 0.0

    def __post_init__(self):
        if self.a_max <= 0 or self.b <= 0 or self.delta <= 0 or self.F_v <= 0:
            raise ConfigurationError(f"a_max, b, delta and F_v must be positive: {self}")
        if self.T < 0 or self.s0 < 0 or self.t_AP < 0:
            raise ConfigurationError(f"T, s0 and t_AP must be non-negative: {self}")


@dataclass(frozen=True)
class EidmParams:
    base: IdmParams = field(default_factory=IdmParams)
    t_reac: float = 0.5
    t_start: float = 0.5
    M_bg: float = 0.3
    t_amax: float = 4.0
    amax_schedule: Optional[AmaxSchedule] = None

    def __post_init__(self):
        if self.t_reac < 0 or self.t_start < 0 or self.t_amax < 0:
            raise ConfigurationError(f"EIDM times must be non-negative: {self}")
        if not 0.0 <= self.M_bg <= 1.0:
            raise ConfigurationError(f"M_bg must lie in [0, 1]: {self.M_bg}")


@dataclass(frozen=True)
class KraussParams:
    """Krauss parameters. ``s0`` is the standstill margin removed from the gap."""

    a_max: float = 2.6
    b: float = 4.5
    tau: float = 1.0
    F_v: float = 1.0
    t_AP: float = 0.0
    epsilon: float = 0.0
    s0: float = DEFAULT_S0

    def __post_init__(self):
        if self.a_max <= 0 or self.b <= 0 or self.F_v <= 0 or self.tau <= 0:
            raise ConfigurationError(f"a_max, b, tau and F_v must be positive: {self}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigurationError("epsilon must lie in [0, 1]")


ModelParams = Union[IdmParams, EidmParams, KraussParams]


@dataclass(frozen=True)
class ParameterSet:
    """One driver: model kind plus its parameters."""

    model: str
    params: ModelParams

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ConfigurationError(f"unknown model kind {self.model!r}")
        expected = {"krauss": KraussParams, "idm": IdmParams, "iidm": IdmParams,
                    "eidm": EidmParams}[self.model]
        if not isinstance(self.params, expected):
            raise ConfigurationError(f"{self.model} needs {expected.__name__}")

    @property
    def kind_code(self) -> int:
        return _KIND_CODES[self.model]

    @property
    def b(self) -> float:
        p = self.params
        return p.base.b if isinstance(p, EidmParams) else p.b

    def flat(self) -> dict[str, float]:
        p = self.params
        if isinstance(p, EidmParams):
            out = asdict(p.base)
            out.update(t_reac=p.t_reac, t_start=p.t_start, M_bg=p.M_bg, t_amax=p.t_amax)
            return out
        return asdict(p)

    def to_dict(self) -> dict:
        d = {"model": self.model, "params": self.flat()}
        if isinstance(self.params, EidmParams) and self.params.amax_schedule is not None:
            d["amax_schedule"] = [list(bp) for bp in self.params.amax_schedule.breakpoints]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ParameterSet":
        model = d["model"]
        values = {k: float(v) for k, v in d.get("params", {}).items()}
        try:
            if model == "krauss":
                return cls(model, KraussParams(**values))
            if model in ("idm", "iidm"):
                return cls(model, IdmParams(**values))
            if model == "eidm":
                base_names = {f.name for f in fields(IdmParams)}
                base = IdmParams(**{k: v for k, v in values.items() if k in base_names})
                extra = {k: v for k, v in values.items() if k not in base_names}
                sched = d.get("amax_schedule")
                return cls(model, EidmParams(base=base, **extra,
                                             amax_schedule=AmaxSchedule(tuple(map(tuple, sched)))
                                             if sched else None))
        except TypeError as exc:
            raise ConfigurationError(f"bad parameter names for {model}: {exc}") from None
        raise ConfigurationError(f"unknown model kind {model!r}")

    @classmethod
    def from_json(cls, text: str) -> "ParameterSet":
        return cls.from_dict(json.loads(text))

    def row(self) -> np.ndarray:
        """Pack into the flat float64 row consumed by the kernels."""
        r = np.zeros(K.N_PARAMS)
        p = self.params
        if isinstance(p, KraussParams):
            r[K.A_MAX], r[K.B], r[K.T], r[K.F_V] = p.a_max, p.b, p.tau, p.F_v
            r[K.T_AP], r[K.EPSILON], r[K.S0] = p.t_AP, p.epsilon, p.s0
            r[K.DELTA] = 1.0
            return r
        base = p.base if isinstance(p, EidmParams) else p
        r[K.A_MAX], r[K.B], r[K.T], r[K.DELTA] = base.a_max, base.b, base.T, base.delta
        r[K.F_V], r[K.S0], r[K.T_AP] = base.F_v, base.s0, base.t_AP
        if isinstance(p, EidmParams):
            r[K.T_REAC], r[K.T_START], r[K.M_BG], r[K.T_AMAX] = p.t_reac, p.t_start, p.M_bg, p.t_amax
            if p.amax_schedule is not None:
                n = len(p.amax_schedule.breakpoints)
                r[K.N_SCHED] = n
                r[K.SCHED_V:K.SCHED_V + n] = p.amax_schedule.speeds
                r[K.SCHED_A:K.SCHED_A + n] = p.amax_schedule.accelerations
        return r


def default_parameters(model: str, schedule_speeds: Optional[Sequence[float]] = None) -> ParameterSet:
    """Default (uncalibrated) driver of the given kind."""
    if model == "krauss":
        return ParameterSet("krauss", KraussParams())
    if model in ("idm", "iidm"):
        return ParameterSet(model, IdmParams())
    if model == "eidm":
        sched = None
        if schedule_speeds:
            sched = AmaxSchedule(tuple((v, IdmParams().a_max) for v in schedule_speeds))
        return ParameterSet("eidm", EidmParams(amax_schedule=sched))
    raise ConfigurationError(f"unknown model kind {model!r}")


def pack_rows(candidates: Sequence[ParameterSet]) -> tuple[np.ndarray, np.ndarray]:
    kinds = np.array([c.kind_code for c in candidates], dtype=np.int64)
    rows = np.array([c.row() for c in candidates], dtype=np.float64).reshape(len(candidates), K.N_PARAMS)
    return kinds, rows


@dataclass(frozen=True)
class FollowerContext:
    """What a follower sees at time ``t``. ``x`` is its own odometer reading."""

    v: float
    gap: float
    v_leader: float
    v_limit: float
    t: float = 0.0
    x: float = 0.0

    def __post_init__(self):
        if self.v < 0 or self.v_leader < 0 or self.v_limit <= 0:
            raise ConfigurationError(f"invalid follower context: {self}")


@dataclass(frozen=True)
class DriverState:
    """Per-driver memory carried between EIDM queries.

    ``perceived_v_leader`` and ``perceived_x`` let the driver extrapolate the
    gap between perception instants from its own motion.
    """

    stopped_since: Optional[float] = None
    trigger_time: Optional[float] = None
    perceived_gap: float = math.inf
    perceived_v_leader: float = 0.0
    perceived_x: float = 0.0
    last_perception_time: float = -math.inf
    last_action_time: float = -math.inf
    held_acceleration: float = 0.0
    stop_gap: float = math.inf
    emergency: bool = False

    def startup_elapsed(self, t: float) -> Optional[float]:
        return None if self.trigger_time is None else t - self.trigger_time

    def perceived_dv(self, v: float) -> float:
        return v - self.perceived_v_leader

    def row(self) -> np.ndarray:
        st = np.empty(K.N_STATE)
        st[K.PERC_TIME] = self.last_perception_time
        st[K.PERC_GAP] = self.perceived_gap
        st[K.PERC_VL] = self.perceived_v_leader
        st[K.PERC_X] = self.perceived_x
        st[K.LAST_ACTION] = self.last_action_time
        st[K.HELD_ACC] = self.held_acceleration
        st[K.STOPPED] = 0.0 if self.stopped_since is None else 1.0
        st[K.STOP_GAP] = self.stop_gap
        st[K.STOPPED_SINCE] = math.nan if self.stopped_since is None else self.stopped_since
        st[K.TRIGGER_TIME] = math.nan if self.trigger_time is None else self.trigger_time
        st[K.EMERGENCY] = float(self.emergency)
        return st

    @classmethod
    def from_row(cls, st: np.ndarray) -> "DriverState":
        def opt(x):
            return None if math.isnan(x) else float(x)

        return cls(
            stopped_since=opt(st[K.STOPPED_SINCE]) if st[K.STOPPED] else None,
            trigger_time=opt(st[K.TRIGGER_TIME]),
            perceived_gap=float(st[K.PERC_GAP]),
            perceived_v_leader=float(st[K.PERC_VL]),
            perceived_x=float(st[K.PERC_X]),
            last_perception_time=float(st[K.PERC_TIME]),
            last_action_time=float(st[K.LAST_ACTION]),
            held_acceleration=float(st[K.HELD_ACC]),
            stop_gap=float(st[K.STOP_GAP]),
            emergency=bool(st[K.EMERGENCY]),
        )


def amax_lookup(v: float, sched: AmaxSchedule) -> float:
    if sched is None or not sched.breakpoints:
        raise ConfigurationError("empty acceleration schedule")
    r = np.zeros(K.N_PARAMS)
    n = len(sched.breakpoints)
    r[K.N_SCHED] = n
    r[K.SCHED_V:K.SCHED_V + n] = sched.speeds
    r[K.SCHED_A:K.SCHED_A + n] = sched.accelerations
    return float(K.amax_at(r, float(v)))


def _check_gap(ctx: FollowerContext):
    if ctx.gap <= 0:
        raise CollisionError(f"non-positive gap {ctx.gap}")


def idm_acceleration(ctx: FollowerContext, p: IdmParams) -> float:
    """Plain IDM acceleration, floored at the emergency deceleration.

    A free road is expressed as ``gap=math.inf``.
    """
    _check_gap(ctx)
    a = K.idm_acc(ctx.v, ctx.gap, ctx.v_leader, p.F_v * ctx.v_limit, p.a_max, p.b, p.T, p.delta, p.s0)
    return max(-B_EMERGENCY, float(a))


def iidm_acceleration(ctx: FollowerContext, p: IdmParams) -> float:
    """Improved IDM: no over-braking when the gap exceeds the desired gap."""
    _check_gap(ctx)
    a = K.iidm_acc(ctx.v, ctx.gap, ctx.v_leader, p.F_v * ctx.v_limit, p.a_max, p.b, p.T, p.delta, p.s0)
    return max(-B_EMERGENCY, float(a))


def eidm_acceleration(ctx: FollowerContext, state: DriverState, p: EidmParams, dt: float,
                      leader_changed: bool = False) -> tuple[float, DriverState]:
    """One EIDM query. Returns the acceleration and the driver's updated memory.

    Perception (gap and leader speed) is refreshed at most every ``t_reac``
    seconds; in between the gap is extrapolated from the last perceived leader
    speed and the driver's own odometer. A stopped driver waits for the leader
    to move or the gap to open, holds still for ``t_start`` and then ramps its
    acceleration from ``M_bg`` to full over ``t_amax``.
    """
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    _check_gap(ctx)
    ps = ParameterSet("eidm", p)
    st = state.row()
    acc, _ = K.control(K.EIDM, ps.row(), st, ctx.t, ctx.x, ctx.v, ctx.gap, ctx.v_leader,
                       ctx.v_limit, p.base.b, leader_changed, 0.0, dt)
    return float(acc), DriverState.from_row(st)


def krauss_safe_speed(ctx: FollowerContext, p: KraussParams, b: Optional[float] = None) -> float:
    """Krauss safe speed for the gap in ``ctx`` (taken as is, no margin removed).

    ``b`` overrides the deceleration in the denominator; see
    :func:`leader_deceleration_visibility`.
    """
    if ctx.gap < 0:
        raise CollisionError(f"negative gap {ctx.gap}")
    return float(K.krauss_vsafe(ctx.v, ctx.gap, ctx.v_leader, p.tau, p.b if b is None else b))


def krauss_step(ctx: FollowerContext, p: KraussParams, dt: float, eta: float = 0.0,
                b: Optional[float] = None) -> float:
    """Next Krauss speed. The safe speed uses ``gap - s0``; ``eta`` is the dawdle draw."""
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    r = ParameterSet("krauss", p).row()
    return float(K.krauss_next_speed(r, ctx.v, ctx.gap, ctx.v_leader, ctx.v_limit,
                                     p.b if b is None else b, eta, dt))


def leader_deceleration_visibility(enabled: bool):
    """Policy choosing which deceleration a Krauss follower plugs into its safe speed.

    Returns ``f(own_b, leader_b) -> b``. When enabled, drivers know the
    deceleration of the driver in front.
    """
    if enabled:
        return lambda own_b, leader_b: leader_b
    return lambda own_b, leader_b: own_b


def equilibrium_gap(v: float, p: IdmParams, v_limit: float) -> float:
    """IDM gap at which a follower at speed ``v`` behind an equally fast leader has zero acceleration."""
    v0 = p.F_v * v_limit
    s_star = p.s0 + v * p.T
    return s_star / math.sqrt(1.0 - (v / v0) ** p.delta)


def with_values(ps: ParameterSet, **values) -> ParameterSet:
    """Copy of ``ps`` with flat parameter names overridden."""
    p = ps.params
    if isinstance(p, EidmParams):
        base_names = {f.name for f in fields(IdmParams)}
        base = replace(p.base, **{k: v for k, v in values.items() if k in base_names})
        rest = {k: v for k, v in values.items() if k not in base_names}
        return ParameterSet(ps.model, replace(p, base=base, **rest))
    return ParameterSet(ps.model, replace(p, **values))
