"""Compiled per-vehicle control kernels shared by the pure model API and the engines.

Parameters and driver memory are passed as flat float64 rows so that the same
code path drives a single vehicle, a calibration harness with hundreds of
lanes, and a ring road with hundreds of vehicles.
"""
import math

import numpy as np
from numba import njit

# model kinds
KRAUSS = 0
IDM = 1
IIDM = 2
EIDM = 3

# parameter row layout
A_MAX = 0
B = 1
T = 2  # time headway (IDM family) / driver reaction time tau (Krauss)
DELTA = 3
F_V = 4
S0 = 5
T_AP = 6
T_REAC = 7
T_START = 8
M_BG = 9
T_AMAX = 10
EPSILON = 11
N_SCHED = 12
SCHED_V = 13
SCHED_A = 17
MAX_BREAKPOINTS = 4
N_PARAMS = 21

# driver state row layout
PERC_TIME = 0
PERC_GAP = 1
PERC_VL = 2
PERC_X = 3
LAST_ACTION = 4
HELD_ACC = 5
STOPPED = 6
STOP_GAP = 7
STOPPED_SINCE = 8
TRIGGER_TIME = 9
EMERGENCY = 10
N_STATE = 11

B_EMERGENCY = 9.0
V_STOP = 0.1
GAP_OPENING = 0.25
GAP_FLOOR = 1e-3
TIME_EPS = 1e-9


@njit(cache=True)
def reset_state(st):
    st[PERC_TIME] = -np.inf
    st[PERC_GAP] = np.inf
    st[PERC_VL] = 0.0
    st[PERC_X] = 0.0
    st[LAST_ACTION] = -np.inf
    st[HELD_ACC] = 0.0
    st[STOPPED] = 0.0
    st[STOP_GAP] = np.inf
    st[STOPPED_SINCE] = np.nan
    st[TRIGGER_TIME] = np.nan
    st[EMERGENCY] = 0.0


def new_states(n):
    states = np.empty((n, N_STATE))
    for i in range(n):
        reset_state(states[i])
    return states


@njit(cache=True)
def amax_at(p, v):
    n = int(p[N_SCHED])
    if n == 0:
        return p[A_MAX]
    if v <= p[SCHED_V]:
        return p[SCHED_A]
    for i in range(1, n):
        v1 = p[SCHED_V + i]
        if v < v1:
            v0 = p[SCHED_V + i - 1]
            a0 = p[SCHED_A + i - 1]
            a1 = p[SCHED_A + i]
            return a0 + (a1 - a0) * (v - v0) / (v1 - v0)
    return p[SCHED_A + n - 1]


@njit(cache=True)
def desired_gap(v, dv, a, b, t_head, s0):
    return s0 + max(0.0, v * t_head + v * dv / (2.0 * math.sqrt(a * b)))


@njit(cache=True)
def idm_acc(v, gap, vl, v0, a, b, t_head, delta, s0):
    s_star = desired_gap(v, v - vl, a, b, t_head, s0)
    return a * (1.0 - (v / v0) ** delta - (s_star / gap) ** 2)


@njit(cache=True)
def iidm_acc(v, gap, vl, v0, a, b, t_head, delta, s0):
    z = desired_gap(v, v - vl, a, b, t_head, s0) / gap
    if v <= v0:
        a_free = a * (1.0 - (v / v0) ** delta)
        if z >= 1.0:
            return a * (1.0 - z * z)
        if a_free <= 0.0:
            return 0.0
        return a_free * (1.0 - z ** (2.0 * a / a_free))
    a_free = -b * (1.0 - (v0 / v) ** (a * delta / b))
    if z >= 1.0:
        return a_free + a * (1.0 - z * z)
    return a_free


@njit(cache=True)
def krauss_vsafe(v, gap, vl, tau, b):
    vs = vl + (gap - vl * tau) / ((vl + v) / (2.0 * b) + tau)
    return max(0.0, vs)


@njit(cache=True)
def krauss_next_speed(p, v, gap, vl, v_limit, b_used, eta, dt):
    vs = krauss_vsafe(v, gap - p[S0], vl, p[T], b_used)
    v_des = min(p[F_V] * v_limit, v + p[A_MAX] * dt, vs)
    return max(0.0, v_des - p[EPSILON] * p[A_MAX] * eta * dt)


@njit(cache=True)
def probe_acc(kind, p, v, gap, vl, v_limit, b_leader, dt):
    """Stateless acceleration request, used for amber/dilemma-zone decisions."""
    g = max(gap, GAP_FLOOR)
    v0 = p[F_V] * v_limit
    if kind == KRAUSS:
        return (krauss_next_speed(p, v, g, vl, v_limit, b_leader, 0.0, dt) - v) / dt
    a = amax_at(p, v)
    if kind == IDM:
        return idm_acc(v, g, vl, v0, a, p[B], p[T], p[DELTA], p[S0])
    return iidm_acc(v, g, vl, v0, a, p[B], p[T], p[DELTA], p[S0])


@njit(cache=True)
def _eidm_raw(p, st, t, x, v, gap, vl, v_limit, changed):
    a = amax_at(p, v)
    v0 = p[F_V] * v_limit
    # a situation demanding more than comfortable braking is noticed at once
    critical = iidm_acc(v, max(gap, GAP_FLOOR), vl, v0, a, p[B], p[T], p[DELTA], p[S0]) < -p[B]
    if changed or critical or t - st[PERC_TIME] >= p[T_REAC] - TIME_EPS:
        st[PERC_TIME] = t
        st[PERC_GAP] = gap
        st[PERC_VL] = vl
        st[PERC_X] = x
        g = gap
        w = vl
    else:
        w = st[PERC_VL]
        g = st[PERC_GAP]
        if g != np.inf:
            g = g + w * (t - st[PERC_TIME]) - (x - st[PERC_X])
    acc = iidm_acc(v, max(g, GAP_FLOOR), w, v0, a, p[B], p[T], p[DELTA], p[S0])

    if v < V_STOP and math.isnan(st[TRIGGER_TIME]):
        if st[STOPPED] == 0.0:
            st[STOPPED] = 1.0
            st[STOP_GAP] = g
            st[STOPPED_SINCE] = t
        else:
            st[STOP_GAP] = min(st[STOP_GAP], g)
        if g == np.inf or g > max(p[S0], st[STOP_GAP]) + GAP_OPENING or w > V_STOP:
            st[TRIGGER_TIME] = t
        else:
            if acc >= 0.0 or v <= 0.0:
                return 0.0
            return acc

    if not math.isnan(st[TRIGGER_TIME]):
        elapsed = t - st[TRIGGER_TIME]
        if elapsed < p[T_START] - TIME_EPS:
            if acc >= 0.0 or v <= 0.0:
                return 0.0
            return acc
        tau = elapsed - p[T_START]
        if p[T_AMAX] <= 0.0 or tau >= p[T_AMAX] - TIME_EPS:
            st[TRIGGER_TIME] = np.nan
            st[STOPPED] = 0.0
            st[STOP_GAP] = np.inf
            st[STOPPED_SINCE] = np.nan
        elif acc > 0.0:
            acc *= p[M_BG] + (1.0 - p[M_BG]) * tau / p[T_AMAX]
    return acc


@njit(cache=True)
def control(kind, p, st, t, x, v, gap, vl, v_limit, b_leader, changed, eta, dt):
    """Acceleration command for one vehicle at time ``t``.

    Returns ``(acceleration, emergency_onset)``. The command is held between
    action points and floored at the emergency deceleration.
    """
    if not changed and t - st[LAST_ACTION] < p[T_AP] - TIME_EPS:
        return st[HELD_ACC], False
    g = max(gap, GAP_FLOOR)
    if kind == KRAUSS:
        acc = (krauss_next_speed(p, v, g, vl, v_limit, b_leader, eta, dt) - v) / dt
    elif kind == IDM:
        acc = idm_acc(v, g, vl, p[F_V] * v_limit, amax_at(p, v), p[B], p[T], p[DELTA], p[S0])
    elif kind == IIDM:
        acc = iidm_acc(v, g, vl, p[F_V] * v_limit, amax_at(p, v), p[B], p[T], p[DELTA], p[S0])
    else:
        acc = _eidm_raw(p, st, t, x, v, gap, vl, v_limit, changed)
    onset = False
    if acc < -B_EMERGENCY:
        acc = -B_EMERGENCY
        onset = st[EMERGENCY] == 0.0
        st[EMERGENCY] = 1.0
    else:
        st[EMERGENCY] = 0.0
    st[LAST_ACTION] = t
    st[HELD_ACC] = acc
    return acc, onset


@njit(cache=True, nogil=True)
def control_all(kinds, params, states, t, x, v, gap, vl, v_limit, b_leader, changed, eta, dt,
                out_acc, out_onset):
    for i in range(kinds.shape[0]):
        acc, onset = control(kinds[i], params[i], states[i], t, x[i], v[i], gap[i], vl[i],
                             v_limit, b_leader[i], changed[i], eta[i], dt)
        out_acc[i] = acc
        out_onset[i] = onset


@njit(cache=True, nogil=True)
def run_followers(kinds, params, x0, v0, lead_x, lead_v, lead_seg, lead_len, v_limit, t0, dt,
                  out_x, out_v):
    """Integrate one model-driven follower per lane behind a replayed leader.

    All lanes share the same leader series. A lane stops integrating at its
    first collision; its remaining samples are NaN. Returns the collision mask.
    """
    n_lanes = kinds.shape[0]
    n = lead_x.shape[0]
    collided = np.zeros(n_lanes, dtype=np.bool_)
    st = np.empty(N_STATE)
    for j in range(n_lanes):
        reset_state(st)
        p = params[j]
        x = x0
        v = v0
        out_x[j, 0] = x
        out_v[j, 0] = v
        seg = -1
        for k in range(n - 1):
            t = t0 + k * dt
            changed = lead_seg[k] != seg
            seg = lead_seg[k]
            gap = lead_x[k] - lead_len - x
            acc, _ = control(kinds[j], p, st, t, x, v, gap, lead_v[k], v_limit, p[B], changed,
                             0.0, dt)
            v = max(0.0, v + acc * dt)
            x = x + v * dt
            if lead_x[k + 1] - lead_len - x <= 0.0:
                collided[j] = True
                for m in range(k + 1, n):
                    out_x[j, m] = np.nan
                    out_v[j, m] = np.nan
                break
            out_x[j, k + 1] = x
            out_v[j, k + 1] = v
    return collided


@njit(cache=True, nogil=True)
def probe_all(kinds, params, v, gap, vl, v_limit, b_leader, dt, out):
    for i in range(kinds.shape[0]):
        out[i] = probe_acc(kinds[i], params[i], v[i], gap[i], vl[i], v_limit, b_leader[i], dt)
