import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cfcalib.models import (AmaxSchedule, CollisionError, ConfigurationError, DriverState,
                            EidmParams, FollowerContext, IdmParams, KraussParams, ParameterSet,
                            amax_lookup, default_parameters, eidm_acceleration, equilibrium_gap,
                            idm_acceleration, iidm_acceleration, krauss_safe_speed, krauss_step,
                            leader_deceleration_visibility, with_values)

LIMIT = 50 / 3.6


def idm_reference(v, gap, vl, v0, a, b, T, delta, s0):
    s_star = s0 + max(0.0, v * T + v * (v - vl) / (2 * math.sqrt(a * b)))
    return a * (1 - (v / v0) ** delta - (s_star / gap) ** 2)


def test_idm_hand_computed_value():
    # v=10, gap=30, vl=10, v0=50/3.6, a=1, b=1.5, T=1, delta=4, s0=2
    p = IdmParams(a_max=1.0, b=1.5, T=1.0, delta=4.0, s0=2.0)
    ctx = FollowerContext(v=10.0, gap=30.0, v_leader=10.0, v_limit=LIMIT)
    expected = 1.0 - (10 / LIMIT) ** 4 - (12 / 30) ** 2
    assert idm_acceleration(ctx, p) == pytest.approx(expected, abs=1e-12)


def test_idm_free_road_at_rest_is_a_max():
    ctx = FollowerContext(v=0.0, gap=math.inf, v_leader=0.0, v_limit=LIMIT)
    assert idm_acceleration(ctx, IdmParams(a_max=1.7)) == pytest.approx(1.7)


@given(v=st.floats(0, 15), gap=st.floats(0.5, 200), vl=st.floats(0, 15),
       a=st.floats(0.3, 4), b=st.floats(0.5, 5), T=st.floats(0.1, 3), delta=st.floats(1, 10))
def test_idm_matches_reference_formula(v, gap, vl, a, b, T, delta):
    p = IdmParams(a_max=a, b=b, T=T, delta=delta)
    ctx = FollowerContext(v=v, gap=gap, v_leader=vl, v_limit=LIMIT)
    ref = max(-9.0, idm_reference(v, gap, vl, LIMIT, a, b, T, delta, 2.0))
    assert idm_acceleration(ctx, p) == pytest.approx(ref, rel=1e-12, abs=1e-12)


@given(v=st.floats(0, 13), gap=st.floats(0.5, 200), vl=st.floats(0, 15))
def test_iidm_bounded_by_a_max_and_emergency(v, gap, vl):
    p = IdmParams(a_max=2.0)
    a = iidm_acceleration(FollowerContext(v=v, gap=gap, v_leader=vl, v_limit=LIMIT), p)
    assert -9.0 <= a <= 2.0 + 1e-12


def test_iidm_no_overbraking_in_equilibrium_range():
    # behind an equally fast leader at a comfortably large gap the IIDM does not brake
    p = IdmParams(a_max=1.0)
    ctx = FollowerContext(v=8.0, gap=60.0, v_leader=8.0, v_limit=LIMIT)
    assert iidm_acceleration(ctx, p) >= 0.0
    assert idm_acceleration(ctx, p) < iidm_acceleration(ctx, p)


def test_equilibrium_gap_zero_acceleration():
    p = IdmParams(a_max=1.3, T=1.2)
    s = equilibrium_gap(9.0, p, LIMIT)
    a = idm_acceleration(FollowerContext(v=9.0, gap=s, v_leader=9.0, v_limit=LIMIT), p)
    assert abs(a) < 1e-12


def test_nonpositive_gap_raises():
    with pytest.raises(CollisionError):
        idm_acceleration(FollowerContext(v=1.0, gap=0.0, v_leader=0.0, v_limit=LIMIT), IdmParams())


def test_krauss_safe_speed_hand_value():
    # vs = vl + (g - vl*tau) / ((vl + v)/(2b) + tau) with v=10, vl=8, g=20, tau=1, b=4.5
    ctx = FollowerContext(v=10.0, gap=20.0, v_leader=8.0, v_limit=LIMIT)
    expected = 8 + (20 - 8) / (18 / 9 + 1)
    assert krauss_safe_speed(ctx, KraussParams(b=4.5, tau=1.0)) == pytest.approx(expected)


def test_krauss_step_limited_by_acceleration_and_limit():
    p = KraussParams(a_max=2.0)
    free = FollowerContext(v=5.0, gap=1e6, v_leader=20.0, v_limit=LIMIT)
    assert krauss_step(free, p, 0.1) == pytest.approx(5.2)
    fast = FollowerContext(v=LIMIT, gap=1e6, v_leader=20.0, v_limit=LIMIT)
    assert krauss_step(fast, p, 0.1) == pytest.approx(LIMIT)


def test_krauss_dawdle_reduces_speed():
    p = KraussParams(a_max=2.0, epsilon=0.5)
    ctx = FollowerContext(v=5.0, gap=1e6, v_leader=20.0, v_limit=LIMIT)
    assert krauss_step(ctx, p, 0.1, eta=1.0) == pytest.approx(5.2 - 0.5 * 2.0 * 0.1)


def test_leader_deceleration_policy():
    assert leader_deceleration_visibility(True)(4.5, 3.0) == 3.0
    assert leader_deceleration_visibility(False)(4.5, 3.0) == 4.5


def test_amax_schedule_interpolation_and_clamping():
    s = AmaxSchedule(((5.0, 3.0), (12.0, 1.0)))
    assert amax_lookup(0.0, s) == pytest.approx(3.0)
    assert amax_lookup(8.5, s) == pytest.approx(2.0)
    assert amax_lookup(20.0, s) == pytest.approx(1.0)


def test_amax_schedule_validation():
    with pytest.raises(ConfigurationError):
        AmaxSchedule(((5.0, 1.0), (5.0, 2.0)))
    with pytest.raises(ConfigurationError):
        AmaxSchedule(())


def test_parameter_validation():
    with pytest.raises(ConfigurationError):
        IdmParams(a_max=-1.0)
    with pytest.raises(ConfigurationError):
        EidmParams(M_bg=1.5)
    with pytest.raises(ConfigurationError):
        ParameterSet("idm", KraussParams())
    with pytest.raises(ConfigurationError):
        default_parameters("ovm")


@pytest.mark.parametrize("model", ["krauss", "idm", "iidm", "eidm"])
def test_parameter_set_round_trip(model):
    ps = default_parameters(model)
    assert ParameterSet.from_json(ps.to_json()) == ps


def test_schedule_round_trip_and_with_values():
    ps = default_parameters("eidm", schedule_speeds=(5.0, 12.0))
    assert ParameterSet.from_dict(ps.to_dict()) == ps
    ps2 = with_values(ps, T=1.7, t_reac=0.9)
    assert ps2.params.base.T == 1.7 and ps2.params.t_reac == 0.9


def _eidm_run(p, gap_fn, vl_fn, steps, dt=0.04):
    state = DriverState()
    x = v = 0.0
    out = []
    for k in range(steps):
        t = k * dt
        ctx = FollowerContext(v=v, gap=gap_fn(t, x), v_leader=vl_fn(t), v_limit=LIMIT, t=t, x=x)
        a, state = eidm_acceleration(ctx, state, p, dt, leader_changed=(k == 0))
        v = max(0.0, v + a * dt)
        x += v * dt
        out.append((t, a, v))
    return np.array(out)


def test_eidm_startup_delay_holds_still():
    # leader drives off at t=0; the follower waits t_start before moving
    p = EidmParams(t_start=1.0, t_reac=0.2, M_bg=0.5, t_amax=2.0)
    lead_x = lambda t: 7.0 + 0.75 * t * t  # noqa: E731
    res = _eidm_run(p, lambda t, x: lead_x(t) - 5.0 - x, lambda t: 1.5 * t, 100)
    still = res[res[:, 0] < 0.96]
    assert np.all(still[:, 2] == 0.0)
    assert np.any(res[res[:, 0] > 1.1][:, 2] > 0.0)


def test_eidm_acceleration_ramp_starts_at_m_bg_fraction():
    p = EidmParams(base=IdmParams(a_max=2.0), t_start=0.0, t_reac=0.0, M_bg=0.25, t_amax=4.0)
    res = _eidm_run(p, lambda t, x: math.inf, lambda t: 0.0, 3)
    assert res[0, 1] == pytest.approx(0.25 * 2.0, rel=1e-9)


def test_eidm_pure_call_leaves_state_untouched():
    st0 = DriverState()
    ctx = FollowerContext(v=5.0, gap=20.0, v_leader=5.0, v_limit=LIMIT, t=0.0)
    a1, s1 = eidm_acceleration(ctx, st0, EidmParams(), 0.04)
    a2, s2 = eidm_acceleration(ctx, st0, EidmParams(), 0.04)
    assert a1 == a2 and s1 == s2 and st0 == DriverState()


def test_eidm_perception_held_between_refreshes():
    # the leader brakes hard between perception instants; the driver keeps its old estimate
    p = EidmParams(t_reac=1.0)
    st0 = DriverState()
    c0 = FollowerContext(v=10.0, gap=40.0, v_leader=10.0, v_limit=LIMIT, t=0.0, x=0.0)
    _, s1 = eidm_acceleration(c0, st0, p, 0.04, leader_changed=True)
    c1 = FollowerContext(v=10.0, gap=39.0, v_leader=9.0, v_limit=LIMIT, t=0.4, x=4.0)
    _, s2 = eidm_acceleration(c1, s1, p, 0.04)
    assert s2.perceived_v_leader == 10.0 and s2.last_perception_time == 0.0


def test_eidm_critical_gap_refreshes_perception():
    p = EidmParams(t_reac=1.0)
    c0 = FollowerContext(v=10.0, gap=40.0, v_leader=10.0, v_limit=LIMIT, t=0.0, x=0.0)
    _, s1 = eidm_acceleration(c0, DriverState(), p, 0.04, leader_changed=True)
    c1 = FollowerContext(v=10.0, gap=6.0, v_leader=0.0, v_limit=LIMIT, t=0.4, x=4.0)
    a, s2 = eidm_acceleration(c1, s1, p, 0.04)
    assert s2.last_perception_time == 0.4 and a < -p.base.b
