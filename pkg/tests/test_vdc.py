from __future__ import annotations

import numpy as np
import pytest

from cdgnss_nav.manifold import N_X, Belief, NavState, exp_map
from cdgnss_nav.vdc import (
    StationarityState,
    VdcParams,
    nhc_predict,
    nhc_update,
    sideslip,
    vehicle_velocity,
    zupt_detect,
    zupt_update,
)

from conftest import random_belief


def small_belief(v_w=(0.0, 0.0, 0.0), R_wb=np.eye(3), vel_var=0.01):
    P = np.eye(N_X) * 1e-10
    P[3:6, 3:6] = np.eye(3) * vel_var
    return Belief(NavState(v_w=v_w, R_wb=R_wb), P)


def loewner_leq(A, B, tol=1e-12):
    return np.linalg.eigvalsh(B - A).min() >= -tol


# -- kinematics --------------------------------------------------------------------


def test_sideslip_example():
    p = VdcParams(P0=0.01, P1=0.001)
    assert sideslip([0, 0, 0.1], p) == pytest.approx(0.00101, rel=1e-12)
    assert sideslip([0, 0, 0.0], p) == 0.0


def test_forward_motion_has_no_lateral_velocity():
    p = VdcParams()
    # body -y is vehicle forward
    v = vehicle_velocity(np.eye(3), np.array([0.0, -5.0, 0.0]), np.zeros(3), p)
    np.testing.assert_allclose(v, [5.0, 0.0, 0.0], atol=1e-15)


def test_rotation_rate_lever_term():
    p = VdcParams()
    w_b = np.array([0.0, 0.0, 1.0])
    lever = p.r_b_v - p.r_b_u
    expected = p.R_vb @ np.array([w_b[1] * lever[2] - w_b[2] * lever[1],
                                  w_b[2] * lever[0] - w_b[0] * lever[2],
                                  w_b[0] * lever[1] - w_b[1] * lever[0]])
    np.testing.assert_allclose(vehicle_velocity(np.eye(3), np.zeros(3), w_b, p), expected)
    np.testing.assert_allclose(expected, [0.3, -1.6, 0.0], atol=1e-15)


def test_vehicle_velocity_is_attitude_invariant(rng):
    """Rotating world velocity together with attitude leaves the vehicle frame unchanged."""
    p = VdcParams()
    R = exp_map(rng.uniform(-1, 1, 3))
    v_b = rng.normal(size=3)
    w_b = rng.normal(size=3) * 0.1
    np.testing.assert_allclose(vehicle_velocity(R, R @ v_b, w_b, p),
                               vehicle_velocity(np.eye(3), v_b, w_b, p), atol=1e-14)


def test_batched_prediction_matches_single(rng):
    p = VdcParams()
    Rs = np.stack([exp_map(rng.uniform(-1, 1, 3)) for _ in range(5)])
    vs = rng.normal(size=(5, 3))
    w_b = rng.normal(size=3)
    batch = vehicle_velocity(Rs, vs, w_b, p)
    for k in range(5):
        single = nhc_predict(NavState(v_w=vs[k], R_wb=Rs[k]), w_b, p)
        np.testing.assert_allclose(batch[k, 1:3], single, atol=1e-14)


@pytest.mark.parametrize("bad", [dict(sigma_nhc_y=0.0), dict(n_zupt=0), dict(p_f_zupt=1.0),
                                 dict(sigma_zupt=(0.05, -0.01, 0.01))])
def test_params_validation(bad):
    with pytest.raises(ValueError):
        VdcParams(**bad)


# -- NHC -----------------------------------------------------------------------------


def test_nhc_pulls_lateral_velocity_toward_zero():
    p = VdcParams()
    b = small_belief(v_w=(0.5, -5.0, 0.3))  # lateral 0.5, vertical 0.3 in the vehicle frame
    post, nis = nhc_update(b, np.zeros(3), p)
    before = nhc_predict(b.mean, np.zeros(3), p)
    after = nhc_predict(post.mean, np.zeros(3), p)
    assert np.all(np.abs(after) < np.abs(before))
    # forward speed untouched
    assert vehicle_velocity(post.mean.R_wb, post.mean.v_w, np.zeros(3), p)[0] == pytest.approx(5.0, abs=1e-6)
    # linear-Gaussian NIS: 0.5^2 / (0.01 + 0.01) + 0.3^2 / (0.01 + 0.04)
    assert nis == pytest.approx(0.25 / 0.02 + 0.09 / 0.05, rel=1e-6)


def test_nhc_covariance_loewner_order(rng):
    p = VdcParams()
    for _ in range(20):
        b = random_belief(rng)
        post, nis = nhc_update(b, rng.normal(size=3) * 0.1, p)
        assert nis >= 0
        assert loewner_leq(post.cov, b.cov)


# -- ZUPT detection --------------------------------------------------------------------


def test_window_fills_then_detects():
    p = VdcParams()
    st = StationarityState(p.n_zupt)
    flags = [zupt_detect(st, [0.01] * 3, [1e-4] * 3, p)[1] for _ in range(p.n_zupt + 3)]
    assert flags == [False] * (p.n_zupt - 1) + [True] * 4


def test_spike_resets_window():
    p = VdcParams()
    st = StationarityState(p.n_zupt)
    for _ in range(p.n_zupt):
        zupt_detect(st, np.zeros(3), np.zeros(3), p)
    assert st.stationary
    _, flag = zupt_detect(st, [1.0, 0, 0], np.zeros(3), p)  # vibration spike above 0.8
    assert not flag
    flags = [zupt_detect(st, np.zeros(3), np.zeros(3), p)[1] for _ in range(p.n_zupt)]
    assert flags == [False] * (p.n_zupt - 1) + [True]


def test_gyro_threshold_applies():
    p = VdcParams()
    st = StationarityState(1)
    assert not zupt_detect(st, np.zeros(3), [0.007, 0, 0], p)[1]
    assert zupt_detect(st, np.zeros(3), [0.005, 0, 0], p)[1]


def test_consumer_grade_detects_later():
    ind, con = VdcParams.preset("industrial"), VdcParams.preset("consumer")
    first = {}
    for name, p in (("ind", ind), ("con", con)):
        st = StationarityState(p.n_zupt)
        for k in range(100):
            if zupt_detect(st, np.zeros(3), np.zeros(3), p)[1]:
                first[name] = k
                break
    assert first["ind"] == 9 and first["con"] == 29
    assert con.gamma_g > ind.gamma_g


# -- ZUPT update -------------------------------------------------------------------------


def test_zupt_gate_rejects_moving_vehicle():
    p = VdcParams()
    b = small_belief(v_w=(0.0, -5.0, 0.0), vel_var=1e-4)
    post, applied, nis = zupt_update(b, np.zeros(3), p)
    assert not applied
    assert nis > p.zupt_gate
    assert post is b or np.array_equal(post.cov, b.cov)


def test_zupt_applied_at_rest():
    p = VdcParams()
    b = small_belief(v_w=(0.01, 0.02, -0.01), vel_var=0.01)
    post, applied, nis = zupt_update(b, np.zeros(3), p)
    assert applied
    assert np.linalg.norm(post.mean.v_w) < np.linalg.norm(b.mean.v_w)
    assert loewner_leq(post.cov, b.cov)
    # world x is vehicle lateral, world -y is vehicle forward
    sig = np.array(p.sigma_zupt)[[1, 0, 2]]
    expected = 1 / (1 / 0.01 + 1 / sig**2)
    np.testing.assert_allclose(np.diag(post.cov)[3:6], expected, rtol=1e-6)


def test_zupt_gate_false_rejection_rate():
    """With a consistent belief the NIS is chi-square(3); the gate rejects at p_f_zupt."""
    p = VdcParams(p_f_zupt=0.05)
    rng = np.random.default_rng(3)
    S = 0.01 + np.square(p.sigma_zupt)
    trials, rejected = 2000, 0
    for _ in range(trials):
        e = rng.normal(size=3) * np.sqrt(S)
        b = small_belief(v_w=p.R_vb.T @ e, vel_var=0.01)
        rejected += not zupt_update(b, np.zeros(3), p)[1]
    assert rejected / trials == pytest.approx(0.05, abs=0.015)


def test_zupt_gate_value():
    assert VdcParams(p_f_zupt=0.05).zupt_gate == pytest.approx(7.814728, rel=1e-6)
