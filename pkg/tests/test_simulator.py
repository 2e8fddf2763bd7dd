from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from cdgnss_nav.cdgnss import AntennaGeometry, dd_noise_covariance, measurement_layout
from cdgnss_nav.ins import ImuParams, propagate_state
from cdgnss_nav.manifold import ominus
from cdgnss_nav.simulator import (
    Constellation,
    Fault,
    Scenario,
    Segment,
    false_fix_scenario,
    initial_belief_sigma,
    ou_sequence,
    static_scenario,
    synth_dd,
    synth_imu,
    synth_truth,
    urban_drive,
    write_dd_csv,
    write_imu_csv,
)
from cdgnss_nav.vdc import VdcParams, vehicle_velocity


@pytest.fixture(scope="module")
def short_drive():
    sc = urban_drive(60.0, seed=3)
    return sc, synth_truth(sc)


# -- scenarios -------------------------------------------------------------------------


def test_urban_drive_fills_duration():
    sc = urban_drive(600.0)
    assert sc.duration == pytest.approx(600.0)
    assert sc.imu_per_epoch == 40


def test_scenario_json_round_trip():
    sc = false_fix_scenario()
    back = Scenario.from_dict(json.loads(sc.to_json()))
    assert back == sc


@pytest.mark.parametrize(
    "d",
    [
        {"segments": [{"duration": 1.0}], "speed": 3},
        {"segments": [{"duration": 1.0}], "constellation": {"colour": "red"}},
    ],
)
def test_scenario_unknown_keys(d):
    with pytest.raises(ValueError, match="unknown"):
        Scenario.from_dict(d)


def test_rate_ratio_must_be_integer():
    with pytest.raises(ValueError):
        Scenario(segments=(Segment(1.0),), imu_rate=200.0, gnss_rate=3.0)


def test_backwards_profile_rejected():
    with pytest.raises(ValueError):
        synth_truth(Scenario(segments=(Segment(2.0, accel=-1.0),)))


@pytest.mark.parametrize("bad", [dict(kind="jump"), dict(t_end=0.0)])
def test_fault_validation(bad):
    kw = dict(kind="pseudorange", t_start=1.0, t_end=2.0, sat=1, value=15.0) | bad
    with pytest.raises(ValueError):
        Fault(**kw)


def test_constellation_mask():
    c = Constellation(elevation=(80, 25, 45, 60, 10, 35, 70, 30, 50, 40))
    sats = c.satellites()
    assert 4 not in sats.baselines[0].sat
    assert len(sats.baselines[0]) == 8
    assert sats.baselines[0].pivot[0] == 0


def test_single_baseline_constellation():
    sats = Constellation().satellites(baselines=(True, False))
    assert sats.counts == (9, 0)


def test_initial_sigma():
    sig = initial_belief_sigma(static_scenario())
    p = ImuParams.preset("industrial")
    np.testing.assert_allclose(sig[:6], 0.02)
    np.testing.assert_allclose(sig[6:9], np.radians(0.5))
    np.testing.assert_allclose(sig[9:12], p.sigma_ba)


# -- truth ----------------------------------------------------------------------------


def test_circle_has_centripetal_acceleration():
    """10 m/s on a 50 m radius needs 2 m/s^2."""
    sc = Scenario(segments=(Segment(5.0, accel=2.0), Segment(10.0, yaw_rate=0.2)),
                  vibration_accel=0.0, vibration_gyro=0.0)
    geom = AntennaGeometry()
    truth = synth_truth(sc, geom, r_b_v=geom.r_b_u)  # IMU at the vehicle origin
    turn = (truth.t > 6.0) & (truth.t < 14.0)
    acc = np.linalg.norm(truth.a_w[turn], axis=1)
    np.testing.assert_allclose(acc, 2.0, rtol=1e-4)
    np.testing.assert_allclose(truth.a_w[turn, 2], 0.0, atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(truth.v[turn], axis=1), 10.0, rtol=1e-9)


def test_position_difference_matches_velocity(short_drive):
    _, truth = short_drive
    dt = truth.t[1] - truth.t[0]
    fd = np.diff(truth.r, axis=0) / dt
    np.testing.assert_allclose(fd, 0.5 * (truth.v[1:] + truth.v[:-1]), atol=1e-9)


def test_truth_is_reproduced_by_the_filter_dynamics(short_drive):
    sc, truth = short_drive
    params = ImuParams.preset(sc.grade)
    imu = synth_imu(truth, params, seed=0, noise=False)
    for k in range(0, len(truth) - 1, 97):
        x = propagate_state(truth.state(k), imu.sample(k), params)
        assert np.abs(ominus(x, truth.state(k + 1))).max() < 1e-9


def test_vehicle_moves_without_sideslip():
    sc = urban_drive(60.0, vibration_accel=0.0, vibration_gyro=0.0)
    truth = synth_truth(sc)
    p = VdcParams()
    for k in range(0, len(truth), 113):
        vv = vehicle_velocity(truth.R[k], truth.v[k], truth.w_b[k], p)
        np.testing.assert_allclose(vv[1:], 0.0, atol=1e-9)
        assert vv[0] >= -1e-9


def test_attitude_stays_orthonormal(short_drive):
    _, truth = short_drive
    RtR = np.einsum("nji,njk->nik", truth.R, truth.R)
    assert np.abs(RtR - np.eye(3)).max() < 1e-12


# -- IMU and OU ------------------------------------------------------------------------


OU_SIGMA, OU_TAU, OU_DT = 2.0, 0.5, 0.005


@pytest.fixture(scope="module")
def ou_samples():
    return ou_sequence(np.random.default_rng(11), 1_000_000, OU_SIGMA, OU_TAU, OU_DT)


@pytest.mark.parametrize("lag_tau", [0.0, 0.5, 1.0])
def test_ou_autocovariance(ou_samples, lag_tau):
    """Exact OU: E[b_k b_{k+m}] = sigma^2 exp(-m dt / tau)."""
    sigma, tau, dt = OU_SIGMA, OU_TAU, OU_DT
    b = ou_samples
    m = int(round(lag_tau * tau / dt))
    c = np.mean(b[: len(b) - m] * b[m:])
    assert c == pytest.approx(sigma**2 * np.exp(-m * dt / tau), rel=0.05)


def test_imu_stream_is_seed_deterministic(short_drive):
    sc, truth = short_drive
    p = ImuParams.preset(sc.grade)
    a, b = synth_imu(truth, p, seed=5), synth_imu(truth, p, seed=5)
    np.testing.assert_array_equal(a.f, b.f)
    np.testing.assert_array_equal(a.w, b.w)
    c = synth_imu(truth, p, seed=6)
    assert not np.array_equal(a.f, c.f)


def test_noise_free_imu_has_no_bias(short_drive):
    sc, truth = short_drive
    imu = synth_imu(truth, ImuParams.preset(sc.grade), seed=0, noise=False)
    np.testing.assert_array_equal(imu.b_a, 0.0)


# -- DD observables ------------------------------------------------------------------------


def test_dd_noise_covariance_is_reproduced():
    sc = Scenario(segments=(Segment(20_000.0),), imu_rate=5.0, gnss_rate=5.0)
    truth = synth_truth(sc)
    noisy = synth_dd(truth, sc, seed=9)
    clean = synth_dd(truth, sc, seed=9, noise=False)
    E = np.stack([a.z - b.z for a, b in zip(noisy, clean)])
    assert len(E) == 100_001
    C = dd_noise_covariance(noisy[0].sats, sc.noise)
    C_hat = E.T @ E / len(E)
    d = np.sqrt(np.diag(C))
    np.testing.assert_allclose(np.diag(C_hat), np.diag(C), rtol=0.05)
    corr_err = (C_hat - C) / np.outer(d, d)
    assert np.abs(corr_err).max() < 0.02


def test_pseudorange_fault_hits_only_its_satellite():
    sc = static_scenario(4.0, faults=(Fault("pseudorange", 1.0, 2.0, sat=3, value=15.0),))
    truth = synth_truth(sc)
    noisy = synth_dd(truth, sc, seed=2)
    clean = synth_dd(truth, static_scenario(4.0), seed=2)
    lay = measurement_layout(noisy[0].sats)
    for a, b in zip(noisy, clean):
        diff = a.z - b.z
        expected = np.zeros_like(diff)
        if 1.0 <= a.t < 2.0:
            for bl, key in ((0, "rho1"), (1, "rho2")):
                expected[lay[key][a.sats.baselines[bl].sat == 3]] = 15.0
        np.testing.assert_allclose(diff, expected, atol=1e-12)


def test_phase_shift_fault_is_position_consistent():
    shift = np.array([0.7, 0.42, 0.0])
    sc = static_scenario(2.0, faults=(Fault("phase", 0.0, 1.0, baseline=1, shift=tuple(shift)),))
    truth = synth_truth(sc)
    a = synth_dd(truth, sc, seed=1)[0]
    b = synth_dd(truth, static_scenario(2.0), seed=1)[0]
    lay = measurement_layout(a.sats)
    ch = a.sats.baselines[0]
    G = a.sats.los[ch.pivot] - a.sats.los[ch.sat]
    np.testing.assert_allclose((a.z - b.z)[lay["phi1"]], G @ shift, atol=1e-12)
    np.testing.assert_allclose((a.z - b.z)[lay["phi2"]], 0.0, atol=1e-12)


def test_outage_drops_epochs():
    sc = static_scenario(3.0, faults=(Fault("outage", 1.0, 2.0),))
    epochs = synth_dd(synth_truth(sc), sc, seed=0)
    t = np.arange(len(epochs)) / sc.gnss_rate
    missing = np.array([e is None for e in epochs])
    np.testing.assert_array_equal(missing, (t >= 1.0) & (t < 2.0))


def test_dd_stream_is_seed_deterministic():
    sc = static_scenario(2.0)
    truth = synth_truth(sc)
    a, b = synth_dd(truth, sc, seed=4), synth_dd(truth, sc, seed=4)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.z, y.z)


# -- CSV streams -------------------------------------------------------------------


def test_imu_csv_round_trip(tmp_path):
    sc = static_scenario(0.5)
    imu = synth_imu(synth_truth(sc), ImuParams.preset("industrial"), seed=1)
    path = tmp_path / "imu.csv"
    write_imu_csv(path, imu)
    data = np.loadtxt(path, delimiter=",", skiprows=1)
    np.testing.assert_array_equal(data[:, 0], imu.t)
    np.testing.assert_array_equal(data[:, 1:4], imu.f)
    np.testing.assert_array_equal(data[:, 4:7], imu.w)


def test_dd_csv_rows_and_outages(tmp_path):
    sc = static_scenario(2.0, faults=(Fault("outage", 0.5, 0.9),))
    epochs = synth_dd(synth_truth(sc), sc, seed=2)
    path = tmp_path / "dd.csv"
    write_dd_csv(path, epochs)
    rows = list(csv.DictReader(open(path)))
    present = [ep for ep in epochs if ep is not None]
    assert len(present) < len(epochs)
    assert len(rows) == sum(ep.sats.n_measurements for ep in present)
    ep = present[0]
    lay = measurement_layout(ep.sats)
    first = [r for r in rows if float(r["t"]) == ep.t]
    phi2 = [r for r in first if r["baseline"] == "2" and r["kind"] == "phi"]
    np.testing.assert_array_equal([float(r["value"]) for r in phi2], ep.z[lay["phi2"]])
    np.testing.assert_allclose([float(r["sigma"]) for r in phi2],
                               np.sqrt(np.diag(ep.cov))[lay["phi2"]])
