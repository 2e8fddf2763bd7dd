from __future__ import annotations

import numpy as np
import pytest

from cdgnss_nav.cdgnss import (
    L1_WAVELENGTH,
    AntennaGeometry,
    DdEpoch,
    NoiseModelParams,
    SatelliteSet,
    dd_noise_covariance,
    dd_predict,
)
from cdgnss_nav.manifold import Belief, NavState, exp_map


# filled by the acceptance suite and repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def unit_los(az_deg, el_deg):
    az, el = np.radians(az_deg), np.radians(el_deg)
    return np.stack([np.cos(el) * np.sin(az), np.cos(el) * np.cos(az), np.sin(el)], -1)


def random_constellation(rng, n_sat):
    az = rng.uniform(0, 360, n_sat)
    el = rng.uniform(15, 85, n_sat)
    return unit_los(az, el), np.radians(el)


def random_belief(rng, pos_sigma=0.3, att_sigma=0.05):
    x = NavState(
        r_w=rng.normal(0, 5, 3),
        v_w=rng.normal(0, 2, 3),
        R_wb=exp_map(rng.uniform(-0.5, 0.5, 3)),
        b_a=rng.normal(0, 0.01, 3),
        b_g=rng.normal(0, 1e-4, 3),
    )
    sig = np.r_[[pos_sigma] * 3, [0.1] * 3, [att_sigma] * 3, [0.01] * 3, [1e-4] * 3]
    A = rng.normal(size=(15, 15)) * 0.2
    C = np.diag(sig) @ (np.eye(15) + A @ A.T / 15) @ np.diag(sig)
    return Belief(x, C)


def random_epoch(rng, n_sat=6, b=None, n=None, noise=NoiseModelParams(), draw_noise=True):
    los, el = random_constellation(rng, n_sat)
    sats = SatelliteSet.from_constellation(los, el, (L1_WAVELENGTH,))
    b = rng.normal(0, 3, 6) if b is None else b
    n = rng.integers(-30, 30, sats.n_ambiguities) if n is None else n
    cov = dd_noise_covariance(sats, noise)
    z = dd_predict(b, n, sats)
    if draw_noise:
        z = z + np.linalg.cholesky(cov) @ rng.normal(size=len(z))
    return DdEpoch(0.0, z, sats, cov), np.asarray(n)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def geom():
    return AntennaGeometry()
