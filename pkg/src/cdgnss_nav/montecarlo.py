"""Monte Carlo study of single-epoch integer aperture rates vs. yaw prior.

For each yaw standard deviation the prior belief is fixed, so the baseline
linearization and the float-ambiguity model are computed once per method.
Trials then differ only in the true state (drawn from the prior), the true
integers and the measurement noise.  All methods see the same draws.

Trials are split into fixed-size chunks, each with its own seed substream
keyed by (yaw index, chunk index), so results do not depend on the number
of worker threads.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .ambiguity.aperture import ApertureTable, default_table
from .ambiguity.lambda_ import MAX_LOOPS, decorrelate_covariance, search_batch
from .cdgnss import (
    AntennaGeometry,
    LinearizedBaselines,
    NoiseModelParams,
    SatelliteSet,
    ambiguity_design,
    baseline_design,
    dd_noise_covariance,
    linearize_ekf,
    linearize_ukf,
)
from .manifold import N_X, Belief, NavState, oplus_batch, symmetrize
from .simulator import Constellation

METHODS = ("ukf", "ekf", "unconstrained")
UNCONSTRAINED_SIGMA = 100.0  # m, effectively flat prior on the attitude baseline


@dataclass(frozen=True)
class MonteCarloSpec:
    """Settings of the linearization study.

    The IMU sits at the primary antenna so that the position prior is the
    primary-antenna prior; this lets the unconstrained method use the same
    position knowledge without any attitude information.
    """

    yaw_sigmas_deg: tuple[float, ...] = (0.5, 2.0, 8.0, 15.0, 30.0, 60.0, 90.0)
    pitch_roll_sigma_deg: float = 2.0
    trials: int = 10_000
    methods: tuple[str, ...] = METHODS
    p_f: float = 0.01
    position_sigma: float = 0.02
    seed: int = 0
    chunk: int = 1000
    constellation: Constellation = field(default_factory=Constellation.monte_carlo_default)
    noise: NoiseModelParams = field(default_factory=NoiseModelParams)
    geom: AntennaGeometry = field(default_factory=lambda: AntennaGeometry(r_b_u=np.zeros(3)))

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.chunk < 1:
            raise ValueError("chunk must be at least 1")
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")
        if min(self.yaw_sigmas_deg, default=1.0) < 0 or self.pitch_roll_sigma_deg < 0:
            raise ValueError("standard deviations must be nonnegative")

    def prior(self, yaw_sigma_deg: float) -> Belief:
        att = np.radians([self.pitch_roll_sigma_deg, self.pitch_roll_sigma_deg, yaw_sigma_deg])
        sig = np.r_[[self.position_sigma] * 3, [0.1] * 3, np.maximum(att, 1e-9), [1e-3] * 6]
        return Belief(NavState(), np.diag(sig**2))


@dataclass(frozen=True)
class MonteCarloRow:
    sigma_yaw_deg: float
    method: str
    n_success: int
    n_fail: int
    n_float: int

    @property
    def trials(self) -> int:
        return self.n_success + self.n_fail + self.n_float

    @property
    def p_success(self) -> float:
        return self.n_success / self.trials

    @property
    def p_fail(self) -> float:
        return self.n_fail / self.trials

    @property
    def p_float(self) -> float:
        return self.n_float / self.trials


@dataclass(frozen=True)
class FloatModel:
    """Float ambiguity estimator ``a = K (z - A b_bar)`` and its covariance."""

    K: NDArray
    A_b: NDArray
    Q_aa: NDArray
    threshold: float


def float_model(
    lin: LinearizedBaselines,
    P: NDArray,
    sats: SatelliteSet,
    cov: NDArray,
    p_f: float,
    table: ApertureTable,
) -> FloatModel:
    """Generalized least squares for the ambiguities with the state marginalized.

    Identical to the float part of the square-root update: the state prior
    and the linearization error enter through ``A P_bb A^T``.
    """
    A = baseline_design(sats)
    Lam = ambiguity_design(sats)
    P_bb = lin.H_b @ P @ lin.H_b.T + lin.Sigma_b
    C = symmetrize(A @ P_bb @ A.T + cov)
    Ci_L = np.linalg.solve(C, Lam)
    Q_aa = symmetrize(np.linalg.inv(Lam.T @ Ci_L))
    K = Q_aa @ Ci_L.T
    dof = Q_aa.shape[0]
    adop = float(np.exp(np.linalg.slogdet(Q_aa)[1] / (2 * dof)))
    mu = table.lookup(dof, adop, p_f)
    return FloatModel(K, A @ lin.b_bar, Q_aa, float("inf") if mu is None else mu)


def linearize(method: str, prior: Belief, geom: AntennaGeometry) -> LinearizedBaselines:
    if method == "ukf":
        return linearize_ukf(prior, geom)
    if method == "ekf":
        return linearize_ekf(prior, geom)
    # position prior only, no attitude information on the second baseline
    lin = linearize_ekf(prior, geom)
    S = np.zeros((6, 6))
    S[:3, :3] = prior.cov[:3, :3]
    S[3:, 3:] = UNCONSTRAINED_SIGMA**2 * np.eye(3)
    return LinearizedBaselines(lin.b_bar, np.zeros_like(lin.H_b), S)


def _classify(model: FloatModel, z: NDArray, n_true: NDArray) -> tuple[int, int, int]:
    a = (z - model.A_b) @ model.K.T
    if not np.isfinite(model.threshold):
        return 0, 0, len(z)
    dec = decorrelate_covariance(model.Q_aa)
    cand, cost = search_batch(dec.L, dec.D, dec.Zt_inv, a, dec.Z, 2, MAX_LOOPS)
    order = np.argsort(cost, axis=1)
    c = np.take_along_axis(cost, order, axis=1)
    best = cand[np.arange(len(z)), order[:, 0]]
    accepted = (c[:, 1] - c[:, 0]) > model.threshold
    correct = np.all(best == n_true, axis=1)
    n_s = int(np.sum(accepted & correct))
    n_f = int(np.sum(accepted & ~correct))
    return n_s, n_f, len(z) - n_s - n_f


def _draw(rng: np.random.Generator, m: int, prior: Belief, geom: AntennaGeometry,
          sats: SatelliteSet, L_g: NDArray) -> tuple[NDArray, NDArray]:
    """Measurements and true integers for ``m`` trials."""
    delta = rng.standard_normal((m, N_X)) @ np.linalg.cholesky(prior.cov).T
    r, _, R, _, _ = oplus_batch(prior.mean, delta)
    b = np.concatenate([
        r + R @ geom.lever_primary,
        R @ geom.lever_attitude,
    ], axis=1)
    n_true = rng.integers(-100, 101, (m, sats.n_ambiguities)).astype(float)
    noise = rng.standard_normal((m, sats.n_measurements)) @ L_g.T
    z = b @ baseline_design(sats).T + n_true @ ambiguity_design(sats).T + noise
    return z, n_true


def run_monte_carlo(
    spec: MonteCarloSpec,
    threads: int = 1,
    table: ApertureTable | None = None,
    progress=None,
) -> list[MonteCarloRow]:
    """Success/failure/float counts per (yaw sigma, method), methods in spec order."""
    table = table or default_table()
    sats = spec.constellation.satellites()
    cov = dd_noise_covariance(sats, spec.noise)
    L_g = np.linalg.cholesky(cov)
    n_chunks = math.ceil(spec.trials / spec.chunk)
    rows: list[MonteCarloRow] = []
    for i, yaw in enumerate(spec.yaw_sigmas_deg):
        prior = spec.prior(yaw)
        models = [
            float_model(linearize(m, prior, spec.geom), prior.cov, sats, cov, spec.p_f, table)
            for m in spec.methods
        ]

        def chunk(c: int, i=i, prior=prior, models=models):
            rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(i, c)))
            m = min(spec.chunk, spec.trials - c * spec.chunk)
            z, n_true = _draw(rng, m, prior, spec.geom, sats, L_g)
            return [_classify(mod, z, n_true) for mod in models]

        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                parts = list(pool.map(chunk, range(n_chunks)))
        else:
            parts = [chunk(c) for c in range(n_chunks)]
        totals = np.sum(np.array(parts, dtype=np.int64), axis=0)
        for method, (s, f, u) in zip(spec.methods, totals):
            rows.append(MonteCarloRow(float(yaw), method, int(s), int(f), int(u)))
        if progress is not None:
            progress(rows[-len(spec.methods):])
    return rows


MC_COLUMNS = ("sigma_yaw_deg", "method", "p_success", "p_fail", "p_float", "trials")


def write_rows(path: str | Path, rows: list[MonteCarloRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MC_COLUMNS)
        for r in rows:
            w.writerow([f"{r.sigma_yaw_deg:g}", r.method, f"{r.p_success:.6f}",
                        f"{r.p_fail:.6f}", f"{r.p_float:.6f}", r.trials])
