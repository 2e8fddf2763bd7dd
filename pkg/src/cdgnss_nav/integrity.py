"""Robustness layer around the CDGNSS update.

* Pseudorange innovation test: a non-pivot satellite whose DD pseudorange
  innovation is an outlier loses every channel on every baseline.
* Windowed carrier-phase NIS over the last ``l`` fixed epochs flags false
  fixes against a chi-square quantile.
* A float-only filter (pseudoranges only) runs alongside the primary filter.
  On alarm the primary is soft-reset to it; after a run of clean fixes the
  float-only filter is re-seeded from the primary.
"""

from __future__ import annotations

import copy
import logging
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.stats import chi2, norm

from .cdgnss import (
    AntennaGeometry,
    DdEpoch,
    LinearizedBaselines,
    baseline_design,
    linearize_ekf,
    linearize_ukf,
    measurement_layout,
)
from .manifold import Belief
from .sqrt_update import AmbiguityOutcome, AmbiguityParams, measurement_update
from .vdc import VdcParams, nhc_update, zupt_update

log = logging.getLogger(__name__)


def chi2_threshold(dof: int, p_false: float) -> float:
    """Upper-tail chi-square quantile, accurate far into the tail."""
    if dof <= 0:
        raise ValueError("dof must be positive")
    return float(chi2.isf(p_false, dof))


def wilson_hilferty_isf(dof: int, p_false: float) -> float:
    """Closed-form approximation of :func:`chi2_threshold`."""
    z = norm.isf(p_false)
    c = 2.0 / (9.0 * dof)
    return float(dof * (1.0 - c + z * np.sqrt(c)) ** 3)


# ---------------------------------------------------------------------------
# Pseudorange outlier exclusion


@dataclass(frozen=True)
class OutlierResult:
    """Pruned epoch, excluded satellite ids and per-channel statistics.

    ``nis`` is the joint pseudorange NIS over all channels before exclusion.
    """

    epoch: DdEpoch
    excluded: NDArray
    q: NDArray
    nis: float = float("nan")
    dof: int = 0

    @property
    def empty(self) -> bool:
        return self.epoch.sats.n_ambiguities == 0


def pseudorange_innovation_covariance(
    belief: Belief, epoch: DdEpoch, lin: LinearizedBaselines
) -> tuple[NDArray, NDArray, NDArray]:
    """Innovations ``nu_rho``, their covariance and the row indices used."""
    A = baseline_design(epoch.sats)
    lay = measurement_layout(epoch.sats)
    rows = np.concatenate([lay["rho1"], lay["rho2"]])
    A_rho = A[rows]
    P_bb = lin.H_b @ belief.cov @ lin.H_b.T + lin.Sigma_b
    P = A_rho @ P_bb @ A_rho.T + epoch.cov[np.ix_(rows, rows)]
    nu = epoch.z[rows] - A_rho @ lin.b_bar
    return nu, P, rows


def reject_pseudorange_outliers(
    belief: Belief, epoch: DdEpoch, lin: LinearizedBaselines, gamma: float
) -> OutlierResult:
    """Drop all channels of each non-pivot satellite with ``q > gamma^2``."""
    if epoch.sats.n_ambiguities == 0:
        return OutlierResult(epoch, np.zeros(0, int), np.zeros(0))
    nu, P, _ = pseudorange_innovation_covariance(belief, epoch, lin)
    q = nu**2 / np.diag(P)
    nis = float(nu @ np.linalg.solve(P, nu))
    b1, b2 = epoch.sats.baselines
    sat_of_row = np.concatenate([b1.sat, b2.sat])
    bad = np.unique(sat_of_row[q > gamma**2])
    if len(bad) == 0:
        return OutlierResult(epoch, bad, q, nis, len(nu))
    pruned = epoch.select_channels(~np.isin(b1.sat, bad), ~np.isin(b2.sat, bad))
    return OutlierResult(pruned, bad, q, nis, len(nu))


# ---------------------------------------------------------------------------
# Windowed carrier-phase NIS


@dataclass
class NisWindow:
    """Last ``length`` (eps_phi, N) pairs; float epochs push ``(0, 0)``."""

    length: int = 10
    entries: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("window length must be positive")
        self.entries = deque(self.entries, maxlen=self.length)

    @property
    def psi(self) -> float:
        return float(sum(e for e, _ in self.entries))

    @property
    def n_psi(self) -> int:
        return int(sum(n for _, n in self.entries))

    @property
    def ratio(self) -> float:
        n = self.n_psi
        return self.psi / n if n else float("nan")

    def clear(self) -> None:
        self.entries.clear()


def nis_window_update(
    w: NisWindow, eps_phi: float, n: int, p_false: float
) -> tuple[NisWindow, bool]:
    """Push one epoch and test ``Psi`` against the chi-square(N_Psi) quantile."""
    if eps_phi < 0:
        raise ValueError("eps_phi must be nonnegative")
    w.entries.append((float(eps_phi), int(n)))
    n_psi = w.n_psi
    if n_psi == 0:
        return w, False
    return w, w.psi > chi2_threshold(n_psi, p_false)


# ---------------------------------------------------------------------------
# Dual filter


@dataclass(frozen=True)
class ReseedCriteria:
    max_eps_per_n: float = 1.0
    max_psi_ratio: float = 0.5
    min_n: int = 10
    min_time_since_reset: float = 2.0

    def __post_init__(self):
        vals = (self.max_eps_per_n, self.max_psi_ratio, self.min_n, self.min_time_since_reset)
        if min(vals) <= 0:
            raise ValueError("re-seed thresholds must be positive")


@dataclass(frozen=True)
class IntegrityParams:
    """Feature switches and thresholds of the epoch pipeline."""

    geom: AntennaGeometry = field(default_factory=AntennaGeometry)
    ambiguity: AmbiguityParams = field(default_factory=AmbiguityParams)
    vdc: VdcParams = field(default_factory=VdcParams)
    gamma: float = 1.5
    window: int = 10
    p_f_psi: float = 1e-15
    reseed: ReseedCriteria = field(default_factory=ReseedCriteria)
    linearization: str = "ukf"
    outlier_rejection: bool = True
    false_fix_detection: bool = True
    reseed_enabled: bool = True
    nhc: bool = True
    zupt: bool = True

    def __post_init__(self):
        if self.linearization not in ("ukf", "ekf"):
            raise ValueError(f"unknown linearization {self.linearization!r}")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")


@dataclass
class DualFilter:
    primary: Belief
    float_only: Belief
    window: NisWindow = field(default_factory=NisWindow)
    t_since_reset: float = float("inf")
    fixes: int = 0
    resets: int = 0
    reseeds: int = 0

    @classmethod
    def start(cls, belief: Belief, window: int = 10) -> DualFilter:
        return cls(belief, belief, NisWindow(window))

    def copy(self) -> DualFilter:
        return copy.deepcopy(self)


def soft_reset(df: DualFilter) -> DualFilter:
    """Replace the primary belief by the float-only belief."""
    df.primary = df.float_only
    df.window.clear()
    df.t_since_reset = 0.0
    df.resets += 1
    return df


def reseed_allowed(df: DualFilter, outcome: AmbiguityOutcome, criteria: ReseedCriteria) -> bool:
    if not outcome.fixed or outcome.n_amb == 0:
        return False
    return (
        outcome.eps_phi / outcome.n_amb <= criteria.max_eps_per_n
        and df.window.n_psi > 0
        and df.window.ratio <= criteria.max_psi_ratio
        and outcome.n_amb >= criteria.min_n
        and df.t_since_reset >= criteria.min_time_since_reset
    )


def maybe_reseed(df: DualFilter, outcome: AmbiguityOutcome, criteria: ReseedCriteria) -> tuple[DualFilter, bool]:
    """Copy the primary into the float-only filter when all criteria hold."""
    if not reseed_allowed(df, outcome, criteria):
        return df, False
    df.float_only = df.primary
    df.reseeds += 1
    return df, True


@dataclass(frozen=True)
class EpochContext:
    """IMU-side inputs at a GNSS epoch."""

    w_b: NDArray = field(default_factory=lambda: np.zeros(3))
    stationary: bool = False
    dt_since_last: float = 0.2


@dataclass(frozen=True)
class EpochStep:
    status: str  # "fixed", "float" or "empty"
    outcome: AmbiguityOutcome | None
    n_channels: int
    excluded: NDArray
    alarm: bool
    reset: bool
    reseed: bool
    zupt: bool
    nis: float
    nis_dof: int


def _linearize(belief: Belief, params: IntegrityParams) -> LinearizedBaselines:
    if params.linearization == "ekf":
        return linearize_ekf(belief, params.geom)
    return linearize_ukf(belief, params.geom)


def _constraints(belief: Belief, ctx: EpochContext, params: IntegrityParams) -> tuple[Belief, bool]:
    zupt_applied = False
    if params.zupt and ctx.stationary:
        belief, zupt_applied, _ = zupt_update(belief, ctx.w_b, params.vdc)
    if params.nhc:
        belief, _ = nhc_update(belief, ctx.w_b, params.vdc)
    return belief, zupt_applied


def step_epoch(
    df: DualFilter, epoch: DdEpoch | None, ctx: EpochContext, params: IntegrityParams
) -> tuple[DualFilter, EpochStep]:
    """One GNSS epoch for both filters (both already propagated to ``epoch.t``).

    The float-only filter sees pseudoranges only.  The primary runs outlier
    exclusion, integer resolution, the NIS window, soft reset and re-seed in
    that order.
    """
    df.t_since_reset += ctx.dt_since_last
    df.primary, zupt_applied = _constraints(df.primary, ctx, params)
    df.float_only, _ = _constraints(df.float_only, ctx, params)

    if epoch is None or epoch.sats.n_ambiguities == 0:
        return df, EpochStep("empty", None, 0, np.zeros(0, int), False, False, False,
                             zupt_applied, float("nan"), 0)

    # float-only filter: pseudoranges only, phase rows never used
    lin_f = _linearize(df.float_only, params)
    ep_f = epoch
    if params.outlier_rejection:
        ep_f = reject_pseudorange_outliers(df.float_only, epoch, lin_f, params.gamma).epoch
    if ep_f.sats.n_ambiguities:
        df.float_only = measurement_update(df.float_only, ep_f, lin_f, params.ambiguity, use_phase=False).posterior

    lin = _linearize(df.primary, params)
    excluded = np.zeros(0, int)
    pre_gate = None
    if params.outlier_rejection:
        res = reject_pseudorange_outliers(df.primary, epoch, lin, params.gamma)
        epoch, excluded = res.epoch, res.excluded
        pre_gate = (res.nis, res.dof)
    if epoch.sats.n_ambiguities == 0:
        return df, EpochStep("empty", None, 0, excluded, False, False, False,
                             zupt_applied, float("nan"), 0)

    upd = measurement_update(df.primary, epoch, lin, params.ambiguity)
    df.primary = upd.posterior
    out = upd.outcome
    m = epoch.sats.n_measurements
    # pseudorange part taken before the outlier gate: the gate truncates the
    # innovations it keeps, which would bias the statistic low on clean data
    nis, nis_dof = pre_gate if pre_gate is not None else (out.J3, m - out.n_amb)
    if out.fixed:
        df.fixes += 1
        nis, nis_dof = nis + out.eps_phi, nis_dof + out.n_amb

    alarm = reset = reseed = False
    # the window always runs (re-seed reads it); only the alarm is switchable
    eps, n = (out.eps_phi, out.n_amb) if out.fixed else (0.0, 0)
    _, alarm = nis_window_update(df.window, eps, n, params.p_f_psi)
    alarm = alarm and params.false_fix_detection
    if alarm:
        log.info("false fix alarm at t=%.2f (Psi/N=%.2f)", epoch.t, df.window.ratio)
        soft_reset(df)
        reset = True
    if not reset and out.fixed and params.reseed_enabled:
        _, reseed = maybe_reseed(df, out, params.reseed)
    status = "fixed" if out.fixed and not reset else "float"
    return df, EpochStep(status, out, m, excluded, alarm, reset, reseed, zupt_applied, nis, nis_dof)
