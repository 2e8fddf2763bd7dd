"""End-to-end filter runs over simulated scenarios.

Both filters of the :class:`~cdgnss_nav.integrity.DualFilter` are propagated
at IMU rate with the unscented time update.  At each GNSS epoch the receiver
side applies channel acceptance (elevation mask, C/N0, phase lock, signal
subset, antenna count) and the epoch is handed to
:func:`~cdgnss_nav.integrity.step_epoch`.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import astuple, dataclass, fields
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .cdgnss import AntennaGeometry, DdEpoch, SatelliteSet, dd_noise_covariance
from .config import RunConfig
from .ins import N_V, body_rate, process_noise, ukf_propagate_fast
from .integrity import DualFilter, EpochContext, step_epoch
from .manifold import N_X, Belief, DegenerateCovarianceError, NavState, log_map
from .simulator import (
    ImuStream,
    Scenario,
    Truth,
    initial_belief_sigma,
    perturb,
    synth_dd,
    synth_imu,
    synth_truth,
)
from .unscented import UtWeights
from .vdc import StationarityState, zupt_detect

log = logging.getLogger(__name__)

FALSE_FIX_DISTANCE = 0.30


class NumericalFailure(RuntimeError):
    """The filter produced a non-finite or non-positive-definite belief."""


@dataclass(frozen=True)
class EpochReport:
    t: float
    status: str
    n_channels: int
    pos_err: float
    horiz_err: float
    vert_err: float
    att_err_deg: float
    eps_phi: float
    psi_ratio: float
    nis: float
    nis_dof: int
    n_excluded: int
    alarm: bool
    reset: bool
    reseed: bool
    zupt: bool


REPORT_COLUMNS = tuple(f.name for f in fields(EpochReport))


@dataclass
class RunResult:
    reports: list[EpochReport]
    summary: dict
    final: DualFilter | None = None


# ---------------------------------------------------------------------------
# receiver-side channel acceptance


def accepted_satellites(sc: Scenario, cfg: RunConfig) -> NDArray:
    """Boolean mask of satellites passing elevation, C/N0 and lock tests."""
    con = sc.constellation
    cn0, lock = con.tracking()
    el = np.asarray(con.elevation, float)
    c = cfg.cdgnss
    return (el >= c.elevation_mask_deg) & (cn0 >= c.cn0_threshold_dbhz) & (lock >= c.phase_lock_threshold)


def prepare_epoch(epoch: DdEpoch | None, sc: Scenario, cfg: RunConfig, sat_ok: NDArray) -> DdEpoch | None:
    """Apply channel acceptance and attach the configured noise covariance."""
    if epoch is None:
        return None
    names = sc.constellation.signals
    wanted = cfg.features.signals
    b1, b2 = epoch.sats.baselines

    def keep(ch):
        k = sat_ok[ch.sat] & sat_ok[ch.pivot]
        if wanted is not None:
            k &= np.isin(np.asarray(names)[ch.signal], wanted)
        return k

    k1, k2 = keep(b1), keep(b2)
    if not cfg.features.multi_antenna:
        k2 = np.zeros(len(b2), bool)
    ep = epoch.select_channels(k1, k2)
    if ep.sats.n_ambiguities == 0:
        return ep
    cov = dd_noise_covariance(ep.sats, cfg.noise_params())
    return DdEpoch(ep.t, ep.z, ep.sats, cov)


# ---------------------------------------------------------------------------
# run


def _errors(x: NavState, truth: Truth, k: int, geom: AntennaGeometry) -> tuple[float, float, float, float]:
    """3D/horizontal/vertical primary-antenna error and attitude error (deg)."""
    p_est = x.r_w + x.R_wb @ geom.lever_primary
    p_true = truth.r[k] + truth.R[k] @ geom.lever_primary
    d = p_est - p_true
    att = np.linalg.norm(log_map(truth.R[k].T @ x.R_wb))
    return float(np.linalg.norm(d)), float(np.hypot(d[0], d[1])), float(abs(d[2])), float(np.degrees(att))


def initial_belief(sc: Scenario, truth: Truth, imu: ImuStream, rng: np.random.Generator) -> Belief:
    sigma = initial_belief_sigma(sc)
    x_true = truth.state(0, imu.b_a[0], imu.b_g[0])
    return Belief(perturb(x_true, sigma, rng), np.diag(sigma**2))


def _check(belief: Belief, t: float) -> None:
    if not (np.all(np.isfinite(belief.cov)) and belief.mean.is_valid(1e-6)):
        raise NumericalFailure(f"non-finite filter state at t={t:.3f}")


def simulate(
    sc: Scenario,
    cfg: RunConfig | None = None,
    seed: int | None = None,
    geom: AntennaGeometry | None = None,
) -> tuple[Truth, ImuStream, list[DdEpoch | None]]:
    """Truth, IMU stream and DD epochs exactly as :func:`run_filter` sees them."""
    cfg = cfg or RunConfig()
    geom = geom or AntennaGeometry()
    vdc = cfg.integrity_params().vdc
    ss_imu, ss_dd, _ = np.random.SeedSequence(sc.seed if seed is None else seed).spawn(3)
    truth = synth_truth(sc, geom, vdc.r_b_v, vdc.R_vb)
    imu_p = cfg.imu_params(dt=1.0 / sc.imu_rate)
    truth_imu_p = imu_p if sc.grade == cfg.imu.grade else type(imu_p).preset(sc.grade, dt=imu_p.dt)
    return truth, synth_imu(truth, truth_imu_p, ss_imu), synth_dd(truth, sc, ss_dd, geom)


def run_filter(
    sc: Scenario,
    cfg: RunConfig | None = None,
    seed: int | None = None,
    geom: AntennaGeometry | None = None,
    progress=None,
) -> RunResult:
    """Simulate ``sc`` and run the dual filter over it.

    The seed (default ``sc.seed``) drives three independent substreams for
    the IMU errors, the GNSS noise and the initial estimate.
    """
    cfg = cfg or RunConfig()
    geom = geom or AntennaGeometry()
    params = cfg.integrity_params()
    ss_init = np.random.SeedSequence(sc.seed if seed is None else seed).spawn(3)[2]
    truth, imu, epochs = simulate(sc, cfg, seed, geom)
    imu_p = cfg.imu_params(dt=1.0 / sc.imu_rate)
    sat_ok = accepted_satellites(sc, cfg)

    Q = process_noise(imu_p)
    w = UtWeights.make(N_X + N_V)
    df = DualFilter.start(initial_belief(sc, truth, imu, np.random.default_rng(ss_init)), params.window)
    stat = StationarityState(params.vdc.n_zupt)
    step = sc.imu_per_epoch
    dt_epoch = step / sc.imu_rate
    reports: list[EpochReport] = []
    n = len(truth)
    try:
        for k in range(n):
            if k > 0:
                zupt_detect(stat, imu.f[k] - imu.f[k - 1], imu.w[k] - imu.w[k - 1], params.vdc)
            if k % step == 0:
                x = df.primary.mean
                w_b = body_rate(x.R_wb, imu.w[k], x.b_g, np.zeros(3), imu_p)
                ctx = EpochContext(w_b, stat.stationary, dt_epoch if k else 0.0)
                ep = prepare_epoch(epochs[k // step], sc, cfg, sat_ok)
                df, res = step_epoch(df, ep, ctx, params)
                _check(df.primary, truth.t[k])
                out = res.outcome
                e3, eh, ev, ea = _errors(df.primary.mean, truth, k, geom)
                reports.append(EpochReport(
                    float(truth.t[k]), res.status, res.n_channels, e3, eh, ev, ea,
                    float(out.eps_phi) if out is not None and out.fixed else math.nan,
                    df.window.ratio, float(res.nis), int(res.nis_dof), len(res.excluded),
                    res.alarm, res.reset, res.reseed, res.zupt,
                ))
                if progress is not None:
                    progress(reports[-1])
            if k == n - 1:
                break
            u = imu.sample(k)
            shared = df.float_only is df.primary
            df.primary = ukf_propagate_fast(df.primary, u, imu_p, Q=Q, w=w)
            df.float_only = df.primary if shared else ukf_propagate_fast(df.float_only, u, imu_p, Q=Q, w=w)
    except (np.linalg.LinAlgError, DegenerateCovarianceError, FloatingPointError) as exc:
        raise NumericalFailure(str(exc)) from exc
    return RunResult(reports, summarize(reports), df)


# ---------------------------------------------------------------------------
# summaries and output


def _p95(x: NDArray) -> float:
    return float(np.percentile(x, 95)) if len(x) else math.nan


def _rms(x: NDArray) -> float:
    return float(np.sqrt(np.mean(np.square(x)))) if len(x) else math.nan


def summarize(reports: list[EpochReport]) -> dict:
    """Availability, false-fix rate and error statistics over all epochs.

    ``P_V`` is the fraction of epochs with a validated fix.  ``P_f`` is the
    fraction of fixed epochs whose 3D error exceeds 30 cm.
    """
    if not reports:
        return {"epochs": 0}
    e3 = np.array([r.pos_err for r in reports])
    eh = np.array([r.horiz_err for r in reports])
    ev = np.array([r.vert_err for r in reports])
    ea = np.array([r.att_err_deg for r in reports])
    fixed = np.array([r.status == "fixed" for r in reports])
    nis = np.array([r.nis for r in reports if r.nis_dof > 0])
    dof = np.array([r.nis_dof for r in reports if r.nis_dof > 0])
    return {
        "epochs": len(reports),
        "P_V": float(fixed.mean()),
        "P_f": float(np.mean(e3[fixed] > FALSE_FIX_DISTANCE)) if fixed.any() else 0.0,
        "d95_3d": _p95(e3),
        "rmse_3d": _rms(e3),
        "d95_h": _p95(eh),
        "rmse_h": _rms(eh),
        "d95_v": _p95(ev),
        "rmse_v": _rms(ev),
        "att_rms_deg": _rms(ea),
        "att_95_deg": _p95(ea),
        "nis_per_dof": float(nis.sum() / dof.sum()) if dof.sum() else math.nan,
        "alarms": int(sum(r.alarm for r in reports)),
        "resets": int(sum(r.reset for r in reports)),
        "reseeds": int(sum(r.reseed for r in reports)),
        "zupt_events": int(sum(r.zupt for r in reports)),
        "empty_epochs": int(sum(r.status == "empty" for r in reports)),
    }


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.9g}"
    return str(v)


def write_reports(path: str | Path, reports: list[EpochReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow([_fmt(v) for v in astuple(r)])


def ablate(sc: Scenario, cfg: RunConfig, flags, seed: int | None = None) -> list[tuple[str, dict]]:
    """Baseline summary followed by one summary per ablation flag."""
    rows = [("baseline", run_filter(sc, cfg, seed).summary)]
    for flag in flags:
        rows.append((flag, run_filter(sc, cfg.with_flags([flag]), seed).summary))
    return rows


def write_summary_table(path: str | Path, rows: list[tuple[str, dict]]) -> None:
    keys = list(rows[0][1])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["configuration", *keys])
        for name, summ in rows:
            w.writerow([name, *(_fmt(summ.get(k, math.nan)) for k in keys)])
