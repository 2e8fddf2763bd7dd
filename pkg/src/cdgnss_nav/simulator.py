"""Seeded synthesis of truth, IMU streams and DD observables.

Truth is produced with the same zero-order-hold discretization the filter
uses, so a noise-free IMU stream propagated by :func:`ins.dynamics`
reproduces it exactly.  The vehicle frame follows a planar non-holonomic
path (speed and yaw-rate segments); a small 50 Hz vibration is added while
moving so the stationarity detector has something to see.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .cdgnss import (
    L1_WAVELENGTH,
    L2_WAVELENGTH,
    AntennaGeometry,
    DdEpoch,
    NoiseModelParams,
    SatelliteSet,
    baseline_function,
    dd_noise_covariance,
    dd_predict,
    measurement_layout,
)
from .ins import ImuParams, ImuSample, imu_output
from .manifold import NavState, oplus, so3_exp
from .vdc import DEFAULT_R_VB


SIGNAL_WAVELENGTHS = {"L1": L1_WAVELENGTH, "L2": L2_WAVELENGTH, "E1": L1_WAVELENGTH}


def unit_los(az_deg, el_deg) -> NDArray:
    """ENU unit vectors toward satellites at azimuth/elevation (deg)."""
    az, el = np.radians(az_deg), np.radians(el_deg)
    return np.stack([np.cos(el) * np.sin(az), np.cos(el) * np.cos(az), np.sin(el)], -1)


@dataclass(frozen=True)
class Constellation:
    """Static snapshot of satellite directions (deg).

    ``cn0_dbhz`` and ``phase_lock`` are simulated per-satellite tracking
    quality figures used by the receiver-side channel acceptance tests.
    """

    azimuth: tuple[float, ...] = (0, 36, 72, 108, 144, 180, 216, 252, 288, 324)
    elevation: tuple[float, ...] = (80, 25, 45, 60, 20, 35, 70, 30, 50, 40)
    mask_deg: float = 15.0
    signals: tuple[str, ...] = ("L1",)
    cn0_dbhz: tuple[float, ...] | None = None
    phase_lock: tuple[float, ...] | None = None

    def __post_init__(self):
        n = len(self.azimuth)
        if len(self.elevation) != n:
            raise ValueError("azimuth and elevation lists differ in length")
        for name in ("cn0_dbhz", "phase_lock"):
            v = getattr(self, name)
            if v is not None and len(v) != n:
                raise ValueError(f"{name} must have one entry per satellite")
        unknown = set(self.signals) - set(SIGNAL_WAVELENGTHS)
        if unknown or not self.signals:
            raise ValueError(f"unknown or empty signal list {sorted(unknown)}")

    @property
    def wavelengths(self) -> tuple[float, ...]:
        return tuple(SIGNAL_WAVELENGTHS[s] for s in self.signals)

    def tracking(self) -> tuple[NDArray, NDArray]:
        """(C/N0 dB-Hz, phase lock statistic) per satellite; strong by default."""
        n = len(self.azimuth)
        cn0 = np.full(n, 45.0) if self.cn0_dbhz is None else np.asarray(self.cn0_dbhz, float)
        lock = np.ones(n) if self.phase_lock is None else np.asarray(self.phase_lock, float)
        return cn0, lock

    @classmethod
    def monte_carlo_default(cls) -> Constellation:
        """Eight satellites at azimuths 0, 45, ..., 315 deg."""
        return cls(
            azimuth=tuple(float(a) for a in range(0, 360, 45)),
            elevation=(75.0, 20.0, 40.0, 55.0, 15.0, 30.0, 65.0, 45.0),
        )

    def satellites(self, baselines: tuple[bool, bool] = (True, True)) -> SatelliteSet:
        el = np.asarray(self.elevation, float)
        visible = el >= self.mask_deg
        return SatelliteSet.from_constellation(
            unit_los(self.azimuth, el), np.radians(el), self.wavelengths, visible, baselines
        )


@dataclass(frozen=True)
class Segment:
    """Constant longitudinal acceleration and yaw rate for ``duration`` s."""

    duration: float
    accel: float = 0.0
    yaw_rate: float = 0.0


@dataclass(frozen=True)
class Fault:
    """Additive DD fault active on ``t_start <= t < t_end``.

    kind ``"pseudorange"`` adds ``value`` metres to the pseudorange channels
    of satellite ``sat``.  kind ``"phase"`` adds ``value`` metres to phase
    channels of ``sat``, or adds ``G @ shift`` (a consistent position shift)
    when ``shift`` is given.  kind ``"outage"`` drops the epochs.
    """

    kind: str
    t_start: float
    t_end: float
    sat: int | None = None
    value: float = 0.0
    baseline: int | None = None
    shift: tuple[float, float, float] | None = None

    def __post_init__(self):
        if self.kind not in ("pseudorange", "phase", "outage"):
            raise ValueError(f"unknown fault kind {self.kind!r}")
        if self.t_end <= self.t_start:
            raise ValueError("fault must have positive duration")

    def active(self, t: float) -> bool:
        return self.t_start <= t < self.t_end


@dataclass(frozen=True)
class Scenario:
    name: str = "urban"
    segments: tuple[Segment, ...] = ()
    imu_rate: float = 200.0
    gnss_rate: float = 5.0
    grade: str = "industrial"
    constellation: Constellation = field(default_factory=Constellation)
    noise: NoiseModelParams = field(default_factory=NoiseModelParams)
    faults: tuple[Fault, ...] = ()
    start_heading_deg: float = 30.0
    start_position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    vibration_accel: float = 1.0
    vibration_gyro: float = 0.02
    init_sigma: tuple[float, float, float, float] = (0.02, 0.02, 0.5, 1.0)
    seed: int = 0

    def __post_init__(self):
        if self.imu_rate <= 0 or self.gnss_rate <= 0:
            raise ValueError("rates must be positive")
        ratio = self.imu_rate / self.gnss_rate
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("IMU rate must be an integer multiple of the GNSS rate")

    @property
    def duration(self) -> float:
        return float(sum(s.duration for s in self.segments))

    @property
    def imu_per_epoch(self) -> int:
        return int(round(self.imu_rate / self.gnss_rate))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> Scenario:
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scenario keys {sorted(unknown)}")
        if "segments" in d:
            d["segments"] = tuple(Segment(**s) for s in d["segments"])
        if "faults" in d:
            d["faults"] = tuple(
                Fault(**{**f, "shift": tuple(f["shift"]) if f.get("shift") is not None else None})
                for f in d["faults"]
            )
        if "constellation" in d:
            c = {k: tuple(v) if isinstance(v, list) else v for k, v in d["constellation"].items()}
            unknown = set(c) - set(Constellation.__dataclass_fields__)
            if unknown:
                raise ValueError(f"unknown constellation keys {sorted(unknown)}")
            d["constellation"] = Constellation(**c)
        if "noise" in d:
            d["noise"] = NoiseModelParams(**d["noise"])
        for key in ("start_position", "init_sigma"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> Scenario:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def urban_drive(duration: float = 600.0, seed: int = 0, **kw) -> Scenario:
    """Stop-and-go drive with right-angle turns, repeated to fill ``duration``."""
    block = [
        Segment(10.0),  # parked
        Segment(5.0, accel=2.0),  # to 10 m/s
        Segment(20.0),
        Segment(8.0, yaw_rate=np.pi / 16),  # 90 deg left turn
        Segment(15.0),
        Segment(5.0, accel=-2.0),  # stop
        Segment(8.0),
        Segment(5.0, accel=1.6),  # to 8 m/s
        Segment(6.0, yaw_rate=-np.pi / 12),  # 90 deg right turn
        Segment(14.0),
        Segment(4.0, accel=-2.0),
    ]
    segs: list[Segment] = []
    t = 0.0
    while t < duration - 1e-9:
        for s in block:
            d = min(s.duration, duration - t)
            if d <= 1e-9:
                break
            segs.append(Segment(d, s.accel, s.yaw_rate))
            t += d
    return Scenario(name="urban", segments=tuple(segs), seed=seed, **kw)


def static_scenario(duration: float = 60.0, seed: int = 0, **kw) -> Scenario:
    return Scenario(name="static", segments=(Segment(duration),), seed=seed, **kw)


# ---------------------------------------------------------------------------
# Truth


@dataclass(frozen=True)
class Truth:
    """Truth at IMU rate plus the error-free IMU inputs that generate it."""

    t: NDArray
    r: NDArray
    v: NDArray
    R: NDArray
    a_w: NDArray  # world acceleration held over each step
    w_b: NDArray  # body rate held over each step
    moving: NDArray

    def __len__(self) -> int:
        return len(self.t)

    def state(self, k: int, b_a=None, b_g=None) -> NavState:
        return NavState(
            self.r[k], self.v[k], self.R[k],
            np.zeros(3) if b_a is None else b_a, np.zeros(3) if b_g is None else b_g,
        )


def _heading_rotation(h: float) -> NDArray:
    c, s = np.cos(h), np.sin(h)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def synth_truth(
    sc: Scenario, geom: AntennaGeometry | None = None, r_b_v=None, R_vb=None
) -> Truth:
    """Integrate the segment profile with the filter's discretization.

    The vehicle-frame origin moves along its own x axis, so the non-holonomic
    constraint holds exactly apart from the vibration.
    """
    geom = geom or AntennaGeometry()
    r_b_v = np.array([0.0, 1.2, -1.3]) if r_b_v is None else np.asarray(r_b_v, float)
    R_vb = DEFAULT_R_VB if R_vb is None else np.asarray(R_vb, float)
    if not sc.segments:
        raise ValueError("scenario has no motion segments")
    dt = 1.0 / sc.imu_rate
    n = int(round(sc.duration * sc.imu_rate)) + 1
    speed = np.zeros(n)
    yaw_rate = np.zeros(n)
    k = 0
    for seg in sc.segments:
        steps = int(round(seg.duration * sc.imu_rate))
        for _ in range(steps):
            if k + 1 >= n:
                break
            speed[k + 1] = speed[k] + seg.accel * dt
            yaw_rate[k] = seg.yaw_rate
            k += 1
    if np.any(speed < -1e-9):
        raise ValueError("segment profile drives the vehicle backwards")
    speed = np.clip(speed, 0.0, None)
    moving = speed > 1e-6
    moving[:-1] |= speed[1:] > 1e-6

    # 50 Hz vibration on the four-sample cycle [1, -1, -1, 1] while moving;
    # its velocity wiggle has zero mean, so the vehicle does not drift
    cyc = np.array([1.0, -1.0, -1.0, 1.0])[np.arange(n) % 4]
    vib_a = sc.vibration_accel * cyc * moving
    vib_w = sc.vibration_gyro * cyc * moving

    R_bv = R_vb.T
    lever_vu = geom.r_b_u - r_b_v  # vehicle origin -> IMU, body frame
    R = np.empty((n, 3, 3))
    w_b = np.zeros((n, 3))
    w_b[:, 2] = yaw_rate
    w_b[:, 0] = vib_w
    R[0] = _heading_rotation(np.radians(sc.start_heading_deg)) @ R_vb
    for i in range(n - 1):
        R[i + 1] = R[i] @ so3_exp(w_b[i] * dt)
    # IMU velocity = vehicle-origin velocity + w x lever, in the world frame
    fwd_b = R_bv @ np.array([1.0, 0.0, 0.0])
    v_origin = np.einsum("nij,j->ni", R, fwd_b) * speed[:, None]
    v = v_origin + np.einsum("nij,nj->ni", R, np.cross(w_b, lever_vu))
    a = np.zeros((n, 3))
    a[:-1] = np.diff(v, axis=0) / dt
    # vibration displaces the IMU body-x axis; it integrates to a bounded wiggle
    a += np.einsum("nij,j->ni", R, np.array([1.0, 0.0, 0.0])) * vib_a[:, None]
    a[-1] = 0.0
    v = np.empty((n, 3))
    r = np.empty((n, 3))
    v[0] = v_origin[0] + R[0] @ np.cross(w_b[0], lever_vu)
    r[0] = np.asarray(sc.start_position, float)
    for i in range(n - 1):
        r[i + 1] = r[i] + v[i] * dt + 0.5 * a[i] * dt * dt
        v[i + 1] = v[i] + a[i] * dt
    return Truth(np.arange(n) * dt, r, v, R, a, w_b, moving)


# ---------------------------------------------------------------------------
# IMU


@dataclass(frozen=True)
class ImuStream:
    t: NDArray
    f: NDArray
    w: NDArray
    b_a: NDArray
    b_g: NDArray

    def __len__(self) -> int:
        return len(self.t)

    def sample(self, k: int) -> ImuSample:
        return ImuSample(self.t[k], self.f[k], self.w[k])


def ou_sequence(rng: np.random.Generator, n: int, sigma: float, tau: float, dt: float) -> NDArray:
    """Exact discrete OU process, stationary from the first sample, (n, 3)."""
    phi = np.exp(-dt / tau)
    q = sigma * np.sqrt(-np.expm1(-2.0 * dt / tau))
    e = rng.standard_normal((n, 3))
    out = np.empty((n, 3))
    out[0] = sigma * e[0]
    for k in range(1, n):
        out[k] = phi * out[k - 1] + q * e[k]
    return out


def synth_imu(truth: Truth, params: ImuParams, seed: int | np.random.SeedSequence,
              noise: bool = True) -> ImuStream:
    """IMU samples from the measurement model with OU biases and white noise."""
    rng = np.random.default_rng(seed)
    n = len(truth)
    dt = params.dt
    if noise:
        b_a = ou_sequence(rng, n, params.sigma_ba, params.tau_a, dt)
        b_g = ou_sequence(rng, n, params.sigma_bg, params.tau_g, dt)
        v_a = rng.standard_normal((n, 3)) * params.S_a / np.sqrt(dt)
        v_g = rng.standard_normal((n, 3)) * params.S_g / np.sqrt(dt)
    else:
        b_a = b_g = v_a = v_g = np.zeros((n, 3))
    f, w = imu_output(truth.R, truth.a_w, truth.w_b, b_a + v_a, b_g + v_g, params)
    return ImuStream(truth.t.copy(), f, w, b_a, b_g)


IMU_COLUMNS = ("t", "fx", "fy", "fz", "wx", "wy", "wz")
DD_COLUMNS = ("t", "baseline", "kind", "pivot", "sat", "signal", "wavelength", "value", "sigma")


def write_imu_csv(path: str | Path, imu: ImuStream) -> None:
    """Specific force (m/s^2) and angular rate (rad/s) per sample."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(IMU_COLUMNS)
        for t, f, g in zip(imu.t, imu.f, imu.w):
            w.writerow([repr(float(t)), *(repr(float(x)) for x in f), *(repr(float(x)) for x in g)])


def write_dd_csv(path: str | Path, epochs: list[DdEpoch | None]) -> None:
    """One row per DD observable; outage epochs are omitted.

    ``kind`` is ``rho`` (pseudorange, m) or ``phi`` (carrier phase, m) and
    ``sigma`` is the square root of the matching covariance diagonal.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DD_COLUMNS)
        for ep in epochs:
            if ep is None:
                continue
            lay = ep.index_layout()
            sd = np.sqrt(np.diag(ep.cov))
            for b, ch in enumerate(ep.sats.baselines, start=1):
                for kind in ("rho", "phi"):
                    for j, i in enumerate(lay[f"{kind}{b}"]):
                        w.writerow([repr(ep.t), b, kind, int(ch.pivot[j]), int(ch.sat[j]),
                                    int(ch.signal[j]), repr(float(ch.wavelength[j])),
                                    repr(float(ep.z[i])), repr(float(sd[i]))])


# ---------------------------------------------------------------------------
# DD observables


def synth_dd(
    truth: Truth,
    sc: Scenario,
    seed: int | np.random.SeedSequence,
    geom: AntennaGeometry | None = None,
    baselines: tuple[bool, bool] = (True, True),
    noise: bool = True,
    ambiguity_range: int = 100,
) -> list[DdEpoch | None]:
    """One entry per GNSS epoch; ``None`` marks an outage.

    Integer ambiguities are redrawn every epoch.
    """
    geom = geom or AntennaGeometry()
    rng = np.random.default_rng(seed)
    sats = sc.constellation.satellites(baselines)
    cov = dd_noise_covariance(sats, sc.noise) if sats.n_ambiguities else np.zeros((0, 0))
    L = np.linalg.cholesky(cov) if sats.n_ambiguities else cov
    lay = measurement_layout(sats)
    step = sc.imu_per_epoch
    out: list[DdEpoch | None] = []
    for k in range(0, len(truth), step):
        t = float(truth.t[k])
        n_true = rng.integers(-ambiguity_range, ambiguity_range + 1, sats.n_ambiguities)
        e = rng.standard_normal(sats.n_measurements)
        if any(f.kind == "outage" and f.active(t) for f in sc.faults):
            out.append(None)
            continue
        z = dd_predict(baseline_function(truth.state(k), geom), n_true, sats)
        if noise:
            z = z + L @ e
        z = apply_faults(z, sats, lay, sc.faults, t)
        out.append(DdEpoch(t, z, sats, cov))
    return out


def apply_faults(z, sats: SatelliteSet, lay, faults, t: float) -> NDArray:
    z = z.copy()
    for f in faults:
        if not f.active(t) or f.kind == "outage":
            continue
        for bl, ch in enumerate(sats.baselines, start=1):
            if f.baseline is not None and f.baseline != bl:
                continue
            rows = lay[("rho" if f.kind == "pseudorange" else "phi") + str(bl)]
            if f.shift is not None:
                G = sats.los[ch.pivot] - sats.los[ch.sat]
                z[rows] += G @ np.asarray(f.shift, float)
            else:
                z[rows[ch.sat == f.sat]] += f.value
    return z


def initial_belief_sigma(sc: Scenario) -> NDArray:
    """Diagonal 1-sigma of the initial belief (15 tangent coordinates)."""
    pos, vel, att_deg, bias_scale = sc.init_sigma
    p = ImuParams.preset(sc.grade)
    return np.r_[
        [pos] * 3, [vel] * 3, [np.radians(att_deg)] * 3,
        [bias_scale * p.sigma_ba] * 3, [bias_scale * p.sigma_bg] * 3,
    ]


def perturb(x: NavState, sigma: NDArray, rng: np.random.Generator) -> NavState:
    """Draw an initial estimate ``x (+) sigma * e`` around the truth."""
    return oplus(x, sigma * rng.standard_normal(len(sigma)))


def false_fix_scenario(
    seed: int = 4,
    duration: float = 150.0,
    onset: float = 50.0,
    outage: float = 3.0,
    fault_duration: float = 1.0,
    shift: tuple[float, float, float] = (0.7, 0.42, 0.0),
) -> Scenario:
    """Short GNSS outage followed by a position-consistent phase fault.

    The outage loosens the prior just enough that the faulted phases,
    which agree with a position offset by ``shift``, pass validation as a
    false fix.  The simulated noise is half the modelled standard deviation,
    as with a deliberately conservative receiver noise model.
    """
    faults = (
        Fault("outage", onset - outage, onset),
        Fault("phase", onset, onset + fault_duration, baseline=1, shift=shift),
    )
    return urban_drive(duration, seed=seed, noise=NoiseModelParams(0.75, 0.003), faults=faults)
