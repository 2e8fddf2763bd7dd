"""Inertial measurement model, discrete dynamics and UKF time update.

The IMU (``u`` frame) measures

    f_u = R_ub R_bw (a_w - g_w) + b_a + v_a
    w_u = omega_u + R_ub R_bw omega_earth_w + b_g + v_g

and the biases follow first-order Gauss-Markov (Ornstein-Uhlenbeck)
processes.  Dynamics are discretized with a zero-order hold on the IMU
sample.  The process-noise vector is ``v = [v_a, v_g, v_a2, v_g2]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .manifold import (
    BA,
    BG,
    Belief,
    NavState,
    N_X,
    chol_lower,
    log_map,
    oplus,
    oplus_batch,
    orthonormalize,
    symmetrize,
    so3_exp,
)
from .unscented import UtWeights, cross_cov, sigma_deltas

N_V = 12
GRAVITY = 9.80665
EARTH_RATE = 7.292115e-5  # rad/s
MICRO_G = 1e-6 * GRAVITY
MILLI_G = 1e-3 * GRAVITY
DEG = np.pi / 180.0
DEG_PER_HR = DEG / 3600.0


@dataclass(frozen=True)
class ImuSample:
    t: float
    f_u: NDArray
    w_u: NDArray

    def __post_init__(self):
        object.__setattr__(self, "f_u", np.asarray(self.f_u, float).reshape(3))
        object.__setattr__(self, "w_u", np.asarray(self.w_u, float).reshape(3))


def earth_rate_enu(latitude_deg: float) -> NDArray:
    lat = np.radians(latitude_deg)
    return EARTH_RATE * np.array([0.0, np.cos(lat), np.sin(lat)])


@dataclass(frozen=True)
class ImuParams:
    """Sensor error model in SI units.

    Parameters
    ----------
    S_a : accelerometer white-noise density, m/s^2/sqrt(Hz).
    S_g : gyro white-noise density, rad/s/sqrt(Hz).
    sigma_ba, sigma_bg : steady-state bias standard deviations.
    tau_a, tau_g : bias time constants (s).
    dt : sample period (s).
    ou_form : ``"exact"`` drives the biases with variance
        ``sigma_b^2 (1 - exp(-2 dt / tau))`` so the stationary variance is
        exactly ``sigma_b^2``; ``"first_order"`` uses
        ``sigma_b^2 (1 - exp(-dt / tau))``, which settles near half of it.
    """

    S_a: float = 100 * MICRO_G
    S_g: float = 0.01 * DEG
    sigma_ba: float = 0.5 * MILLI_G
    sigma_bg: float = 8 * DEG_PER_HR
    tau_a: float = 100.0
    tau_g: float = 100.0
    dt: float = 1.0 / 200.0
    R_ub: NDArray = field(default_factory=lambda: np.eye(3))
    g_w: NDArray = field(default_factory=lambda: np.array([0.0, 0.0, -GRAVITY]))
    omega_earth_w: NDArray = field(default_factory=lambda: earth_rate_enu(30.0))
    ou_form: str = "exact"

    def __post_init__(self):
        for name in ("R_ub", "g_w", "omega_earth_w"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), float))
        if self.tau_a <= 0 or self.tau_g <= 0 or self.dt <= 0:
            raise ValueError("time constants and sample period must be positive")
        if min(self.S_a, self.S_g, self.sigma_ba, self.sigma_bg) < 0:
            raise ValueError("noise parameters must be nonnegative")
        if self.ou_form not in ("exact", "first_order"):
            raise ValueError(f"unknown ou_form {self.ou_form!r}")

    @classmethod
    def preset(cls, grade: str, **overrides) -> ImuParams:
        """``"industrial"`` or ``"consumer"`` grade defaults."""
        table = {
            "industrial": dict(S_a=100 * MICRO_G, sigma_ba=0.5 * MILLI_G,
                               S_g=0.01 * DEG, sigma_bg=8 * DEG_PER_HR),
            "consumer": dict(S_a=300 * MICRO_G, sigma_ba=10 * MILLI_G,
                             S_g=0.05 * DEG, sigma_bg=30 * DEG_PER_HR),
        }
        if grade not in table:
            raise ValueError(f"unknown IMU grade {grade!r}")
        return cls(**{**table[grade], **overrides})

    @property
    def phi_a(self) -> float:
        return float(np.exp(-self.dt / self.tau_a))

    @property
    def phi_g(self) -> float:
        return float(np.exp(-self.dt / self.tau_g))


def _ou_drive_var(sigma_b: float, dt: float, tau: float, form: str) -> float:
    k = 2.0 if form == "exact" else 1.0
    return sigma_b**2 * -np.expm1(-k * dt / tau)


def process_noise(params: ImuParams) -> NDArray:
    """Diagonal 12x12 discrete process-noise covariance ``Q``."""
    sva = params.S_a / np.sqrt(params.dt)
    svg = params.S_g / np.sqrt(params.dt)
    va2 = _ou_drive_var(params.sigma_ba, params.dt, params.tau_a, params.ou_form)
    vg2 = _ou_drive_var(params.sigma_bg, params.dt, params.tau_g, params.ou_form)
    return np.diag(np.repeat([sva**2, svg**2, va2, vg2], 3))


def body_rate(R_wb: NDArray, w_u: NDArray, b_g: NDArray, v_g: NDArray, params: ImuParams) -> NDArray:
    """Bias- and earth-rate-corrected angular rate in the body frame (batched)."""
    R_bu = params.R_ub.T
    earth_b = np.einsum("...ji,j->...i", R_wb, params.omega_earth_w)
    w = w_u - earth_b @ params.R_ub.T - b_g - v_g
    return w @ R_bu.T


def dynamics(batch, u: ImuSample, v: NDArray, params: ImuParams, dt: float | None = None):
    """Propagate a batch ``(r, v, R, ba, bg)`` one IMU step.

    ``v`` holds process-noise rows (M, 12) or a single 12-vector.
    """
    dt = params.dt if dt is None else dt
    r, vel, R, ba, bg = batch
    v = np.broadcast_to(np.asarray(v, float), (r.shape[0], N_V))
    R_bu = params.R_ub.T
    f_b = (u.f_u - ba - v[:, 0:3]) @ R_bu.T
    a_w = np.einsum("mij,mj->mi", R, f_b) + params.g_w
    w_b = body_rate(R, u.w_u, bg, v[:, 3:6], params)
    phi_a = np.exp(-dt / params.tau_a)
    phi_g = np.exp(-dt / params.tau_g)
    return (
        r + vel * dt + 0.5 * a_w * dt * dt,
        vel + a_w * dt,
        R @ so3_exp(w_b * dt),
        phi_a * ba + v[:, 6:9],
        phi_g * bg + v[:, 9:12],
    )


def propagate_state(x: NavState, u: ImuSample, params: ImuParams, dt: float | None = None) -> NavState:
    """Noise-free propagation of a single state."""
    b = dynamics(
        (x.r_w[None], x.v_w[None], x.R_wb[None], x.b_a[None], x.b_g[None]),
        u, np.zeros(N_V), params, dt,
    )
    return NavState(b[0][0], b[1][0], b[2][0], b[3][0], b[4][0])


def _tangent_offsets(batch, ref_index: int = 0) -> NDArray:
    r, v, R, ba, bg = batch
    out = np.empty((r.shape[0], N_X))
    out[:, 0:3] = r - r[ref_index]
    out[:, 3:6] = v - v[ref_index]
    out[:, 6:9] = log_map(R[ref_index].T @ R)
    out[:, BA] = ba - ba[ref_index]
    out[:, BG] = bg - bg[ref_index]
    return out


def ukf_propagate(
    posterior: Belief,
    u: ImuSample,
    params: ImuParams,
    Q: NDArray | None = None,
    dt: float | None = None,
    w: UtWeights | None = None,
) -> Belief:
    """Unscented time update over the augmented (state, process noise) space.

    Sigma-point offsets are taken relative to the propagated central point,
    which keeps the large negative central weight from cancelling digits.
    """
    Q = process_noise(params) if Q is None else Q
    n = N_X + N_V
    w = w or UtWeights.make(n)
    S = np.zeros((n, n))
    S[:N_X, :N_X] = chol_lower(posterior.cov)
    S[N_X:, N_X:] = np.diag(np.sqrt(np.diag(Q)))
    D = sigma_deltas(S, w)
    pts = oplus_batch(posterior.mean, D[:, :N_X])
    out = dynamics(pts, u, D[:, N_X:], params, dt)
    d = _tangent_offsets(out)
    m = w.wi * d[1:].sum(axis=0)
    center = NavState(out[0][0], out[1][0], out[2][0], out[3][0], out[4][0])
    mean = oplus(center, m)
    dc = d - m
    P = symmetrize(cross_cov(dc, dc, w))
    R = mean.R_wb
    if np.linalg.norm(R @ R.T - np.eye(3)) > 1e-9:
        mean = mean.replace(R_wb=orthonormalize(R))
    return Belief(mean, P)


def stationary_sample(R_wb: NDArray, params: ImuParams, t: float = 0.0) -> ImuSample:
    """Error-free IMU output for a vehicle at rest with attitude ``R_wb``."""
    R_bw = R_wb.T
    return ImuSample(
        t,
        -params.R_ub @ R_bw @ params.g_w,
        params.R_ub @ R_bw @ params.omega_earth_w,
    )


def imu_output(
    R_wb: ArrayLike,
    a_w: ArrayLike,
    w_b: ArrayLike,
    b_a: ArrayLike,
    b_g: ArrayLike,
    params: ImuParams,
) -> tuple[NDArray, NDArray]:
    """Noise-free measurement model (batched over leading axis)."""
    R_wb = np.asarray(R_wb, float)
    R_bw = np.swapaxes(R_wb, -1, -2)
    f = np.einsum("...ij,...j->...i", R_bw, np.asarray(a_w) - params.g_w) @ params.R_ub.T
    earth_b = np.einsum("...ij,j->...i", R_bw, params.omega_earth_w)
    w = (np.asarray(w_b) + earth_b) @ params.R_ub.T
    return f + b_a, w + b_g


# ---------------------------------------------------------------------------
# Compiled time update.  Same arithmetic as ``ukf_propagate`` with the
# per-sigma-point work in a single loop; ``ukf_propagate`` is its reference.

import numba  # noqa: E402


@numba.njit(cache=True, inline="always")
def _euler312(a, b, c, out):
    cphi, sphi = np.cos(a), np.sin(a)
    cth, sth = np.cos(b), np.sin(b)
    cpsi, spsi = np.cos(c), np.sin(c)
    out[0, 0] = cpsi * cth - sphi * spsi * sth
    out[0, 1] = cth * spsi + cpsi * sphi * sth
    out[0, 2] = -cphi * sth
    out[1, 0] = -cphi * spsi
    out[1, 1] = cphi * cpsi
    out[1, 2] = sphi
    out[2, 0] = cpsi * sth + cth * sphi * spsi
    out[2, 1] = spsi * sth - cpsi * cth * sphi
    out[2, 2] = cphi * cth


@numba.njit(cache=True, inline="always")
def _rodrigues(wx, wy, wz, out):
    ang2 = wx * wx + wy * wy + wz * wz
    ang = np.sqrt(ang2)
    if ang < 1e-8:
        a = 1.0 - ang2 / 6.0
        b = 0.5 - ang2 / 24.0
    else:
        a = np.sin(ang) / ang
        b = (1.0 - np.cos(ang)) / ang2
    # I + a K + b K^2 with K = skew(w); K^2 = w w^T - |w|^2 I
    out[0, 0] = 1.0 + b * (wx * wx - ang2)
    out[1, 1] = 1.0 + b * (wy * wy - ang2)
    out[2, 2] = 1.0 + b * (wz * wz - ang2)
    out[0, 1] = -a * wz + b * wx * wy
    out[1, 0] = a * wz + b * wx * wy
    out[0, 2] = a * wy + b * wx * wz
    out[2, 0] = -a * wy + b * wx * wz
    out[1, 2] = -a * wx + b * wy * wz
    out[2, 1] = a * wx + b * wy * wz


@numba.njit(cache=True, inline="always")
def _mm3(A, B, out):
    for i in range(3):
        for j in range(3):
            out[i, j] = A[i, 0] * B[0, j] + A[i, 1] * B[1, j] + A[i, 2] * B[2, j]


@numba.njit(cache=True, inline="always")
def _mv3(A, x, out):
    for i in range(3):
        out[i] = A[i, 0] * x[0] + A[i, 1] * x[1] + A[i, 2] * x[2]


@numba.njit(cache=True, inline="always")
def _mtv3(A, x, out):
    for i in range(3):
        out[i] = A[0, i] * x[0] + A[1, i] * x[1] + A[2, i] * x[2]


@numba.njit(cache=True, nogil=True)
def _propagate_kernel(r, v, R, ba, bg, S, scale, wi, wc0, f_u, w_u, R_ub, g_w, om_w, dt, tau_a, tau_g):
    n = S.shape[0]
    M = 2 * n + 1
    nx = 15
    phi_a = np.exp(-dt / tau_a)
    phi_g = np.exp(-dt / tau_g)
    out_r = np.empty((M, 3))
    out_v = np.empty((M, 3))
    out_R = np.empty((M, 3, 3))
    out_ba = np.empty((M, 3))
    out_bg = np.empty((M, 3))
    d = np.zeros(n)
    E = np.empty((3, 3))
    Ex = np.empty((3, 3))
    Rk = np.empty((3, 3))
    t3 = np.empty(3)
    f_b = np.empty(3)
    a_w = np.empty(3)
    e_b = np.empty(3)
    e_u = np.empty(3)
    w_b = np.empty(3)
    for k in range(M):
        if k == 0:
            for i in range(n):
                d[i] = 0.0
        elif k <= n:
            for i in range(n):
                d[i] = scale * S[i, k - 1]
        else:
            for i in range(n):
                d[i] = -scale * S[i, k - n - 1]
        _euler312(d[6], d[7], d[8], E)
        _mm3(R, E, Rk)
        # specific force to world acceleration
        for i in range(3):
            t3[i] = f_u[i] - (ba[i] + d[9 + i]) - d[15 + i]
        _mtv3(R_ub, t3, f_b)
        _mv3(Rk, f_b, a_w)
        for i in range(3):
            a_w[i] += g_w[i]
        # body rate with earth rate and gyro bias removed
        _mtv3(Rk, om_w, e_b)
        _mv3(R_ub, e_b, e_u)
        for i in range(3):
            t3[i] = w_u[i] - e_u[i] - (bg[i] + d[12 + i]) - d[18 + i]
        _mtv3(R_ub, t3, w_b)
        for i in range(3):
            vk = v[i] + d[3 + i]
            out_r[k, i] = r[i] + d[i] + vk * dt + 0.5 * a_w[i] * dt * dt
            out_v[k, i] = vk + a_w[i] * dt
            out_ba[k, i] = phi_a * (ba[i] + d[9 + i]) + d[21 + i]
            out_bg[k, i] = phi_g * (bg[i] + d[12 + i]) + d[24 + i]
        _rodrigues(w_b[0] * dt, w_b[1] * dt, w_b[2] * dt, Ex)
        _mm3(Rk, Ex, out_R[k])
    D = np.empty((M, nx))
    Rr = np.empty((3, 3))
    R0t = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            R0t[i, j] = out_R[0, j, i]
    for k in range(M):
        for i in range(3):
            D[k, i] = out_r[k, i] - out_r[0, i]
            D[k, 3 + i] = out_v[k, i] - out_v[0, i]
            D[k, 9 + i] = out_ba[k, i] - out_ba[0, i]
            D[k, 12 + i] = out_bg[k, i] - out_bg[0, i]
        _mm3(R0t, out_R[k], Rr)
        D[k, 6] = np.arcsin(Rr[1, 2])
        D[k, 7] = np.arctan2(-Rr[0, 2], Rr[2, 2])
        D[k, 8] = np.arctan2(-Rr[1, 0], Rr[1, 1])
    m = np.zeros(nx)
    for k in range(1, M):
        for i in range(nx):
            m[i] += D[k, i]
    for i in range(nx):
        m[i] *= wi
    for k in range(M):
        for i in range(nx):
            D[k, i] -= m[i]
    P = np.empty((nx, nx))
    for i in range(nx):
        for j in range(i, nx):
            acc = 0.0
            for k in range(1, M):
                acc += D[k, i] * D[k, j]
            val = wi * acc + wc0 * D[0, i] * D[0, j]
            P[i, j] = val
            P[j, i] = val
    return out_r[0].copy(), out_v[0].copy(), out_R[0].copy(), out_ba[0].copy(), out_bg[0].copy(), m, P


def ukf_propagate_fast(
    posterior: Belief,
    u: ImuSample,
    params: ImuParams,
    Q: NDArray | None = None,
    dt: float | None = None,
    w: UtWeights | None = None,
) -> Belief:
    """Compiled equivalent of :func:`ukf_propagate`."""
    Q = process_noise(params) if Q is None else Q
    n = N_X + N_V
    w = w or UtWeights.make(n)
    S = np.zeros((n, n))
    S[:N_X, :N_X] = chol_lower(posterior.cov)
    S[N_X:, N_X:] = np.diag(np.sqrt(np.diag(Q)))
    x = posterior.mean
    r, v, R, ba, bg, m, P = _propagate_kernel(
        x.r_w, x.v_w, x.R_wb, x.b_a, x.b_g, S, w.scale, w.wi, w.wc0,
        u.f_u, u.w_u, params.R_ub, params.g_w, params.omega_earth_w,
        params.dt if dt is None else dt, params.tau_a, params.tau_g,
    )
    mean = oplus(NavState(r, v, R, ba, bg), m)
    Rm = mean.R_wb
    if np.linalg.norm(Rm @ Rm.T - np.eye(3)) > 1e-9:
        mean = mean.replace(R_wb=orthonormalize(Rm))
    return Belief(mean, symmetrize(P))
