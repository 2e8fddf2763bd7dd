"""Composite navigation-state manifold R^3 x R^3 x SO(3) x R^3 x R^3.

Attitude increments in the tangent space are 3-1-2 Euler angle triplets
``(phi, theta, psi)``.  The chart is fixed; no quaternion alternative.
Increments act on the right: ``x (+) d`` composes ``R_wb @ Exp(d_theta)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import ArrayLike, NDArray

N_X = 15

POS = slice(0, 3)
VEL = slice(3, 6)
ATT = slice(6, 9)
BA = slice(9, 12)
BG = slice(12, 15)

# |R_23| at or beyond this is treated as gimbal lock of the 3-1-2 sequence
SINGULARITY_TOL = 1e-9


class SingularityError(ValueError):
    """Rotation sits at the 3-1-2 Euler singularity (|R_23| ~ 1)."""


class DegenerateCovarianceError(np.linalg.LinAlgError):
    """Cholesky factorization failed even after jitter."""


def skew(a: ArrayLike) -> NDArray:
    """Cross-product matrix, ``skew(a) @ b == cross(a, b)``.  Works on (..., 3)."""
    a = np.asarray(a, dtype=float)
    out = np.zeros(a.shape[:-1] + (3, 3))
    out[..., 0, 1] = -a[..., 2]
    out[..., 0, 2] = a[..., 1]
    out[..., 1, 0] = a[..., 2]
    out[..., 1, 2] = -a[..., 0]
    out[..., 2, 0] = -a[..., 1]
    out[..., 2, 1] = a[..., 0]
    return out


def exp_map(theta: ArrayLike) -> NDArray:
    """Rotation matrix for 3-1-2 Euler angles ``[phi, theta, psi]`` (rad).

    Vectorized: input shape (..., 3) gives output (..., 3, 3).
    """
    th = np.asarray(theta, dtype=float)
    cphi, sphi = np.cos(th[..., 0]), np.sin(th[..., 0])
    cth, sth = np.cos(th[..., 1]), np.sin(th[..., 1])
    cpsi, spsi = np.cos(th[..., 2]), np.sin(th[..., 2])
    R = np.empty(th.shape[:-1] + (3, 3))
    R[..., 0, 0] = cpsi * cth - sphi * spsi * sth
    R[..., 0, 1] = cth * spsi + cpsi * sphi * sth
    R[..., 0, 2] = -cphi * sth
    R[..., 1, 0] = -cphi * spsi
    R[..., 1, 1] = cphi * cpsi
    R[..., 1, 2] = sphi
    R[..., 2, 0] = cpsi * sth + cth * sphi * spsi
    R[..., 2, 1] = spsi * sth - cpsi * cth * sphi
    R[..., 2, 2] = cphi * cth
    return R


def log_map(R: ArrayLike) -> NDArray:
    """Inverse of :func:`exp_map` on its principal domain.

    Raises
    ------
    SingularityError
        If any ``|R_23| >= 1 - 1e-9``.
    """
    R = np.asarray(R, dtype=float)
    r23 = R[..., 1, 2]
    if np.any(np.abs(r23) >= 1.0 - SINGULARITY_TOL):
        raise SingularityError("3-1-2 Euler singularity: |R23| = 1")
    out = np.empty(R.shape[:-2] + (3,))
    out[..., 0] = np.arcsin(r23)
    out[..., 1] = np.arctan2(-R[..., 0, 2], R[..., 2, 2])
    out[..., 2] = np.arctan2(-R[..., 1, 0], R[..., 1, 1])
    return out


def so3_exp(rotvec: ArrayLike) -> NDArray:
    """Axis-angle exponential (Rodrigues), ``d/dt R = R skew(w)`` integrator."""
    w = np.asarray(rotvec, dtype=float)
    angle = np.linalg.norm(w, axis=-1)[..., None, None]
    K = skew(w)
    small = angle < 1e-8
    safe = np.where(small, 1.0, angle)
    a = np.where(small, 1.0 - angle**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - angle**2 / 24.0, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3) + a * K + b * (K @ K)


def rotation_angle(R: ArrayLike) -> NDArray:
    """Angle (rad) of a rotation matrix; singularity-free error metric."""
    R = np.asarray(R, dtype=float)
    c = (np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0
    return np.arccos(np.clip(c, -1.0, 1.0))


def orthonormalize(R: NDArray) -> NDArray:
    """Nearest rotation matrix via SVD."""
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


@dataclass(frozen=True)
class NavState:
    """Point on the 15-DoF composite manifold.

    Parameters
    ----------
    r_w : position of the IMU origin in the world frame (m).
    v_w : velocity in the world frame (m/s).
    R_wb : body-to-world rotation matrix.
    b_a : accelerometer bias (m/s^2).
    b_g : gyro bias (rad/s).
    """

    r_w: NDArray = field(default_factory=lambda: np.zeros(3))
    v_w: NDArray = field(default_factory=lambda: np.zeros(3))
    R_wb: NDArray = field(default_factory=lambda: np.eye(3))
    b_a: NDArray = field(default_factory=lambda: np.zeros(3))
    b_g: NDArray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("r_w", "v_w", "b_a", "b_g"):
            arr = np.array(getattr(self, name), dtype=float).reshape(3)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        R = np.array(self.R_wb, dtype=float).reshape(3, 3)
        R.setflags(write=False)
        object.__setattr__(self, "R_wb", R)

    def replace(self, **changes) -> NavState:
        return replace(self, **changes)

    def is_valid(self, tol: float = 1e-9) -> bool:
        arrays = (self.r_w, self.v_w, self.R_wb, self.b_a, self.b_g)
        if not all(np.all(np.isfinite(a)) for a in arrays):
            return False
        R = self.R_wb
        return bool(
            np.linalg.norm(R @ R.T - np.eye(3)) < tol and np.linalg.det(R) > 0
        )


@dataclass(frozen=True)
class Belief:
    """Gaussian belief: mean state plus 15x15 tangent-space covariance."""

    mean: NavState
    cov: NDArray

    def __post_init__(self):
        P = symmetrize(np.array(self.cov, dtype=float).reshape(N_X, N_X))
        P.setflags(write=False)
        object.__setattr__(self, "cov", P)

    def std(self) -> NDArray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))


def symmetrize(P: NDArray) -> NDArray:
    return 0.5 * (P + P.T)


def chol_lower(P: NDArray) -> NDArray:
    """Lower Cholesky factor with one jitter retry.

    The jitter is ``1e-12 * trace(P) / n`` on the diagonal.
    """
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        n = P.shape[0]
        jitter = 1e-12 * max(np.trace(P), 0.0) / n
        try:
            return np.linalg.cholesky(P + jitter * np.eye(n))
        except np.linalg.LinAlgError as exc:
            raise DegenerateCovarianceError(
                "covariance not positive definite after jitter"
            ) from exc


def oplus(x: NavState, delta: ArrayLike) -> NavState:
    """Retraction ``x (+) delta``."""
    d = np.asarray(delta, dtype=float).reshape(N_X)
    return NavState(
        r_w=x.r_w + d[POS],
        v_w=x.v_w + d[VEL],
        R_wb=x.R_wb @ exp_map(d[ATT]),
        b_a=x.b_a + d[BA],
        b_g=x.b_g + d[BG],
    )


def ominus(x1: NavState, x2: NavState) -> NDArray:
    """Tangent vector ``x1 (-) x2`` at ``x2``; inverse of :func:`oplus`."""
    out = np.empty(N_X)
    out[POS] = x1.r_w - x2.r_w
    out[VEL] = x1.v_w - x2.v_w
    out[ATT] = log_map(x2.R_wb.T @ x1.R_wb)
    out[BA] = x1.b_a - x2.b_a
    out[BG] = x1.b_g - x2.b_g
    return out


# ---------------------------------------------------------------------------
# Batched representation used by the sigma-point code.  A batch is a tuple
# (r, v, R, ba, bg) with leading dimension M.


def to_batch(x: NavState, m: int = 1):
    return (
        np.repeat(x.r_w[None], m, axis=0),
        np.repeat(x.v_w[None], m, axis=0),
        np.repeat(x.R_wb[None], m, axis=0),
        np.repeat(x.b_a[None], m, axis=0),
        np.repeat(x.b_g[None], m, axis=0),
    )


def oplus_batch(x: NavState, deltas: NDArray):
    """``x (+) deltas[i]`` for each row of an (M, 15) array."""
    d = np.asarray(deltas, dtype=float)
    return (
        x.r_w + d[:, POS],
        x.v_w + d[:, VEL],
        x.R_wb @ exp_map(d[:, ATT]),
        x.b_a + d[:, BA],
        x.b_g + d[:, BG],
    )


def ominus_batch(batch, ref: NavState) -> NDArray:
    """Rows ``batch[i] (-) ref`` as an (M, 15) array."""
    r, v, R, ba, bg = batch
    out = np.empty((r.shape[0], N_X))
    out[:, POS] = r - ref.r_w
    out[:, VEL] = v - ref.v_w
    out[:, ATT] = log_map(ref.R_wb.T @ R)
    out[:, BA] = ba - ref.b_a
    out[:, BG] = bg - ref.b_g
    return out


def batch_item(batch, i: int) -> NavState:
    r, v, R, ba, bg = batch
    return NavState(r_w=r[i], v_w=v[i], R_wb=R[i], b_a=ba[i], b_g=bg[i])
