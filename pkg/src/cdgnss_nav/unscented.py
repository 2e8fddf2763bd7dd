"""Scaled unscented transform weights, sigma points and a generic update.

All sums are written relative to the central sigma point.  With the default
``alpha = 1e-3`` the central mean weight is about ``-1e6``, so the textbook
form ``sum(w_m * y_i)`` would throw away six digits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import NDArray

from .manifold import Belief, chol_lower, oplus, oplus_batch, symmetrize

ALPHA = 1e-3
KAPPA = 0.0
BETA = 2.0


@dataclass(frozen=True)
class UtWeights:
    n: int
    lam: float
    scale: float  # sqrt(n + lambda)
    wm0: float
    wc0: float
    wi: float

    @classmethod
    def make(cls, n: int, alpha: float = ALPHA, kappa: float = KAPPA, beta: float = BETA):
        lam = alpha**2 * (n + kappa) - n
        wm0 = lam / (n + lam)
        return cls(
            n=n,
            lam=lam,
            scale=float(np.sqrt(n + lam)),
            wm0=wm0,
            wc0=wm0 + 1.0 - alpha**2 + beta,
            wi=1.0 / (2.0 * (n + lam)),
        )


def sigma_deltas(S: NDArray, w: UtWeights) -> NDArray:
    """Rows ``0, +scale*s_1..s_n, -scale*s_1..s_n`` for factor columns ``s_i``."""
    n = S.shape[0]
    D = np.zeros((2 * n + 1, n))
    D[1 : n + 1] = w.scale * S.T
    D[n + 1 :] = -w.scale * S.T
    return D


def mean_offset(dy: NDArray, w: UtWeights) -> NDArray:
    """Weighted mean minus the central value, given ``dy[i] = y_i - y_0``."""
    return w.wi * dy[1:].sum(axis=0)


def cross_cov(da: NDArray, db: NDArray, w: UtWeights) -> NDArray:
    """Weighted covariance of two centred sigma-point sets (rows = points)."""
    C = w.wi * (da[1:].T @ db[1:])
    C += w.wc0 * np.outer(da[0], db[0])
    return C


def unscented_update(
    belief: Belief,
    h: Callable[[tuple], NDArray],
    z: NDArray,
    R_noise: NDArray,
    gate: float | None = None,
    w: UtWeights | None = None,
):
    """Unscented pseudo-measurement update of ``belief`` with model ``h``.

    ``h`` receives a batch ``(r, v, R, ba, bg)`` and returns (M, m) outputs.

    Returns
    -------
    posterior : Belief
        Unchanged prior when the gate rejects.
    nis : float
        Innovation NIS against ``P_zz + R_noise``.
    applied : bool
    """
    P = belief.cov
    n = P.shape[0]
    w = w or UtWeights.make(n)
    D = sigma_deltas(chol_lower(P), w)
    Y = np.atleast_2d(h(oplus_batch(belief.mean, D)))
    dy = Y - Y[0]
    m = mean_offset(dy, w)
    z_hat = Y[0] + m
    dyc = dy - m
    Pzz = cross_cov(dyc, dyc, w)
    Pxz = cross_cov(D, dyc, w)
    S = symmetrize(Pzz + R_noise)
    nu = np.asarray(z, dtype=float) - z_hat
    Sinv_nu = np.linalg.solve(S, nu)
    nis = float(nu @ Sinv_nu)
    if gate is not None and nis > gate:
        return belief, nis, False
    K = np.linalg.solve(S, Pxz.T).T
    mean = oplus(belief.mean, K @ nu)
    cov = symmetrize(P - K @ S @ K.T)
    return Belief(mean, cov), nis, True
