"""Vehicle dynamics constraints as unscented pseudo-measurements.

The non-holonomic constraint (NHC) says the vehicle frame ``v`` moves only
along its x axis apart from a small steering-dependent sideslip.  The zero
velocity update (ZUPT) pins the full vehicle-frame velocity to zero while
the IMU shows no road vibration.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.stats import chi2

from .manifold import Belief, NavState
from .unscented import unscented_update

# vehicle forward is body -y, vehicle left is body +x, both z axes up
DEFAULT_R_VB = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class VdcParams:
    """NHC and ZUPT settings (industrial-grade defaults).

    ``r_b_v`` and ``r_b_u`` are the body-frame positions of the vehicle-frame
    origin and of the IMU.
    """

    P0: float = 0.0
    P1: float = 0.0
    sigma_nhc_y: float = 0.1
    sigma_nhc_z: float = 0.2
    sigma_zupt: tuple[float, float, float] = (0.05, 0.01, 0.01)
    gamma_a: float = 0.8
    gamma_g: float = 0.006
    n_zupt: int = 10
    p_f_zupt: float = 1e-30
    r_b_v: NDArray = field(default_factory=lambda: np.array([0.0, 1.2, -1.3]))
    r_b_u: NDArray = field(default_factory=lambda: np.array([0.3, -0.4, -0.5]))
    R_vb: NDArray = field(default_factory=lambda: DEFAULT_R_VB.copy())

    def __post_init__(self):
        for name in ("r_b_v", "r_b_u", "R_vb"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), float))
        object.__setattr__(self, "sigma_zupt", tuple(float(s) for s in self.sigma_zupt))
        sig = (self.sigma_nhc_y, self.sigma_nhc_z, *self.sigma_zupt)
        if min(sig) <= 0:
            raise ValueError("constraint standard deviations must be positive")
        if self.n_zupt < 1:
            raise ValueError("n_zupt must be at least 1")
        if not 0 < self.p_f_zupt < 1:
            raise ValueError("p_f_zupt must lie in (0, 1)")

    @classmethod
    def preset(cls, grade: str, **overrides) -> VdcParams:
        table = {
            "industrial": dict(gamma_g=0.006, n_zupt=10, p_f_zupt=1e-30),
            "consumer": dict(gamma_g=0.018, n_zupt=30, p_f_zupt=1e-6),
        }
        if grade not in table:
            raise ValueError(f"unknown IMU grade {grade!r}")
        return cls(**{**table[grade], **overrides})

    @property
    def zupt_gate(self) -> float:
        return float(chi2.isf(self.p_f_zupt, 3))


def vehicle_velocity(R_wb: NDArray, v_w: NDArray, w_b: NDArray, params: VdcParams) -> NDArray:
    """Vehicle-frame velocity of the vehicle origin (batched over axis 0)."""
    v_b = np.einsum("...ji,...j->...i", R_wb, v_w)
    lever = params.r_b_v - params.r_b_u
    return (v_b + np.cross(w_b, lever)) @ params.R_vb.T


def nhc_predict(x: NavState, w_b: ArrayLike, params: VdcParams) -> NDArray:
    """Lateral and vertical vehicle-frame velocity."""
    return vehicle_velocity(x.R_wb, x.v_w, np.asarray(w_b, float), params)[1:3]


def sideslip(w_b: ArrayLike, params: VdcParams) -> float:
    wz = float(np.asarray(w_b, float)[2])
    return params.P0 * wz + params.P1 * wz * wz


def nhc_update(belief: Belief, w_b: ArrayLike, params: VdcParams) -> tuple[Belief, float]:
    """NHC pseudo-measurement update; returns the posterior and its NIS."""
    w_b = np.asarray(w_b, float)
    z = np.array([sideslip(w_b, params), 0.0])
    R = np.diag([params.sigma_nhc_y**2, params.sigma_nhc_z**2])

    def h(batch):
        return vehicle_velocity(batch[2], batch[1], w_b, params)[:, 1:3]

    post, nis, _ = unscented_update(belief, h, z, R)
    return post, nis


@dataclass
class StationarityState:
    """Pass/fail flags of the most recent ``n`` consecutive-sample differences."""

    n: int
    flags: deque = field(default_factory=deque)

    def __post_init__(self):
        self.flags = deque(self.flags, maxlen=self.n)

    @property
    def stationary(self) -> bool:
        return len(self.flags) == self.n and all(self.flags)


def zupt_detect(
    state: StationarityState, df: ArrayLike, dw: ArrayLike, params: VdcParams
) -> tuple[StationarityState, bool]:
    """Push one sample-difference test; stationary when the window is all clean."""
    ok = bool(np.linalg.norm(df) < params.gamma_a and np.linalg.norm(dw) < params.gamma_g)
    state.flags.append(ok)
    return state, state.stationary


def zupt_update(belief: Belief, w_b: ArrayLike, params: VdcParams) -> tuple[Belief, bool, float]:
    """Gated zero-velocity update.

    Returns
    -------
    posterior, applied, nis
        ``applied`` is False when the NIS exceeds the chi-square(3) gate.
    """
    w_b = np.asarray(w_b, float)
    R = np.diag(np.square(params.sigma_zupt))

    def h(batch):
        return vehicle_velocity(batch[2], batch[1], w_b, params)

    post, nis, applied = unscented_update(belief, h, np.zeros(3), R, gate=params.zupt_gate)
    return post, applied, nis
