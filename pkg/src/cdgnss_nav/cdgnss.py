"""Multi-baseline double-difference (DD) measurement model.

Baseline 1 runs from the reference antenna to the vehicle's primary antenna,
baseline 2 from the primary to the secondary antenna.  Measurements are
stacked ``[rho_1; phi_1; rho_2; phi_2]`` (metres).

Sign convention: a DD channel is the pivot-minus-non-pivot difference of
(near antenna minus far antenna) single differences, so that the modelled
observable is ``+G b`` with geometry rows ``(e_pivot - e_j)``.  The noise
covariance only depends on which undifferenced terms enter each channel, so
it is the same under either sign choice.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .manifold import ATT, POS, Belief, NavState, chol_lower, exp_map, skew, symmetrize
from .unscented import UtWeights, sigma_deltas

C_LIGHT = 299_792_458.0
L1_HZ = 1575.42e6
L2_HZ = 1227.60e6
L1_WAVELENGTH = C_LIGHT / L1_HZ
L2_WAVELENGTH = C_LIGHT / L2_HZ

SENSORIUM_BASELINE_M = 1.0668


@dataclass(frozen=True)
class AntennaGeometry:
    """Body-frame positions (m) of the IMU, primary and secondary antennas."""

    r_b_u: NDArray = field(default_factory=lambda: np.array([0.3, -0.4, -0.5]))
    r_b_p: NDArray = field(default_factory=lambda: np.zeros(3))
    r_b_s: NDArray = field(
        default_factory=lambda: np.array([SENSORIUM_BASELINE_M, 0.0, 0.0])
    )

    def __post_init__(self):
        for name in ("r_b_u", "r_b_p", "r_b_s"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), float).reshape(3))
        if np.linalg.norm(self.r_b_s - self.r_b_p) <= 0:
            raise ValueError("secondary and primary antennas coincide")

    @property
    def lever_primary(self) -> NDArray:
        return self.r_b_p - self.r_b_u

    @property
    def lever_attitude(self) -> NDArray:
        return self.r_b_s - self.r_b_p

    @property
    def baseline_length(self) -> float:
        return float(np.linalg.norm(self.lever_attitude))


@dataclass(frozen=True)
class DdChannels:
    """DD channels of one baseline: pivot/non-pivot satellite ids and signal."""

    pivot: NDArray
    sat: NDArray
    signal: NDArray
    wavelength: NDArray

    def __post_init__(self):
        for name in ("pivot", "sat", "signal"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=int).reshape(-1))
        object.__setattr__(
            self, "wavelength", np.asarray(self.wavelength, dtype=float).reshape(-1)
        )
        n = len(self.sat)
        if not (len(self.pivot) == len(self.signal) == len(self.wavelength) == n):
            raise ValueError("channel arrays have inconsistent lengths")

    def __len__(self) -> int:
        return len(self.sat)

    def select(self, keep: NDArray) -> DdChannels:
        return DdChannels(self.pivot[keep], self.sat[keep], self.signal[keep], self.wavelength[keep])

    @classmethod
    def empty(cls) -> DdChannels:
        z = np.zeros(0)
        return cls(z, z, z, z)


@dataclass(frozen=True)
class SatelliteSet:
    """Line-of-sight geometry plus the DD channel lists of both baselines.

    ``los[i]`` is the world-frame unit vector to satellite ``i``; channel
    ``sat``/``pivot`` entries index into it.
    """

    los: NDArray
    elevation: NDArray
    baselines: tuple[DdChannels, DdChannels]

    def __post_init__(self):
        los = np.asarray(self.los, float).reshape(-1, 3)
        object.__setattr__(self, "los", los)
        object.__setattr__(self, "elevation", np.asarray(self.elevation, float).reshape(-1))
        if not np.allclose(np.linalg.norm(los, axis=1), 1.0, atol=1e-12):
            raise ValueError("line-of-sight vectors must be unit length")

    @property
    def counts(self) -> tuple[int, int]:
        return len(self.baselines[0]), len(self.baselines[1])

    @property
    def n_ambiguities(self) -> int:
        return sum(self.counts)

    @property
    def n_measurements(self) -> int:
        return 2 * self.n_ambiguities

    @classmethod
    def from_constellation(
        cls,
        los: ArrayLike,
        elevation: ArrayLike,
        wavelengths: ArrayLike = (L1_WAVELENGTH,),
        visible: ArrayLike | None = None,
        baselines: tuple[bool, bool] = (True, True),
    ) -> SatelliteSet:
        """DD channels for all visible satellites on every signal.

        The pivot is the highest-elevation visible satellite, shared by both
        baselines and all signals.
        """
        los = np.asarray(los, float)
        elevation = np.asarray(elevation, float)
        vis = np.ones(len(elevation), bool) if visible is None else np.asarray(visible, bool)
        ids = np.flatnonzero(vis)
        if len(ids) < 2:
            chans = (DdChannels.empty(), DdChannels.empty())
            return cls(los, elevation, chans)
        pivot = ids[np.argmax(elevation[ids])]
        others = ids[ids != pivot]
        sat, sig, lam = [], [], []
        for k, wl in enumerate(np.atleast_1d(wavelengths)):
            sat.extend(others)
            sig.extend([k] * len(others))
            lam.extend([wl] * len(others))
        full = DdChannels(np.full(len(sat), pivot), sat, sig, lam)
        chans = tuple(full if use else DdChannels.empty() for use in baselines)
        return cls(los, elevation, chans)

    def without_satellites(self, drop: ArrayLike) -> SatelliteSet:
        drop = np.asarray(drop, int)
        chans = tuple(c.select(~np.isin(c.sat, drop)) for c in self.baselines)
        return SatelliteSet(self.los, self.elevation, chans)


@dataclass(frozen=True)
class NoiseModelParams:
    """Undifferenced zenith standard deviations (m) and elevation weighting."""

    sigma_rho: float = 1.5
    sigma_phi: float = 0.006
    weighting: str = "sin"  # "sin": sigma / sin(el); "none": constant

    def __post_init__(self):
        if self.sigma_rho <= 0 or self.sigma_phi <= 0:
            raise ValueError("noise standard deviations must be positive")
        if self.weighting not in ("sin", "none"):
            raise ValueError(f"unknown elevation weighting {self.weighting!r}")


@dataclass(frozen=True)
class DdEpoch:
    """One epoch of stacked DD observables ``[rho_1; phi_1; rho_2; phi_2]``."""

    t: float
    z: NDArray
    sats: SatelliteSet
    cov: NDArray

    def __post_init__(self):
        z = np.asarray(self.z, float).reshape(-1)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "cov", np.asarray(self.cov, float).reshape(len(z), len(z)))
        if len(z) != self.sats.n_measurements:
            raise ValueError("measurement vector does not match channel counts")

    def index_layout(self) -> dict[str, NDArray]:
        return measurement_layout(self.sats)

    def select_channels(self, keep1: NDArray, keep2: NDArray) -> DdEpoch:
        """Keep only the flagged channels on each baseline (rho and phi alike)."""
        lay = self.index_layout()
        rows = np.concatenate(
            [lay["rho1"][keep1], lay["phi1"][keep1], lay["rho2"][keep2], lay["phi2"][keep2]]
        )
        b1, b2 = self.sats.baselines
        sats = SatelliteSet(self.sats.los, self.sats.elevation, (b1.select(keep1), b2.select(keep2)))
        return DdEpoch(self.t, self.z[rows], sats, self.cov[np.ix_(rows, rows)])

    def pseudorange_only(self) -> tuple[NDArray, NDArray, NDArray]:
        """(z_rho, cov_rho, row indices) of the pseudorange channels."""
        lay = self.index_layout()
        rows = np.concatenate([lay["rho1"], lay["rho2"]])
        return self.z[rows], self.cov[np.ix_(rows, rows)], rows


def measurement_layout(sats: SatelliteSet) -> dict[str, NDArray]:
    n1, n2 = sats.counts
    base = np.cumsum([0, n1, n1, n2])
    return {
        "rho1": np.arange(base[0], base[0] + n1),
        "phi1": np.arange(base[1], base[1] + n1),
        "rho2": np.arange(base[2], base[2] + n2),
        "phi2": np.arange(base[3], base[3] + n2),
    }


@dataclass(frozen=True)
class LinearizedBaselines:
    """Mean ``b_bar`` (6), Jacobian ``H_b`` (6x15), linearization error ``Sigma_b``."""

    b_bar: NDArray
    H_b: NDArray
    Sigma_b: NDArray


def baseline_function(x: NavState, geom: AntennaGeometry) -> NDArray:
    """Stacked world-frame baselines ``[b1; b2]``."""
    b1 = x.r_w + x.R_wb @ geom.lever_primary
    b2 = x.R_wb @ geom.lever_attitude
    return np.concatenate([b1, b2])


def geometry_matrix(sats: SatelliteSet, baseline: int) -> NDArray:
    """Rows ``(e_pivot - e_j)^T`` for the channels of baseline 1 or 2."""
    ch = sats.baselines[baseline - 1]
    if len(ch) == 0:
        raise ValueError(f"baseline {baseline} has no non-pivot channels")
    return sats.los[ch.pivot] - sats.los[ch.sat]


def _geometry_or_empty(sats: SatelliteSet, baseline: int) -> NDArray:
    if len(sats.baselines[baseline - 1]) == 0:
        return np.zeros((0, 3))
    return geometry_matrix(sats, baseline)


def baseline_design(sats: SatelliteSet) -> NDArray:
    """(2N x 6) map from ``[b1; b2]`` to the stacked DD observables."""
    G1 = _geometry_or_empty(sats, 1)
    G2 = _geometry_or_empty(sats, 2)
    n1, n2 = len(G1), len(G2)
    A = np.zeros((2 * (n1 + n2), 6))
    A[0:n1, 0:3] = G1
    A[n1 : 2 * n1, 0:3] = G1
    A[2 * n1 : 2 * n1 + n2, 3:6] = G2
    A[2 * n1 + n2 :, 3:6] = G2
    return A


def ambiguity_design(sats: SatelliteSet) -> NDArray:
    """(2N x N) wavelength matrix placing ``Lambda_m`` on the phase rows."""
    b1, b2 = sats.baselines
    n1, n2 = len(b1), len(b2)
    Hn = np.zeros((2 * (n1 + n2), n1 + n2))
    Hn[n1 + np.arange(n1), np.arange(n1)] = b1.wavelength
    Hn[2 * n1 + n2 + np.arange(n2), n1 + np.arange(n2)] = b2.wavelength
    return Hn


def dd_predict(b: ArrayLike, n: ArrayLike, sats: SatelliteSet) -> NDArray:
    """Predicted ``[rho_1; phi_1; rho_2; phi_2]`` for baselines ``b`` and integers ``n``."""
    b = np.asarray(b, float).reshape(6)
    n = np.asarray(n, float).reshape(-1)
    if len(n) != sats.n_ambiguities:
        raise ValueError(f"expected {sats.n_ambiguities} ambiguities, got {len(n)}")
    return baseline_design(sats) @ b + ambiguity_design(sats) @ n


def _dd_operator(sats: SatelliteSet) -> tuple[NDArray, NDArray]:
    """DD operator over undifferenced (antenna, satellite, signal) terms.

    Returns ``(D, el)`` where ``el`` gives each undifferenced term's elevation.
    Antennas: 0 reference, 1 primary, 2 secondary.
    """
    b1, b2 = sats.baselines
    keys: dict[tuple[int, int, int], int] = {}

    def col(ant, sat, sig):
        return keys.setdefault((ant, int(sat), int(sig)), len(keys))

    rows = []
    for ch, (near, far) in ((b1, (0, 1)), (b2, (1, 2))):
        for piv, sat, sig in zip(ch.pivot, ch.sat, ch.signal):
            rows.append(
                ((col(near, piv, sig), 1.0), (col(far, piv, sig), -1.0),
                 (col(near, sat, sig), -1.0), (col(far, sat, sig), 1.0))
            )
    D = np.zeros((len(rows), len(keys)))
    for i, terms in enumerate(rows):
        for j, c in terms:
            D[i, j] += c
    el = np.empty(len(keys))
    for (ant, sat, sig), j in keys.items():
        el[j] = sats.elevation[sat]
    return D, el


def dd_noise_covariance(sats: SatelliteSet, params: NoiseModelParams) -> NDArray:
    """Full DD noise covariance ``Sigma_g`` with cross-baseline correlation.

    Undifferenced variance per channel is ``(sigma_zenith / sin(el))^2``; the
    shared primary antenna correlates baselines 1 and 2.
    """
    D, el = _dd_operator(sats)
    if np.any(el <= 0):
        raise ValueError("elevation must be positive")
    w = 1.0 / np.sin(el) ** 2 if params.weighting == "sin" else np.ones_like(el)
    Crho = (D * (params.sigma_rho**2 * w)) @ D.T
    Cphi = (D * (params.sigma_phi**2 * w)) @ D.T
    n1, n2 = sats.counts
    lay = measurement_layout(sats)
    rho = np.concatenate([lay["rho1"], lay["rho2"]])
    phi = np.concatenate([lay["phi1"], lay["phi2"]])
    S = np.zeros((2 * (n1 + n2),) * 2)
    S[np.ix_(rho, rho)] = Crho
    S[np.ix_(phi, phi)] = Cphi
    return S


def linearize_ekf(belief: Belief, geom: AntennaGeometry) -> LinearizedBaselines:
    """First-order expansion of the baseline function about the mean."""
    x = belief.mean
    H = np.zeros((6, belief.cov.shape[0]))
    H[0:3, POS] = np.eye(3)
    # R Exp(d) l ~= R (I - [d]x) l = R l + R [l]x d
    H[0:3, ATT] = x.R_wb @ skew(geom.lever_primary)
    H[3:6, ATT] = x.R_wb @ skew(geom.lever_attitude)
    return LinearizedBaselines(baseline_function(x, geom), H, np.zeros((6, 6)))


def _exp_minus_identity(theta: NDArray) -> NDArray:
    """``exp_map(theta) - I`` without cancellation in the diagonal."""
    E = exp_map(theta)
    phi, th, psi = theta[..., 0], theta[..., 1], theta[..., 2]

    def cm1(a):
        return -2.0 * np.sin(0.5 * a) ** 2

    sphi, sth, spsi = np.sin(phi), np.sin(th), np.sin(psi)
    E[..., 0, 0] = cm1(psi) * np.cos(th) + cm1(th) - sphi * spsi * sth
    E[..., 1, 1] = cm1(phi) * np.cos(psi) + cm1(psi)
    E[..., 2, 2] = cm1(phi) * np.cos(th) + cm1(th)
    return E


def baseline_offsets(x: NavState, deltas: NDArray, geom: AntennaGeometry) -> NDArray:
    """``b(x (+) d_i) - b(x)`` for rows of ``deltas`` computed without cancellation."""
    dR = x.R_wb @ _exp_minus_identity(deltas[:, ATT])
    out = np.empty((len(deltas), 6))
    out[:, 0:3] = deltas[:, POS] + dR @ geom.lever_primary
    out[:, 3:6] = dR @ geom.lever_attitude
    return out


def unscented_baselines(P: NDArray, x: NavState, geom: AntennaGeometry, w: UtWeights):
    """Joint sigma-point statistics ``(b_bar, P_xx, P_xb, P_bb)``."""
    D = sigma_deltas(chol_lower(P), w)
    db = baseline_offsets(x, D, geom)
    m = w.wi * db[1:].sum(axis=0)
    b_bar = baseline_function(x, geom) + m
    dbc = db - m
    Pxx = w.wi * (D[1:].T @ D[1:])
    Pxb = w.wi * (D[1:].T @ dbc[1:])
    Pbb = w.wi * (dbc[1:].T @ dbc[1:]) + w.wc0 * np.outer(dbc[0], dbc[0])
    return b_bar, Pxx, Pxb, symmetrize(Pbb)


def psd_clamp(S: NDArray) -> NDArray:
    vals, vecs = np.linalg.eigh(symmetrize(S))
    return symmetrize((vecs * np.clip(vals, 0.0, None)) @ vecs.T)


def linearize_ukf(
    belief: Belief,
    geom: AntennaGeometry,
    alpha: float = 1e-3,
    kappa: float = 0.0,
    beta: float = 2.0,
) -> LinearizedBaselines:
    """Statistical linearization of the baseline function by the unscented transform.

    ``H_b = (P_xx^-1 P_xb)^T`` and ``Sigma_b = P_bb - H_b P_xx H_b^T``, with
    ``Sigma_b`` clamped to the PSD cone.

    Raises
    ------
    DegenerateCovarianceError
        If the prior covariance cannot be factored.
    """
    P = belief.cov
    w = UtWeights.make(P.shape[0], alpha, kappa, beta)
    b_bar, Pxx, Pxb, Pbb = unscented_baselines(P, belief.mean, geom, w)
    Lxx = chol_lower(Pxx)
    H = np.linalg.solve(Lxx.T, np.linalg.solve(Lxx, Pxb)).T
    Sigma_b = psd_clamp(Pbb - H @ Pxx @ H.T)
    return LinearizedBaselines(b_bar, H, Sigma_b)
