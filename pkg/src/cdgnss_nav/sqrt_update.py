"""Square-root CDGNSS measurement update with integer ambiguity resolution.

The joint cost over the tangent-space error ``dx`` and the integer
ambiguities ``n`` is

    J(dx, n) = ||R_xx_bar dx||^2 + ||R_g (nu - A H_b dx - Lambda n)||^2

where ``A`` maps the stacked baselines into DD observables and ``Lambda``
places wavelengths on the phase rows.  A QR factorization splits it into

    J = ||nu1 - R_xx dx - R_xn n||^2 + ||nu2 - R_nn n||^2 + ||nu3||^2
      =            J1               +        J2         +    J3

``J2`` drives the integer search; ``J1`` is zeroed by back-substitution.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.typing import NDArray
from scipy.linalg import qr, solve_triangular

from .ambiguity.aperture import ApertureDecision, ApertureTable, aperture_test
from .ambiguity.lambda_ import DIAG_TOL, IlsProblem, IlsSolution, ils_search
from .cdgnss import (
    DdEpoch,
    LinearizedBaselines,
    ambiguity_design,
    baseline_design,
    measurement_layout,
)
from .manifold import Belief, DegenerateCovarianceError, oplus, symmetrize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AmbiguityParams:
    """Integer-resolution settings.

    Parameters
    ----------
    p_f : target fixed failure rate of the aperture test.
    table : threshold table; ``None`` uses the packaged default.
    resolve : when False every epoch takes the float path.
    """

    p_f: float = 0.001
    table: ApertureTable | None = None
    resolve: bool = True


@dataclass(frozen=True)
class NormalizedSystem:
    """Whitened stacked system ``nu' ~ H_r' dx + H_n' n``."""

    nu: NDArray
    H_r: NDArray
    H_n: NDArray


@dataclass(frozen=True)
class DecomposedCost:
    R_xx: NDArray
    R_xn: NDArray
    R_nn: NDArray
    nu1: NDArray
    nu2: NDArray
    nu3: NDArray
    rank_ok: bool = True

    @property
    def J3(self) -> float:
        return float(self.nu3 @ self.nu3)

    @property
    def n_amb(self) -> int:
        return self.R_nn.shape[0]

    def cost(self, dx: NDArray, n: NDArray) -> tuple[float, float, float]:
        r1 = self.nu1 - self.R_xx @ dx - self.R_xn @ n
        r2 = self.nu2 - self.R_nn @ n
        return float(r1 @ r1), float(r2 @ r2), self.J3

    def ils_problem(self) -> IlsProblem:
        return IlsProblem(self.nu2, self.R_nn)


@dataclass(frozen=True)
class AmbiguityOutcome:
    fixed: bool
    n: NDArray
    J1: float
    J2: float
    J3: float
    decision: ApertureDecision | None = None
    eps_phi: float = float("nan")
    n_amb: int = 0
    float_forced: bool = False
    solution: IlsSolution | None = field(default=None, repr=False)


@dataclass(frozen=True)
class UpdateResult:
    posterior: Belief
    outcome: AmbiguityOutcome
    dx: NDArray


def _whitener(S: NDArray, what: str) -> NDArray:
    """Lower Cholesky factor of ``S`` (whitening applies its inverse)."""
    try:
        return np.linalg.cholesky(symmetrize(S))
    except np.linalg.LinAlgError as exc:
        raise DegenerateCovarianceError(f"{what} is not positive definite") from exc


def build_normalized_system(
    belief: Belief,
    lin: LinearizedBaselines,
    epoch: DdEpoch,
    rows: NDArray | None = None,
) -> NormalizedSystem:
    """Stack the prior and the whitened DD rows into one least-squares system.

    ``Sigma_k = Sigma_g + A Sigma_b A^T`` absorbs the linearization error.
    ``rows`` optionally restricts the measurement rows (for example to the
    pseudorange channels); ambiguity columns with no remaining row are dropped.
    """
    A = baseline_design(epoch.sats)
    Hn = ambiguity_design(epoch.sats)
    nu = epoch.z - A @ lin.b_bar
    Sigma = epoch.cov + A @ lin.Sigma_b @ A.T
    if rows is not None:
        rows = np.asarray(rows, int)
        A, Hn, nu, Sigma = A[rows], Hn[rows], nu[rows], Sigma[np.ix_(rows, rows)]
        Hn = Hn[:, np.any(Hn != 0.0, axis=0)]
    Lp = _whitener(belief.cov, "prior covariance")
    m = len(nu)
    if m:
        Lg = _whitener(Sigma, "measurement covariance")
        nu_w = solve_triangular(Lg, nu, lower=True)
        Hr_w = solve_triangular(Lg, A @ lin.H_b, lower=True)
        Hn_w = solve_triangular(Lg, Hn, lower=True)
    else:
        nu_w = np.zeros(0)
        Hr_w = np.zeros((0, lin.H_b.shape[1]))
        Hn_w = np.zeros((0, Hn.shape[1]))
    nx = belief.cov.shape[0]
    Rxx_bar = solve_triangular(Lp, np.eye(nx), lower=True)
    return NormalizedSystem(
        nu=np.concatenate([np.zeros(nx), nu_w]),
        H_r=np.vstack([Rxx_bar, Hr_w]),
        H_n=np.vstack([np.zeros((nx, Hn_w.shape[1])), Hn_w]),
    )


def qr_decompose(sys: NormalizedSystem) -> DecomposedCost:
    """Orthogonal triangularization of ``[H_r' H_n']`` applied to ``nu'``."""
    nx = sys.H_r.shape[1]
    N = sys.H_n.shape[1]
    H = np.hstack([sys.H_r, sys.H_n])
    Q, R = qr(H, mode="full")
    nu = Q.T @ sys.nu
    k = nx + N
    if R.shape[0] < k:
        R = np.vstack([R, np.zeros((k - R.shape[0], k))])
        nu = np.concatenate([nu, np.zeros(k - len(nu))])
    d = np.abs(np.diag(R[:k, :k]))
    rank_ok = bool(np.all(d > DIAG_TOL * max(1.0, d.max(initial=1.0))))
    return DecomposedCost(
        R_xx=R[:nx, :nx],
        R_xn=R[:nx, nx:k],
        R_nn=R[nx:k, nx:k],
        nu1=nu[:nx],
        nu2=nu[nx:k],
        nu3=nu[k:],
        rank_ok=rank_ok,
    )


def float_solution(d: DecomposedCost) -> tuple[NDArray, NDArray]:
    """Real-valued ``(dx, n)`` minimizing ``J1 + J2``."""
    n = solve_triangular(d.R_nn, d.nu2, lower=False) if d.n_amb else np.zeros(0)
    dx = solve_triangular(d.R_xx, d.nu1 - d.R_xn @ n, lower=False)
    return dx, n


def float_covariance(d: DecomposedCost) -> NDArray:
    """State block of ``(R^T R)^-1`` with the ambiguities marginalized."""
    nx, N = d.R_xx.shape[0], d.n_amb
    R = np.block([[d.R_xx, d.R_xn], [np.zeros((N, nx)), d.R_nn]])
    Rinv = solve_triangular(R, np.eye(nx + N), lower=False)
    top = Rinv[:nx]
    return symmetrize(top @ top.T)


def fixed_solution(d: DecomposedCost, n_fix: NDArray) -> tuple[NDArray, NDArray]:
    """``dx`` and covariance conditioned on integer ambiguities ``n_fix``."""
    n_fix = np.asarray(n_fix, float)
    dx = solve_triangular(d.R_xx, d.nu1 - d.R_xn @ n_fix, lower=False)
    Rinv = solve_triangular(d.R_xx, np.eye(d.R_xx.shape[0]), lower=False)
    return dx, symmetrize(Rinv @ Rinv.T)


def measurement_update(
    belief: Belief,
    epoch: DdEpoch,
    lin: LinearizedBaselines,
    params: AmbiguityParams = AmbiguityParams(),
    use_phase: bool = True,
) -> UpdateResult:
    """Full square-root update: search, validate, then fix or float.

    With ``use_phase=False`` only the pseudorange rows are used.  An epoch
    whose ambiguity block is rank deficient falls back to that path.
    """
    rows = None
    if not use_phase:
        lay = measurement_layout(epoch.sats)
        rows = np.concatenate([lay["rho1"], lay["rho2"]])
    d = qr_decompose(build_normalized_system(belief, lin, epoch, rows))
    if not d.rank_ok and use_phase:
        log.debug("rank-deficient ambiguity block at t=%.3f; pseudorange only", epoch.t)
        res = measurement_update(belief, epoch, lin, params, use_phase=False)
        return UpdateResult(
            res.posterior,
            replace(res.outcome, float_forced=True),
            res.dx,
        )

    dx_f, n_f = float_solution(d)
    sol = None
    decision = None
    eps_phi = float("nan")
    if d.n_amb and params.resolve:
        sol = ils_search(d.ils_problem(), k_best=2)
        decision = aperture_test(sol, d.n_amb, params.p_f, params.table)
        eps_phi = float(sol.candidates[0][1])

    if decision is not None and decision.accepted:
        n_fix = sol.best
        dx, P = fixed_solution(d, n_fix)
        J1, J2, J3 = d.cost(dx, n_fix)
        outcome = AmbiguityOutcome(
            True, np.asarray(n_fix), J1, J2, J3, decision, eps_phi, d.n_amb, False, sol
        )
    else:
        dx, P = dx_f, float_covariance(d)
        J1, J2, J3 = d.cost(dx_f, n_f)
        outcome = AmbiguityOutcome(
            False, n_f, J1, J2, J3, decision, eps_phi, d.n_amb, not use_phase, sol
        )
    return UpdateResult(Belief(oplus(belief.mean, dx), P), outcome, dx)

