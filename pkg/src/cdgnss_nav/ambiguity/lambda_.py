"""Integer least squares: LAMBDA-style decorrelation and sphere search.

The ambiguity cost is ``J2(n) = ||nu2 - R_nn n||^2``.  The float solution is
``a = R_nn^-1 nu2`` with covariance ``Q = (R_nn^T R_nn)^-1``.  Decorrelation
returns a unimodular ``Z`` with transformed ambiguities ``z = Z^T n``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
from numpy.typing import NDArray
from scipy.linalg import solve_triangular

DIAG_TOL = 1e-12
MAX_LOOPS = 2_000_000


class SingularAmbiguityError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class IlsProblem:
    """``nu2`` and upper-triangular square-root information ``R_nn``."""

    nu2: NDArray
    R_nn: NDArray

    def __post_init__(self):
        R = np.atleast_2d(np.asarray(self.R_nn, float))
        nu = np.asarray(self.nu2, float).reshape(-1)
        if R.shape != (len(nu), len(nu)):
            raise ValueError("R_nn must be square and match nu2")
        if np.any(np.abs(np.diag(R)) <= DIAG_TOL):
            raise SingularAmbiguityError("R_nn is singular")
        object.__setattr__(self, "R_nn", R)
        object.__setattr__(self, "nu2", nu)

    @property
    def dim(self) -> int:
        return len(self.nu2)

    def cost(self, n: NDArray) -> float:
        r = self.nu2 - self.R_nn @ np.asarray(n, float)
        return float(r @ r)

    def float_solution(self) -> NDArray:
        return solve_triangular(self.R_nn, self.nu2, lower=False)

    def covariance(self) -> NDArray:
        Rinv = solve_triangular(self.R_nn, np.eye(self.dim), lower=False)
        return Rinv @ Rinv.T

    def adop(self) -> float:
        """Ambiguity dilution of precision, ``det(Q)^(1/2n)`` in cycles."""
        return float(np.exp(-np.mean(np.log(np.abs(np.diag(self.R_nn))))))


@dataclass(frozen=True)
class IlsSolution:
    """Best-first integer candidates with their ``J2`` costs."""

    candidates: tuple[tuple[NDArray, float], ...]
    adop: float = float("nan")
    complete: bool = True

    @property
    def best(self) -> NDArray:
        return self.candidates[0][0]

    @property
    def costs(self) -> NDArray:
        return np.array([c for _, c in self.candidates])


@dataclass(frozen=True)
class Decorrelation:
    Z: NDArray  # integer, unimodular; z = Z^T n
    L: NDArray  # Q_z = L^T diag(D) L, L unit lower-triangular
    D: NDArray
    Zt_inv: NDArray = field(repr=False)

    @property
    def R_bar(self) -> NDArray:
        """Upper-triangular square-root information of ``z``."""
        Linv_t = solve_triangular(self.L, np.eye(len(self.D)), lower=True, unit_diagonal=True).T
        return Linv_t / np.sqrt(self.D)[:, None]


def ld_factor(Q: NDArray) -> tuple[NDArray, NDArray]:
    """``Q = L^T diag(D) L`` with ``L`` unit lower-triangular (bottom-up)."""
    A = np.array(Q, dtype=float)
    n = A.shape[0]
    L = np.zeros((n, n))
    d = np.zeros(n)
    for i in range(n - 1, -1, -1):
        d[i] = A[i, i]
        if d[i] <= 0.0:
            raise SingularAmbiguityError("ambiguity covariance not positive definite")
        a = np.sqrt(d[i])
        L[i, : i + 1] = A[i, : i + 1] / a
        A[:i, :i] -= np.outer(L[i, :i], L[i, :i])
        L[i, : i + 1] /= L[i, i]
    return L, d


@numba.njit(cache=True)
def _gauss(L, Z, i, j):
    mu = np.round(L[i, j])
    if mu != 0.0:
        n = L.shape[0]
        for k in range(i, n):
            L[k, j] -= mu * L[k, i]
        for k in range(n):
            Z[k, j] -= mu * Z[k, i]


@numba.njit(cache=True)
def _perm(L, D, j, delta, Z):
    n = L.shape[0]
    eta = D[j] / delta
    lam = D[j + 1] * L[j + 1, j] / delta
    D[j] = eta * D[j + 1]
    D[j + 1] = delta
    for k in range(j):
        a0 = L[j, k]
        a1 = L[j + 1, k]
        L[j, k] = -L[j + 1, j] * a0 + a1
        L[j + 1, k] = eta * a0 + lam * a1
    L[j + 1, j] = lam
    for k in range(j + 2, n):
        t = L[k, j]
        L[k, j] = L[k, j + 1]
        L[k, j + 1] = t
    for k in range(n):
        t = Z[k, j]
        Z[k, j] = Z[k, j + 1]
        Z[k, j + 1] = t


@numba.njit(cache=True)
def _reduction(L, D, Z):
    n = L.shape[0]
    j = n - 2
    k = n - 2
    while j >= 0:
        if j <= k:
            for i in range(j + 1, n):
                _gauss(L, Z, i, j)
        delta = D[j] + L[j + 1, j] ** 2 * D[j + 1]
        if delta + 1e-6 < D[j + 1]:
            _perm(L, D, j, delta, Z)
            k = j
            j = n - 2
        else:
            j -= 1


def decorrelate_covariance(Q: NDArray) -> Decorrelation:
    L, D = ld_factor(Q)
    n = len(D)
    Z = np.eye(n)
    if n > 1:
        _reduction(L, D, Z)
    Z = np.round(Z)
    return Decorrelation(Z, L, D, np.linalg.inv(Z.T))


def decorrelate(R_nn: NDArray) -> tuple[NDArray, NDArray]:
    """Unimodular ``Z`` and the decorrelated square-root information factor.

    The transformed ambiguities are ``z = Z^T n`` and the returned factor
    ``R_bar`` satisfies ``R_bar^T R_bar = (Z^T Q Z)^-1``.
    """
    p = IlsProblem(np.zeros(np.atleast_2d(R_nn).shape[0]), R_nn)
    dec = decorrelate_covariance(p.covariance())
    return dec.Z, dec.R_bar


@numba.njit(cache=True, nogil=True)
def _search(L, D, zs, m, max_loops):
    """Depth-first search for the ``m`` best integer vectors (shrinking radius)."""
    n = len(D)
    S = np.zeros((n, n))
    dist = np.zeros(n)
    zb = np.zeros(n)
    z = np.zeros(n)
    step = np.zeros(n)
    zn = np.zeros((m, n))
    s = np.full(m, np.inf)
    nn = 0
    imax = 0
    maxdist = np.inf
    k = n - 1
    zb[k] = zs[k]
    z[k] = np.round(zb[k])
    y = zb[k] - z[k]
    step[k] = -1.0 if y <= 0 else 1.0
    loops = 0
    complete = False
    while loops < max_loops:
        loops += 1
        newdist = dist[k] + y * y / D[k]
        if newdist < maxdist:
            if k != 0:
                k -= 1
                dist[k] = newdist
                for i in range(k + 1):
                    S[k, i] = S[k + 1, i] + (z[k + 1] - zb[k + 1]) * L[k + 1, i]
                zb[k] = zs[k] + S[k, k]
                z[k] = np.round(zb[k])
                y = zb[k] - z[k]
                step[k] = -1.0 if y <= 0 else 1.0
            else:
                if nn < m:
                    if nn == 0 or newdist > s[imax]:
                        imax = nn
                    zn[nn] = z
                    s[nn] = newdist
                    nn += 1
                    if nn == m:
                        maxdist = s[imax]
                else:
                    if newdist < s[imax]:
                        zn[imax] = z
                        s[imax] = newdist
                        imax = 0
                        for i in range(m):
                            if s[imax] < s[i]:
                                imax = i
                    maxdist = s[imax]
                z[0] += step[0]
                y = zb[0] - z[0]
                step[0] = -step[0] - (-1.0 if step[0] <= 0 else 1.0)
        else:
            if k == n - 1:
                complete = True
                break
            k += 1
            z[k] += step[k]
            y = zb[k] - z[k]
            step[k] = -step[k] - (-1.0 if step[k] <= 0 else 1.0)
    return zn, s, complete


@numba.njit(cache=True, nogil=True)
def search_batch(L, D, Zt_inv, a_float, Z, m, max_loops):
    """Run the search for many float vectors (rows) sharing one decorrelation.

    Returns candidate integers ``(T, m, n)`` in the original ambiguity space
    and their costs ``(T, m)``, unsorted.
    """
    T, n = a_float.shape
    out_n = np.zeros((T, m, n))
    out_s = np.zeros((T, m))
    for t in range(T):
        zs = Z.T @ a_float[t]
        zn, s, _ = _search(L, D, zs, m, max_loops)
        for c in range(m):
            out_n[t, c] = np.round(Zt_inv @ zn[c])
            out_s[t, c] = s[c]
    return out_n, out_s


def _order(cands: list[tuple[NDArray, float]]) -> list[tuple[NDArray, float]]:
    cands = sorted(cands, key=lambda c: c[1])
    # equal costs: lexicographically smallest vector first
    out = []
    for vec, cost in cands:
        if out and abs(cost - out[-1][1]) <= 1e-12 * max(1.0, cost):
            if tuple(vec) < tuple(out[-1][0]):
                out.insert(len(out) - 1, (vec, cost))
                continue
        out.append((vec, cost))
    return out


def ils_search(problem: IlsProblem, k_best: int = 2) -> IlsSolution:
    """The ``k_best`` lowest-``J2`` integer vectors, best first."""
    if k_best < 2:
        raise ValueError("k_best must be at least 2")
    a = problem.float_solution()
    dec = decorrelate_covariance(problem.covariance())
    zs = dec.Z.T @ a
    zn, _, complete = _search(dec.L, dec.D, zs, k_best, MAX_LOOPS)
    cands = []
    for z in zn:
        if not np.all(np.isfinite(z)):
            continue
        n = np.round(dec.Zt_inv @ z).astype(np.int64)
        cands.append((n, problem.cost(n)))
    return IlsSolution(tuple(_order(cands)), adop=problem.adop(), complete=bool(complete))


def brute_force(problem: IlsProblem, lo: int = -20, hi: int = 20, k_best: int = 2):
    """Exhaustive enumeration over the box ``[lo, hi]^n`` (test oracle).

    The cost is accumulated row by row on a broadcast grid, using the upper
    triangular structure of ``R_nn`` so no (points x n) array is formed.
    """
    n = problem.dim
    grid = np.arange(lo, hi + 1, dtype=float)
    axes = [grid.reshape([-1 if j == i else 1 for j in range(n)]) for i in range(n)]
    cost = np.zeros((len(grid),) * n)
    for i in range(n):
        r = problem.nu2[i] - sum(problem.R_nn[i, j] * axes[j] for j in range(i, n))
        cost = cost + r * r
    flat = cost.reshape(-1)
    idx = np.argsort(flat, kind="stable")[:k_best] if flat.size <= 4096 else None
    if idx is None:
        part = np.argpartition(flat, k_best)[: k_best + 1]
        idx = part[np.lexsort((part, flat[part]))][:k_best]
    pts = np.stack(np.unravel_index(idx, cost.shape), axis=-1) + lo
    return [(pts[k].astype(np.int64), float(flat[i])) for k, i in enumerate(idx)]
