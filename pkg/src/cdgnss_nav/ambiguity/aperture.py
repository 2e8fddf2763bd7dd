"""Fixed-failure-rate difference test for integer aperture validation.

A fix is accepted when ``J2(second) - J2(best) > mu``.  The threshold ``mu``
comes from a table indexed by ambiguity dimension and model strength (ADOP),
built by Monte Carlo so that the fraction of wrong fixes among accepted
fixes stays at or below the target ``P_f``.  This also bounds the
unconditional rate ``P(accepted and wrong)``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .lambda_ import IlsSolution, decorrelate_covariance, search_batch

log = logging.getLogger(__name__)

TABLE_COLUMNS = ("dof", "strength_bucket", "p_f_target", "threshold")
DEFAULT_TABLE = "aperture_thresholds.csv"


@dataclass(frozen=True)
class ApertureDecision:
    accepted: bool
    best: NDArray
    statistic: float
    threshold: float
    p_f: float
    diagnostic: str = ""


@dataclass(frozen=True)
class ApertureTable:
    """Thresholds on a (dof, ADOP) grid for each failure-rate target."""

    dof: NDArray
    adop: NDArray
    p_f: NDArray
    threshold: NDArray

    @classmethod
    def from_rows(cls, rows) -> ApertureTable:
        arr = np.array([[float(r[c]) for c in TABLE_COLUMNS] for r in rows]).reshape(-1, 4)
        order = np.lexsort((arr[:, 1], arr[:, 0], arr[:, 2]))
        arr = arr[order]
        return cls(arr[:, 0].astype(int), arr[:, 1], arr[:, 2], arr[:, 3])

    @classmethod
    def read_csv(cls, path: str | Path) -> ApertureTable:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(TABLE_COLUMNS) - set(reader.fieldnames or ())
            if missing:
                raise ValueError(f"aperture table missing columns {sorted(missing)}")
            return cls.from_rows(list(reader))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TABLE_COLUMNS)
            for d, a, p, t in zip(self.dof, self.adop, self.p_f, self.threshold):
                w.writerow([int(d), f"{a:.6g}", f"{p:.6g}", f"{t:.6f}"])

    def monotone(self) -> ApertureTable:
        """Running maximum over ADOP within each (dof, P_f) group.

        A weaker model never gets a smaller threshold than a stronger one;
        raising a threshold only shrinks the accepted set.
        """
        thr = self.threshold.copy()
        for key in {(int(d), float(p)) for d, p in zip(self.dof, self.p_f)}:
            sel = np.flatnonzero((self.dof == key[0]) & (self.p_f == key[1]))
            sel = sel[np.argsort(self.adop[sel])]
            thr[sel] = np.maximum.accumulate(thr[sel])
        return ApertureTable(self.dof, self.adop, self.p_f, thr)

    def lookup(self, dof: int, adop: float, p_f: float) -> float | None:
        """Threshold for a problem, or ``None`` when the table has no entry.

        Between tabulated strengths the larger neighbouring threshold is used.
        """
        sel = (self.dof == dof) & np.isclose(self.p_f, p_f, rtol=1e-9, atol=0.0)
        if not np.any(sel):
            return None
        grid = self.adop[sel]
        thr = self.threshold[sel]
        if not np.isfinite(adop) or adop > grid[-1] * (1 + 1e-9):
            return None
        if adop <= grid[0]:
            return float(thr[0])
        hi = int(np.searchsorted(grid, adop))
        return float(max(thr[hi - 1], thr[hi]))


@lru_cache(maxsize=None)
def default_table() -> ApertureTable:
    ref = resources.files("cdgnss_nav.ambiguity") / "data" / DEFAULT_TABLE
    with resources.as_file(ref) as path:
        return ApertureTable.read_csv(path)


def aperture_test(
    sol: IlsSolution,
    dof: int,
    p_f: float,
    table: ApertureTable | None = None,
    adop: float | None = None,
) -> ApertureDecision:
    """Difference test of the best against the runner-up candidate."""
    if len(sol.candidates) < 2:
        raise ValueError("difference test needs at least two candidates")
    table = table or default_table()
    adop = sol.adop if adop is None else adop
    stat = float(sol.candidates[1][1] - sol.candidates[0][1])
    mu = table.lookup(dof, adop, p_f)
    if mu is None:
        msg = f"no threshold for dof={dof}, adop={adop:.3g}, p_f={p_f:g}"
        log.debug(msg)
        return ApertureDecision(False, sol.best, stat, float("inf"), p_f, msg)
    return ApertureDecision(stat > mu, sol.best, stat, mu, p_f)


# ---------------------------------------------------------------------------
# Calibration


def random_ambiguity_covariance(
    rng: np.random.Generator, dof: int, adop: float, log_spread: float = 1.5
) -> NDArray:
    """Decorrelated-looking covariance ``L^T D L`` scaled to a given ADOP.

    ``L`` has unit diagonal and off-diagonals in [-0.5, 0.5]; the conditional
    variances span ``10^(+-log_spread)`` before scaling.
    """
    L = np.tril(rng.uniform(-0.5, 0.5, (dof, dof)), -1) + np.eye(dof)
    d = 10.0 ** rng.uniform(-log_spread, log_spread, dof)
    d *= adop**2 / np.exp(np.mean(np.log(d)))
    return L.T @ (d[:, None] * L)


def threshold_for_rate(stat: NDArray, wrong: NDArray, p_f: float) -> float:
    """Smallest threshold whose accepted set keeps the wrong fraction <= ``p_f``.

    Samples are ranked by decreasing statistic and the largest top-``k`` set
    with ``#wrong <= p_f * k`` is accepted.  The threshold is the statistic of
    the first rejected sample (acceptance is strict, so ties reject).
    Returns ``inf`` when no non-empty set qualifies.
    """
    stat = np.asarray(stat, float)
    wrong = np.asarray(wrong, bool)
    order = np.argsort(-stat, kind="stable")
    s = stat[order]
    n_wrong = np.cumsum(wrong[order])
    ok = n_wrong <= p_f * np.arange(1, len(s) + 1)
    if not np.any(ok):
        return float("inf")
    k = int(np.flatnonzero(ok)[-1])
    if k == len(s) - 1:
        return 0.0
    return float(s[k + 1])


def simulate_difference_statistic(
    rng: np.random.Generator, dof: int, adop: float, models: int, per_model: int
) -> tuple[NDArray, NDArray]:
    """Difference statistic and wrong-fix flags over random models (truth = 0)."""
    stats, wrong = [], []
    for _ in range(models):
        Q = random_ambiguity_covariance(rng, dof, adop)
        dec = decorrelate_covariance(Q)
        a = rng.multivariate_normal(np.zeros(dof), Q, size=per_model, method="cholesky")
        cand, cost = search_batch(dec.L, dec.D, dec.Zt_inv, a, dec.Z, 2, 2_000_000)
        order = np.argsort(cost, axis=1)
        c_sorted = np.take_along_axis(cost, order, axis=1)
        best = cand[np.arange(per_model), order[:, 0]]
        stats.append(c_sorted[:, 1] - c_sorted[:, 0])
        wrong.append(np.any(best != 0, axis=1))
    return np.concatenate(stats), np.concatenate(wrong)


def calibrate(
    dofs,
    adops,
    p_f_targets=(0.001, 0.01),
    samples: int = 100_000,
    models: int = 100,
    seed: int = 0,
    pilot: int = 1000,
    hopeless: float = 0.99,
    progress=None,
) -> ApertureTable:
    """Build a threshold table by Monte Carlo, one substream per grid cell.

    Each cell first runs a small pilot.  If the pilot's wrong-fix rate
    exceeds ``hopeless`` the cell, and every weaker cell of the same
    dimension, gets an infinite threshold (always reject).  This skips the
    expensive searches on models that could never validate a fix.
    """
    rows = []
    root = np.random.SeedSequence(seed)
    adops = sorted(float(a) for a in adops)
    cells = [(int(d), a) for d in dofs for a in adops]
    given_up: set[int] = set()
    for (dof, adop), ss in zip(cells, root.spawn(len(cells))):
        rng = np.random.default_rng(ss)
        stat = wrong = None
        if dof not in given_up:
            stat, wrong = simulate_difference_statistic(rng, dof, adop, 1, pilot)
            if np.mean(wrong) > hopeless:
                given_up.add(dof)
                stat = wrong = None
            else:
                stat, wrong = simulate_difference_statistic(
                    rng, dof, adop, models, samples // models
                )
        for p_f in p_f_targets:
            thr = float("inf") if stat is None else threshold_for_rate(stat, wrong, p_f)
            rows.append(
                {"dof": dof, "strength_bucket": adop, "p_f_target": p_f, "threshold": thr}
            )
        if progress is not None:
            progress(dof, adop, float("nan") if wrong is None else float(np.mean(wrong)))
    return ApertureTable.from_rows(rows).monotone()
