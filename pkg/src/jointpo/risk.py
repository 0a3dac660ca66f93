"""Stratum-specific counterfactual risks and AIPW pseudo-outcomes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, check_cells
from .errors import MissingNuisance
from .nuisance import NuisanceSet


@dataclass
class StratumRiskTable:
    """Per-stratum risks ``p0[s-1] = P(Y(0)=1 | S=s)`` and ``p1[s-1]``.

    ``u0``/``u1`` are per-row pseudo-outcomes whose within-stratum means equal
    ``p0``/``p1``; ``strata`` is the row stratum code (1-based) they align with.
    """

    p0: np.ndarray
    p1: np.ndarray
    n_s: np.ndarray
    method: str
    u0: np.ndarray | None = None
    u1: np.ndarray | None = None
    strata: np.ndarray | None = None

    @property
    def n_strata(self) -> int:
        return len(self.p0)

    @property
    def share(self) -> np.ndarray:
        """Stratum shares ``n_s / n``."""
        return self.n_s / self.n_s.sum()

    @classmethod
    def from_risks(cls, p0, p1, n_s=None) -> "StratumRiskTable":
        p0 = np.asarray(p0, dtype=float)
        p1 = np.asarray(p1, dtype=float)
        n_s = np.ones_like(p0) if n_s is None else np.asarray(n_s, dtype=float)
        return cls(p0, p1, n_s, "given")

    def permuted(self, perm) -> "StratumRiskTable":
        """Relabel strata: new stratum j is old stratum ``perm[j]``."""
        perm = np.asarray(perm)
        strata = None
        if self.strata is not None:
            inv = np.empty_like(perm)
            inv[perm] = np.arange(len(perm))
            strata = inv[self.strata - 1] + 1
        return StratumRiskTable(self.p0[perm], self.p1[perm], self.n_s[perm], self.method, self.u0, self.u1, strata)


def _stratum_means(values: np.ndarray, s: np.ndarray, k: int) -> np.ndarray:
    sums = np.bincount(s - 1, weights=values, minlength=k)
    counts = np.bincount(s - 1, minlength=k)
    return sums / counts


def risks_by_proportion(ds: Dataset) -> StratumRiskTable:
    """Sample proportions per (stratum, arm).

    Pseudo-outcomes use the stratum's own means and arm shares, so
    ``u_a = p_s^(a) + 1{A=a}/(n_sa/n_s) (Y - p_s^(a))`` is the per-row
    influence contribution of the proportion.
    """
    check_cells(ds)
    k = ds.n_strata
    s = ds.s
    y = ds.y.astype(float)
    n_s = np.bincount(s - 1, minlength=k).astype(float)
    p = {}
    u = {}
    for arm in (0, 1):
        ind = (ds.a == arm).astype(float)
        n_sa = np.bincount(s - 1, weights=ind, minlength=k)
        p[arm] = np.bincount(s - 1, weights=ind * y, minlength=k) / n_sa
        share = (n_sa / n_s)[s - 1]
        mu = p[arm][s - 1]
        u[arm] = mu + ind / share * (y - mu)
    return StratumRiskTable(p[0], p[1], n_s, "proportions", u[0], u[1], s.copy())


def pseudo_outcomes(ds: Dataset, nuisance: NuisanceSet) -> tuple[np.ndarray, np.ndarray]:
    """AIPW pseudo-outcomes ``U_a = mu_a + 1{A=a}/pi_a (Y - mu_a)`` for a = 0, 1."""
    for name in ("p0", "p1", "pi1"):
        arr = getattr(nuisance, name, None)
        if arr is None or arr.shape[0] != ds.n or not np.all(np.isfinite(arr)):
            raise MissingNuisance(f"nuisance {name} missing or non-finite")
    y = ds.y.astype(float)
    out = []
    for arm in (0, 1):
        ind = (ds.a == arm).astype(float)
        mu = nuisance.mu(arm)
        out.append(mu + ind / nuisance.pi(arm) * (y - mu))
    return out[0], out[1]


def risks_by_aipw(ds: Dataset, nuisance: NuisanceSet) -> StratumRiskTable:
    """Doubly robust risks: within-stratum means of the AIPW pseudo-outcomes."""
    u0, u1 = pseudo_outcomes(ds, nuisance)
    k = ds.n_strata
    n_s = np.bincount(ds.s - 1, minlength=k).astype(float)
    p0 = _stratum_means(u0, ds.s, k)
    p1 = _stratum_means(u1, ds.s, k)
    return StratumRiskTable(p0, p1, n_s, "aipw", u0, u1, ds.s.copy())


@dataclass(frozen=True)
class MarginalY0:
    mu0: float
    mu1: float

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.mu0, self.mu1])


def estimate_mu(risks: StratumRiskTable) -> MarginalY0:
    """``mu1 = sum_s pi_s p0(s)`` with ``pi_s = n_s/n``; ``mu0 = 1 - mu1``."""
    mu1 = float(np.dot(risks.share, risks.p0))
    return MarginalY0(1.0 - mu1, mu1)


def marginal_treated_risk(risks: StratumRiskTable) -> float:
    """Direct estimate of P(Y(1)=1)."""
    return float(np.dot(risks.share, risks.p1))
