"""Least-squares identification of theta, its sandwich variance, the joint law and sensitivity."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateTheta, RankDeficient
from .risk import MarginalY0, StratumRiskTable

CELL_NAMES = ("P(Y0=0,Y1=0)", "P(Y0=0,Y1=1)", "P(Y0=1,Y1=0)", "P(Y0=1,Y1=1)")


@dataclass
class ThetaEstimate:
    """theta1 = P(Y(1)=1 | Y(0)=0), theta2 = P(Y(1)=1 | Y(0)=1)."""

    theta: np.ndarray
    covariance: np.ndarray | None = None
    influence: np.ndarray | None = field(default=None, repr=False)

    @property
    def theta1(self) -> float:
        return float(self.theta[0])

    @property
    def theta2(self) -> float:
        return float(self.theta[1])

    @property
    def boundary(self) -> bool:
        return bool(self.theta.min() < 0.0 or self.theta.max() > 1.0)

    @property
    def se(self) -> np.ndarray | None:
        if self.covariance is None:
            return None
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def clamped(self) -> np.ndarray:
        """Point estimate projected onto [0, 1]; for display only."""
        return np.clip(self.theta, 0.0, 1.0)


@dataclass(frozen=True)
class RankDiagnostic:
    full: bool
    sigma_min: float
    sigma_max: float

    @property
    def status(self) -> str:
        return "full" if self.full else "deficient"

    @property
    def condition_number(self) -> float:
        return self.sigma_max / self.sigma_min if self.sigma_min > 0 else float("inf")


def design_rows(p0) -> np.ndarray:
    p0 = np.asarray(p0, dtype=float)
    return np.column_stack([1.0 - p0, p0])


def check_rank(risks: StratumRiskTable | np.ndarray, tol: float = 1e-8) -> RankDiagnostic:
    """Singular values of the |S| x 2 matrix with rows (1 - p0(s), p0(s)).

    Deficient iff ``sigma_min <= tol * sigma_max``.
    """
    p0 = risks.p0 if isinstance(risks, StratumRiskTable) else np.asarray(risks, dtype=float)
    if p0.shape[0] < 2:
        return RankDiagnostic(False, 0.0, float(np.linalg.norm(design_rows(p0))))
    sv = np.linalg.svd(design_rows(p0), compute_uv=False)
    return RankDiagnostic(bool(sv[-1] > tol * sv[0]), float(sv[-1]), float(sv[0]))


def _stratum_weights(risks: StratumRiskTable, weights) -> np.ndarray:
    k = risks.n_strata
    if weights is None or (isinstance(weights, str) and weights == "uniform"):
        return np.full(k, 1.0 / k)
    if isinstance(weights, str) and weights == "share":
        return risks.share
    w = np.asarray(weights, dtype=float)
    return w / w.sum()


def _offsets(risks: StratumRiskTable, gamma) -> np.ndarray:
    if gamma is None:
        return np.zeros(risks.n_strata)
    g = np.asarray(gamma, dtype=float)
    return g[:, 0] * (1.0 - risks.p0) + g[:, 1] * risks.p0


def solve_theta(risks: StratumRiskTable, weights=None, gamma=None, tol: float = 1e-8) -> ThetaEstimate:
    """Least-squares solution of ``p1(s) = (1 - p0(s)) theta1 + p0(s) theta2``.

    Strata are weighted equally unless ``weights`` is ``"share"`` or an
    explicit vector. ``gamma`` (|S| x 2) subtracts the sensitivity offsets
    ``gamma[s,0] (1 - p0(s)) + gamma[s,1] p0(s)`` from ``p1(s)`` first.
    """
    diag = check_rank(risks, tol)
    if not diag.full:
        raise RankDeficient(f"risk matrix is rank deficient (sigma_min={diag.sigma_min:.3g})")
    w = _stratum_weights(risks, weights)
    Z = design_rows(risks.p0)
    target = risks.p1 - _offsets(risks, gamma)
    M = (Z * w[:, None]).T @ Z
    rhs = (Z * w[:, None]).T @ target
    return ThetaEstimate(np.linalg.solve(M, rhs))


def theta_influence(risks: StratumRiskTable, theta, weights=None, gamma=None) -> np.ndarray:
    """Per-row influence values of theta-hat (``n x 2``), so that
    ``theta_hat - theta ~= mean(influence)``.

    Each stratum risk contributes ``1{S=s}/pi_s (U_a - p_s^(a))``; the
    derivative of the stratum equation in p0 includes the residual term,
    which vanishes when the linear system fits exactly.
    """
    if risks.u0 is None or risks.u1 is None:
        raise ValueError("risk table carries no pseudo-outcomes")
    theta = np.asarray(theta, dtype=float)
    w = _stratum_weights(risks, weights)
    Z = design_rows(risks.p0)
    M = (Z * w[:, None]).T @ Z
    g = np.zeros((risks.n_strata, 2)) if gamma is None else np.asarray(gamma, dtype=float)
    resid = risks.p1 - _offsets(risks, gamma) - Z @ theta
    kappa = theta[1] - theta[0] + g[:, 1] - g[:, 0]
    s = risks.strata - 1
    share = risks.share
    d0 = risks.u0 - risks.p0[s]
    d1 = risks.u1 - risks.p1[s]
    scale = (w / share)[s]
    dZ = np.array([-1.0, 1.0])
    psi = scale[:, None] * (Z[s] * (d1 - kappa[s] * d0)[:, None] + np.outer(resid[s] * d0, dZ))
    if isinstance(weights, str) and weights == "share":
        # estimated weights: d(pi_s) = 1{S=s} - pi_s
        psi += Z[s] * resid[s][:, None] - (w[:, None] * Z * resid[:, None]).sum(axis=0)
    return np.linalg.solve(M, psi.T).T


def theta_variance(risks: StratumRiskTable, theta: ThetaEstimate, weights=None, gamma=None) -> np.ndarray:
    """Sandwich covariance ``C^-1 Var(psi) C^-1 / n`` of theta-hat."""
    inf = theta_influence(risks, theta.theta, weights, gamma)
    n = inf.shape[0]
    centred = inf - inf.mean(axis=0)
    cov = centred.T @ centred / n / n
    return 0.5 * (cov + cov.T)


def estimate_theta(risks: StratumRiskTable, weights=None, gamma=None) -> ThetaEstimate:
    """Point estimate plus sandwich covariance and influence values."""
    est = solve_theta(risks, weights, gamma)
    if risks.u0 is not None:
        inf = theta_influence(risks, est.theta, weights, gamma)
        n = inf.shape[0]
        c = inf - inf.mean(axis=0)
        est.covariance = c.T @ c / n / n
        est.influence = inf
    return est


# ---------------------------------------------------------------------------
# joint distribution
# ---------------------------------------------------------------------------


@dataclass
class JointPODistribution:
    """Cells ordered (00, 01, 10, 11) for (Y(0), Y(1))."""

    cells: np.ndarray
    covariance: np.ndarray | None = None
    boundary: bool = False

    def as_dict(self) -> dict[str, float]:
        return dict(zip(CELL_NAMES, map(float, self.cells)))

    @property
    def se(self):
        if self.covariance is None:
            return None
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))


def joint_cells(eta) -> np.ndarray:
    """Cells as functions of ``eta = (theta1, theta2, mu0, mu1)``."""
    t1, t2, m0, m1 = eta
    return np.array([(1 - t1) * m0, t1 * m0, (1 - t2) * m1, t2 * m1])


def joint_gradients(eta) -> np.ndarray:
    """Rows are the gradients of the four cells with respect to eta."""
    t1, t2, m0, m1 = eta
    return np.array(
        [
            [-m0, 0.0, 1.0 - t1, 0.0],
            [m0, 0.0, t1, 0.0],
            [0.0, -m1, 0.0, 1.0 - t2],
            [0.0, m1, 0.0, t2],
        ]
    )


def joint_influence(theta_influence_rows: np.ndarray, u0: np.ndarray) -> np.ndarray:
    """Stacked influence of (theta1, theta2, mu0, mu1); mu1-hat is the mean of U0."""
    d = u0 - u0.mean()
    return np.column_stack([theta_influence_rows, -d, d])


def influence_covariance(inf: np.ndarray) -> np.ndarray:
    n = inf.shape[0]
    c = inf - inf.mean(axis=0)
    return c.T @ c / n / n


def joint_distribution(theta: ThetaEstimate, mu: MarginalY0, omega: np.ndarray | None = None) -> JointPODistribution:
    """Joint law of (Y(0), Y(1)) with delta-method covariance ``G omega G^T``."""
    eta = np.r_[theta.theta, mu.mu0, mu.mu1]
    cells = joint_cells(eta)
    cov = None
    if omega is not None:
        G = joint_gradients(eta)
        cov = G @ omega @ G.T
    return JointPODistribution(cells, cov, theta.boundary)


# ---------------------------------------------------------------------------
# sensitivity and consistency
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SensitivitySpec:
    """``gamma[s-1, y]`` = P(Y(1)=1 | Y(0)=y, S=s) - P(Y(1)=1 | Y(0)=y)."""

    gamma: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=float)
        if g.ndim != 2 or g.shape[1] != 2 or not np.all(np.isfinite(g)):
            raise ValueError("gamma must be a fully specified |S| x 2 array")
        object.__setattr__(self, "gamma", g)

    @classmethod
    def zeros(cls, n_strata: int) -> "SensitivitySpec":
        return cls(np.zeros((n_strata, 2)))


def solve_theta_sensitivity(risks: StratumRiskTable, spec: SensitivitySpec, weights=None) -> ThetaEstimate:
    if spec.gamma.shape[0] != risks.n_strata:
        raise ValueError(f"gamma has {spec.gamma.shape[0]} strata, risks have {risks.n_strata}")
    if not np.any(spec.gamma):
        return estimate_theta(risks, weights)
    return estimate_theta(risks, weights, spec.gamma)


def sensitivity_sweep(risks: StratumRiskTable, specs, weights=None) -> list[ThetaEstimate]:
    return [solve_theta_sensitivity(risks, sp, weights) for sp in specs]


@dataclass(frozen=True)
class ConsistencyCheck:
    implied_mu1: float
    direct_mu1: float

    @property
    def discrepancy(self) -> float:
        return self.implied_mu1 - self.direct_mu1


def consistency_check(theta: ThetaEstimate, mu: MarginalY0, p1_marginal: float) -> ConsistencyCheck:
    """Implied P(Y(0)=1) from ``P(Y(1)=1) = theta1 mu0 + theta2 mu1``."""
    t1, t2 = theta.theta
    if abs(t2 - t1) < 1e-12:
        raise DegenerateTheta("theta1 == theta2: P(Y(0)=1) is not recoverable")
    return ConsistencyCheck((p1_marginal - t1) / (t2 - t1), mu.mu1)
