"""Covariate-conditional model for P(Y(1)=1 | Y(0), V_S) and its Neyman-orthogonal estimator.

The structural model is

    P(Y(1)=1 | Y(0)=0, V_S=v) = g(b(v)'beta),  P(Y(1)=1 | Y(0)=1, V_S=v) = h(b(v)'lambda)

with g = h = identity (linear link) or expit (logistic link). The score for
xi = (beta, lambda) is

    psi = Z * R,
    Z   = ((1 - q) g' b, q h' b),
    R   = r + A/pi1 (Y - r) - [g (1 - q) + h q] + (g - h) (1 - A)/pi0 (Y - q)

where q, r are the control/treated outcome regressions. For the linear link
``g - h = b'(beta - lambda)`` and the bracket equals ``Z'xi``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .data import Dataset
from .errors import (
    InsufficientGrid,
    NonConvergence,
    SingularJacobian,
    SingularNormalEquations,
    ValidationError,
    WeakIdentificationWarning,
)
from .ls import ThetaEstimate
from .nuisance import NuisanceSet, SplineBasis

_LINKS = {"linear": _kernels.LINK_LINEAR, "logistic": _kernels.LINK_LOGISTIC}


@dataclass(frozen=True)
class LinkSpec:
    """Link plus basis ``b(v)`` for a single covariate column.

    ``basis`` is ``"affine"`` for b(v) = (1, v), ``"constant"`` for b(v) = (1)
    or ``"spline"`` for a B-spline of v (``degree``, ``knots``, ``bounds``).
    """

    kind: str = "linear"
    vs_column: str | None = None
    basis: str = "affine"
    degree: int = 3
    knots: tuple[float, ...] = ()
    bounds: tuple[float, float] | None = None

    def __post_init__(self):
        if self.kind not in _LINKS:
            raise ValidationError(f"unknown link {self.kind!r}")
        if self.basis not in ("affine", "constant", "spline"):
            raise ValidationError(f"unknown basis {self.basis!r}")

    @property
    def code(self) -> int:
        return _LINKS[self.kind]

    def design(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float).reshape(-1)
        if self.basis == "constant":
            return np.ones((v.shape[0], 1))
        if self.basis == "affine":
            return np.column_stack([np.ones_like(v), v])
        lo, hi = self.bounds if self.bounds is not None else (float(v.min()), float(v.max()))
        return SplineBasis(self.degree, tuple(self.knots), lo, hi)(v)

    def design_for(self, ds: Dataset) -> np.ndarray:
        if self.basis == "constant":
            return np.ones((ds.n, 1))
        if self.vs_column is None:
            raise ValidationError("link basis needs a V_S column")
        return self.design(ds.column(self.vs_column))

    def derivatives(self, x):
        """``(g, g', g'')`` at linear predictor ``x``."""
        return _kernels.link_np(x, self.code)


@dataclass
class ScoreInputs:
    """Everything the score needs, row-aligned."""

    B: np.ndarray
    q: np.ndarray
    r: np.ndarray
    a: np.ndarray
    y: np.ndarray
    pi1: np.ndarray
    pi0: np.ndarray

    @classmethod
    def build(cls, ds: Dataset, nuisance: NuisanceSet, link: LinkSpec) -> "ScoreInputs":
        f = lambda x: np.ascontiguousarray(x, dtype=float)
        return cls(
            f(link.design_for(ds)),
            f(nuisance.p0),
            f(nuisance.p1),
            f(ds.a),
            f(ds.y),
            f(nuisance.pi1),
            f(nuisance.pi0),
        )

    @property
    def p(self) -> int:
        return self.B.shape[1]

    @property
    def n(self) -> int:
        return self.B.shape[0]


def _split(xi, p):
    xi = np.ascontiguousarray(xi, dtype=float)
    return xi[:p].copy(), xi[p:].copy()


def score(inputs: ScoreInputs, xi, link: LinkSpec):
    """Per-row scores (``n x 2p``) and the mean Jacobian ``d mean(psi) / d xi``."""
    beta, lam = _split(xi, inputs.p)
    return _kernels.ortho_score(
        inputs.B, inputs.q, inputs.r, inputs.a, inputs.y, inputs.pi1, inputs.pi0, beta, lam, link.code
    )


def psi_score(b, a, y, q, r, pi1, xi, link: LinkSpec, pi0=None) -> np.ndarray:
    """Score of a single observation with basis row ``b``."""
    b = np.atleast_2d(np.asarray(b, dtype=float))
    one = lambda x: np.atleast_1d(np.asarray(x, dtype=float))
    pi0 = 1.0 - one(pi1) if pi0 is None else one(pi0)
    inp = ScoreInputs(b, one(q), one(r), one(a), one(y), one(pi1), pi0)
    return score(inp, xi, link)[0][0]


@dataclass
class XiEstimate:
    beta: np.ndarray
    lam: np.ndarray
    covariance: np.ndarray | None
    iterations: int
    converged: bool
    link: LinkSpec
    psi: np.ndarray | None = field(default=None, repr=False)
    jacobian: np.ndarray | None = field(default=None, repr=False)
    score_norm: float = float("nan")

    @property
    def xi(self) -> np.ndarray:
        return np.r_[self.beta, self.lam]

    @property
    def se(self):
        if self.covariance is None:
            return None
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def influence(self) -> np.ndarray:
        """Per-row influence values ``-C^{-1} psi_i`` (``n x 2p``)."""
        return -np.linalg.solve(self.jacobian, self.psi.T).T


# ---------------------------------------------------------------------------
# initializer
# ---------------------------------------------------------------------------


def _mean_model(B, q, xi, link):
    p = B.shape[1]
    g, g1, _ = link.derivatives(B @ xi[:p])
    h, h1, _ = link.derivatives(B @ xi[p:])
    m = g * (1 - q) + h * q
    J = np.hstack([((1 - q) * g1)[:, None] * B, (q * h1)[:, None] * B])
    return m, J


def ls_initializer(p0, p1, B, link: LinkSpec, max_iter: int = 50, tol: float = 1e-12) -> np.ndarray:
    """Least-squares fit of ``p1 ~ g(b'beta)(1 - p0) + h(b'lambda) p0`` over grid points.

    ``p0``, ``p1`` hold estimated risks at the (s, v) grid points whose basis
    rows are ``B``. Closed form for the linear link; Gauss-Newton otherwise.
    """
    B = np.asarray(B, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    d = 2 * B.shape[1]
    if B.shape[0] < d:
        raise InsufficientGrid(f"need at least {d} grid points, got {B.shape[0]}")
    X = np.hstack([(1 - p0)[:, None] * B, p0[:, None] * B])
    sv = np.linalg.svd(X, compute_uv=False)
    if sv[-1] <= 1e-10 * sv[0]:
        raise SingularNormalEquations("grid design is collinear")
    if link.kind == "linear":
        return np.linalg.lstsq(X, p1, rcond=None)[0]
    # Gauss-Newton from xi = 0 (every structural probability 1/2)
    xi = np.zeros(d)
    m, J = _mean_model(B, p0, xi, link)
    sse = np.sum((p1 - m) ** 2)
    for _ in range(max_iter):
        step = np.linalg.lstsq(J, p1 - m, rcond=None)[0]
        for _ in range(30):
            cand = xi + step
            m_c, J_c = _mean_model(B, p0, cand, link)
            sse_c = np.sum((p1 - m_c) ** 2)
            if sse_c <= sse:
                break
            step *= 0.5
        else:
            break
        done = sse - sse_c <= tol * max(sse, 1e-300)
        xi, m, J, sse = cand, m_c, J_c, sse_c
        if done:
            break
    return xi


# ---------------------------------------------------------------------------
# solver and variance
# ---------------------------------------------------------------------------


def _sandwich(psi, J):
    n = psi.shape[0]
    c = psi - psi.mean(axis=0)
    meat = c.T @ c / n
    Jinv = np.linalg.inv(J)
    cov = Jinv @ meat @ Jinv.T / n
    return 0.5 * (cov + cov.T)


def _check_jacobian(J):
    if not np.all(np.isfinite(J)):
        raise SingularJacobian("non-finite Jacobian")
    sv = np.linalg.svd(J, compute_uv=False)
    if sv[-1] <= 1e-12 * sv[0]:
        raise SingularJacobian(f"Jacobian is singular (condition {sv[0] / max(sv[-1], 1e-300):.3g})")


def solve_scores(inputs: ScoreInputs, link: LinkSpec, xi0=None, tol: float = 1e-10, max_iter: int = 100, max_halvings: int = 20) -> XiEstimate:
    """Damped Newton on ``mean(psi(xi)) = 0``."""
    p = inputs.p
    if xi0 is None:
        xi0 = ls_initializer(inputs.q, inputs.r, inputs.B, link)
    xi = np.array(xi0, dtype=float)
    near = (inputs.q < 0.01) | (inputs.q > 0.99)
    if near.mean() > 0.5:
        warnings.warn("more than half of the rows have control risk within 0.01 of 0 or 1", WeakIdentificationWarning, stacklevel=2)
    psi, J = score(inputs, xi, link)
    F = psi.mean(axis=0)
    norm = np.max(np.abs(F))
    it = 0
    while norm > tol and it < max_iter:
        _check_jacobian(J)
        step = -np.linalg.solve(J, F)
        for _ in range(max_halvings + 1):
            cand = xi + step
            psi_c, J_c = score(inputs, cand, link)
            F_c = psi_c.mean(axis=0)
            norm_c = np.max(np.abs(F_c))
            if np.isfinite(norm_c) and norm_c < norm:
                break
            step = 0.5 * step
        else:
            break
        xi, psi, J, F, norm = cand, psi_c, J_c, F_c, norm_c
        it += 1
    converged = bool(norm <= tol)
    _check_jacobian(J)
    cov = _sandwich(psi, J)
    return XiEstimate(xi[:p], xi[p:], cov, it, converged, link, psi, J, float(norm))


def solve_xi(ds: Dataset, nuisance: NuisanceSet, link: LinkSpec, xi0=None, tol: float = 1e-10, max_iter: int = 100, strict: bool = False) -> XiEstimate:
    """Solve the orthogonal estimating equation for xi = (beta, lambda).

    Without ``xi0`` the start comes from :func:`ls_initializer` on the rows'
    own (s, v) points. A non-converged solve returns the best iterate with
    ``converged=False`` (and a warning) unless ``strict`` is set, in which case
    it raises :class:`NonConvergence`.
    """
    est = solve_scores(ScoreInputs.build(ds, nuisance, link), link, xi0, tol, max_iter)
    if not est.converged:
        msg = f"orthogonal solve stopped at |mean psi| = {est.score_norm:.3g} after {est.iterations} iterations"
        if strict:
            raise NonConvergence(msg)
        warnings.warn(msg, stacklevel=2)
    return est


def xi_variance(ds: Dataset, xi, nuisance: NuisanceSet, link: LinkSpec) -> np.ndarray:
    """Sandwich covariance ``C^-1 Var(psi) C^-T / n`` at ``xi``.

    ``C`` is the analytic Jacobian of the mean score: ``-Z Z'`` plus, for a
    non-linear link, the residual-weighted second-derivative blocks, plus the
    derivative of the control-arm correction term.
    """
    xi = xi.xi if isinstance(xi, XiEstimate) else np.asarray(xi, dtype=float)
    psi, J = score(ScoreInputs.build(ds, nuisance, link), xi, link)
    _check_jacobian(J)
    return _sandwich(psi, J)


def standardize_theta(est: XiEstimate, B: np.ndarray) -> ThetaEstimate:
    """Average g(b(v_i)'beta) and h(b(v_i)'lambda) over the rows' basis values ``B``.

    The covariance propagates both the covariate sampling and xi-hat.
    """
    link = est.link
    g, g1, _ = link.derivatives(B @ est.beta)
    h, h1, _ = link.derivatives(B @ est.lam)
    theta = np.array([g.mean(), h.mean()])
    cov = inf = None
    if est.psi is not None and est.jacobian is not None and est.psi.shape[0] == B.shape[0]:
        xi_inf = est.influence()
        p = B.shape[1]
        dg = (g1[:, None] * B).mean(axis=0)
        dh = (h1[:, None] * B).mean(axis=0)
        inf = np.column_stack([g - theta[0] + xi_inf[:, :p] @ dg, h - theta[1] + xi_inf[:, p:] @ dh])
        n = inf.shape[0]
        c = inf - inf.mean(axis=0)
        cov = c.T @ c / n / n
    return ThetaEstimate(theta, cov, inf)


# ---------------------------------------------------------------------------
# orthogonality probe
# ---------------------------------------------------------------------------


@dataclass
class ProbeResult:
    component: str
    t: float
    derivative: np.ndarray
    se: np.ndarray

    @property
    def z(self) -> float:
        """Largest |derivative| / SE over score components."""
        return float(np.max(np.abs(self.derivative) / np.where(self.se > 0, self.se, np.inf)))


def _perturbed(inputs: ScoreInputs, component: str, delta: np.ndarray) -> ScoreInputs:
    kw = dict(vars(inputs))
    if component == "p0":
        kw["q"] = np.clip(inputs.q + delta, 0.0, 1.0)
    elif component == "p1":
        kw["r"] = np.clip(inputs.r + delta, 0.0, 1.0)
    elif component == "pi":
        pi1 = np.clip(inputs.pi1 + delta, 0.01, 0.99)
        kw["pi1"], kw["pi0"] = pi1, 1.0 - pi1
    else:
        raise ValueError(f"unknown nuisance component {component!r}")
    return ScoreInputs(**kw)


def orthogonality_probe(inputs: ScoreInputs, xi, link: LinkSpec, component: str, direction, t_grid=(0.5, 1.0)) -> list[ProbeResult]:
    """Symmetric-difference estimates of ``d/dt E[psi(xi, eta + t h)]`` at t = 0.

    ``component`` is ``"p0"``, ``"p1"``, ``"pi"`` (``direction`` is a per-row
    perturbation h) or ``"xi"`` (``direction`` is a vector in parameter space;
    the positive control). SEs come from the per-row difference quotients.
    """
    xi = np.asarray(xi, dtype=float)
    direction = np.asarray(direction, dtype=float)
    out = []
    for t in t_grid:
        if component == "xi":
            plus = score(inputs, xi + t * direction, link)[0]
            minus = score(inputs, xi - t * direction, link)[0]
        else:
            plus = score(_perturbed(inputs, component, t * direction), xi, link)[0]
            minus = score(_perturbed(inputs, component, -t * direction), xi, link)[0]
        d = (plus - minus) / (2.0 * t)
        n = d.shape[0]
        out.append(ProbeResult(component, float(t), d.mean(axis=0), d.std(axis=0, ddof=1) / np.sqrt(n)))
    return out
