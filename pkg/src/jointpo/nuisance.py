"""Nuisance regressions: B-splines, logistic IRLS, cross-fitting, prognostic score."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from ._rng import TAG_FOLDS, stream
from .data import Dataset
from .errors import (
    FoldArmEmpty,
    KnotOrderError,
    OutOfSupportWarning,
    SeparationWarning,
    UnknownColumn,
    ValidationError,
)

# ---------------------------------------------------------------------------
# splines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplineBasis:
    """Clamped B-spline basis on ``[lower, upper]`` with the given interior knots."""

    degree: int
    knots: tuple[float, ...]
    lower: float
    upper: float

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be >= 0")
        if not self.lower < self.upper:
            raise KnotOrderError("boundary knots must satisfy lower < upper")
        k = np.asarray(self.knots, dtype=float)
        if k.size and (np.any(np.diff(k) <= 0)):
            raise KnotOrderError(f"interior knots must be strictly increasing, got {self.knots}")
        if k.size and (k[0] <= self.lower or k[-1] >= self.upper):
            raise KnotOrderError("interior knots must lie strictly inside the boundary")

    @property
    def knot_vector(self) -> np.ndarray:
        d = self.degree
        return np.r_[[self.lower] * (d + 1), self.knots, [self.upper] * (d + 1)].astype(float)

    @property
    def n_basis(self) -> int:
        return len(self.knots) + self.degree + 1

    def _checked(self, x) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=float)
        outside = (x < self.lower) | (x > self.upper)
        if outside.any():
            warnings.warn(
                f"{int(outside.sum())} points outside [{self.lower:g}, {self.upper:g}] clamped to the boundary",
                OutOfSupportWarning,
                stacklevel=3,
            )
        return x

    def __call__(self, x) -> np.ndarray:
        return _kernels.bspline_basis(self._checked(x), self.knot_vector, self.degree)

    def local(self, x):
        """Banded form ``(offset, values)``: the ``degree + 1`` non-zero entries per row."""
        return _kernels.bspline_local(self._checked(x), self.knot_vector, self.degree)


def spline_basis(x, degree: int, knots, lower: float | None = None, upper: float | None = None) -> np.ndarray:
    """Evaluate a clamped B-spline basis (columns sum to one inside the support).

    Boundary knots default to the range of ``x``.
    """
    x = np.asarray(x, dtype=float)
    lo = float(x.min()) if lower is None else lower
    hi = float(x.max()) if upper is None else upper
    return SplineBasis(degree, tuple(float(k) for k in knots), lo, hi)(x)


def default_spline(x, degree: int = 3, probs=(0.25, 0.5, 0.75)) -> SplineBasis:
    """Spline with interior knots at sample quantiles of ``x`` and boundary at its range."""
    x = np.asarray(x, dtype=float)
    lo, hi = float(x.min()), float(x.max())
    knots = np.unique(np.quantile(x, probs)) if len(probs) else np.array([])
    knots = knots[(knots > lo) & (knots < hi)]
    return SplineBasis(degree, tuple(knots.tolist()), lo, hi)


# ---------------------------------------------------------------------------
# logistic regression
# ---------------------------------------------------------------------------


@dataclass
class LogisticModel:
    coefficients: np.ndarray
    converged: bool
    iterations: int
    separated: bool = False
    loglik_path: list = field(default_factory=list, repr=False)

    def predict(self, design) -> np.ndarray:
        return _kernels._expit_np(np.asarray(design, dtype=float) @ self.coefficients)


def fit_logistic(design, y, ridge: float = 1e-6, max_iter: int = 100, tol: float = 1e-8, start=None) -> LogisticModel:
    """Maximise the ridge-penalised logistic log-likelihood by Newton/IRLS.

    Args:
        design: ``(n, p)`` design matrix (include an intercept column yourself).
        y: binary response.
        ridge: L2 penalty ``ridge/2 * ||coef||^2``.
        max_iter: Newton iteration cap.
        tol: convergence threshold on the max-abs penalised gradient.

    With ``ridge == 0`` a diverging fit (max |coef| above 30) stops early and
    comes back with ``separated=True`` rather than raising.
    """
    X = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0] or X.shape[0] == 0:
        raise ValidationError("design and response do not conform")
    if ridge < 0:
        raise ValueError("ridge must be >= 0")
    coef, conv, it, sep, path = _kernels.irls_numpy(X, y, ridge, tol, max_iter, start)
    if sep:
        warnings.warn("logistic fit diverging: likely separation", SeparationWarning, stacklevel=2)
    return LogisticModel(coef, conv, it, sep, path)


# ---------------------------------------------------------------------------
# nuisance specs and cross-fitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OutcomeModelSpec:
    """Per-arm logistic outcome model in (S, V_S).

    With ``vs_column=None`` the model is saturated in S. Otherwise V_S enters
    through a B-spline basis; ``interaction=True`` fits a separate spline per
    stratum (the full S x spline interaction), ``False`` an additive model.
    ``knots``/``bounds`` pin the basis; by default knots sit at quantiles
    ``knot_probs`` of V_S.
    """

    vs_column: str | None = None
    degree: int = 3
    knot_probs: tuple[float, ...] = (0.25, 0.5, 0.75)
    interaction: bool = True
    ridge: float = 1e-6
    knots: tuple[float, ...] | None = None
    bounds: tuple[float, float] | None = None

    def basis_for(self, ds: Dataset) -> SplineBasis | None:
        if self.vs_column is None:
            return None
        x = ds.column(self.vs_column)
        if self.knots is not None:
            lo, hi = self.bounds if self.bounds is not None else (float(x.min()), float(x.max()))
            return SplineBasis(self.degree, tuple(self.knots), lo, hi)
        return default_spline(x, self.degree, self.knot_probs)

    def pinned(self, ds: Dataset) -> "OutcomeModelSpec":
        """Copy with knots and bounds frozen at their values on ``ds``."""
        b = self.basis_for(ds)
        if b is None:
            return self
        return replace(self, knots=b.knots, bounds=(b.lower, b.upper))


@dataclass(frozen=True)
class PropensitySpec:
    """``known`` (constant ``value``), ``arm-share`` or ``logistic`` (same design as the outcome model)."""

    kind: str = "known"
    value: float = 0.5
    clip: float = 0.01

    @classmethod
    def known(cls, c: float, clip: float = 0.01) -> "PropensitySpec":
        return cls("known", c, clip)


@dataclass
class NuisanceSet:
    p0: np.ndarray
    p1: np.ndarray
    pi1: np.ndarray
    fold: np.ndarray
    n_folds: int
    eps: float
    outcome_spec: OutcomeModelSpec | None = None
    propensity_spec: PropensitySpec | None = None

    @property
    def pi0(self) -> np.ndarray:
        return 1.0 - self.pi1

    def mu(self, a: int) -> np.ndarray:
        return self.p1 if a == 1 else self.p0

    def pi(self, a: int) -> np.ndarray:
        return self.pi1 if a == 1 else self.pi0


def assign_folds(ds: Dataset, k: int, seed: int = 0) -> np.ndarray:
    """Fold index per row; whole clusters share a fold, stratified by the (s, a) cell of their first row."""
    if k < 1:
        raise ValidationError("need at least one fold")
    cl = ds.cluster_ids()
    if k == 1:
        return np.zeros(ds.n, dtype=np.int64)
    n_cl = int(cl.max()) + 1
    first = np.full(n_cl, -1, dtype=np.int64)
    idx = np.arange(ds.n)[::-1]
    first[cl[idx]] = idx  # reversed assignment keeps the first occurrence
    cell = (ds.s[first] - 1) * 2 + ds.a[first]
    rng = stream(seed, TAG_FOLDS)
    perm = rng.permutation(n_cl)
    order = perm[np.argsort(cell[perm], kind="stable")]
    cl_fold = np.empty(n_cl, dtype=np.int64)
    cl_fold[order] = np.arange(n_cl) % k
    return cl_fold[cl]


def _group_index(groups: np.ndarray, n_groups: int):
    order = np.argsort(groups, kind="stable").astype(np.int64)
    starts = np.searchsorted(groups[order], np.arange(n_groups + 1)).astype(np.int64)
    return order, starts


def _crossfit_blocks(local, y, train, groups, n_groups, fold, k, ridge):
    off, vals, m = local
    order, starts = _group_index(groups, n_groups)
    pred, _, _, sizes = _kernels.crossfit_blocks(
        np.ascontiguousarray(off, dtype=np.int64),
        np.ascontiguousarray(vals, dtype=float),
        int(m),
        np.ascontiguousarray(y, dtype=float),
        np.ascontiguousarray(train, dtype=np.bool_),
        order,
        starts,
        np.ascontiguousarray(fold, dtype=np.int64),
        k,
        float(ridge),
        1e-8,
        100,
    )
    # every (group, fold) with rows to predict needs training rows
    for g in range(n_groups):
        members = order[starts[g] : starts[g + 1]]
        for f in range(k):
            if sizes[g, f] == 0 and (k == 1 or np.any(fold[members] == f)):
                raise FoldArmEmpty(f"no training rows for stratum {g + 1} when predicting fold {f}")
    return pred


def _crossfit_general(X, y, train, fold, k, ridge):
    pred = np.empty(X.shape[0])
    for f in range(k):
        tr = train & ((fold != f) if k > 1 else True)
        if not tr.any():
            raise FoldArmEmpty(f"no training rows when predicting fold {f}")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SeparationWarning)
            m = fit_logistic(X[tr], y[tr], ridge)
        te = (fold == f) if k > 1 else np.ones(X.shape[0], dtype=bool)
        pred[te] = m.predict(X[te])
    return pred


def outcome_design(ds: Dataset, spec: OutcomeModelSpec):
    """Return ``(design, blockwise)``.

    For the interacted/saturated model the fit decomposes into independent
    per-stratum blocks and ``design`` is the banded basis ``(offset, values,
    n_basis)``; otherwise it is a full additive design matrix.
    """
    basis = spec.basis_for(ds)
    if basis is None:
        return (np.zeros(ds.n, dtype=np.int64), np.ones((ds.n, 1)), 1), True
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OutOfSupportWarning)
        if spec.interaction:
            off, vals = basis.local(ds.column(spec.vs_column))
            return (off, vals, basis.n_basis), True
        B = basis(ds.column(spec.vs_column))
    onehot = (ds.s[:, None] == np.arange(1, ds.n_strata + 1)[None, :]).astype(float)
    return np.hstack([onehot, B[:, 1:]]), False


def fit_nuisances(
    ds: Dataset,
    outcome: OutcomeModelSpec = OutcomeModelSpec(),
    propensity: PropensitySpec = PropensitySpec(),
    folds: int = 5,
    seed: int = 0,
    fold_index: np.ndarray | None = None,
) -> NuisanceSet:
    """Cross-fitted outcome regressions and propensities for every row.

    ``folds=1`` fits on the full sample (no sample splitting). Each row's
    prediction comes from models that never saw that row's fold.
    """
    if folds < 1:
        raise ValidationError("folds must be >= 1")
    fold = assign_folds(ds, folds, seed) if fold_index is None else np.asarray(fold_index, dtype=np.int64)
    M, blockwise = outcome_design(ds, outcome)
    g = ds.s - 1
    y = ds.y.astype(float)
    preds = {}
    for arm in (0, 1):
        train = ds.a == arm
        if blockwise:
            preds[arm] = _crossfit_blocks(M, y, train, g, ds.n_strata, fold, folds, outcome.ridge)
        else:
            preds[arm] = _crossfit_general(M, y, train, fold, folds, outcome.ridge)
    eps = propensity.clip
    if propensity.kind == "known":
        pi1 = np.full(ds.n, float(propensity.value))
    elif propensity.kind == "arm-share":
        pi1 = np.full(ds.n, ds.a.mean())
    elif propensity.kind == "logistic":
        everyone = np.ones(ds.n, dtype=bool)
        a = ds.a.astype(float)
        if blockwise:
            pi1 = _crossfit_blocks(M, a, everyone, g, ds.n_strata, fold, folds, outcome.ridge)
        else:
            pi1 = _crossfit_general(M, a, everyone, fold, folds, outcome.ridge)
    else:
        raise ValidationError(f"unknown propensity kind {propensity.kind!r}")
    pi1 = np.clip(pi1, eps, 1.0 - eps)
    return NuisanceSet(preds[0], preds[1], pi1, fold, folds, eps, outcome, propensity)


# ---------------------------------------------------------------------------
# prognostic score
# ---------------------------------------------------------------------------


@dataclass
class PrognosticScore:
    model: LogisticModel
    predictors: tuple[str, ...]
    score: np.ndarray

    def design(self, ds: Dataset) -> np.ndarray:
        return np.column_stack([np.ones(ds.n)] + [ds.column(c) for c in self.predictors])


def prognostic_score(ds: Dataset, predictors, ridge: float = 1e-6) -> PrognosticScore:
    """Fit P(Y=1 | predictors) on the control arm and score every row."""
    predictors = tuple(predictors)
    for c in predictors:
        if c not in ds.columns:
            raise UnknownColumn(f"unknown predictor column {c!r}")
    ctrl = ds.a == 0
    if not ctrl.any():
        raise ValidationError("control arm is empty")
    X = np.column_stack([np.ones(ds.n)] + [ds.column(c) for c in predictors])
    model = fit_logistic(X[ctrl], ds.y[ctrl], ridge)
    return PrognosticScore(model, predictors, model.predict(X))
