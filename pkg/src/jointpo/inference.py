"""Bootstrap (row or cluster), delta method and interval reports."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from ._rng import TAG_BOOT, stream
from .data import Dataset
from .errors import (
    ConfigError,
    DimensionMismatch,
    EmptyStratumArm,
    EstimationError,
    FoldArmEmpty,
    TooManyFailedReplicates,
)

# failures that drop a replicate instead of aborting the bootstrap
REPLICATE_FAILURES = (EstimationError, EmptyStratumArm, FoldArmEmpty)


def default_threads() -> int:
    """Worker count from ``JOINTPO_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("JOINTPO_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class BootstrapPlan:
    B: int = 500
    mode: str = "iid-rows"
    seed: int = 0
    ci_type: str = "percentile"
    level: float = 0.95
    max_failure_rate: float = 0.10

    def __post_init__(self):
        if self.B < 2:
            raise ConfigError("bootstrap needs B >= 2")
        if self.mode not in ("iid-rows", "cluster"):
            raise ConfigError(f"unknown bootstrap mode {self.mode!r}")
        if self.ci_type not in ("percentile", "normal"):
            raise ConfigError(f"unknown interval type {self.ci_type!r}")


@dataclass
class IntervalReport:
    """Point, SE and interval per target. ``method`` tags how intervals were built."""

    names: tuple[str, ...]
    point: np.ndarray
    se: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    method: str
    boundary: np.ndarray | None = None
    n_failed: int = 0
    replicates: np.ndarray | None = field(default=None, repr=False)

    def rows(self) -> list[dict]:
        out = []
        for j, name in enumerate(self.names):
            out.append(
                {
                    "target": name,
                    "point": float(self.point[j]),
                    "se": float(self.se[j]),
                    "lower": float(self.lower[j]),
                    "upper": float(self.upper[j]),
                    "level": self.level,
                    "method": self.method,
                    "boundary": bool(self.boundary[j]) if self.boundary is not None else False,
                }
            )
        return out

    def interval(self, kind: str | None = None):
        """``(lower, upper)``; ``kind="normal"`` rebuilds normal intervals from the SEs."""
        if kind is None or kind == self.ci_type:
            return self.lower, self.upper
        if kind == "normal":
            return normal_interval(self.point, self.se, self.level)
        if kind == "percentile" and self.replicates is not None:
            return percentile_interval(self.replicates, self.level)
        raise ValueError(f"interval kind {kind!r} not available")

    @property
    def ci_type(self) -> str:
        return "percentile" if self.method.endswith("percentile") else "normal"


def normal_interval(point, se, level: float = 0.95):
    z = norm.ppf(0.5 + level / 2)
    point = np.asarray(point, dtype=float)
    se = np.asarray(se, dtype=float)
    return point - z * se, point + z * se


def percentile_interval(replicates: np.ndarray, level: float = 0.95):
    alpha = (1.0 - level) / 2
    q = np.quantile(replicates, [alpha, 1.0 - alpha], axis=0, method="linear")
    return q[0], q[1]


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClusterLayout:
    """Rows grouped by cluster, clusters numbered by first appearance."""

    order: np.ndarray
    starts: np.ndarray

    @property
    def n_clusters(self) -> int:
        return len(self.starts) - 1

    @classmethod
    def of(cls, ds: Dataset) -> "ClusterLayout":
        codes = ds.cluster_ids()
        _, first = np.unique(codes, return_index=True)
        rank = np.empty(len(first), dtype=np.int64)
        rank[np.argsort(first, kind="stable")] = np.arange(len(first))
        c = rank[codes]
        order = np.argsort(c, kind="stable")
        starts = np.searchsorted(c[order], np.arange(len(first) + 1))
        return cls(order, starts)


def resample_indices(layout: ClusterLayout | int, rng: np.random.Generator):
    """Row indices of one resample and the replicate's cluster labels.

    An integer ``layout`` means iid rows. Drawn clusters are relabelled by
    draw position so a cluster drawn twice becomes two clusters.
    """
    if isinstance(layout, (int, np.integer)):
        idx = rng.integers(0, layout, size=layout)
        return idx, np.arange(layout)
    draw = rng.integers(0, layout.n_clusters, size=layout.n_clusters)
    sizes = layout.starts[draw + 1] - layout.starts[draw]
    total = int(sizes.sum())
    ends = np.cumsum(sizes)
    shift = np.repeat(layout.starts[draw] - (ends - sizes), sizes)
    idx = layout.order[shift + np.arange(total)]
    return idx, np.repeat(np.arange(layout.n_clusters), sizes)


def replicate_indices(ds: Dataset, plan: BootstrapPlan, b: int):
    """Indices of replicate ``b``; regenerable on its own from ``(seed, b)``."""
    rng = stream(plan.seed, TAG_BOOT, b)
    if plan.mode == "cluster":
        if ds.cluster is None:
            raise ConfigError("cluster bootstrap needs cluster ids")
        return resample_indices(ClusterLayout.of(ds), rng)
    return resample_indices(ds.n, rng)


def bootstrap(ds: Dataset, estimator, plan: BootstrapPlan, names=None, n_jobs: int | None = None, point=None) -> IntervalReport:
    """Nonparametric bootstrap of ``estimator(dataset) -> vector``.

    Replicates raising an estimation failure (or returning non-finite values)
    are dropped and counted; more than ``plan.max_failure_rate`` of them
    raises :class:`TooManyFailedReplicates`. SE is the replicate standard
    deviation; percentile intervals use linear (type-7) quantiles.
    """
    point = np.atleast_1d(np.asarray(estimator(ds) if point is None else point, dtype=float))
    layout = None
    if plan.mode == "cluster":
        if ds.cluster is None:
            raise ConfigError("cluster bootstrap needs cluster ids")
        layout = ClusterLayout.of(ds)

    def one(b):
        rng = stream(plan.seed, TAG_BOOT, b)
        idx, cl = resample_indices(layout if layout is not None else ds.n, rng)
        rep = ds.take(idx, cluster=cl if layout is not None else None)
        try:
            val = np.atleast_1d(np.asarray(estimator(rep), dtype=float))
        except REPLICATE_FAILURES:
            return None
        return val if val.shape == point.shape and np.all(np.isfinite(val)) else None

    jobs = n_jobs or default_threads()
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(one, range(plan.B)))
    else:
        results = [one(b) for b in range(plan.B)]
    kept = [r for r in results if r is not None]  # already in replicate order
    n_failed = plan.B - len(kept)
    if n_failed > plan.max_failure_rate * plan.B or len(kept) < 2:
        raise TooManyFailedReplicates(f"{n_failed} of {plan.B} bootstrap replicates failed")
    reps = np.vstack(kept)
    se = reps.std(axis=0, ddof=1)
    if plan.ci_type == "percentile":
        lo, hi = percentile_interval(reps, plan.level)
        method = "bootstrap-percentile"
    else:
        lo, hi = normal_interval(point, se, plan.level)
        method = "bootstrap-normal"
    names = tuple(names) if names is not None else tuple(f"t{j}" for j in range(point.size))
    return IntervalReport(names, point, se, lo, hi, plan.level, method, None, n_failed, reps)


def delta_method(point, omega, transform=None, gradient=None, names=None, level: float = 0.95) -> IntervalReport:
    """Normal intervals for ``transform(point)`` with variance ``G omega G'``.

    ``gradient(point)`` returns the ``m x d`` Jacobian of the transform. With
    neither given the transform is the identity.
    """
    point = np.atleast_1d(np.asarray(point, dtype=float))
    omega = np.atleast_2d(np.asarray(omega, dtype=float))
    d = point.size
    if omega.shape != (d, d):
        raise DimensionMismatch(f"covariance is {omega.shape}, point has {d} entries")
    value = point if transform is None else np.atleast_1d(np.asarray(transform(point), dtype=float))
    G = np.eye(d) if gradient is None else np.atleast_2d(np.asarray(gradient(point), dtype=float))
    if G.shape != (value.size, d):
        raise DimensionMismatch(f"gradient is {G.shape}, expected {(value.size, d)}")
    var = np.einsum("ij,jk,ik->i", G, omega, G)
    se = np.sqrt(np.clip(var, 0.0, None))
    lo, hi = normal_interval(value, se, level)
    names = tuple(names) if names is not None else tuple(f"t{j}" for j in range(value.size))
    return IntervalReport(names, value, se, lo, hi, level, "sandwich-normal")
