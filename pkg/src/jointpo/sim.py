"""Simulation harness: a data-generating process with known truth and a Monte Carlo study runner.

Data-generating process (defaults):

    V_S     ~ Normal(0, 1) truncated to [-2, 2]          (rejection sampling)
    X_other = 0.25 V_S + Normal(0, 1)
    S       = sample quartile of X_other                 (1..4)
    A       ~ Bernoulli(expit(logit(0.5) + kappa V_S))   (kappa = 0: randomized)
    logit P(Y(0)=1 | S, V_S) = -0.5 + 0.3 (S - 2) + 0.2 V_S
    P(Y(1)=1 | Y(0)=0, V_S) = beta0 + beta1 V_S
    P(Y(1)=1 | Y(0)=1, V_S) = lambda0 + lambda1 V_S
    Y = (1 - A) Y(0) + A Y(1)
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy import integrate
from scipy.stats import norm

from ._kernels import _expit_np
from ._rng import TAG_DATA, stream
from .data import Dataset, StratumSpec, construct_stratum, make_dataset
from .errors import ConfigError, JointPOError, StructuralProbabilityOutOfRange
from .inference import default_threads

TARGETS = ("beta0", "beta1", "lambda0", "lambda1", "theta1", "theta2")


@dataclass(frozen=True)
class DGPConfig:
    n: int = 10_000
    seed: int = 0
    beta: tuple[float, float] = (0.3, 0.1)
    lam: tuple[float, float] = (0.7, -0.05)
    y0_intercept: float = -0.5
    y0_stratum_slope: float = 0.3
    y0_v_slope: float = 0.2
    x_slope: float = 0.25
    trunc: tuple[float, float] = (-2.0, 2.0)
    treat_prob: float = 0.5
    propensity_v_slope: float = 0.0
    structural_link: str = "linear"
    n_strata: int = 4

    def __post_init__(self):
        if self.n < 8:
            raise ConfigError("n must be at least 8")
        if not self.trunc[0] < self.trunc[1]:
            raise ConfigError("truncation bounds must satisfy lower < upper")
        if self.structural_link not in ("linear", "logistic"):
            raise ConfigError(f"unknown structural link {self.structural_link!r}")
        if not 0.0 < self.treat_prob < 1.0:
            raise ConfigError("treatment probability must lie in (0, 1)")

    @property
    def confounded(self) -> bool:
        return self.propensity_v_slope != 0.0

    def structural(self, v, which: int) -> np.ndarray:
        """P(Y(1)=1 | Y(0)=which, V_S=v)."""
        c0, c1 = self.beta if which == 0 else self.lam
        eta = c0 + c1 * np.asarray(v, dtype=float)
        return _expit_np(eta) if self.structural_link == "logistic" else eta

    def check(self) -> None:
        if self.structural_link == "logistic":
            return
        for which in (0, 1):
            ends = self.structural(np.array(self.trunc), which)
            if ends.min() < 0.0 or ends.max() > 1.0:
                name = "beta" if which == 0 else "lambda"
                raise StructuralProbabilityOutOfRange(f"{name} gives probabilities {ends} outside [0, 1] on the support")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DGPConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown DGP keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)


@dataclass
class SimulatedData:
    dataset: Dataset
    y0: np.ndarray
    y1: np.ndarray
    p_y0: np.ndarray
    propensity: np.ndarray

    @property
    def v(self) -> np.ndarray:
        return self.dataset.column("v_s")


def _truncated_normal(rng: np.random.Generator, n: int, lo: float, hi: float) -> np.ndarray:
    accept = norm.cdf(hi) - norm.cdf(lo)
    if accept < 1e-6:
        raise ConfigError("truncation interval has negligible normal mass")
    out = np.empty(n)
    filled = 0
    while filled < n:
        need = n - filled
        draw = rng.standard_normal(int(need / accept * 1.05) + 16)
        draw = draw[(draw >= lo) & (draw <= hi)][:need]
        out[filled : filled + draw.size] = draw
        filled += draw.size
    return out


def y0_probability(config: DGPConfig, s, v) -> np.ndarray:
    eta = config.y0_intercept + config.y0_stratum_slope * (np.asarray(s) - 2) + config.y0_v_slope * np.asarray(v)
    return _expit_np(eta)


def propensity(config: DGPConfig, v) -> np.ndarray:
    base = math.log(config.treat_prob / (1.0 - config.treat_prob))
    return _expit_np(base + config.propensity_v_slope * np.asarray(v, dtype=float))


def generate(config: DGPConfig, replicate: int = 0) -> SimulatedData:
    """One dataset from stream ``(seed, DATA, replicate)``; latent outcomes kept."""
    config.check()
    rng = stream(config.seed, TAG_DATA, replicate)
    n = config.n
    v = _truncated_normal(rng, n, *config.trunc)
    x = config.x_slope * v + rng.standard_normal(n)
    s, _ = construct_stratum({"x_other": x}, StratumSpec.quantile_bins("x_other", config.n_strata))
    pi = propensity(config, v)
    a = (rng.random(n) < pi).astype(np.int8)
    p0 = y0_probability(config, s, v)
    y0 = (rng.random(n) < p0).astype(np.int8)
    p1 = np.where(y0 == 1, config.structural(v, 1), config.structural(v, 0))
    y1 = (rng.random(n) < p1).astype(np.int8)
    y = np.where(a == 1, y1, y0)
    ds = make_dataset(a, y, s, np.column_stack([v, x]), ("v_s", "x_other"), n_strata=config.n_strata)
    return SimulatedData(ds, y0, y1, p0, pi)


def true_nuisances(config: DGPConfig, s, v):
    """Oracle ``(p0, p1, pi1)`` at rows ``(s, v)``."""
    q = y0_probability(config, s, v)
    r = (1.0 - q) * config.structural(v, 0) + q * config.structural(v, 1)
    return q, r, propensity(config, v)


def _trunc_density(config: DGPConfig):
    lo, hi = config.trunc
    mass = norm.cdf(hi) - norm.cdf(lo)
    return lambda v: norm.pdf(v) / mass


def oracle_targets(config: DGPConfig) -> dict[str, float]:
    """True (beta, lambda, theta1, theta2); thetas average the structural model over V_S."""
    dens = _trunc_density(config)
    lo, hi = config.trunc
    th = [integrate.quad(lambda v, w=w: float(config.structural(v, w)) * dens(v), lo, hi, epsabs=1e-13, epsrel=1e-12)[0] for w in (0, 1)]
    return {
        "beta0": config.beta[0],
        "beta1": config.beta[1],
        "lambda0": config.lam[0],
        "lambda1": config.lam[1],
        "theta1": th[0],
        "theta2": th[1],
    }


def truncated_mean(config: DGPConfig) -> float:
    dens = _trunc_density(config)
    return integrate.quad(lambda v: v * dens(v), *config.trunc, epsabs=1e-13)[0]


# ---------------------------------------------------------------------------
# Monte Carlo study
# ---------------------------------------------------------------------------


@dataclass
class TargetSummary:
    name: str
    true: float
    mean: float
    bias: float
    emp_se: float
    mean_se: float
    coverage: dict[str, float]


@dataclass
class MCReport:
    targets: list[TargetSummary]
    reps: int
    failures: int
    estimates: np.ndarray = field(repr=False)
    ses: np.ndarray = field(repr=False)
    names: tuple[str, ...] = TARGETS
    extra: dict = field(default_factory=dict)

    def summary(self, name: str) -> TargetSummary:
        for t in self.targets:
            if t.name == name:
                return t
        raise KeyError(name)

    def table(self) -> str:
        kinds = sorted({k for t in self.targets for k in t.coverage})
        head = f"{'target':<10}{'true':>9}{'mean':>9}{'bias':>9}{'emp SE':>9}{'mean SE':>9}" + "".join(f"{'cov ' + k:>16}" for k in kinds)
        lines = [head]
        for t in self.targets:
            cov = "".join(f"{t.coverage.get(k, float('nan')):>16.3f}" for k in kinds)
            lines.append(f"{t.name:<10}{t.true:>9.4f}{t.mean:>9.4f}{t.bias:>9.4f}{t.emp_se:>9.4f}{t.mean_se:>9.4f}{cov}")
        lines.append(f"replications: {self.reps}   failures: {self.failures}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        kinds = sorted({k for t in self.targets for k in t.coverage})
        w.writerow(["target", "true", "mean", "bias", "emp_se", "mean_se"] + [f"coverage_{k}" for k in kinds])
        for t in self.targets:
            w.writerow([t.name, t.true, t.mean, t.bias, t.emp_se, t.mean_se] + [t.coverage.get(k, "") for k in kinds])
        return buf.getvalue()

    def estimates_csv(self) -> str:
        """Per-replication estimates (the raw material for histograms)."""
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["replicate"] + list(self.names))
        for i, row in enumerate(self.estimates):
            w.writerow([i] + [repr(float(x)) for x in row])
        return buf.getvalue()


@dataclass
class ReplicateResult:
    """What one replication hands back to the aggregator."""

    estimate: np.ndarray
    se: np.ndarray
    intervals: dict[str, tuple[np.ndarray, np.ndarray]]
    extra: dict = field(default_factory=dict)


def summarize(results: list[ReplicateResult | None], truth: dict[str, float], names=TARGETS) -> MCReport:
    ok = [r for r in results if r is not None]
    failures = len(results) - len(ok)
    if not ok:
        raise JointPOError("every replication failed")
    est = np.vstack([r.estimate for r in ok])
    ses = np.vstack([r.se for r in ok])
    tv = np.array([truth[k] for k in names])
    kinds = sorted({k for r in ok for k in r.intervals})
    out = []
    for j, name in enumerate(names):
        cov = {}
        for k in kinds:
            hits = [(r.intervals[k][0][j] <= tv[j] <= r.intervals[k][1][j]) for r in ok if k in r.intervals]
            cov[k] = float(np.mean(hits)) if hits else float("nan")
        col = est[:, j]
        out.append(
            TargetSummary(
                name,
                float(tv[j]),
                float(col.mean()),
                float(col.mean() - tv[j]),
                float(col.std(ddof=1)) if len(col) > 1 else 0.0,
                float(np.nanmean(ses[:, j])),
                cov,
            )
        )
    extra = {}
    keys = sorted({k for r in ok for k in r.extra})
    for k in keys:
        extra[k] = np.vstack([np.atleast_1d(r.extra[k]) for r in ok if k in r.extra])
    return MCReport(out, len(ok), failures, est, ses, tuple(names), extra)


def run_study(config: DGPConfig, reps: int, estimator=None, n_jobs: int | None = None, progress=None) -> MCReport:
    """Monte Carlo study: ``reps`` independent datasets, each estimated by ``estimator``.

    ``estimator(sim: SimulatedData, replicate: int) -> ReplicateResult`` defaults to
    :class:`jointpo.pipeline.StudyEstimator` (cross-fitted spline nuisances,
    orthogonal linear-link solve, bootstrap intervals). Replications raising a
    package error are counted as failures.
    """
    if reps < 1:
        raise ConfigError("reps must be >= 1")
    if estimator is None:
        from .pipeline import StudyEstimator

        estimator = StudyEstimator()
    config.check()

    def one(r):
        sim = generate(config, r)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                res = estimator(sim, r)
        except JointPOError:
            res = None
        if progress is not None:
            progress(r)
        return res

    jobs = n_jobs or default_threads()
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(one, range(reps)))
    else:
        results = [one(r) for r in range(reps)]
    return summarize(results, oracle_targets(config))


def oracle_estimator(config: DGPConfig):
    """Estimator that returns the truth with zero-width intervals (harness self-test)."""
    truth = oracle_targets(config)
    tv = np.array([truth[k] for k in TARGETS])

    def est(sim, r):
        return ReplicateResult(tv.copy(), np.zeros_like(tv), {"exact": (tv.copy(), tv.copy())})

    return est


def confounded_config(**overrides) -> DGPConfig:
    """Variant where treatment depends on V_S and Y(1) depends on Y(0) only.

    The structural slopes are zero so effect modification by S acts only
    through Y(0); V_S carries a stronger Y(0) signal so stratum proportions
    are clearly confounded.
    """
    base = dict(beta=(0.3, 0.0), lam=(0.7, 0.0), y0_v_slope=1.0, propensity_v_slope=1.0)
    base.update(overrides)
    return DGPConfig(**base)


def with_n(config: DGPConfig, n: int) -> DGPConfig:
    return replace(config, n=n)
