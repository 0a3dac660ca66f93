"""Estimator sequencing, run configuration and reports.

``fit`` takes a stratified dataset through risk estimation, the chosen
estimator and the joint-law propagation. ``run`` wraps it with CSV
ingestion, stratum construction, an optional prognostic score, bootstrap
intervals and an optional sensitivity sweep, and returns a :class:`RunReport`.
"""

from __future__ import annotations

import csv
import json
import math
import platform
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from ._kernels import USE_NUMBA
from .data import Dataset, StratumSpec, make_dataset, stratify
from .errors import ConfigError, DegenerateTheta, UnknownColumn, ValidationError
from .inference import BootstrapPlan, IntervalReport, bootstrap, delta_method, normal_interval
from .ls import (
    CELL_NAMES,
    JointPODistribution,
    SensitivitySpec,
    ThetaEstimate,
    check_rank,
    consistency_check,
    estimate_theta,
    influence_covariance,
    joint_cells,
    joint_distribution,
    joint_gradients,
    joint_influence,
    sensitivity_sweep,
)
from .nuisance import NuisanceSet, OutcomeModelSpec, PropensitySpec, fit_nuisances, prognostic_score
from .orthogonal import LinkSpec, XiEstimate, solve_xi, standardize_theta
from .sim import ReplicateResult
from .risk import MarginalY0, StratumRiskTable, estimate_mu, marginal_treated_risk, risks_by_aipw, risks_by_proportion

ESTIMATORS = ("ls", "ls-adjusted", "orthogonal-linear", "orthogonal-logistic")
SCHEMA_VERSION = 1
THETA_NAMES = ("theta1", "theta2")


@dataclass(frozen=True)
class EstimatorConfig:
    """Which estimator to run and how to fit its nuisances.

    ``ls`` uses stratum sample proportions. ``ls-adjusted`` uses AIPW stratum
    risks (outcome model in S, plus V_S if ``vs_column`` is set). The
    orthogonal estimators need ``vs_column``.
    """

    estimator: str = "ls"
    vs_column: str | None = None
    outcome: OutcomeModelSpec = OutcomeModelSpec()
    propensity: PropensitySpec = PropensitySpec()
    folds: int = 5
    seed: int = 0
    link_basis: str = "affine"

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {self.estimator!r}; choose from {ESTIMATORS}")
        if self.orthogonal and self.vs_column is None:
            raise ConfigError(f"{self.estimator} needs a V_S source (--vs-column or --vs-prognostic)")
        if self.vs_column is not None and self.outcome.vs_column != self.vs_column:
            object.__setattr__(self, "outcome", replace(self.outcome, vs_column=self.vs_column))

    @property
    def orthogonal(self) -> bool:
        return self.estimator.startswith("orthogonal")

    @property
    def link(self) -> LinkSpec | None:
        if not self.orthogonal:
            return None
        return LinkSpec(self.estimator.split("-")[1], self.vs_column, self.link_basis)

    def pinned(self, ds: Dataset) -> "EstimatorConfig":
        """Freeze spline knots at their values on ``ds`` (used for bootstrap replicates)."""
        return replace(self, outcome=self.outcome.pinned(ds))


@dataclass
class Fit:
    config: EstimatorConfig
    risks: StratumRiskTable
    theta: ThetaEstimate
    mu: MarginalY0
    omega: np.ndarray
    joint: JointPODistribution
    xi: XiEstimate | None = None
    nuisance: NuisanceSet | None = None

    @property
    def p1_marginal(self) -> float:
        return marginal_treated_risk(self.risks)

    def targets(self) -> tuple[tuple[str, ...], np.ndarray]:
        names = list(THETA_NAMES) + list(CELL_NAMES)
        vals = [*self.theta.theta, *self.joint.cells]
        if self.xi is not None:
            p = len(self.xi.beta)
            names += [f"beta{j}" for j in range(p)] + [f"lambda{j}" for j in range(p)]
            vals += list(self.xi.xi)
        return tuple(names), np.asarray(vals, dtype=float)


def fit(ds: Dataset, cfg: EstimatorConfig) -> Fit:
    """Point estimates, influence-based covariances and the joint law."""
    nuis = None
    xi = None
    if cfg.estimator == "ls":
        risks = risks_by_proportion(ds)
    else:
        nuis = fit_nuisances(ds, cfg.outcome, cfg.propensity, cfg.folds, cfg.seed)
        risks = risks_by_aipw(ds, nuis)
    if cfg.orthogonal:
        xi = solve_xi(ds, nuis, cfg.link)
        theta = standardize_theta(xi, cfg.link.design_for(ds))
    else:
        theta = estimate_theta(risks)
    mu = estimate_mu(risks)
    omega = influence_covariance(joint_influence(theta.influence, risks.u0))
    joint = joint_distribution(theta, mu, omega)
    return Fit(cfg, risks, theta, mu, omega, joint, xi, nuis)


def sandwich_report(f: Fit, level: float = 0.95) -> IntervalReport:
    """Normal intervals from the influence-function covariances for every target."""
    names, point = f.targets()
    se = [*f.theta.se, *f.joint.se]
    if f.xi is not None:
        se += list(f.xi.se)
    se = np.asarray(se)
    lo, hi = normal_interval(point, se, level)
    return IntervalReport(names, point, se, lo, hi, level, "sandwich-normal", _boundary(names, point))


def _boundary(names, point) -> np.ndarray:
    return np.array([n.startswith("theta") and not (0.0 <= v <= 1.0) for n, v in zip(names, point)])


def target_closure(cfg: EstimatorConfig):
    def est(rep: Dataset) -> np.ndarray:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return fit(rep, cfg).targets()[1]

    return est


# ---------------------------------------------------------------------------
# Monte Carlo study estimator
# ---------------------------------------------------------------------------


@dataclass
class StudyEstimator:
    """Per-replication estimator for :func:`jointpo.sim.run_study`.

    Cross-fitted outcome models (logistic in S x cubic spline of V_S), known
    propensity, orthogonal solve with the chosen link, standardization, and
    bootstrap intervals (``boot_reps = 0`` skips the bootstrap). The
    stratified ls-adjusted estimate and its sandwich SE are kept as extras.
    """

    link: str = "linear"
    folds: int = 5
    boot_reps: int = 200
    propensity: PropensitySpec = PropensitySpec.known(0.5)
    with_ls_adjusted: bool = True
    seed: int = 0

    def config(self) -> EstimatorConfig:
        return EstimatorConfig(f"orthogonal-{self.link}", "v_s", propensity=self.propensity, folds=self.folds, seed=self.seed)

    def __call__(self, sim, replicate: int):
        ds = sim.dataset if hasattr(sim, "dataset") else sim
        cfg = self.config().pinned(ds)
        f = fit(ds, cfg)
        est = np.r_[f.xi.xi, f.theta.theta]
        se = np.r_[f.xi.se, f.theta.se]
        intervals = {"sandwich": normal_interval(est, se)}
        extra = {}
        if self.boot_reps:
            plan = BootstrapPlan(B=self.boot_reps, seed=(self.seed << 20) + replicate)
            idx = [len(THETA_NAMES) + len(CELL_NAMES) + j for j in range(len(f.xi.xi))] + [0, 1]
            closure = target_closure(cfg)
            rep = bootstrap(ds, lambda d: closure(d)[idx], plan, point=est)
            intervals["percentile"] = rep.interval("percentile")
            intervals["normal"] = rep.interval("normal")
            extra["boot_se"] = rep.se
            extra["boot_failed"] = rep.n_failed
        if self.with_ls_adjusted:
            adj = estimate_theta(f.risks)
            extra["ls_adjusted_theta"] = adj.theta
            extra["ls_adjusted_se"] = adj.se
        extra["mu1"] = f.mu.mu1
        extra["p1_marginal"] = f.p1_marginal
        return ReplicateResult(est, se, intervals, extra)


# ---------------------------------------------------------------------------
# run configuration, ingestion and report
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    input: str | None = None
    treatment: str = "a"
    outcome: str = "y"
    stratum: str | None = None
    stratum_from: str | None = None
    stratum_cross: tuple[str, ...] = ()
    cluster: str | None = None
    vs_column: str | None = None
    vs_prognostic: tuple[str, ...] = ()
    estimator: str = "ls"
    link_basis: str = "affine"
    degree: int = 3
    knot_probs: tuple[float, ...] = (0.25, 0.5, 0.75)
    interaction: bool = True
    ridge: float = 1e-6
    folds: int = 5
    propensity: str = "arm-share"
    propensity_value: float = 0.5
    clip: float = 0.01
    boot_reps: int = 500
    boot_ci: str = "percentile"
    seed: int = 0
    gamma_grid: str | None = None
    out: str | None = None
    pseudo_out: str | None = None
    format: str = "table"

    def validate(self) -> None:
        """Config checks that need no data."""
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {self.estimator!r}; choose from {ESTIMATORS}")
        if self.estimator.startswith("orthogonal") and not (self.vs_column or self.vs_prognostic):
            raise ConfigError(f"{self.estimator} needs a V_S source (--vs-column or --vs-prognostic)")
        if self.vs_column and self.vs_prognostic:
            raise ConfigError("give either a V_S column or prognostic predictors, not both")
        if sum(bool(x) for x in (self.stratum, self.stratum_from, self.stratum_cross)) != 1:
            raise ConfigError("give exactly one of --stratum, --stratum-from, --stratum-cross")
        if self.stratum_from:
            parse_stratum_from(self.stratum_from)
        if self.boot_reps and self.boot_reps < 2:
            raise ConfigError("--boot-reps must be 0 (off) or >= 2")
        if self.gamma_grid and self.estimator.startswith("orthogonal"):
            raise ConfigError("the sensitivity sweep applies to the ls and ls-adjusted estimators")
        if self.format not in ("table", "json"):
            raise ConfigError(f"unknown format {self.format!r}")
        if self.propensity not in ("known", "arm-share", "logistic"):
            raise ConfigError(f"unknown propensity kind {self.propensity!r}")
        if self.input is None:
            raise ConfigError("no input file")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("stratum_cross", "vs_prognostic", "knot_probs"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        for k in ("stratum_cross", "vs_prognostic", "knot_probs"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def stratum_spec(self) -> StratumSpec:
        if self.stratum:
            return StratumSpec.existing(self.stratum)
        if self.stratum_from:
            k, col = parse_stratum_from(self.stratum_from)
            return StratumSpec.quantile_bins(col, k)
        return StratumSpec.factor_cross(*self.stratum_cross)


def parse_stratum_from(text: str) -> tuple[int, str]:
    """``"quartile:col"`` or ``"quantile:K:col"`` -> ``(K, col)``."""
    parts = text.split(":")
    if len(parts) == 2 and parts[0] == "quartile" and parts[1]:
        return 4, parts[1]
    if len(parts) == 3 and parts[0] == "quantile" and parts[1].isdigit() and parts[2]:
        return int(parts[1]), parts[2]
    raise ConfigError(f"cannot parse stratum rule {text!r}; use 'quartile:col' or 'quantile:K:col'")


def load_table(path: str) -> dict[str, np.ndarray]:
    import pandas as pd

    try:
        frame = pd.read_csv(path)
    except FileNotFoundError:
        raise ConfigError(f"input file {path!r} not found") from None
    return {str(c): frame[c].to_numpy() for c in frame.columns}


def build_dataset(table: dict[str, np.ndarray], cfg: RunConfig) -> Dataset:
    """Dataset with numeric covariates and strata assigned per the run config."""
    for name in (cfg.treatment, cfg.outcome):
        if name not in table:
            raise UnknownColumn(f"unknown column {name!r}")
    skip = {cfg.treatment, cfg.outcome, cfg.cluster}
    numeric = [c for c, x in table.items() if c not in skip and np.asarray(x).dtype.kind in "biuf"]
    v = np.column_stack([np.asarray(table[c], dtype=float) for c in numeric]) if numeric else None
    cluster = None
    if cfg.cluster:
        if cfg.cluster not in table:
            raise UnknownColumn(f"unknown column {cfg.cluster!r}")
        cluster = np.asarray(table[cfg.cluster])
    ds = make_dataset(table[cfg.treatment], table[cfg.outcome], None, v, numeric, cluster)
    ds, _ = stratify(ds, cfg.stratum_spec(), extra=table)
    return ds


def read_gamma_grid(path: str, n_strata: int) -> list[SensitivitySpec]:
    """Grid file: JSON list of ``|S| x 2`` arrays, or CSV with columns ``point,stratum,gamma0,gamma1``."""
    text = Path(path).read_text()
    if path.endswith(".json") or text.lstrip().startswith("["):
        grid = [SensitivitySpec(np.asarray(g, dtype=float)) for g in json.loads(text)]
    else:
        rows = list(csv.DictReader(text.splitlines()))
        pts: dict[str, np.ndarray] = {}
        for r in rows:
            g = pts.setdefault(r["point"], np.full((n_strata, 2), np.nan))
            s = int(r["stratum"])
            if not 1 <= s <= n_strata:
                raise ValidationError(f"gamma grid stratum {s} out of range")
            g[s - 1] = float(r["gamma0"]), float(r["gamma1"])
        grid = [SensitivitySpec(g) for g in pts.values()]
    for g in grid:
        if g.gamma.shape[0] != n_strata:
            raise ValidationError(f"gamma grid has {g.gamma.shape[0]} strata, data have {n_strata}")
    return grid


@dataclass
class RunReport:
    """Everything ``run`` produces, as plain JSON-compatible values."""

    estimator: str
    targets: list[dict]
    diagnostics: dict
    consistency: dict | None
    sensitivity: list[dict] | None
    provenance: dict
    warnings: list[str] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValidationError(f"unsupported report schema {d.get('schema_version')!r}")
        return cls(**d)

    def target(self, name: str) -> dict:
        for t in self.targets:
            if t["target"] == name:
                return t
        raise KeyError(name)


def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    return x


def _versions() -> dict:
    out = {"jointpo": __version__, "numpy": np.__version__, "python": platform.python_version()}
    try:
        import numba

        out["numba"] = numba.__version__
    except ImportError:
        pass
    out["kernels"] = "numba" if USE_NUMBA else "numpy"
    return out


def _estimator_config(cfg: RunConfig, vs_column: str | None) -> EstimatorConfig:
    outcome = OutcomeModelSpec(vs_column, cfg.degree, tuple(cfg.knot_probs), cfg.interaction, cfg.ridge)
    prop = PropensitySpec(cfg.propensity, cfg.propensity_value, cfg.clip)
    return EstimatorConfig(cfg.estimator, vs_column, outcome, prop, cfg.folds, cfg.seed, cfg.link_basis)


def run(cfg: RunConfig, table: dict[str, np.ndarray] | None = None) -> RunReport:
    """ingest -> strata -> (prognostic score) -> risks -> estimator -> inference -> report."""
    cfg.validate()
    if table is None:
        table = load_table(cfg.input)
    ds = build_dataset(table, cfg)
    notes = []
    vs = cfg.vs_column
    if cfg.vs_prognostic:
        ps = prognostic_score(ds, cfg.vs_prognostic, cfg.ridge)
        ds = ds.with_column("prognostic_score", ps.score)
        vs = "prognostic_score"
    elif vs is not None:
        ds.column(vs)
    ecfg = _estimator_config(cfg, vs).pinned(ds)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        f = fit(ds, ecfg)
    notes += sorted({str(w.message) for w in caught})
    sand = sandwich_report(f)
    boot = None
    if cfg.boot_reps:
        plan = BootstrapPlan(cfg.boot_reps, "cluster" if cfg.cluster else "iid-rows", cfg.seed, cfg.boot_ci)
        boot = bootstrap(ds, target_closure(ecfg), plan, sand.names, point=sand.point)
        notes += [f"{boot.n_failed} bootstrap replicates failed and were dropped"] if boot.n_failed else []
    targets = []
    for j, name in enumerate(sand.names):
        ivs = [{"method": sand.method, "se": _clean(float(sand.se[j])), "lower": _clean(float(sand.lower[j])), "upper": _clean(float(sand.upper[j]))}]
        if boot is not None:
            ivs.append({"method": boot.method, "se": _clean(float(boot.se[j])), "lower": _clean(float(boot.lower[j])), "upper": _clean(float(boot.upper[j]))})
        targets.append({"target": name, "point": float(sand.point[j]), "boundary": bool(sand.boundary[j]), "intervals": ivs})
    rank = check_rank(f.risks)
    diag = {
        "n": ds.n,
        "n_strata": ds.n_strata,
        "stratum_labels": list(ds.stratum_labels),
        "cell_counts": [[s, a, c] for (s, a), c in sorted(ds.counts.items())],
        "rank": rank.status,
        "sigma_min": rank.sigma_min,
        "condition_number": _clean(rank.condition_number),
        "p0": f.risks.p0.tolist(),
        "p1": f.risks.p1.tolist(),
        "mu0": f.mu.mu0,
        "mu1": f.mu.mu1,
        "vs_column": vs,
    }
    if f.xi is not None:
        diag["solver"] = {"iterations": f.xi.iterations, "converged": f.xi.converged, "score_norm": f.xi.score_norm}
    try:
        cc = consistency_check(f.theta, f.mu, f.p1_marginal)
        consistency = {"p1_marginal": f.p1_marginal, "implied_mu1": cc.implied_mu1, "direct_mu1": cc.direct_mu1, "discrepancy": cc.discrepancy}
    except DegenerateTheta as e:
        consistency = None
        notes.append(str(e))
    sens = None
    if cfg.gamma_grid:
        grid = read_gamma_grid(cfg.gamma_grid, ds.n_strata)
        sens = [
            {"gamma": g.gamma.tolist(), "theta1": est.theta1, "theta2": est.theta2, "se": [float(x) for x in est.se]}
            for g, est in zip(grid, sensitivity_sweep(f.risks, grid))
        ]
    if cfg.pseudo_out:
        write_pseudo_outcomes(cfg.pseudo_out, ds, f.risks)
    prov = {"seed": cfg.seed, "versions": _versions(), "config": cfg.to_dict()}
    return RunReport(cfg.estimator, targets, diag, consistency, sens, prov, notes)


def write_pseudo_outcomes(path: str, ds: Dataset, risks: StratumRiskTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "s", "a", "y", "u0", "u1"])
        for i in range(ds.n):
            w.writerow([i, int(ds.s[i]), int(ds.a[i]), int(ds.y[i]), repr(float(risks.u0[i])), repr(float(risks.u1[i]))])


def emit_report(report: RunReport, fmt: str = "table") -> str:
    """Human-readable table or a JSON document that :meth:`RunReport.from_dict` reads back."""
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2, allow_nan=False)
    if fmt != "table":
        raise ConfigError(f"unknown format {fmt!r}")
    d = report.diagnostics
    lines = [f"estimator: {report.estimator}   n = {d['n']}   strata = {d['n_strata']}   rank: {d['rank']} (condition {_fmt(d['condition_number'])})"]
    if "solver" in d:
        s = d["solver"]
        lines.append(f"solver: {s['iterations']} iterations, converged = {s['converged']}, |mean score| = {s['score_norm']:.2e}")
    lines.append("")
    lines.append(f"{'target':<16}{'estimate':>10}{'method':>24}{'SE':>10}{'lower':>10}{'upper':>10}")
    for t in report.targets:
        for k, iv in enumerate(t["intervals"]):
            label = t["target"] if k == 0 else ""
            est = f"{t['point']:>10.4f}" if k == 0 else " " * 10
            lines.append(f"{label:<16}{est}{iv['method']:>24}{_fmt(iv['se']):>10}{_fmt(iv['lower']):>10}{_fmt(iv['upper']):>10}")
    for t in report.targets:
        if t["boundary"]:
            lines.append(
                f"WARNING: {t['target']} = {t['point']:.4f} lies outside [0, 1]; Y(1) may depend on S beyond Y(0) (reported raw, not projected)"
            )
    if report.consistency is not None:
        c = report.consistency
        lines.append(f"consistency: implied P(Y(0)=1) = {c['implied_mu1']:.4f} vs direct {c['direct_mu1']:.4f} (discrepancy {c['discrepancy']:+.4f})")
    if report.sensitivity:
        lines.append("")
        lines.append("sensitivity sweep:")
        for r in report.sensitivity:
            lines.append(f"  gamma = {r['gamma']}: theta1 = {r['theta1']:.4f}, theta2 = {r['theta2']:.4f}")
    for w in report.warnings:
        lines.append(f"note: {w}")
    return "\n".join(lines) + "\n"


def _fmt(x) -> str:
    return "n/a" if x is None else f"{x:.4f}"


def delta_cells(theta: ThetaEstimate, mu: MarginalY0, omega: np.ndarray) -> IntervalReport:
    """Delta-method intervals for the four joint cells from ``omega`` of (theta1, theta2, mu0, mu1)."""
    eta = np.r_[theta.theta, mu.mu0, mu.mu1]
    return delta_method(eta, omega, joint_cells, joint_gradients, CELL_NAMES)
