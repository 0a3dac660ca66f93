"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 data validation error,
4 estimation failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, EstimationError, JointPOError, ValidationError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VALIDATION = 3
EXIT_ESTIMATION = 4


def _csv_list(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jointpo", description="Joint distribution of binary potential outcomes.")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("estimate", help="estimate theta and the joint law from a CSV file")
    e.add_argument("--input", required=True)
    e.add_argument("--treatment", default="a")
    e.add_argument("--outcome", default="y")
    g = e.add_mutually_exclusive_group()
    g.add_argument("--stratum", help="existing stratum column")
    g.add_argument("--stratum-from", help="'quartile:col' or 'quantile:K:col'")
    g.add_argument("--stratum-cross", type=_csv_list, default=(), help="comma-separated factor columns to cross")
    vs = e.add_mutually_exclusive_group()
    vs.add_argument("--vs-column")
    vs.add_argument("--vs-prognostic", type=_csv_list, default=(), help="comma-separated predictors of a control-arm prognostic score")
    e.add_argument("--estimator", default="ls", help="ls, ls-adjusted, orthogonal-linear, orthogonal-logistic, or orthogonal with --link")
    e.add_argument("--link", choices=("linear", "logistic"))
    e.add_argument("--propensity", default="arm-share", choices=("known", "arm-share", "logistic"))
    e.add_argument("--propensity-value", type=float, default=0.5)
    e.add_argument("--folds", type=int, default=5)
    e.add_argument("--degree", type=int, default=3)
    e.add_argument("--no-interaction", action="store_true", help="additive S + spline outcome model")
    e.add_argument("--ridge", type=float, default=1e-6)
    e.add_argument("--boot-reps", type=int, default=500, help="0 disables the bootstrap")
    e.add_argument("--boot-ci", choices=("percentile", "normal"), default="percentile")
    e.add_argument("--cluster")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--gamma-grid")
    e.add_argument("--format", choices=("table", "json"), default="table")
    e.add_argument("--out")
    e.add_argument("--pseudo-out", help="write per-row pseudo-outcomes to this CSV")

    s = sub.add_parser("simulate", help="Monte Carlo study on the built-in data-generating process")
    s.add_argument("--config", help="JSON file with data-generating keys (see README)")
    s.add_argument("--reps", type=int, default=200)
    s.add_argument("--n", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--link", choices=("linear", "logistic"), default="linear")
    s.add_argument("--boot-reps", type=int, default=200)
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--out", help="summary CSV path")
    s.add_argument("--estimates-out", help="per-replication estimates CSV path")

    o = sub.add_parser("probe-orthogonality", help="Gateaux-derivative probe of the orthogonal score")
    o.add_argument("--n", type=int, default=100_000)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--t", type=float, nargs="+", default=[0.5, 1.0])
    o.add_argument("--out")

    f = sub.add_parser("make-fixtures", help="write small test CSVs")
    f.add_argument("--dir", required=True)
    f.add_argument("--seed", type=int, default=0)
    return p


def _run_config(ns):
    from .pipeline import RunConfig

    est = ns.estimator
    if est == "orthogonal":
        est = f"orthogonal-{ns.link or 'linear'}"
    elif ns.link and est.startswith("orthogonal") and not est.endswith(ns.link):
        raise ConfigError(f"--link {ns.link} contradicts --estimator {est}")
    return RunConfig(
        input=ns.input,
        treatment=ns.treatment,
        outcome=ns.outcome,
        stratum=ns.stratum,
        stratum_from=ns.stratum_from,
        stratum_cross=tuple(ns.stratum_cross),
        cluster=ns.cluster,
        vs_column=ns.vs_column,
        vs_prognostic=tuple(ns.vs_prognostic),
        estimator=est,
        degree=ns.degree,
        interaction=not ns.no_interaction,
        ridge=ns.ridge,
        folds=ns.folds,
        propensity=ns.propensity,
        propensity_value=ns.propensity_value,
        boot_reps=ns.boot_reps,
        boot_ci=ns.boot_ci,
        seed=ns.seed,
        gamma_grid=ns.gamma_grid,
        out=ns.out,
        pseudo_out=ns.pseudo_out,
        format=ns.format,
    )


def _write(text: str, path: str | None) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_estimate(ns) -> int:
    from .pipeline import emit_report, run

    cfg = _run_config(ns)
    cfg.validate()
    report = run(cfg)
    _write(emit_report(report, cfg.format), cfg.out)
    return EXIT_OK


def cmd_simulate(ns) -> int:
    from .pipeline import StudyEstimator
    from .sim import DGPConfig, run_study

    cfg = DGPConfig()
    if ns.config:
        cfg = DGPConfig.from_dict(json.loads(Path(ns.config).read_text()))
    if ns.n is not None:
        cfg = replace(cfg, n=ns.n)
    if ns.seed is not None:
        cfg = replace(cfg, seed=ns.seed)
    est = StudyEstimator(link=ns.link, folds=ns.folds, boot_reps=ns.boot_reps, seed=cfg.seed)
    report = run_study(cfg, ns.reps, est)
    print(report.table())
    if ns.out:
        Path(ns.out).write_text(report.to_csv())
    if ns.estimates_out:
        Path(ns.estimates_out).write_text(report.estimates_csv())
    return EXIT_OK


def probe_study(n: int = 100_000, seed: int = 0, t_grid=(0.5, 1.0)):
    """Probe results on the default data-generating process with oracle nuisances.

    Directions: ``0.05 cos(v)`` for the control-arm regression,
    ``0.05 sin(v)`` for the treated-arm regression, ``0.05 sign(v)`` for the
    propensity and ``(1, 0, 1, 0)`` in parameter space (positive control).
    """
    from .orthogonal import LinkSpec, ScoreInputs, orthogonality_probe
    from .sim import DGPConfig, generate, oracle_targets, true_nuisances

    cfg = DGPConfig(n=n, seed=seed)
    ds = generate(cfg).dataset
    v = ds.column("v_s")
    q, r, pi1 = true_nuisances(cfg, ds.s, v)
    link = LinkSpec("linear", "v_s")
    inputs = ScoreInputs(link.design_for(ds), q, r, ds.a.astype(float), ds.y.astype(float), pi1, 1.0 - pi1)
    truth = oracle_targets(cfg)
    xi = np.array([truth["beta0"], truth["beta1"], truth["lambda0"], truth["lambda1"]])
    dirs = {"p0": 0.05 * np.cos(v), "p1": 0.05 * np.sin(v), "pi": 0.05 * np.sign(v), "xi": np.array([1.0, 0.0, 1.0, 0.0])}
    return {k: orthogonality_probe(inputs, xi, link, k, h, t_grid) for k, h in dirs.items()}


def cmd_probe(ns) -> int:
    res = probe_study(ns.n, ns.seed, tuple(ns.t))
    lines = ["component,t,max_abs_z," + ",".join(f"d{j}" for j in range(4)) + "," + ",".join(f"se{j}" for j in range(4))]
    for k, rows in res.items():
        for pr in rows:
            lines.append(",".join([k, f"{pr.t:g}", f"{pr.z:.4f}"] + [f"{x:.6g}" for x in pr.derivative] + [f"{x:.6g}" for x in pr.se]))
    _write("\n".join(lines) + "\n", ns.out)
    return EXIT_OK


def write_fixtures(directory: str, seed: int = 0) -> list[str]:
    """Desk-scale CSVs: a two-stratum table with population-exact risks and a simulated study."""
    from .sim import DGPConfig, generate

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    # two strata of 20 rows per arm with p0 = (0.2, 0.6), p1 = (0.4, 0.6): theta = (0.3, 0.8)
    rows = []
    for s, k0, k1 in ((1, 4, 8), (2, 12, 12)):
        for a, k in ((0, k0), (1, k1)):
            for i in range(20):
                rows.append((a, int(i < k), s))
    p = d / "two_strata.csv"
    p.write_text("a,y,s\n" + "".join(f"{a},{y},{s}\n" for a, y, s in rows))
    paths.append(str(p))
    sim = generate(DGPConfig(n=2000, seed=seed))
    ds = sim.dataset
    lines = ["a,y,s,v_s,x_other,household"]
    for i in range(ds.n):
        lines.append(f"{ds.a[i]},{ds.y[i]},{ds.s[i]},{float(ds.v[i, 0])!r},{float(ds.v[i, 1])!r},h{i // 2}")
    p = d / "simulated.csv"
    p.write_text("\n".join(lines) + "\n")
    paths.append(str(p))
    return paths


def cmd_fixtures(ns) -> int:
    for p in write_fixtures(ns.dir, ns.seed):
        print(p)
    return EXIT_OK


COMMANDS = {"estimate": cmd_estimate, "simulate": cmd_simulate, "probe-orthogonality": cmd_probe, "make-fixtures": cmd_fixtures}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return COMMANDS[ns.command](ns)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ValidationError as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except EstimationError as e:
        print(f"estimation error: {e}", file=sys.stderr)
        return EXIT_ESTIMATION
    except JointPOError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
