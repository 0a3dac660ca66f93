"""Time the numba and numpy paths of every hot kernel on the same inputs.

    python benchmarks/bench_kernels.py --n 10000 --repeat 5
"""

import argparse
import time

import numpy as np

from jointpo import _kernels
from jointpo.nuisance import OutcomeModelSpec, assign_folds
from jointpo.orthogonal import LinkSpec, ScoreInputs
from jointpo.sim import DGPConfig, generate, true_nuisances


def kernel_inputs(n: int, seed: int) -> dict:
    cfg = DGPConfig(n=n, seed=seed)
    ds = generate(cfg).dataset
    v = ds.column("v_s")
    sb = OutcomeModelSpec("v_s").basis_for(ds)
    off, vals = sb.local(v)
    k = ds.n_strata
    order = np.argsort(ds.s - 1, kind="stable").astype(np.int64)
    starts = np.searchsorted((ds.s - 1)[order], np.arange(k + 1)).astype(np.int64)
    fold = assign_folds(ds, 5, seed=seed)
    q, r, pi = true_nuisances(cfg, ds.s, v)
    link = LinkSpec("logistic", "v_s")
    si = ScoreInputs(link.design_for(ds), q, r, ds.a.astype(float), ds.y.astype(float), pi, 1.0 - pi)
    xi = np.array([-0.8, 0.4, 0.8, -0.2])
    return {
        "bspline_basis": (v, sb.knot_vector, 3),
        "bspline_local": (v, sb.knot_vector, 3),
        "crossfit_blocks": (off, vals, sb.n_basis, ds.y.astype(float), ds.a == 1, order, starts, fold, 5, 1e-6, 1e-8, 100),
        "ortho_score": (si.B, si.q, si.r, si.a, si.y, si.pi1, si.pi0, xi[:2].copy(), xi[2:].copy(), link.code),
    }


def best_of(fn, args, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    ns = p.parse_args()
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    inputs = kernel_inputs(ns.n, ns.seed)
    print(f"n = {ns.n}, best of {ns.repeat}")
    print(f"{'kernel':<18}{'numba ms':>12}{'numpy ms':>12}{'speed-up':>10}")
    for name, (nb, npy) in _kernels.KERNELS.items():
        args = inputs[name]
        nb(*args)  # compile outside the timing
        t_nb = best_of(nb, args, ns.repeat)
        t_np = best_of(npy, args, ns.repeat)
        print(f"{name:<18}{1e3 * t_nb:>12.2f}{1e3 * t_np:>12.2f}{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
