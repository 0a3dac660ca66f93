import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jointpo._rng import TAG_BOOT, stream
from jointpo.data import make_dataset
from jointpo.errors import ConfigError, DimensionMismatch, NonConvergence, TooManyFailedReplicates
from jointpo.inference import (
    BootstrapPlan,
    ClusterLayout,
    bootstrap,
    delta_method,
    percentile_interval,
    replicate_indices,
    resample_indices,
)
from jointpo.pipeline import EstimatorConfig, fit
from jointpo.sim import DGPConfig, generate


def small_ds(rng, n=200, cluster=None):
    s = np.r_[1, 1, 2, 2, rng.integers(1, 3, n - 4)]
    a = np.r_[0, 1, 0, 1, rng.integers(0, 2, n - 4)]
    return make_dataset(a, rng.integers(0, 2, n), s, cluster=cluster)


def mean_y(ds):
    return np.array([ds.y.mean()])


def test_degenerate_outcome_gives_zero_se():
    ds = make_dataset([0, 1, 0, 1, 1, 0], [1] * 6, [1, 1, 2, 2, 1, 2])
    rep = bootstrap(ds, mean_y, BootstrapPlan(B=50))
    assert rep.se[0] == 0
    assert rep.lower[0] == 1 and rep.upper[0] == 1


def test_singleton_clusters_reproduce_iid_draws(rng):
    ds = small_ds(rng)
    dc = small_ds(np.random.default_rng(12345), cluster=np.arange(200)[::-1].copy())
    assert np.array_equal(ds.y, dc.y)
    for b in range(5):
        i1, _ = replicate_indices(ds, BootstrapPlan(B=5), b)
        i2, _ = replicate_indices(dc, BootstrapPlan(B=5, mode="cluster"), b)
        assert np.array_equal(i1, i2)


def test_seed_determinism(rng):
    ds = small_ds(rng)
    r1 = bootstrap(ds, mean_y, BootstrapPlan(B=40, seed=7))
    r2 = bootstrap(ds, mean_y, BootstrapPlan(B=40, seed=7))
    r3 = bootstrap(ds, mean_y, BootstrapPlan(B=40, seed=8))
    assert np.array_equal(r1.replicates, r2.replicates)
    assert not np.array_equal(r1.replicates, r3.replicates)


def test_replicate_regenerable_alone(rng):
    ds = small_ds(rng)
    rep = bootstrap(ds, mean_y, BootstrapPlan(B=10, seed=3))
    idx, _ = replicate_indices(ds, BootstrapPlan(B=10, seed=3), 6)
    assert rep.replicates[6, 0] == ds.y[idx].mean()


@given(st.integers(0, 2**32 - 1), st.lists(st.integers(1, 4), min_size=1, max_size=12))
def test_cluster_integrity(seed, sizes):
    labels = np.repeat(np.arange(len(sizes)) * 10 + 3, sizes)
    perm = np.random.default_rng(seed).permutation(labels.size)
    labels = labels[perm]
    n = labels.size
    ds = make_dataset(np.zeros(n, int), np.zeros(n, int), None, cluster=labels, require_cells=False)
    layout = ClusterLayout.of(ds)
    idx, new = resample_indices(layout, stream(seed, TAG_BOOT, 0))
    for c in np.unique(new):
        rows = idx[new == c]
        orig = np.unique(labels[rows])
        assert orig.size == 1
        # a drawn cluster brings all of its rows exactly once
        assert sorted(rows.tolist()) == sorted(np.flatnonzero(labels == orig[0]).tolist())
    assert np.unique(new).size == len(sizes)


def test_cluster_mode_needs_clusters(rng):
    with pytest.raises(ConfigError):
        bootstrap(small_ds(rng), mean_y, BootstrapPlan(B=5, mode="cluster"))


def test_se_invariant_to_target_order(rng):
    ds = small_ds(rng)
    f = lambda d: np.array([d.y.mean(), d.a.mean(), (d.y * d.a).mean()])
    g = lambda d: f(d)[[2, 0, 1]]
    r1 = bootstrap(ds, f, BootstrapPlan(B=60))
    r2 = bootstrap(ds, g, BootstrapPlan(B=60))
    np.testing.assert_array_equal(r1.se[[2, 0, 1]], r2.se)


def _flaky(every):
    calls = {"n": 0}

    def est(d):
        calls["n"] += 1
        if calls["n"] % every == 0:
            raise NonConvergence("synthetic")
        return mean_y(d)

    return est


def test_too_many_failures_raises(rng):
    with pytest.raises(TooManyFailedReplicates):
        bootstrap(small_ds(rng), _flaky(5), BootstrapPlan(B=50), point=[0.5], n_jobs=1)


def test_few_failures_dropped_and_counted(rng):
    rep = bootstrap(small_ds(rng), _flaky(20), BootstrapPlan(B=60), point=[0.5], n_jobs=1)
    assert rep.n_failed == 3 and rep.replicates.shape == (57, 1)


def test_threads_match_sequential(rng):
    ds = small_ds(rng)
    est = lambda d: np.array([d.y.mean(), d.y[d.a == 1].mean()])
    r1 = bootstrap(ds, est, BootstrapPlan(B=40), n_jobs=1)
    r4 = bootstrap(ds, est, BootstrapPlan(B=40), n_jobs=4)
    assert np.array_equal(r1.replicates, r4.replicates)


def test_percentile_is_type7(rng):
    x = rng.normal(size=(37, 1))
    lo, hi = percentile_interval(x, 0.9)
    srt = np.sort(x[:, 0])

    def type7(p):
        h = (len(srt) - 1) * p
        k = int(np.floor(h))
        return srt[k] + (h - k) * (srt[k + 1] - srt[k])

    assert lo[0] == pytest.approx(type7(0.05), abs=1e-15)
    assert hi[0] == pytest.approx(type7(0.95), abs=1e-15)


def test_plan_validation():
    with pytest.raises(ConfigError):
        BootstrapPlan(B=1)
    with pytest.raises(ConfigError):
        BootstrapPlan(mode="blocks")


def test_delta_identity():
    rep = delta_method([0.3, 0.8], np.diag([0.0004, 0.0009]))
    np.testing.assert_allclose(rep.se, [0.02, 0.03], atol=1e-15)
    np.testing.assert_allclose(rep.lower, [0.3 - 1.959963984540054 * 0.02, 0.8 - 1.959963984540054 * 0.03], atol=1e-12)
    assert rep.method == "sandwich-normal"


def test_delta_zero_gradient():
    rep = delta_method([0.3, 0.8], np.eye(2), transform=lambda x: np.array([5.0]), gradient=lambda x: np.zeros((1, 2)))
    assert rep.se[0] == 0 and rep.lower[0] == rep.upper[0] == 5.0


def test_delta_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        delta_method([0.3, 0.8], np.eye(3))
    with pytest.raises(DimensionMismatch):
        delta_method([0.3, 0.8], np.eye(2), transform=lambda x: x[:1], gradient=lambda x: np.ones((1, 3)))


def test_delta_product_matches_bootstrap():
    ds = generate(DGPConfig(n=5000, seed=4)).dataset
    cfg = EstimatorConfig("ls")
    f = fit(ds, cfg)
    eta = np.r_[f.theta.theta, f.mu.mu0, f.mu.mu1]
    prod = lambda e: np.array([e[0] * e[2]])
    grad = lambda e: np.array([[e[2], 0.0, e[0], 0.0]])
    dm = delta_method(eta, f.omega, prod, grad)

    def est(d):
        g = fit(d, cfg)
        return np.array([g.theta.theta[0] * g.mu.mu0])

    boot = bootstrap(ds, est, BootstrapPlan(B=200, seed=1))
    assert abs(dm.se[0] / boot.se[0] - 1) < 0.2
