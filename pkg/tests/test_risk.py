import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, optimize
from scipy.special import expit
from scipy.stats import norm

from jointpo.data import make_dataset
from jointpo.errors import EmptyStratumArm, MissingNuisance
from jointpo.nuisance import NuisanceSet, OutcomeModelSpec, PropensitySpec, fit_nuisances
from jointpo.risk import (
    StratumRiskTable,
    estimate_mu,
    marginal_treated_risk,
    pseudo_outcomes,
    risks_by_aipw,
    risks_by_proportion,
)
from jointpo.sim import DGPConfig, generate, true_nuisances


def population_stratum_risks(cfg: DGPConfig):
    """P(Y(0)=1 | S=s) by quadrature, with S the population quartile of X_other."""
    lo, hi = cfg.trunc
    mass = norm.cdf(hi) - norm.cdf(lo)
    dens = lambda v: norm.pdf(v) / mass

    def cdf_x(x):
        return integrate.quad(lambda v: norm.cdf(x - cfg.x_slope * v) * dens(v), lo, hi, epsabs=1e-12)[0]

    edges = [-np.inf] + [optimize.brentq(lambda x, p=p: cdf_x(x) - p, -10, 10, xtol=1e-12) for p in (0.25, 0.5, 0.75)] + [np.inf]
    out = []
    for s in range(1, 5):
        p_s = lambda v: norm.cdf(edges[s] - cfg.x_slope * v) - norm.cdf(edges[s - 1] - cfg.x_slope * v)
        q = lambda v: expit(cfg.y0_intercept + cfg.y0_stratum_slope * (s - 2) + cfg.y0_v_slope * v)
        out.append(integrate.quad(lambda v: q(v) * p_s(v) * dens(v), lo, hi, epsabs=1e-12)[0] / 0.25)
    return np.array(out)


@pytest.fixture(scope="module")
def big_sim():
    return generate(DGPConfig(n=100_000, seed=21))


def test_proportions_example():
    a = [1, 1, 1, 1, 0, 0, 0, 0, 1, 0]
    y = [1, 1, 0, 0, 1, 0, 0, 0, 1, 0]
    s = [1, 1, 1, 1, 1, 1, 1, 1, 2, 2]
    r = risks_by_proportion(make_dataset(a, y, s))
    assert r.p1[0] == 0.5 and r.p0[0] == 0.25
    assert r.method == "proportions"


def test_all_zero_outcomes():
    r = risks_by_proportion(make_dataset([0, 1, 0, 1], [0, 0, 0, 0], [1, 1, 2, 2]))
    assert np.all(r.p0 == 0) and np.all(r.p1 == 0)


def test_empty_cell():
    ds = make_dataset([0, 1, 0, 0], [0, 0, 0, 0], [1, 1, 2, 2], require_cells=False)
    with pytest.raises(EmptyStratumArm):
        risks_by_proportion(ds)


def test_proportions_match_quadrature_oracle(big_sim):
    r = risks_by_proportion(big_sim.dataset)
    oracle = population_stratum_risks(DGPConfig())
    assert np.max(np.abs(r.p0 - oracle)) < 0.01


def test_mu_matches_quadrature_oracle(big_sim):
    mu = estimate_mu(risks_by_proportion(big_sim.dataset))
    oracle = population_stratum_risks(DGPConfig()).mean()
    assert abs(mu.mu1 - oracle) < 0.01
    assert mu.mu0 + mu.mu1 == pytest.approx(1.0, abs=1e-15)


def test_pseudo_outcome_example():
    ds = make_dataset([1], [1], None, require_cells=False)
    nu = NuisanceSet(np.array([0.3]), np.array([0.4]), np.array([0.5]), np.zeros(1, int), 1, 0.01)
    u0, u1 = pseudo_outcomes(ds, nu)
    assert u1[0] == pytest.approx(1.6, abs=1e-15)
    assert u0[0] == pytest.approx(0.3, abs=1e-15)


def test_missing_nuisance():
    ds = make_dataset([1, 0], [1, 0], [1, 2], require_cells=False)
    nu = NuisanceSet(np.array([0.3, np.nan]), np.array([0.4, 0.4]), np.array([0.5, 0.5]), np.zeros(2, int), 1, 0.01)
    with pytest.raises(MissingNuisance):
        risks_by_aipw(ds, nu)


def _oracle_nuisance(sim, cfg):
    ds = sim.dataset
    q, r, pi = true_nuisances(cfg, ds.s, ds.column("v_s"))
    return NuisanceSet(q, r, pi, np.zeros(ds.n, int), 1, 0.0)


def test_oracle_aipw_unbiased_within_3se(big_sim):
    cfg = DGPConfig()
    ds = big_sim.dataset
    r = risks_by_aipw(ds, _oracle_nuisance(big_sim, cfg))
    oracle = population_stratum_risks(cfg)
    for s in range(4):
        u = r.u0[ds.s == s + 1]
        se = u.std(ddof=1) / np.sqrt(u.size)
        assert abs(r.p0[s] - oracle[s]) <= 3 * se + 2e-3  # sample vs population quartiles


def test_aipw_close_to_proportions_on_randomized_data(big_sim):
    ds = big_sim.dataset
    a = risks_by_aipw(ds, _oracle_nuisance(big_sim, DGPConfig()))
    b = risks_by_proportion(ds)
    assert np.max(np.abs(a.p0 - b.p0)) < 0.02 and np.max(np.abs(a.p1 - b.p1)) < 0.02


def test_saturated_arm_share_aipw_equals_proportions():
    r = np.random.default_rng(5)
    a = np.r_[0, 1, 0, 1, r.integers(0, 2, 16)]
    s = np.r_[1, 1, 2, 2, r.integers(1, 3, 16)]
    y = np.r_[0, 1, 1, 0, r.integers(0, 2, 16)]
    ds = make_dataset(a, y, s)
    nu = fit_nuisances(ds, OutcomeModelSpec(None, ridge=0.0), PropensitySpec("arm-share"), folds=1)
    aipw = risks_by_aipw(ds, nu)
    prop = risks_by_proportion(ds)
    np.testing.assert_allclose(aipw.p0, prop.p0, atol=1e-10)
    np.testing.assert_allclose(aipw.p1, prop.p1, atol=1e-10)


def test_double_robustness_with_wrong_outcome_model():
    cfg = DGPConfig()
    oracle = population_stratum_risks(cfg)
    errs = []
    for n in (4_000, 200_000):
        ds = generate(DGPConfig(n=n, seed=8)).dataset
        half = np.full(n, 0.5)
        r = risks_by_aipw(ds, NuisanceSet(half, half, half, np.zeros(n, int), 1, 0.0))
        se = np.array([r.u0[ds.s == s].std(ddof=1) / np.sqrt((ds.s == s).sum()) for s in range(1, 5)])
        assert np.all(np.abs(r.p0 - oracle) <= 4 * se + 2e-3)
        errs.append(np.max(np.abs(r.p0 - oracle)))
    assert errs[1] < errs[0]


@given(st.integers(0, 2**32 - 1), st.integers(2, 5))
def test_pseudo_outcomes_centre_on_stratum_risks(seed, k):
    r = np.random.default_rng(seed)
    n = 60
    s = np.r_[np.repeat(np.arange(1, k + 1), 2), r.integers(1, k + 1, n - 2 * k)]
    a = np.r_[np.tile([0, 1], k), r.integers(0, 2, n - 2 * k)]
    ds = make_dataset(a, r.integers(0, 2, n), s)
    nu = NuisanceSet(r.uniform(0.05, 0.95, n), r.uniform(0.05, 0.95, n), r.uniform(0.1, 0.9, n), np.zeros(n, int), 1, 0.0)
    for risks in (risks_by_aipw(ds, nu), risks_by_proportion(ds)):
        for j in range(k):
            rows = ds.s == j + 1
            assert abs(risks.u0[rows].mean() - risks.p0[j]) <= 1e-12
            assert abs(risks.u1[rows].mean() - risks.p1[j]) <= 1e-12


@given(st.integers(0, 2**32 - 1), st.permutations(range(4)))
def test_proportions_permutation_equivariant(seed, perm):
    r = np.random.default_rng(seed)
    n = 80
    s = np.r_[np.repeat(np.arange(1, 5), 2), r.integers(1, 5, n - 8)]
    a = np.r_[np.tile([0, 1], 4), r.integers(0, 2, n - 8)]
    y = r.integers(0, 2, n)
    base = risks_by_proportion(make_dataset(a, y, s))
    perm = np.asarray(perm)
    inv = np.empty(4, int)
    inv[perm] = np.arange(4)
    relabelled = risks_by_proportion(make_dataset(a, y, inv[s - 1] + 1))
    np.testing.assert_allclose(relabelled.p0, base.p0[perm], atol=1e-15)
    np.testing.assert_allclose(relabelled.p1, base.p1[perm], atol=1e-15)


def test_mu_of_two_equal_strata():
    mu = estimate_mu(StratumRiskTable.from_risks([0.2, 0.6], [0.5, 0.5]))
    assert mu.mu1 == pytest.approx(0.4) and mu.mu0 == pytest.approx(0.6)


def test_mu_single_stratum():
    mu = estimate_mu(StratumRiskTable.from_risks([0.35], [0.5]))
    assert mu.mu1 == 0.35


def test_marginal_treated_risk():
    t = StratumRiskTable.from_risks([0.2, 0.6], [0.4, 0.6], [1, 3])
    assert marginal_treated_risk(t) == pytest.approx(0.25 * 0.4 + 0.75 * 0.6)
