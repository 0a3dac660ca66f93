import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from jointpo import _kernels
from jointpo.data import make_dataset
from jointpo.errors import InsufficientGrid, NonConvergence, SingularJacobian, SingularNormalEquations, WeakIdentificationWarning
from jointpo.ls import solve_theta
from jointpo.nuisance import NuisanceSet, OutcomeModelSpec, PropensitySpec, fit_nuisances
from jointpo.orthogonal import (
    LinkSpec,
    ScoreInputs,
    XiEstimate,
    ls_initializer,
    orthogonality_probe,
    psi_score,
    score,
    solve_scores,
    solve_xi,
    standardize_theta,
    xi_variance,
)
from jointpo.risk import risks_by_aipw
from jointpo.sim import DGPConfig, generate, oracle_targets, true_nuisances

LIN = LinkSpec("linear", "v_s")
LOGIT = LinkSpec("logistic", "v_s")


def scalar_psi(b, a, y, q, r, pi1, beta, lam, logistic):
    """Row score written out term by term with plain floats."""
    pi0 = 1 - pi1
    eb = sum(bi * x for bi, x in zip(b, beta))
    el = sum(bi * x for bi, x in zip(b, lam))
    if logistic:
        g, h = 1 / (1 + math.exp(-eb)), 1 / (1 + math.exp(-el))
        dg, dh = g * (1 - g), h * (1 - h)
    else:
        g, h, dg, dh = eb, el, 1.0, 1.0
    resid = r + a / pi1 * (y - r) - (g * (1 - q) + h * q) + (g - h) * (1 - a) / pi0 * (y - q)
    return [(1 - q) * dg * bi * resid for bi in b] + [q * dh * bi * resid for bi in b]


def random_inputs(r, n, p=2):
    v = r.uniform(-2, 2, n)
    B = np.column_stack([np.ones(n), v]) if p == 2 else np.column_stack([v**k for k in range(p)])
    return ScoreInputs(
        np.ascontiguousarray(B),
        r.uniform(0.1, 0.9, n),
        r.uniform(0.1, 0.9, n),
        r.integers(0, 2, n).astype(float),
        r.integers(0, 2, n).astype(float),
        (pi := r.uniform(0.2, 0.8, n)),
        1 - pi,
    )


@pytest.fixture(scope="module")
def oracle_sample():
    cfg = DGPConfig(n=100_000, seed=3)
    sim = generate(cfg)
    ds = sim.dataset
    q, r, pi = true_nuisances(cfg, ds.s, ds.column("v_s"))
    return cfg, ds, NuisanceSet(q, r, pi, np.zeros(ds.n, int), 1, 0.0)


def test_link_identities():
    x = np.array([-3.0, 0.0, 2.5])
    g, g1, g2 = LIN.derivatives(x)
    np.testing.assert_array_equal(g, x)
    assert np.all(g1 == 1) and np.all(g2 == 0)
    g, g1, g2 = LOGIT.derivatives(x)
    np.testing.assert_allclose(g, 1 / (1 + np.exp(-x)), rtol=1e-15)
    np.testing.assert_allclose(g1, g * (1 - g), rtol=1e-14)
    np.testing.assert_allclose(g2, g * (1 - g) * (1 - 2 * g), rtol=1e-12, atol=1e-17)


def test_designs():
    v = np.array([-1.0, 0.5])
    np.testing.assert_array_equal(LIN.design(v), [[1, -1], [1, 0.5]])
    assert LinkSpec(basis="constant").design(v).shape == (2, 1)
    sp = LinkSpec(basis="spline", degree=3, knots=(0.0,), bounds=(-2.0, 2.0)).design(v)
    np.testing.assert_allclose(sp.sum(axis=1), 1.0, atol=1e-14)


def test_psi_zero_at_exact_fit():
    # treated risk equals the model exactly, outcomes equal the regressions' means: zero score
    beta, lam = np.array([0.3, 0.1]), np.array([0.7, -0.05])
    b = np.array([1.0, 0.4])
    q = 0.4
    r = (1 - q) * (b @ beta) + q * (b @ lam)
    psi = psi_score(b, 1, r, q, r, 0.5, np.r_[beta, lam], LIN)
    np.testing.assert_allclose(psi, 0.0, atol=1e-15)


def test_psi_example():
    # b=(1), q=0.5, r=0.6, A=1, Y=1, pi=0.5, beta=0.3, lambda=0.7: R = 0.6 + 0.8 - 0.5 = 0.9
    psi = psi_score([1.0], 1, 1, 0.5, 0.6, 0.5, [0.3, 0.7], LIN)
    np.testing.assert_allclose(psi, [0.45, 0.45], atol=1e-15)


@given(st.integers(0, 2**32 - 1), st.booleans())
def test_score_matches_scalar_transcription(seed, logistic):
    r = np.random.default_rng(seed)
    inp = random_inputs(r, 5)
    xi = r.normal(0, 0.3, 4)
    psi, _ = score(inp, xi, LOGIT if logistic else LIN)
    for i in range(5):
        ref = scalar_psi(inp.B[i], inp.a[i], inp.y[i], inp.q[i], inp.r[i], inp.pi1[i], xi[:2], xi[2:], logistic)
        np.testing.assert_allclose(psi[i], ref, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("link", [LIN, LOGIT], ids=["linear", "logistic"])
@pytest.mark.parametrize("p", [2, 3])
def test_jacobian_matches_finite_differences(link, p, rng):
    inp = random_inputs(rng, 400, p)
    xi = rng.normal(0, 0.3, 2 * p)
    _, J = score(inp, xi, link)
    h = 1e-6
    cols = []
    for e in np.eye(2 * p):
        plus = score(inp, xi + h * e, link)[0].mean(axis=0)
        minus = score(inp, xi - h * e, link)[0].mean(axis=0)
        cols.append((plus - minus) / (2 * h))
    np.testing.assert_allclose(J, np.column_stack(cols), atol=1e-8)


@pytest.mark.parametrize("link", [_kernels.LINK_LINEAR, _kernels.LINK_LOGISTIC])
def test_score_kernel_paths_agree(link, rng):
    inp = random_inputs(rng, 300)
    xi = rng.normal(0, 0.3, 4)
    nb, npy = _kernels.KERNELS["ortho_score"]
    args = (inp.B, inp.q, inp.r, inp.a, inp.y, inp.pi1, inp.pi0, xi[:2].copy(), xi[2:].copy(), link)
    for x, y in zip(nb(*args), npy(*args)):
        np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-15)


def test_linear_jacobian_free_of_xi(rng):
    inp = random_inputs(rng, 200)
    _, J1 = score(inp, rng.normal(size=4), LIN)
    _, J2 = score(inp, rng.normal(size=4), LIN)
    np.testing.assert_allclose(J1, J2, atol=1e-14)


def test_linear_jacobian_near_minus_zz_with_oracle_nuisances(oracle_sample):
    cfg, ds, nu = oracle_sample
    inp = ScoreInputs.build(ds, nu, LIN)
    truth = oracle_targets(cfg)
    xi = [truth["beta0"], truth["beta1"], truth["lambda0"], truth["lambda1"]]
    _, J = score(inp, xi, LIN)
    Z = np.hstack([(1 - inp.q)[:, None] * inp.B, inp.q[:, None] * inp.B])
    np.testing.assert_allclose(J, -Z.T @ Z / ds.n, atol=0.01)


# ---------------------------------------------------------------------------
# initializer
# ---------------------------------------------------------------------------


def test_initializer_recovers_linear_truth(rng):
    beta, lam = np.array([0.3, 0.1]), np.array([0.7, -0.05])
    v = np.linspace(-2, 2, 12)
    B = np.column_stack([np.ones_like(v), v])
    p0 = rng.uniform(0.2, 0.8, 12)
    p1 = (1 - p0) * (B @ beta) + p0 * (B @ lam)
    np.testing.assert_allclose(ls_initializer(p0, p1, B, LIN), np.r_[beta, lam], atol=1e-10)


def test_initializer_recovers_logistic_truth(rng):
    beta, lam = np.array([0.0, 0.5]), np.array([1.0, -0.5])
    v = np.linspace(-2, 2, 20)
    B = np.column_stack([np.ones_like(v), v])
    p0 = rng.uniform(0.2, 0.8, 20)
    ex = lambda x: 1 / (1 + np.exp(-x))
    p1 = (1 - p0) * ex(B @ beta) + p0 * ex(B @ lam)
    np.testing.assert_allclose(ls_initializer(p0, p1, B, LOGIT), np.r_[beta, lam], atol=1e-6)


def test_initializer_collinear_grid():
    B = np.column_stack([np.ones(6), np.ones(6)])
    with pytest.raises(SingularNormalEquations):
        ls_initializer(np.linspace(0.2, 0.7, 6), np.full(6, 0.5), B, LIN)


def test_initializer_constant_control_risk_is_singular():
    v = np.linspace(-1, 1, 6)
    B = np.column_stack([np.ones(6), v])
    with pytest.raises(SingularNormalEquations):
        ls_initializer(np.full(6, 0.4), np.full(6, 0.5), B, LIN)


def test_initializer_flat_treated_risk_gives_zero_slopes(rng):
    v = np.linspace(-1, 1, 10)
    B = np.column_stack([np.ones(10), v])
    xi = ls_initializer(rng.uniform(0.2, 0.8, 10), np.full(10, 0.45), B, LIN)
    np.testing.assert_allclose(xi, [0.45, 0, 0.45, 0], atol=1e-10)


def test_initializer_insufficient_grid():
    with pytest.raises(InsufficientGrid):
        ls_initializer([0.2, 0.4, 0.6], [0.3, 0.4, 0.5], np.column_stack([np.ones(3), [0, 1, 2]]), LIN)


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------


@given(st.integers(0, 2**32 - 1))
def test_linear_solve_is_one_newton_step(seed):
    r = np.random.default_rng(seed)
    inp = random_inputs(r, 300)
    est = solve_scores(inp, LIN, xi0=r.normal(0, 2, 4))
    assert est.converged and est.iterations <= 1
    assert np.max(np.abs(score(inp, est.xi, LIN)[0].mean(axis=0))) <= 1e-10


def test_linear_solution_is_affine_in_treated_risk(rng):
    # the linear score is affine in (r, xi) with a xi-free Jacobian: a shift of r moves xi by -J^-1 mean(Z delta)
    inp = random_inputs(rng, 300)
    base = solve_scores(inp, LIN).xi
    shifted = ScoreInputs(inp.B, inp.q, inp.r + 0.01, inp.a, inp.y, inp.pi1, inp.pi0)
    delta = 0.01 * (1 - inp.a / inp.pi1)
    Z = np.hstack([(1 - inp.q)[:, None] * inp.B, inp.q[:, None] * inp.B])
    _, J = score(inp, base, LIN)
    expected = base - np.linalg.solve(J, (Z * delta[:, None]).mean(axis=0))
    np.testing.assert_allclose(solve_scores(shifted, LIN).xi, expected, atol=1e-10)


def test_converged_score_norm(oracle_sample):
    _, ds, nu = oracle_sample
    for link in (LIN, LOGIT):
        est = solve_xi(ds, nu, link)
        assert est.converged and est.score_norm <= 1e-10


def test_logistic_recovery_at_large_n():
    cfg = DGPConfig(n=100_000, seed=11, beta=(0.0, 0.5), lam=(1.0, -0.5), structural_link="logistic")
    ds = generate(cfg).dataset
    q, r, pi = true_nuisances(cfg, ds.s, ds.column("v_s"))
    est = solve_xi(ds, NuisanceSet(q, r, pi, np.zeros(ds.n, int), 1, 0.0), LOGIT, strict=True)
    truth = np.array([0.0, 0.5, 1.0, -0.5])
    assert np.all(np.abs(est.xi - truth) <= 4 * est.se)


def test_linear_recovery_and_sandwich_with_oracle_nuisances(oracle_sample):
    cfg, ds, nu = oracle_sample
    est = solve_xi(ds, nu, LIN, strict=True)
    t = oracle_targets(cfg)
    truth = np.array([t["beta0"], t["beta1"], t["lambda0"], t["lambda1"]])
    assert np.all(np.abs(est.xi - truth) <= 4 * est.se)
    np.testing.assert_allclose(xi_variance(ds, est, nu, LIN), est.covariance, rtol=1e-12)
    th = standardize_theta(est, LIN.design_for(ds))
    assert np.all(np.abs(th.theta - [t["theta1"], t["theta2"]]) <= 4 * np.sqrt(np.diag(th.covariance)))


def test_constant_basis_equals_share_weighted_ls(rng):
    n = 2000
    s = rng.integers(1, 4, n)
    a = rng.integers(0, 2, n)
    p0 = np.array([0.2, 0.45, 0.7])[s - 1]
    y = (rng.random(n) < np.where(a == 1, 0.25 + 0.5 * p0, p0)).astype(int)
    ds = make_dataset(a, y, s)
    nu = fit_nuisances(ds, OutcomeModelSpec(None, ridge=0.0), PropensitySpec("arm-share"), folds=1)
    link = LinkSpec("linear", None, basis="constant")
    est = solve_xi(ds, nu, link)
    ls = solve_theta(risks_by_aipw(ds, nu), weights="share")
    np.testing.assert_allclose(est.xi, ls.theta, atol=1e-8)


def test_standardize_examples():
    est = XiEstimate(np.array([0.3, 0.1]), np.array([0.7, -0.05]), None, 0, True, LIN)
    B = np.column_stack([np.ones(4), [-1.0, 0.0, 1.0, 0.0]])
    np.testing.assert_allclose(standardize_theta(est, B).theta, [0.3, 0.7], atol=1e-15)
    est = XiEstimate(np.array([0.0, 1.0]), np.array([0.0, -1.0]), None, 0, True, LOGIT)
    np.testing.assert_allclose(standardize_theta(est, B).theta, [0.5, 0.5], atol=1e-15)


def test_standardize_influence_matches_finite_differences(rng):
    # theta-hat as a function of row weights: the influence is the Gateaux derivative
    inp = random_inputs(rng, 400)
    est = solve_scores(inp, LOGIT)
    th = standardize_theta(est, inp.B)
    i, eps = 7, 1e-6
    w = np.ones(inp.n)
    w[i] += eps * inp.n

    def weighted_theta(w):
        # solve the weighted estimating equation by Newton on weighted means
        xi = est.xi.copy()
        for _ in range(30):
            psi, _ = score(inp, xi, LOGIT)
            F = (w[:, None] * psi).sum(axis=0) / w.sum()
            h = 1e-7
            J = np.column_stack([((w[:, None] * score(inp, xi + h * e, LOGIT)[0]).sum(0) - (w[:, None] * score(inp, xi - h * e, LOGIT)[0]).sum(0)) / w.sum() / (2 * h) for e in np.eye(4)])
            xi = xi - np.linalg.solve(J, F)
        g = LOGIT.derivatives(inp.B @ xi[:2])[0]
        h_ = LOGIT.derivatives(inp.B @ xi[2:])[0]
        return np.array([(w * g).sum(), (w * h_).sum()]) / w.sum()

    fd = (weighted_theta(w) - th.theta) / eps
    # weight 1 + eps*n on row i moves theta by eps/(1 + eps) * IF_i
    np.testing.assert_allclose(fd * (1 + eps), th.influence[i], rtol=2e-3, atol=2e-5)


def test_weak_identification_warning(rng):
    inp = random_inputs(rng, 100)
    inp = ScoreInputs(inp.B, np.full(100, 0.995), inp.r, inp.a, inp.y, inp.pi1, inp.pi0)
    with pytest.warns(WeakIdentificationWarning):
        try:
            solve_scores(inp, LIN, xi0=np.zeros(4))
        except SingularJacobian:
            pass


def test_singular_jacobian():
    n = 50
    inp = ScoreInputs(
        np.column_stack([np.ones(n), np.ones(n)]), np.full(n, 0.5), np.full(n, 0.5),
        np.r_[np.zeros(25), np.ones(25)], np.zeros(n), np.full(n, 0.5), np.full(n, 0.5),
    )
    with pytest.raises(SingularJacobian):
        solve_scores(inp, LIN, xi0=np.zeros(4))


def test_nonconvergence_strict(rng):
    cfg = DGPConfig(n=2000, seed=1)
    ds = generate(cfg).dataset
    q, r, pi = true_nuisances(cfg, ds.s, ds.column("v_s"))
    nu = NuisanceSet(q, r, pi, np.zeros(ds.n, int), 1, 0.0)
    with pytest.raises(NonConvergence):
        solve_xi(ds, nu, LOGIT, max_iter=0, xi0=np.zeros(4), strict=True)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        est = solve_xi(ds, nu, LOGIT, max_iter=0, xi0=np.zeros(4))
    assert not est.converged and any("orthogonal solve" in str(x.message) for x in w)


def test_small_probe(oracle_sample):
    cfg, ds, nu = oracle_sample
    inp = ScoreInputs.build(ds, nu, LIN)
    t = oracle_targets(cfg)
    xi = np.array([t["beta0"], t["beta1"], t["lambda0"], t["lambda1"]])
    v = ds.column("v_s")
    for comp, d in (("p0", 0.05 * np.cos(v)), ("p1", 0.05 * np.sin(v)), ("pi", 0.05 * np.sign(v))):
        for res in orthogonality_probe(inp, xi, LIN, comp, d):
            assert res.z < 3.5
    ctrl = orthogonality_probe(inp, xi, LIN, "xi", [1.0, 0.0, 1.0, 0.0])
    assert min(r.z for r in ctrl) > 10
