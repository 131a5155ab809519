"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines as they complete.  The whole suite is seeded and deterministic; the
heavier criteria take a few minutes combined on a desktop.
"""

import functools
import itertools
import math

import numpy as np
import pytest
from scipy.special import expit, logit
from scipy.stats import binomtest

import blockfit as bf
from blockfit import FamilySpec, GridConfig, grid_params, run_experiment, sample_graph
from blockfit.engine import (
    MixtureParams,
    estep_fixed_point,
    exact_loglik,
    exact_posterior_marginals,
    lower_bound,
)
from blockfit.families import (
    BernoulliParams,
    GaussianParams,
    PoissonParams,
    get_family,
)
from blockfit.graph import EdgeCovariates, ValuedGraph
from blockfit.predict import prediction_report
from blockfit.selection import icl_penalty

import oracle_utils as ou

POISSON = FamilySpec("poisson")
PRMH = FamilySpec("poisson-prmh")
PRMI = FamilySpec("poisson-prmi")


def criterion(num, desc):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"ACCEPTANCE {num}: FAIL - {desc}")
                raise
            print(f"ACCEPTANCE {num}: PASS - {desc}")
        return wrapper
    return deco


def sign_test_wins(wins, trials, alpha=0.05):
    """One-sided sign test: P(#wins >= observed | p=1/2) < alpha."""
    return binomtest(wins, trials, 0.5, alternative="greater").pvalue < alpha


def node_driven_covariates(rng, n, levels=3):
    t = rng.integers(0, levels, n).astype(float)
    y = np.abs(t[:, None] - t[None, :])
    return EdgeCovariates.from_matrix(y[:, :, None].copy(), directed=False)


# ---------------------------------------------------------------------------


@criterion(1, "Table-1 reproduction (scaled): Q-selection frequencies")
def test_criterion_1_table1_selection():
    freqs = {}
    for n, s in [(50, 25), (100, 25), (500, 10)]:
        cfg = GridConfig(n=n, a=0.5, lam=2.0, gamma_ratio=0.5, q_star=3, s=s, seed=42)
        # single hierarchical start per fit, matching the initialization
        # protocol the reference frequencies come from
        rep = run_experiment(cfg, POISSON, mode="selection", q_max=5,
                             fit_options={"restarts": 1})
        assert rep.replicates_failed == 0
        freqs[n] = rep.q_frequencies
    assert freqs[100].get(3, 0.0) >= 0.75
    assert freqs[500].get(3, 0.0) >= 0.90
    q23 = freqs[50].get(2, 0.0) + freqs[50].get(3, 0.0)
    assert q23 >= 0.95
    assert max(freqs[50], key=freqs[50].get) == 2  # underestimation dominates


def _estimation_grid():
    cells = {}
    for n, a, lam, gam in itertools.product((100, 500), (1.0, 0.5, 0.2), (2.0, 5.0),
                                            (0.1, 0.5, 0.9)):
        cfg = GridConfig(n=n, a=a, lam=lam, gamma_ratio=gam, q_star=3, s=20, seed=99)
        rep = run_experiment(cfg, POISSON, mode="estimation",
                             fit_options={"restarts": 3})
        cells[(n, a, lam, gam)] = rep
    return cells


@pytest.fixture(scope="module")
def estimation_grid():
    return _estimation_grid()


@criterion(2, "RMSE ordering: larger n decreases RMSE, gamma->1 increases it")
def test_criterion_2_rmse_orderings(estimation_grid):
    cells = estimation_grid
    a_vals, l_vals, g_vals = (1.0, 0.5, 0.2), (2.0, 5.0), (0.1, 0.5, 0.9)

    def mean_alpha(key):
        return float(cells[key].rmse_alpha.mean())

    def mean_lam_diag(key):
        return float(np.diag(cells[key].rmse_lambda).mean())

    # cell-mean RMSE at n=500 below n=100 across matched cells
    matched = [(a, l, g) for a in a_vals for l in l_vals for g in g_vals]
    wins_a = sum(mean_alpha((500,) + c) < mean_alpha((100,) + c) for c in matched)
    wins_l = sum(mean_lam_diag((500,) + c) < mean_lam_diag((100,) + c) for c in matched)
    assert sign_test_wins(wins_a, len(matched)), f"alpha RMSE n-ordering: {wins_a}/{len(matched)}"
    assert sign_test_wins(wins_l, len(matched)), f"lambda RMSE n-ordering: {wins_l}/{len(matched)}"

    # per-parameter RMSE at gamma=0.9 above gamma=0.1 within each (n, a, lam)
    # cell (the smallest class's within rate runs the other way in the very
    # unbalanced cells, which the sign test absorbs)
    g_wins_a = g_tot_a = g_wins_l = g_tot_l = 0
    for n, a, l in [(n, a, l) for n in (100, 500) for a in a_vals for l in l_vals]:
        lo, hi = cells[(n, a, l, 0.1)], cells[(n, a, l, 0.9)]
        g_wins_a += int(np.sum(hi.rmse_alpha > lo.rmse_alpha))
        g_tot_a += hi.rmse_alpha.size
        g_wins_l += int(np.sum(np.diag(hi.rmse_lambda) > np.diag(lo.rmse_lambda)))
        g_tot_l += 3
    assert sign_test_wins(g_wins_a, g_tot_a), f"alpha RMSE gamma-ordering: {g_wins_a}/{g_tot_a}"
    assert sign_test_wins(g_wins_l, g_tot_l), f"lambda RMSE gamma-ordering: {g_wins_l}/{g_tot_l}"


@criterion(3, "normalized entropy increases monotonically in gamma")
def test_criterion_3_entropy_monotone(estimation_grid):
    hs = [estimation_grid[(500, 1.0, 5.0, g)].mean_normalized_entropy
          for g in (0.1, 0.5, 0.9)]
    # at this size the gamma <= 0.5 entropies sit on the numerical floor
    # (the posterior is degenerate), so the low end is compared with a
    # floor tolerance while the overall rise must be strict
    assert hs[0] <= hs[1] + 1e-12 and hs[1] <= hs[2] + 1e-12, f"H/n: {hs}"
    assert hs[2] > hs[0] + 1e-6, f"H/n: {hs}"


@criterion(4, "variational bound <= exact log-likelihood; mean field matches "
              "enumerated marginals under strong separation")
def test_criterion_4_bound_oracle():
    rng = np.random.default_rng(2024)
    checked = 0
    while checked < 200:
        n = int(rng.integers(4, 9))
        Q = int(rng.integers(1, 4))
        alpha = rng.dirichlet(np.ones(Q) * 2)
        kind = ("poisson", "bernoulli")[int(rng.integers(2))]
        directed = bool(rng.integers(2))
        if kind == "poisson":
            lam = rng.gamma(2.0, 2.0, (Q, Q))
            lam = lam if directed else (lam + lam.T) / 2
            params = MixtureParams(alpha=alpha, theta=PoissonParams(lam=lam))
            spec = POISSON
        else:
            pi = rng.beta(2, 2, (Q, Q))
            pi = pi if directed else (pi + pi.T) / 2
            params = MixtureParams(alpha=alpha, theta=BernoulliParams(pi=pi))
            spec = FamilySpec("bernoulli")
        g, _ = sample_graph(params, n, directed, spec, seed=int(rng.integers(2 ** 31)))
        exact = exact_loglik(g, spec, params)
        tau = rng.dirichlet(np.ones(Q), size=n)
        assert lower_bound(g, spec, tau, params) <= exact + 1e-9
        post = estep_fixed_point(g, spec, params, tau)
        assert lower_bound(g, spec, post.tau, params) <= exact + 1e-9
        checked += 1

    # separated blocks: within/between intensity ratio >= 100
    designs = [
        (np.array([[20.0, 0.05], [0.05, 5.0]]), [0, 0, 0, 0, 0, 1, 1, 1]),
        (np.array([[12.0, 0.03], [0.03, 3.0]]), [0, 0, 0, 0, 0, 1, 1, 1]),
    ]
    fam = get_family(POISSON)
    for lam, labels in designs:
        labels = np.array(labels)
        counts = np.bincount(labels)
        pr = MixtureParams(alpha=counts / counts.sum(), theta=PoissonParams(lam=lam))
        for seed in range(10):
            gen = np.random.default_rng([seed, 17])
            vals = fam.sample_matrix(pr.theta, labels, gen, None, False)
            g = ValuedGraph.from_matrix(vals, directed=False, value_kind="count")
            fr = bf.fit(g, POISSON, 2, seed=seed, restarts=8)
            marg = exact_posterior_marginals(g, POISSON, fr.params)
            tv = 0.5 * np.abs(fr.posterior.tau - marg).sum(axis=1)
            assert tv.max() < 1e-3, f"TV={tv.max()} (design {lam[0,0]}/{lam[1,1]}, seed {seed})"


@criterion(5, "every EM bound trajectory is non-decreasing (1e-8 slack)")
def test_criterion_5_monotone_em():
    rng = np.random.default_rng(515)
    for k in range(100):
        n = int(rng.integers(4, 16))
        Q = int(rng.integers(1, 4))
        alpha = rng.dirichlet(np.ones(Q) * 2)
        directed = bool(rng.integers(2))
        if rng.integers(2):
            lam = rng.gamma(2.0, 2.0, (Q, Q))
            lam = lam if directed else (lam + lam.T) / 2
            params = MixtureParams(alpha=alpha, theta=PoissonParams(lam=lam))
            spec = POISSON
        else:
            pi = rng.beta(1.5, 1.5, (Q, Q))
            pi = pi if directed else (pi + pi.T) / 2
            params = MixtureParams(alpha=alpha, theta=BernoulliParams(pi=pi))
            spec = FamilySpec("bernoulli")
        g, _ = sample_graph(params, n, directed, spec, seed=int(rng.integers(2 ** 31)))
        fr = bf.fit(g, spec, int(rng.integers(1, 5)), restarts=2, seed=k)
        diffs = np.diff(np.asarray(fr.bound_trajectory))
        assert diffs.size == 0 or diffs.min() >= -1e-8, f"fit {k}: min step {diffs.min()}"


@criterion(6, "weighted M-step closed forms match independent direct evaluation")
def test_criterion_6_mstep_closed_forms():
    rng = np.random.default_rng(606)
    n, Q = 7, 2
    tau = ou.random_tau(rng, n, Q)

    def direct(vals, transform=lambda x: x):
        out = np.empty((Q, Q))
        for q in range(Q):
            for l in range(Q):
                out[q, l] = ou.loop_weighted_mean(tau, transform(vals), q, l)
        return out

    counts = rng.integers(0, 7, (n, n)).astype(float)
    np.fill_diagonal(counts, 0)
    g_count = ValuedGraph.from_matrix(counts, True, "count")
    assert np.allclose(bf.weighted_mle(POISSON, tau, g_count).lam, direct(counts),
                       atol=1e-10)

    binary = (rng.random((n, n)) < 0.5).astype(float)
    np.fill_diagonal(binary, 0)
    g_bin = ValuedGraph.from_matrix(binary, True, "count")
    assert np.allclose(bf.weighted_mle(FamilySpec("bernoulli"), tau, g_bin).pi,
                       direct(binary), atol=1e-10)

    reals = rng.normal(0, 2, (n, n))
    np.fill_diagonal(reals, 0)
    g_real = ValuedGraph.from_matrix(reals, True, "real")
    gau = bf.weighted_mle(FamilySpec("gaussian"), tau, g_real)
    mu_direct = direct(reals)
    assert np.allclose(gau.mu, mu_direct, atol=1e-10)
    var_direct = np.empty((Q, Q))
    for q in range(Q):
        for l in range(Q):
            var_direct[q, l] = ou.loop_weighted_moment(tau, reals, q, l, mu_direct[q, l])
    assert np.allclose(gau.sigma2, var_direct, atol=1e-10)

    labels = rng.integers(1, 4, (n, n)).astype(float)
    np.fill_diagonal(labels, 0)
    g_lab = ValuedGraph.from_matrix(labels, True, "label", num_labels=3)
    probs = bf.weighted_mle(FamilySpec("multinomial", num_labels=3), tau, g_lab).probs
    for k in range(1, 4):
        assert np.allclose(probs[:, :, k - 1], direct(labels, lambda v, k=k: (v == k).astype(float)),
                           atol=1e-10)

    # undirected paired values for the bivariate family
    raw = rng.normal(0, 1, (n, n, 2))
    vals = np.zeros_like(raw)
    for i in range(n):
        for j in range(i + 1, n):
            vals[i, j] = raw[i, j]
            vals[j, i] = raw[i, j, ::-1]
    g_pair = ValuedGraph.from_matrix(vals, False, "paired")
    big = bf.weighted_mle(FamilySpec("bigauss"), tau, g_pair)
    x1, x2 = vals[:, :, 0], vals[:, :, 1]
    for q in range(Q):
        for l in range(Q):
            m1 = ou.loop_weighted_mean(tau, x1, q, l)
            m2 = ou.loop_weighted_mean(tau, x2, q, l)
            assert abs(big.mu[q, l, 0] - m1) < 1e-10
            assert abs(big.mu[q, l, 1] - m2) < 1e-10
            c12 = ou.loop_weighted_mean(tau, x1 * x2, q, l) - m1 * m2
            assert abs(big.cov[q, l, 0, 1] - c12) < 1e-10

    # regressions: weighted least squares against loop-built normal equations
    p = 2
    y = rng.normal(0, 1, (n, n, p))
    cov = EdgeCovariates.from_matrix(y, directed=True)
    lin = bf.weighted_mle(FamilySpec("linreg", covariate_dim=p), tau, g_real, cov)
    for q in range(Q):
        for l in range(Q):
            G = np.zeros((p, p))
            r = np.zeros(p)
            rss_w = 0.0
            for i in range(n):
                for j in range(n):
                    if i == j:
                        continue
                    w = tau[i, q] * tau[j, l]
                    G += w * np.outer(cov.y[i, j], cov.y[i, j])
                    r += w * cov.y[i, j] * reals[i, j]
            beta = np.linalg.solve(G, r)
            assert np.allclose(lin.beta[q, l], beta, atol=1e-10)
            for i in range(n):
                for j in range(n):
                    if i == j:
                        continue
                    rss_w += tau[i, q] * tau[j, l] * (reals[i, j] - beta @ cov.y[i, j]) ** 2
            assert abs(lin.sigma2[q, l] - rss_w / ou.loop_block_weight(tau, q, l)) < 1e-10

    # simple regression: pooled slope and per-block intercepts
    y1 = rng.normal(0, 1, (n, n, 1))
    cov1 = EdgeCovariates.from_matrix(y1, directed=True)
    simple = bf.weighted_mle(FamilySpec("simplereg"), tau, g_real, cov1)
    ybar = np.empty((Q, Q))
    xbar = np.empty((Q, Q))
    sxy = syy = 0.0
    yv = y1[:, :, 0].copy()
    np.fill_diagonal(yv, 0.0)
    for q in range(Q):
        for l in range(Q):
            ybar[q, l] = ou.loop_weighted_mean(tau, yv, q, l)
            xbar[q, l] = ou.loop_weighted_mean(tau, reals, q, l)
    for q in range(Q):
        for l in range(Q):
            for i in range(n):
                for j in range(n):
                    if i == j:
                        continue
                    w = tau[i, q] * tau[j, l]
                    sxy += w * (reals[i, j] - xbar[q, l]) * (yv[i, j] - ybar[q, l])
                    syy += w * (yv[i, j] - ybar[q, l]) ** 2
    b = sxy / syy
    assert abs(simple.slope - b) < 1e-10
    assert np.allclose(simple.intercept, xbar - b * ybar, atol=1e-10)

    # generic natural-parameter path agrees with the closed forms
    theta_p = bf.expfam_mle(lambda x: x, np.exp, np.log, tau, g_count)
    assert np.allclose(np.exp(theta_p), bf.weighted_mle(POISSON, tau, g_count).lam,
                       atol=1e-10)
    theta_b = bf.expfam_mle(lambda x: x, expit, logit, tau, g_bin)
    assert np.allclose(expit(theta_b), direct(binary), atol=1e-10)


@criterion(7, "Poisson-regression M-step: tiny gradient, matches grid oracle")
def test_criterion_7_poisson_regression():
    rng = np.random.default_rng(707)
    n = 14
    t = rng.uniform(0.0, 2.0, n)
    y = np.abs(t[:, None] - t[None, :])[:, :, None]
    cov = EdgeCovariates.from_matrix(y.copy(), directed=True)
    rate = 2.0 * np.exp(0.7 * y[:, :, 0])
    x = rng.poisson(rate).astype(float)
    np.fill_diagonal(x, 0)
    g = ValuedGraph.from_matrix(x, True, "count")
    tau = ou.random_tau(rng, n, 2)
    for mode, shared in (("homogeneous", True), ("inhomogeneous", False)):
        lam, beta = bf.poisson_regression_mle(tau, g, cov, mode=mode)
        g_loglam, g_beta = ou.loop_poisson_reg_grad(tau, x, cov.y, lam, beta, shared)
        assert np.max(np.abs(g_loglam)) < 1e-6
        assert np.max(np.abs(g_beta)) < 1e-6

    # single block, one covariate: 2-d grid-search oracle within 1e-3
    tau1 = np.ones((n, 1))
    lam1, beta1 = bf.poisson_regression_mle(tau1, g, cov, mode="homogeneous")
    lam_g, beta_g = ou.grid_search_poisson_reg(x, y, lam_range=(0.5, 8.0),
                                               beta_range=(-2.0, 2.0),
                                               refinements=6, size=61)
    assert abs(lam1[0, 0] - lam_g) < 1e-3
    assert abs(beta1[0] - beta_g) < 1e-3


@criterion(8, "ICL penalty arithmetic and printed parameter counts")
def test_criterion_8_icl_arithmetic():
    pen = icl_penalty(POISSON, 3, 100, directed=False)
    assert abs(pen - 0.5 * (6 * math.log(9900) - 2 * math.log(100))) < 1e-12
    for Q in range(1, 11):
        assert bf.param_count(POISSON, Q, directed=False) == Q * (Q + 1) // 2
        assert bf.param_count(PRMI, Q, directed=False) == Q * (Q + 1)
        assert bf.param_count(PRMH, Q, directed=False) == 1 + Q * (Q + 1) // 2


@criterion(9, "covariate absorption: PRMH needs no extra classes for "
              "covariate-driven structure")
def test_criterion_9_covariate_absorption():
    reps = 20
    # scenario A: 4 latent classes plus a real covariate effect; the
    # covariate-blind model needs at least as many classes
    wins = 0
    lam4 = np.array([
        [8.0, 2.0, 0.6, 0.2],
        [2.0, 5.0, 1.5, 0.4],
        [0.6, 1.5, 3.0, 0.8],
        [0.2, 0.4, 0.8, 1.5],
    ])
    alpha4 = np.full(4, 0.25)
    truth_a = MixtureParams(alpha=alpha4,
                            theta=bf.families.PoissonRegParams(
                                lam=lam4, beta=np.array([-0.3]), shared=True))
    for r in range(reps):
        rng = np.random.default_rng([909, r])
        cov = node_driven_covariates(rng, 100)
        g, _ = sample_graph(truth_a, 100, False, PRMH, seed=[910, r], cov=cov)
        q_pm = bf.select_q(g, POISSON, range(1, 7), seed=r,
                           fit_options={"restarts": 3}).chosen_q
        q_prmh = bf.select_q(g, PRMH, cov=cov, q_range=range(1, 7), seed=r,
                             fit_options={"restarts": 3}).chosen_q
        wins += q_pm >= q_prmh
    assert wins >= 0.8 * reps, f"PM >= PRMH classes in only {wins}/{reps} replicates"

    # scenario B: one true class, all structure covariate-driven; PRMH
    # should select a single class
    ones = 0
    truth_b = MixtureParams(alpha=np.array([1.0]),
                            theta=bf.families.PoissonRegParams(
                                lam=np.array([[5.0]]), beta=np.array([-0.3]),
                                shared=True))
    for r in range(reps):
        rng = np.random.default_rng([911, r])
        cov = node_driven_covariates(rng, 100)
        g, _ = sample_graph(truth_b, 100, False, PRMH, seed=[912, r], cov=cov)
        q_prmh = bf.select_q(g, PRMH, cov=cov, q_range=range(1, 5), seed=r,
                             fit_options={"restarts": 3}).chosen_q
        ones += q_prmh == 1
    assert ones >= 0.8 * reps, f"PRMH chose 1 class in only {ones}/{reps} replicates"


@criterion(10, "prediction: R2(K) >= 0.8 at n=200 and K_hat == row sums exactly")
def test_criterion_10_prediction():
    rng = np.random.default_rng(1010)
    n = 200
    cov = node_driven_covariates(rng, n)
    lam4 = np.array([
        [8.0, 2.0, 0.6, 0.2],
        [2.0, 5.0, 1.5, 0.4],
        [0.6, 1.5, 3.0, 0.8],
        [0.2, 0.4, 0.8, 1.5],
    ])
    truth = MixtureParams(alpha=np.full(4, 0.25),
                          theta=bf.families.PoissonRegParams(
                              lam=lam4, beta=np.array([-0.3]), shared=True))
    g, _ = sample_graph(truth, n, False, PRMH, seed=10101, cov=cov)
    fr = bf.fit(g, PRMH, 4, cov=cov, seed=0, restarts=3)
    rep = prediction_report(fr, g, cov)
    assert np.array_equal(rep.predicted_degrees, rep.predicted_edges.sum(axis=1))
    assert rep.r2_degrees >= 0.8, f"R2(K) = {rep.r2_degrees}"
