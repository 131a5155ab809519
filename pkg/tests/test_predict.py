import math

import numpy as np
import pytest

import blockfit as bf
from blockfit import FamilySpec
from blockfit.engine import FitResult, MixtureParams, VariationalPosterior
from blockfit.families import PoissonParams, PoissonRegParams
from blockfit.graph import EdgeCovariates, ValuedGraph
from blockfit.predict import prediction_report, predict_degrees, predict_edges, r_squared

POISSON = FamilySpec("poisson")
PRMH = FamilySpec("poisson-prmh")


def make_fit(params, tau, spec):
    tau = np.asarray(tau, dtype=float)
    return FitResult(params=params, posterior=VariationalPosterior(tau=tau),
                     bound_trajectory=[0.0], entropy=0.0,
                     map_assignment=np.argmax(tau, axis=1), converged=True,
                     iterations=1, spec=spec)


def test_single_class_prediction_is_block_rate():
    n = 6
    params = MixtureParams(alpha=np.array([1.0]), theta=PoissonParams(lam=np.array([[2.5]])))
    g, _ = bf.sample_graph(params, n, False, POISSON, seed=0)
    fr = make_fit(params, np.ones((n, 1)), POISSON)
    xhat = predict_edges(fr, g)
    off = ~np.eye(n, dtype=bool)
    assert xhat[off] == pytest.approx(np.full(n * (n - 1), 2.5))
    assert predict_degrees(fr, g) == pytest.approx(np.full(n, (n - 1) * 2.5))


def test_hard_tau_prediction_exact_block_constants():
    lam = np.array([[4.0, 1.0], [1.0, 2.0]])
    params = MixtureParams(alpha=np.array([0.5, 0.5]), theta=PoissonParams(lam=lam))
    z = np.array([0, 0, 1, 1, 1])
    tau = np.zeros((5, 2))
    tau[np.arange(5), z] = 1.0
    g, _ = bf.sample_graph(params, 5, False, POISSON, seed=1)
    fr = make_fit(params, tau, POISSON)
    xhat = predict_edges(fr, g)
    for i in range(5):
        for j in range(5):
            if i != j:
                assert xhat[i, j] == pytest.approx(lam[z[i], z[j]])


def test_prmh_prediction_covariate_factor():
    # beta = -0.317, lam = 1, y = 3.82 -> prediction ~ 0.298
    params = MixtureParams(alpha=np.array([1.0]),
                           theta=PoissonRegParams(lam=np.array([[1.0]]),
                                                  beta=np.array([-0.317]), shared=True))
    n = 3
    y = np.full((n, n, 1), 3.82)
    cov = EdgeCovariates.from_matrix(y, directed=False)
    vals = np.zeros((n, n))
    g = ValuedGraph.from_matrix(vals, directed=False, value_kind="count")
    fr = make_fit(params, np.ones((n, 1)), PRMH)
    xhat = predict_edges(fr, g, cov)
    assert xhat[0, 1] == pytest.approx(math.exp(-0.317 * 3.82), abs=1e-12)
    assert xhat[0, 1] == pytest.approx(0.298, abs=1e-3)


def test_degrees_are_row_sums_identity():
    rng = np.random.default_rng(2)
    lam = np.array([[3.0, 0.5], [0.5, 1.0]])
    params = MixtureParams(alpha=np.array([0.5, 0.5]), theta=PoissonParams(lam=lam))
    g, _ = bf.sample_graph(params, 12, False, POISSON, seed=3)
    tau = rng.dirichlet(np.ones(2), size=12)
    fr = make_fit(params, tau, POISSON)
    xhat = predict_edges(fr, g)
    assert predict_degrees(fr, g) == pytest.approx(xhat.sum(axis=1), abs=0)


def test_r_squared_examples():
    obs = [1.0, 2.0, 3.0]
    assert r_squared(obs, obs) == pytest.approx(1.0)
    assert r_squared(obs, [2.0, 2.0, 2.0]) == pytest.approx(0.0)
    # hand-checked: residuals (0, 1, 1), total 2
    assert r_squared([1.0, 2.0, 3.0], [1.0, 3.0, 2.0]) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        r_squared([1.0, 1.0], [1.0, 2.0])
    with pytest.raises(ValueError):
        r_squared([1.0], [1.0])


def test_prediction_report_consistency():
    lam = np.array([[5.0, 0.5], [0.5, 2.0]])
    params = MixtureParams(alpha=np.array([0.5, 0.5]), theta=PoissonParams(lam=lam))
    g, _ = bf.sample_graph(params, 30, False, POISSON, seed=4)
    fr = bf.fit(g, POISSON, 2, seed=0, restarts=3)
    rep = prediction_report(fr, g)
    assert rep.predicted_degrees == pytest.approx(rep.predicted_edges.sum(axis=1), abs=0)
    assert rep.observed_degrees == pytest.approx(g.weighted_degrees())
    assert rep.r2_degrees <= 1.0 and rep.r2_edges <= 1.0
    # training-data prediction with a decent fit should explain most of K
    assert rep.r2_degrees > 0.5
