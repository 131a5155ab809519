"""Goodness-of-fit predictions: per-edge values, weighted degrees, R^2.

Predicted edge values average the block means under the posterior,
X_hat_ij = sum_ql tau_iq tau_jl E[X_ij | q, l] (for the covariate Poisson
models E[X_ij | q, l] = lam_ql exp(beta' y_ij)); predicted weighted
degrees are their row sums, so K_hat_i == sum_{j != i} X_hat_ij by
construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import families
from .engine import FitResult
from .errors import BlockfitError
from .graph import EdgeCovariates, ValuedGraph


@dataclass
class PredictionReport:
    observed_degrees: np.ndarray   # (n,)
    predicted_degrees: np.ndarray  # (n,)
    observed_edges: np.ndarray     # (n, n), zero diagonal
    predicted_edges: np.ndarray    # (n, n), zero diagonal
    r2_degrees: float
    r2_edges: float


def predict_edges(fit_result: FitResult, graph: ValuedGraph,
                  cov: EdgeCovariates | None = None, spec=None) -> np.ndarray:
    """X_hat for every ordered pair (zero diagonal)."""
    spec = spec or getattr(fit_result, "spec", None)
    if spec is None:
        raise BlockfitError("predict_edges needs the family spec")
    fam = families.get_family(spec)
    fam.check_graph(graph, cov)
    tau = fit_result.posterior.tau
    if tau.shape[0] != graph.n:
        raise BlockfitError("fit and graph disagree on the number of nodes")
    return fam.predicted_matrix(fit_result.params.theta, tau, graph, cov)


def predict_degrees(fit_result: FitResult, graph: ValuedGraph,
                    cov: EdgeCovariates | None = None, spec=None) -> np.ndarray:
    """K_hat_i = sum_{j != i} X_hat_ij (row sums of predict_edges)."""
    return predict_edges(fit_result, graph, cov, spec=spec).sum(axis=1)


def r_squared(observed, predicted) -> float:
    """Coefficient of determination 1 - SS_res / SS_tot (can be negative)."""
    obs = np.asarray(observed, dtype=float).ravel()
    pred = np.asarray(predicted, dtype=float).ravel()
    if obs.size != pred.size or obs.size < 2:
        raise ValueError("need two same-length vectors of at least 2 points")
    ss_tot = float(np.sum((obs - obs.mean()) ** 2))
    if ss_tot == 0.0:
        raise ValueError("observed values have zero variance")
    ss_res = float(np.sum((obs - pred) ** 2))
    return 1.0 - ss_res / ss_tot


def prediction_report(fit_result: FitResult, graph: ValuedGraph,
                      cov: EdgeCovariates | None = None, spec=None) -> PredictionReport:
    """Observed-versus-predicted tables for edges and weighted degrees."""
    xhat = predict_edges(fit_result, graph, cov, spec=spec)
    xobs = graph.scalar_values.copy()
    np.fill_diagonal(xobs, 0.0)
    khat = xhat.sum(axis=1)
    kobs = xobs.sum(axis=1)
    off = graph.offdiag_mask()
    if not graph.directed:
        off = np.triu(off)  # each unordered pair once
    return PredictionReport(
        observed_degrees=kobs,
        predicted_degrees=khat,
        observed_edges=xobs,
        predicted_edges=xhat,
        r2_degrees=r_squared(kobs, khat),
        r2_edges=r_squared(xobs[off], xhat[off]),
    )
