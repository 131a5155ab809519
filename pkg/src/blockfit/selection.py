"""ICL computation and selection of the number of latent groups.

    ICL(m_Q) = max_gamma log P(X, Z~ | gamma, m_Q)
               - 1/2 { P_Q log[n(n-1)] - (Q - 1) log n }

where Z~ is the MAP assignment from the fitted posterior and gamma is
re-optimized under that hard assignment (one hard-weight M-step).  The
edge-count term uses n(n-1) for both directed and undirected graphs, as
printed; ``edge_count="unordered"`` switches to n(n-1)/2 for sensitivity
checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import families
from .engine import FitResult, MixtureParams, complete_data_loglik, fit, mstep
from .errors import BlockfitError, NumericalError
from .graph import EdgeCovariates, ValuedGraph


@dataclass
class SelectionRecord:
    q: int
    fit: FitResult | None
    icl: float
    error: str | None = None


@dataclass
class SelectionResult:
    """Per-Q fits with their ICL values and the argmax choice."""

    records: list
    chosen_q: int

    def record(self, q) -> SelectionRecord:
        for rec in self.records:
            if rec.q == q:
                return rec
        raise KeyError(q)

    @property
    def best_fit(self) -> FitResult:
        return self.record(self.chosen_q).fit


def map_assignment(tau) -> np.ndarray:
    """Per-node argmax class, ties to the smallest index."""
    return np.argmax(np.asarray(tau, dtype=float), axis=1)


def icl_penalty(spec, Q: int, n: int, directed: bool, edge_count: str = "ordered") -> float:
    """1/2 { P_Q log m - (Q - 1) log n } with m = n(n-1) (or half of it)."""
    if edge_count not in ("ordered", "unordered"):
        raise ValueError(f"unknown edge-count convention {edge_count!r}")
    m = n * (n - 1) if edge_count == "ordered" else n * (n - 1) // 2
    p_q = families.param_count(spec, Q, directed)
    return 0.5 * (p_q * np.log(m) - (Q - 1) * np.log(n))


def icl(graph: ValuedGraph, spec, fit_result: FitResult,
        cov: EdgeCovariates | None = None, *, edge_count: str = "ordered") -> float:
    """ICL of a fitted model.

    gamma is re-optimized under the hard MAP assignment before evaluating
    the complete-data log-likelihood; P_Q stays at its nominal value even
    when classes come out empty (their blocks are frozen, not dropped).
    """
    Q = fit_result.params.Q
    n = graph.n
    labels = np.asarray(fit_result.map_assignment, dtype=int)
    hard = np.zeros((n, Q))
    hard[np.arange(n), labels] = 1.0
    hard_params = mstep(graph, spec, hard, cov, prev=fit_result.params.theta)
    cll = complete_data_loglik(graph, spec, hard_params, labels, cov)
    return float(cll - icl_penalty(spec, Q, n, graph.directed, edge_count))


def select_q(graph: ValuedGraph, spec, q_range, cov: EdgeCovariates | None = None,
             fit_options: dict | None = None, seed=None, *,
             edge_count: str = "ordered", n_jobs: int = 1) -> SelectionResult:
    """Fit every Q in ``q_range`` and pick the ICL maximizer.

    Ties break toward smaller Q; per-Q restart streams are seeded from
    (seed, Q) so the sweep is reproducible and independent of n_jobs.
    Failed fits are recorded with ICL = -inf instead of aborting the sweep.
    """
    q_list = [int(q) for q in q_range]
    if not q_list or sorted(q_list) != q_list:
        raise ValueError("q_range must be nonempty and ascending")
    opts = dict(fit_options or {})
    opts.pop("seed", None)

    def one(q):
        try:
            fr = fit(graph, spec, q, cov,
                     seed=None if seed is None else int(seed) * 1000 + q, **opts)
            fr.icl = icl(graph, spec, fr, cov, edge_count=edge_count)
            return SelectionRecord(q=q, fit=fr, icl=fr.icl)
        except (BlockfitError, ValueError, np.linalg.LinAlgError) as exc:
            return SelectionRecord(q=q, fit=None, icl=-np.inf, error=str(exc))

    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            records = list(pool.map(one, q_list))
    else:
        records = [one(q) for q in q_list]

    best = _choose(records)
    if not np.isfinite(best.icl):
        raise NumericalError("every Q in the sweep failed to fit")
    return SelectionResult(records=records, chosen_q=best.q)


def _choose(records):
    """Argmax ICL; exact ties break toward the smaller Q (records ascend)."""
    best = records[0]
    for rec in records[1:]:
        if rec.icl > best.icl:
            best = rec
    return best
