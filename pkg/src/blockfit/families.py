"""Edge-distribution families: log-densities and weighted ML updates.

Every family answers three questions for the fitting engine:

* scoring -- log f_ql(X_ij) for all blocks (q, l) and pairs (i, j), either
  as a sum-of-products decomposition  log f_ql(X_ij) = sum_k S_k[i,j] C_k[q,l]
  (cheap matrix products) or, when no such split exists, as a dense
  (Q, Q, n, n) tensor;
* estimation -- the maximizer of the weighted log-likelihood
  sum_{i != j} tau_iq tau_jl log f_ql(X_ij), closed form where available,
  Newton on the weighted GLM objective for the Poisson regressions;
* bookkeeping -- independent-parameter counts, sampling, block means,
  JSON round-trip.

Blocks whose total weight falls below ``DEGENERATE_REL_TOL`` times the
overall weight keep their previous parameter value and are flagged in the
``degenerate`` mask so a temporarily empty class cannot poison the fit
with NaNs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln

from .errors import FamilyError, NumericalError, SingularBlockError
from .graph import EdgeCovariates, ValuedGraph

# Surrogate for log f of an impossible value (x > 0 under a zero Poisson
# rate, x = 1 under pi = 0, ...); keeps the fixed point finite.
LOG_ZERO = -1.0e12

# Block weight below this fraction of the total weight -> frozen parameter.
DEGENERATE_REL_TOL = 1e-12

# Variance floor for the Gaussian-type families.
VAR_FLOOR = 1e-12

# Fitted probabilities stay inside (0, 1): a weighted mean that rounds to
# exactly 1.0 would push log(1 - pi) onto the LOG_ZERO surrogate and wreck
# the bound for edges carrying clipped-tau residual weight.
PROB_FLOOR = 1e-12

# Poisson-regression Newton controls.
REG_MAX_ITER = 100
REG_REL_TOL = 1e-8
REG_GRAD_TOL = 1e-8
REG_BETA_BOUND = 1e3

FAMILY_KINDS = (
    "bernoulli",
    "multinomial",
    "gaussian",
    "bigauss",
    "poisson",
    "poisson-prmh",
    "poisson-prmi",
    "linreg",
    "simplereg",
)

_COVARIATE_KINDS = ("poisson-prmh", "poisson-prmi", "linreg", "simplereg")


@dataclass(frozen=True)
class FamilySpec:
    """Choice of edge distribution plus its structural options.

    Parameters
    ----------
    kind : str
        One of ``FAMILY_KINDS``.
    num_labels : int, optional
        Number of labels m for the multinomial family.
    covariate_dim : int, optional
        Covariate dimension p for the regression families (simplereg is
        scalar, p = 1).
    """

    kind: str
    num_labels: int | None = None
    covariate_dim: int | None = None

    def __post_init__(self):
        if self.kind not in FAMILY_KINDS:
            raise FamilyError(f"unknown family kind {self.kind!r}")
        if self.kind == "multinomial" and (self.num_labels is None or self.num_labels < 2):
            raise FamilyError("multinomial family requires num_labels >= 2")
        if self.kind in _COVARIATE_KINDS:
            p = 1 if self.covariate_dim is None else self.covariate_dim
            if self.kind == "simplereg" and p != 1:
                raise FamilyError("simplereg uses a scalar covariate (p = 1)")
            if p < 1:
                raise FamilyError("covariate dimension must be >= 1")
            object.__setattr__(self, "covariate_dim", p)

    @property
    def uses_covariates(self) -> bool:
        return self.kind in _COVARIATE_KINDS

    @property
    def shared_params(self) -> str | None:
        """Description of parameters shared across all (q, l) blocks."""
        return {
            "poisson-prmh": "beta (regression coefficients)",
            "simplereg": "b (slope) and sigma2",
        }.get(self.kind)


# ---------------------------------------------------------------------------
# Block-parameter records


@dataclass
class PoissonParams:
    lam: np.ndarray  # (Q, Q) rates
    degenerate: np.ndarray | None = None

    @property
    def Q(self):
        return self.lam.shape[0]

    def permute(self, perm):
        return replace(self, lam=self.lam[np.ix_(perm, perm)],
                       degenerate=_perm2(self.degenerate, perm))


@dataclass
class PoissonRegParams:
    lam: np.ndarray                 # (Q, Q) baseline rates
    beta: np.ndarray                # (p,) shared, or (Q, Q, p) per block
    shared: bool = True
    degenerate: np.ndarray | None = None

    @property
    def Q(self):
        return self.lam.shape[0]

    def permute(self, perm):
        beta = self.beta if self.shared else self.beta[np.ix_(perm, perm)]
        return replace(self, lam=self.lam[np.ix_(perm, perm)], beta=beta,
                       degenerate=_perm2(self.degenerate, perm))


@dataclass
class BernoulliParams:
    pi: np.ndarray  # (Q, Q) edge probabilities
    degenerate: np.ndarray | None = None

    @property
    def Q(self):
        return self.pi.shape[0]

    def permute(self, perm):
        return replace(self, pi=self.pi[np.ix_(perm, perm)],
                       degenerate=_perm2(self.degenerate, perm))


@dataclass
class MultinomialParams:
    probs: np.ndarray  # (Q, Q, m) label probabilities
    degenerate: np.ndarray | None = None

    @property
    def Q(self):
        return self.probs.shape[0]

    def permute(self, perm):
        return replace(self, probs=self.probs[np.ix_(perm, perm)],
                       degenerate=_perm2(self.degenerate, perm))


@dataclass
class GaussianParams:
    mu: np.ndarray      # (Q, Q)
    sigma2: np.ndarray  # (Q, Q)
    degenerate: np.ndarray | None = None

    @property
    def Q(self):
        return self.mu.shape[0]

    def permute(self, perm):
        ix = np.ix_(perm, perm)
        return replace(self, mu=self.mu[ix], sigma2=self.sigma2[ix],
                       degenerate=_perm2(self.degenerate, perm))


@dataclass
class BivariateGaussianParams:
    mu: np.ndarray   # (Q, Q, 2)
    cov: np.ndarray  # (Q, Q, 2, 2)
    degenerate: np.ndarray | None = None

    @property
    def Q(self):
        return self.mu.shape[0]

    def permute(self, perm):
        ix = np.ix_(perm, perm)
        return replace(self, mu=self.mu[ix], cov=self.cov[ix],
                       degenerate=_perm2(self.degenerate, perm))


@dataclass
class LinearRegressionParams:
    beta: np.ndarray    # (Q, Q, p)
    sigma2: np.ndarray  # (Q, Q)
    degenerate: np.ndarray | None = None

    @property
    def Q(self):
        return self.beta.shape[0]

    def permute(self, perm):
        ix = np.ix_(perm, perm)
        return replace(self, beta=self.beta[ix], sigma2=self.sigma2[ix],
                       degenerate=_perm2(self.degenerate, perm))


@dataclass
class SimpleRegressionParams:
    intercept: np.ndarray  # (Q, Q) block intercepts
    slope: float           # shared
    sigma2: float          # shared
    degenerate: np.ndarray | None = None

    @property
    def Q(self):
        return self.intercept.shape[0]

    def permute(self, perm):
        return replace(self, intercept=self.intercept[np.ix_(perm, perm)],
                       degenerate=_perm2(self.degenerate, perm))


def _perm2(mask, perm):
    return None if mask is None else mask[np.ix_(perm, perm)]


# ---------------------------------------------------------------------------
# Score containers consumed by the variational engine


class DecomposedScores:
    """log f_ql(X_ij) = sum_k stats[k][i, j] * coeffs[k][q, l].

    All stats carry a zero diagonal, so sums over j automatically exclude
    j = i.
    """

    def __init__(self, stats, coeffs, directed):
        self.stats = [np.asarray(s) for s in stats]
        self.coeffs = [np.asarray(c, dtype=float) for c in coeffs]
        self.directed = directed

    def node_scores(self, tau):
        """D[i, q] = sum_{j != i} sum_l tau[j, l] * g_ql(i, j).

        For directed graphs g includes both log f_ql(X_ij) and
        log f_lq(X_ji); for undirected graphs only the former.
        """
        D = np.zeros((tau.shape[0], tau.shape[1]))
        for S, C in zip(self.stats, self.coeffs):
            D += S @ (tau @ C.T)
            if self.directed:
                D += S.T @ (tau @ C)
        return D

    def edge_term(self, tau):
        """sum over pairs (ordered, or i<j when undirected) of ttlogf."""
        t = 0.0
        for S, C in zip(self.stats, self.coeffs):
            t += np.sum((tau.T @ S @ tau) * C)
        return t if self.directed else 0.5 * t

    def dense(self):
        S = np.stack(self.stats)
        C = np.stack(self.coeffs)
        return np.einsum("kql,kij->qlij", C, S)

    def gs_state(self, tau):
        return _DecomposedGS(self, tau)


class DenseScores:
    """Fallback holding the full (Q, Q, n, n) log-density tensor."""

    def __init__(self, tensor, directed):
        self.tensor = np.asarray(tensor)
        n = self.tensor.shape[-1]
        self.tensor[:, :, np.arange(n), np.arange(n)] = 0.0
        self.directed = directed

    def node_scores(self, tau):
        D = np.einsum("qlij,jl->iq", self.tensor, tau)
        if self.directed:
            D += np.einsum("lqji,jl->iq", self.tensor, tau)
        return D

    def edge_term(self, tau):
        t = np.einsum("iq,qlij,jl->", tau, self.tensor, tau)
        return t if self.directed else 0.5 * t

    def dense(self):
        return self.tensor

    def gs_state(self, tau):
        return _DenseGS(self, tau)


class _DecomposedGS:
    """Row-at-a-time (Gauss-Seidel) evaluation with O(Q^2) row updates."""

    def __init__(self, ops, tau):
        self.ops = ops
        self.tau = tau
        self.tc = [tau @ C.T for C in ops.coeffs]
        self.td = [tau @ C for C in ops.coeffs] if ops.directed else None

    def row_score(self, i):
        s = 0.0
        for k, S in enumerate(self.ops.stats):
            s = s + S[i, :] @ self.tc[k]
            if self.td is not None:
                s = s + S[:, i] @ self.td[k]
        return s

    def set_row(self, i, row):
        self.tau[i] = row
        for k, C in enumerate(self.ops.coeffs):
            self.tc[k][i] = row @ C.T
            if self.td is not None:
                self.td[k][i] = row @ C


class _DenseGS:
    def __init__(self, ops, tau):
        self.ops = ops
        self.tau = tau

    def row_score(self, i):
        L = self.ops.tensor
        s = np.einsum("qlj,jl->q", L[:, :, i, :], self.tau)
        if self.ops.directed:
            s = s + np.einsum("lqj,jl->q", L[:, :, :, i], self.tau)
        return s

    def set_row(self, i, row):
        self.tau[i] = row


# ---------------------------------------------------------------------------
# Shared numeric helpers


def _safe_log(a):
    """log with LOG_ZERO standing in for log 0."""
    a = np.asarray(a, dtype=float)
    return np.where(a > 0, np.log(np.where(a > 0, a, 1.0)), LOG_ZERO)


def _offdiag_mask(n):
    return 1.0 - np.eye(n)


def _block_weights(tau, n):
    """W[q, l] = sum_{i != j} tau_iq tau_jl and the degenerate-block mask."""
    col = tau.sum(axis=0)
    W = np.outer(col, col) - tau.T @ tau  # removes the i = j terms exactly
    total = W.sum()
    degen = W <= DEGENERATE_REL_TOL * max(total, 1.0)
    return W, degen


def _weighted_ratio(num, W, degen):
    out = np.zeros_like(num, dtype=float)
    np.divide(num, W, out=out, where=~degen if num.ndim == 2 else ~degen[..., None])
    return out


def _apply_freeze(est, degen, prev, fallback):
    """Frozen previous value (or pooled fallback) on degenerate blocks."""
    if not np.any(degen):
        return est
    src = prev if prev is not None else fallback
    if est.ndim == 2:
        return np.where(degen, src, est)
    return np.where(degen[..., None], src, est)


def _symmetrize(a):
    if a.ndim == 2:
        return 0.5 * (a + a.T)
    return 0.5 * (a + np.swapaxes(a, 0, 1))


# ---------------------------------------------------------------------------
# Family implementations


class _Family:
    kind = None
    uses_covariates = False

    def __init__(self, spec: FamilySpec):
        self.spec = spec

    # -- validation ---------------------------------------------------------

    def validate_params(self, params):
        raise NotImplementedError

    def check_graph(self, graph: ValuedGraph, cov):
        if self.uses_covariates and cov is None:
            raise FamilyError(f"family {self.kind!r} requires edge covariates")
        if self.uses_covariates and cov.p != self.spec.covariate_dim:
            raise FamilyError(
                f"covariate dimension {cov.p} does not match spec p={self.spec.covariate_dim}")

    # -- scoring ------------------------------------------------------------

    def scorer(self, graph: ValuedGraph, cov):
        """Return a callable params -> score container, caching the
        parameter-independent pieces."""
        raise NotImplementedError

    def log_density(self, params, q, l, x, y=None):
        raise NotImplementedError

    # -- estimation ---------------------------------------------------------

    def weighted_mle(self, tau, graph, cov, prev=None):
        raise NotImplementedError

    def param_count(self, Q, directed):
        raise NotImplementedError

    # -- sampling / prediction ----------------------------------------------

    def sample_matrix(self, params, z, rng, cov, directed):
        raise NotImplementedError

    def predicted_matrix(self, params, tau, graph, cov):
        """X_hat[i, j] = sum_ql tau_iq tau_jl E[X_ij | q, l]."""
        raise NotImplementedError

    def block_means(self, params):
        """Per-block mean value, when it does not depend on covariates."""
        return None

    # -- serialization -------------------------------------------------------

    def params_to_jsonable(self, params):
        raise NotImplementedError

    def params_from_jsonable(self, data):
        raise NotImplementedError


def _blockify(a, z):
    """Expand a (Q, Q, ...) block array to edge shape via labels z."""
    return a[np.ix_(z, z)]


def _mirror_upper(x):
    u = np.triu(x, 1)
    return u + u.T


class _PoissonFamily(_Family):
    kind = "poisson"

    def validate_params(self, params):
        if np.any(params.lam < 0) or not np.all(np.isfinite(params.lam)):
            raise FamilyError("Poisson rates must be finite and >= 0")

    def check_graph(self, graph, cov):
        super().check_graph(graph, cov)
        if graph.value_kind != "count":
            raise FamilyError("Poisson family expects count values")

    def scorer(self, graph, cov):
        X = graph.scalar_values
        M = _offdiag_mask(graph.n)
        base = -gammaln(X + 1.0) * M
        directed = graph.directed

        def make(params):
            lam = params.lam
            coeffs = [_safe_log(lam), -lam, np.ones_like(lam)]
            return DecomposedScores([X, M, base], coeffs, directed)

        return make

    def log_density(self, params, q, l, x, y=None):
        lam = float(params.lam[q, l])
        if lam < 0:
            raise FamilyError("Poisson rate must be >= 0")
        loglam = np.log(lam) if lam > 0 else LOG_ZERO
        return float(x * loglam - lam - gammaln(x + 1.0))

    def weighted_mle(self, tau, graph, cov, prev=None):
        X = graph.scalar_values
        W, degen = _block_weights(tau, graph.n)
        num = tau.T @ X @ tau
        lam = _weighted_ratio(num, W, degen)
        pooled = num.sum() / max(W.sum(), 1e-300)
        lam = _apply_freeze(lam, degen, None if prev is None else prev.lam, pooled)
        if not graph.directed:
            lam = _symmetrize(lam)
        return PoissonParams(lam=lam, degenerate=degen)

    def param_count(self, Q, directed):
        return Q * Q if directed else Q * (Q + 1) // 2

    def sample_matrix(self, params, z, rng, cov, directed):
        R = _blockify(params.lam, z)
        X = rng.poisson(R).astype(float)
        np.fill_diagonal(X, 0.0)
        return X if directed else _mirror_upper(X)

    def predicted_matrix(self, params, tau, graph, cov):
        out = tau @ params.lam @ tau.T
        np.fill_diagonal(out, 0.0)
        return out

    def block_means(self, params):
        return params.lam

    def params_to_jsonable(self, params):
        return {"lam": params.lam.tolist()}

    def params_from_jsonable(self, data):
        return PoissonParams(lam=np.asarray(data["lam"], dtype=float))


class _PoissonRegFamily(_Family):
    uses_covariates = True

    def __init__(self, spec):
        super().__init__(spec)
        self.shared = spec.kind == "poisson-prmh"
        self.kind = spec.kind

    def validate_params(self, params):
        if np.any(params.lam < 0) or not np.all(np.isfinite(params.lam)):
            raise FamilyError("Poisson rates must be finite and >= 0")
        if not np.all(np.isfinite(params.beta)):
            raise FamilyError("regression coefficients must be finite")

    def check_graph(self, graph, cov):
        super().check_graph(graph, cov)
        if graph.value_kind != "count":
            raise FamilyError("Poisson family expects count values")

    def _rate_exponent(self, params, cov):
        if self.shared:
            return cov.y @ params.beta  # (n, n)
        return None

    def scorer(self, graph, cov):
        X = graph.scalar_values
        M = _offdiag_mask(graph.n)
        base = -gammaln(X + 1.0) * M
        Y = cov.y
        directed = graph.directed

        if self.shared:
            def make(params):
                g = Y @ params.beta
                E = np.exp(g) * M
                stats = [X, X * g, E, base]
                one = np.ones_like(params.lam)
                coeffs = [_safe_log(params.lam), one, -params.lam, one]
                return DecomposedScores(stats, coeffs, directed)
        else:
            def make(params):
                Q = params.Q
                n = graph.n
                L = np.empty((Q, Q, n, n))
                loglam = _safe_log(params.lam)
                for q in range(Q):
                    for l in range(Q):
                        g = Y @ params.beta[q, l]
                        L[q, l] = X * (loglam[q, l] + g) - params.lam[q, l] * np.exp(g) * M + base
                return DenseScores(L, directed)

        return make

    def log_density(self, params, q, l, x, y=None):
        if y is None:
            raise FamilyError("covariate vector required for Poisson regression families")
        y = np.atleast_1d(np.asarray(y, dtype=float))
        beta = params.beta if self.shared else params.beta[q, l]
        lam = float(params.lam[q, l])
        if lam < 0:
            raise FamilyError("Poisson rate must be >= 0")
        g = float(beta @ y)
        loglam = np.log(lam) if lam > 0 else LOG_ZERO
        return float(x * (loglam + g) - lam * np.exp(g) - gammaln(x + 1.0))

    def weighted_mle(self, tau, graph, cov, prev=None):
        warm = None
        if prev is not None:
            warm = (prev.lam, prev.beta)
        lam, beta, degen = _poisson_regression_fit(
            tau, graph, cov, shared=self.shared, warm_start=warm)
        if not graph.directed:
            lam = _symmetrize(lam)
            if not self.shared:
                beta = _symmetrize(beta)
        return PoissonRegParams(lam=lam, beta=beta, shared=self.shared, degenerate=degen)

    def param_count(self, Q, directed):
        blocks = Q * Q if directed else Q * (Q + 1) // 2
        p = self.spec.covariate_dim
        return blocks + p if self.shared else blocks * (1 + p)

    def sample_matrix(self, params, z, rng, cov, directed):
        if self.shared:
            g = cov.y @ params.beta
        else:
            B = _blockify(params.beta, z)  # (n, n, p)
            g = np.einsum("ijd,ijd->ij", cov.y, B)
        R = _blockify(params.lam, z) * np.exp(g)
        X = rng.poisson(R).astype(float)
        np.fill_diagonal(X, 0.0)
        return X if directed else _mirror_upper(X)

    def predicted_matrix(self, params, tau, graph, cov):
        if self.shared:
            out = (tau @ params.lam @ tau.T) * np.exp(cov.y @ params.beta)
        else:
            Q = params.Q
            out = np.zeros((graph.n, graph.n))
            for q in range(Q):
                for l in range(Q):
                    E = np.exp(cov.y @ params.beta[q, l])
                    out += np.outer(tau[:, q], tau[:, l]) * params.lam[q, l] * E
        np.fill_diagonal(out, 0.0)
        return out

    def block_means(self, params):
        # baseline intensity at y = 0
        return params.lam

    def params_to_jsonable(self, params):
        return {"lam": params.lam.tolist(), "beta": params.beta.tolist(),
                "shared": params.shared}

    def params_from_jsonable(self, data):
        return PoissonRegParams(lam=np.asarray(data["lam"], dtype=float),
                                beta=np.asarray(data["beta"], dtype=float),
                                shared=bool(data.get("shared", self.shared)))


class _BernoulliFamily(_Family):
    kind = "bernoulli"

    def validate_params(self, params):
        if np.any(params.pi < 0) or np.any(params.pi > 1):
            raise FamilyError("Bernoulli probabilities must lie in [0, 1]")

    def check_graph(self, graph, cov):
        super().check_graph(graph, cov)
        X = graph.scalar_values
        off = graph.offdiag_mask()
        if not np.all(np.isin(X[off], (0.0, 1.0))):
            raise FamilyError("Bernoulli family expects 0/1 values")

    def scorer(self, graph, cov):
        X = graph.scalar_values
        M = _offdiag_mask(graph.n)
        directed = graph.directed

        def make(params):
            logp = _safe_log(params.pi)
            log1mp = _safe_log(1.0 - params.pi)
            return DecomposedScores([X, M], [logp - log1mp, log1mp], directed)

        return make

    def log_density(self, params, q, l, x, y=None):
        pi = float(params.pi[q, l])
        if not 0.0 <= pi <= 1.0:
            raise FamilyError("Bernoulli probability must lie in [0, 1]")
        logp = np.log(pi) if pi > 0 else LOG_ZERO
        log1mp = np.log(1 - pi) if pi < 1 else LOG_ZERO
        return float(x * (logp - log1mp) + log1mp)

    def weighted_mle(self, tau, graph, cov, prev=None):
        W, degen = _block_weights(tau, graph.n)
        num = tau.T @ graph.scalar_values @ tau
        pi = _weighted_ratio(num, W, degen)
        pooled = num.sum() / max(W.sum(), 1e-300)
        pi = _apply_freeze(pi, degen, None if prev is None else prev.pi, pooled)
        pi = np.clip(pi, PROB_FLOOR, 1.0 - PROB_FLOOR)
        if not graph.directed:
            pi = _symmetrize(pi)
        return BernoulliParams(pi=pi, degenerate=degen)

    def param_count(self, Q, directed):
        return Q * Q if directed else Q * (Q + 1) // 2

    def sample_matrix(self, params, z, rng, cov, directed):
        P = _blockify(params.pi, z)
        X = (rng.random(P.shape) < P).astype(float)
        np.fill_diagonal(X, 0.0)
        return X if directed else _mirror_upper(X)

    def predicted_matrix(self, params, tau, graph, cov):
        out = tau @ params.pi @ tau.T
        np.fill_diagonal(out, 0.0)
        return out

    def block_means(self, params):
        return params.pi

    def params_to_jsonable(self, params):
        return {"pi": params.pi.tolist()}

    def params_from_jsonable(self, data):
        return BernoulliParams(pi=np.asarray(data["pi"], dtype=float))


class _MultinomialFamily(_Family):
    kind = "multinomial"

    def validate_params(self, params):
        p = params.probs
        if np.any(p < 0) or np.any(p > 1):
            raise FamilyError("label probabilities must lie in [0, 1]")
        if not np.allclose(p.sum(axis=-1), 1.0, atol=1e-8):
            raise FamilyError("label probability vectors must sum to 1")

    def check_graph(self, graph, cov):
        super().check_graph(graph, cov)
        if graph.value_kind != "label":
            raise FamilyError("multinomial family expects label values")
        if graph.num_labels != self.spec.num_labels:
            raise FamilyError("graph num_labels does not match the family spec")

    def scorer(self, graph, cov):
        m = self.spec.num_labels
        M = _offdiag_mask(graph.n)
        X = graph.scalar_values
        stats = [(X == k).astype(float) * M for k in range(1, m + 1)]
        directed = graph.directed

        def make(params):
            coeffs = [_safe_log(params.probs[:, :, k]) for k in range(m)]
            return DecomposedScores(stats, coeffs, directed)

        return make

    def log_density(self, params, q, l, x, y=None):
        k = int(x)
        m = self.spec.num_labels
        if not 1 <= k <= m:
            raise FamilyError(f"label {x!r} outside 1..{m}")
        p = float(params.probs[q, l, k - 1])
        return float(np.log(p)) if p > 0 else LOG_ZERO

    def weighted_mle(self, tau, graph, cov, prev=None):
        m = self.spec.num_labels
        X = graph.scalar_values
        W, degen = _block_weights(tau, graph.n)
        probs = np.zeros((tau.shape[1], tau.shape[1], m))
        for k in range(1, m + 1):
            Ik = (X == k).astype(float)
            probs[:, :, k - 1] = _weighted_ratio(tau.T @ Ik @ tau, W, degen)
        pooled = probs.reshape(-1, m).sum(axis=0)
        pooled = pooled / max(pooled.sum(), 1e-300)
        probs = _apply_freeze(probs, degen, None if prev is None else prev.probs, pooled)
        # renormalize against accumulated rounding
        s = probs.sum(axis=-1, keepdims=True)
        probs = np.divide(probs, s, out=np.full_like(probs, 1.0 / m), where=s > 0)
        if not graph.directed:
            probs = _symmetrize(probs)
        return MultinomialParams(probs=probs, degenerate=degen)

    def param_count(self, Q, directed):
        blocks = Q * Q if directed else Q * (Q + 1) // 2
        return (self.spec.num_labels - 1) * blocks

    def sample_matrix(self, params, z, rng, cov, directed):
        P = _blockify(params.probs, z)  # (n, n, m)
        cdf = np.cumsum(P, axis=-1)
        u = rng.random(P.shape[:2])
        X = 1.0 + np.sum(u[:, :, None] > cdf, axis=-1)
        X = np.minimum(X, self.spec.num_labels).astype(float)
        np.fill_diagonal(X, 0.0)
        return X if directed else _mirror_upper(X)

    def predicted_matrix(self, params, tau, graph, cov):
        out = tau @ self.block_means(params) @ tau.T
        np.fill_diagonal(out, 0.0)
        return out

    def block_means(self, params):
        labels = np.arange(1, self.spec.num_labels + 1, dtype=float)
        return params.probs @ labels

    def params_to_jsonable(self, params):
        return {"probs": params.probs.tolist()}

    def params_from_jsonable(self, data):
        return MultinomialParams(probs=np.asarray(data["probs"], dtype=float))


class _GaussianFamily(_Family):
    kind = "gaussian"

    def validate_params(self, params):
        if np.any(params.sigma2 <= 0):
            raise FamilyError("Gaussian variances must be > 0")
        if not np.all(np.isfinite(params.mu)):
            raise FamilyError("Gaussian means must be finite")

    def scorer(self, graph, cov):
        X = graph.scalar_values
        M = _offdiag_mask(graph.n)
        X2 = X * X
        directed = graph.directed

        def make(params):
            mu, s2 = params.mu, params.sigma2
            const = -0.5 * mu * mu / s2 - 0.5 * np.log(2.0 * np.pi * s2)
            return DecomposedScores([X, X2, M], [mu / s2, -0.5 / s2, const], directed)

        return make

    def log_density(self, params, q, l, x, y=None):
        mu, s2 = float(params.mu[q, l]), float(params.sigma2[q, l])
        if s2 <= 0:
            raise FamilyError("Gaussian variance must be > 0")
        return float(-0.5 * (x - mu) ** 2 / s2 - 0.5 * np.log(2.0 * np.pi * s2))

    def weighted_mle(self, tau, graph, cov, prev=None):
        X = graph.scalar_values
        W, degen = _block_weights(tau, graph.n)
        num = tau.T @ X @ tau
        mu = _weighted_ratio(num, W, degen)
        ex2 = _weighted_ratio(tau.T @ (X * X) @ tau, W, degen)
        sigma2 = np.maximum(ex2 - mu * mu, VAR_FLOOR)
        pooled_mu = num.sum() / max(W.sum(), 1e-300)
        mu = _apply_freeze(mu, degen, None if prev is None else prev.mu, pooled_mu)
        sigma2 = _apply_freeze(sigma2, degen, None if prev is None else prev.sigma2, 1.0)
        if not graph.directed:
            mu, sigma2 = _symmetrize(mu), _symmetrize(sigma2)
        return GaussianParams(mu=mu, sigma2=sigma2, degenerate=degen)

    def param_count(self, Q, directed):
        blocks = Q * Q if directed else Q * (Q + 1) // 2
        return 2 * blocks

    def sample_matrix(self, params, z, rng, cov, directed):
        mu = _blockify(params.mu, z)
        sd = np.sqrt(_blockify(params.sigma2, z))
        X = rng.normal(mu, sd)
        np.fill_diagonal(X, 0.0)
        return X if directed else _mirror_upper(X)

    def predicted_matrix(self, params, tau, graph, cov):
        out = tau @ params.mu @ tau.T
        np.fill_diagonal(out, 0.0)
        return out

    def block_means(self, params):
        return params.mu

    def params_to_jsonable(self, params):
        return {"mu": params.mu.tolist(), "sigma2": params.sigma2.tolist()}

    def params_from_jsonable(self, data):
        return GaussianParams(mu=np.asarray(data["mu"], dtype=float),
                              sigma2=np.asarray(data["sigma2"], dtype=float))


class _BivariateGaussianFamily(_Family):
    kind = "bigauss"

    def validate_params(self, params):
        cov = params.cov
        det = cov[..., 0, 0] * cov[..., 1, 1] - cov[..., 0, 1] * cov[..., 1, 0]
        if np.any(cov[..., 0, 0] <= 0) or np.any(det <= 0):
            raise FamilyError("bivariate covariance matrices must be positive definite")
        if not np.allclose(cov[..., 0, 1], cov[..., 1, 0]):
            raise FamilyError("bivariate covariance matrices must be symmetric")

    def check_graph(self, graph, cov):
        super().check_graph(graph, cov)
        if graph.value_kind != "paired" or graph.directed:
            raise FamilyError("bivariate Gaussian expects an undirected paired-value graph")

    @staticmethod
    def _precision(cov):
        det = cov[..., 0, 0] * cov[..., 1, 1] - cov[..., 0, 1] * cov[..., 1, 0]
        P = np.empty_like(cov)
        P[..., 0, 0] = cov[..., 1, 1] / det
        P[..., 1, 1] = cov[..., 0, 0] / det
        P[..., 0, 1] = -cov[..., 0, 1] / det
        P[..., 1, 0] = -cov[..., 1, 0] / det
        return P, det

    def scorer(self, graph, cov):
        X1 = graph.values[:, :, 0]
        X2 = graph.values[:, :, 1]
        M = _offdiag_mask(graph.n)

        def make(params):
            P, det = self._precision(params.cov)
            mu = params.mu
            pm = np.einsum("qlab,qlb->qla", P, mu)
            const = (-0.5 * np.einsum("qla,qla->ql", mu, pm)
                     - np.log(2.0 * np.pi) - 0.5 * np.log(det))
            stats = [X1 * X1, X2 * X2, X1 * X2, X1, X2, M]
            coeffs = [-0.5 * P[..., 0, 0], -0.5 * P[..., 1, 1], -P[..., 0, 1],
                      pm[..., 0], pm[..., 1], const]
            return DecomposedScores(stats, coeffs, False)

        return make

    def log_density(self, params, q, l, x, y=None):
        v = np.asarray(x, dtype=float)
        if v.shape != (2,):
            raise FamilyError("bivariate Gaussian expects a value couple (x_ij, x_ji)")
        self.validate_params(params)
        mu = params.mu[q, l]
        cov = params.cov[q, l]
        P = np.linalg.inv(cov)
        d = v - mu
        return float(-0.5 * d @ P @ d - np.log(2.0 * np.pi)
                     - 0.5 * np.log(np.linalg.det(cov)))

    def weighted_mle(self, tau, graph, cov, prev=None):
        X1 = graph.values[:, :, 0]
        X2 = graph.values[:, :, 1]
        W, degen = _block_weights(tau, graph.n)
        m1 = _weighted_ratio(tau.T @ X1 @ tau, W, degen)
        m2 = _weighted_ratio(tau.T @ X2 @ tau, W, degen)
        e11 = _weighted_ratio(tau.T @ (X1 * X1) @ tau, W, degen)
        e22 = _weighted_ratio(tau.T @ (X2 * X2) @ tau, W, degen)
        e12 = _weighted_ratio(tau.T @ (X1 * X2) @ tau, W, degen)
        Q = tau.shape[1]
        mu = np.stack([m1, m2], axis=-1)
        covm = np.empty((Q, Q, 2, 2))
        covm[..., 0, 0] = np.maximum(e11 - m1 * m1, VAR_FLOOR)
        covm[..., 1, 1] = np.maximum(e22 - m2 * m2, VAR_FLOOR)
        covm[..., 0, 1] = covm[..., 1, 0] = e12 - m1 * m2
        # keep determinants positive against rounding
        det = covm[..., 0, 0] * covm[..., 1, 1] - covm[..., 0, 1] ** 2
        bad = det <= 0
        if np.any(bad):
            shrink = np.sqrt(covm[..., 0, 0] * covm[..., 1, 1] / np.maximum(covm[..., 0, 1] ** 2, VAR_FLOOR))
            covm[..., 0, 1] = np.where(bad, covm[..., 0, 1] * shrink * (1 - 1e-9), covm[..., 0, 1])
            covm[..., 1, 0] = covm[..., 0, 1]
        mu = _apply_freeze(mu, degen, None if prev is None else prev.mu,
                           np.zeros(2))
        if np.any(degen):
            src = prev.cov if prev is not None else np.broadcast_to(np.eye(2), covm.shape)
            covm = np.where(degen[..., None, None], src, covm)
        # undirected symmetry swaps the two components across the block index
        mu = 0.5 * (mu + mu.transpose(1, 0, 2)[..., ::-1])
        covm = 0.5 * (covm + covm.transpose(1, 0, 2, 3)[..., ::-1, ::-1])
        return BivariateGaussianParams(mu=mu, cov=covm, degenerate=degen)

    def param_count(self, Q, directed):
        # mu: 2 per unordered block; Sigma: 3 per unordered block
        return 5 * Q * (Q + 1) // 2

    def sample_matrix(self, params, z, rng, cov, directed):
        mu = _blockify(params.mu, z)       # (n, n, 2)
        C = _blockify(params.cov, z)       # (n, n, 2, 2)
        l11 = np.sqrt(C[..., 0, 0])
        l21 = C[..., 1, 0] / l11
        l22 = np.sqrt(np.maximum(C[..., 1, 1] - l21 ** 2, VAR_FLOOR))
        e = rng.standard_normal(mu.shape)
        v1 = mu[..., 0] + l11 * e[..., 0]
        v2 = mu[..., 1] + l21 * e[..., 0] + l22 * e[..., 1]
        n = mu.shape[0]
        out = np.zeros((n, n, 2))
        iu, ju = np.triu_indices(n, 1)
        out[iu, ju, 0] = v1[iu, ju]
        out[iu, ju, 1] = v2[iu, ju]
        out[ju, iu, 0] = v2[iu, ju]
        out[ju, iu, 1] = v1[iu, ju]
        return out

    def predicted_matrix(self, params, tau, graph, cov):
        out = tau @ params.mu[..., 0] @ tau.T
        np.fill_diagonal(out, 0.0)
        return out

    def block_means(self, params):
        return params.mu[..., 0]

    def params_to_jsonable(self, params):
        return {"mu": params.mu.tolist(), "cov": params.cov.tolist()}

    def params_from_jsonable(self, data):
        return BivariateGaussianParams(mu=np.asarray(data["mu"], dtype=float),
                                       cov=np.asarray(data["cov"], dtype=float))


class _LinearRegressionFamily(_Family):
    kind = "linreg"
    uses_covariates = True

    def validate_params(self, params):
        if np.any(params.sigma2 <= 0):
            raise FamilyError("regression variances must be > 0")
        if not np.all(np.isfinite(params.beta)):
            raise FamilyError("regression coefficients must be finite")

    def scorer(self, graph, cov):
        X = graph.scalar_values
        M = _offdiag_mask(graph.n)
        Y = cov.y
        p = cov.p
        XY = [X * Y[:, :, d] for d in range(p)]
        YY = {(d, e): Y[:, :, d] * Y[:, :, e] * M for d in range(p) for e in range(d, p)}
        X2 = X * X
        directed = graph.directed

        def make(params):
            beta, s2 = params.beta, params.sigma2
            stats = [X2] + XY + [YY[(d, e)] for d in range(p) for e in range(d, p)] + [M]
            coeffs = [-0.5 / s2]
            coeffs += [beta[:, :, d] / s2 for d in range(p)]
            for d in range(p):
                for e in range(d, p):
                    w = 1.0 if d == e else 2.0
                    coeffs.append(-0.5 * w * beta[:, :, d] * beta[:, :, e] / s2)
            coeffs.append(-0.5 * np.log(2.0 * np.pi * s2))
            return DecomposedScores(stats, coeffs, directed)

        return make

    def log_density(self, params, q, l, x, y=None):
        if y is None:
            raise FamilyError("covariate vector required for the linear regression family")
        y = np.atleast_1d(np.asarray(y, dtype=float))
        s2 = float(params.sigma2[q, l])
        if s2 <= 0:
            raise FamilyError("regression variance must be > 0")
        mean = float(params.beta[q, l] @ y)
        return float(-0.5 * (x - mean) ** 2 / s2 - 0.5 * np.log(2.0 * np.pi * s2))

    def weighted_mle(self, tau, graph, cov, prev=None):
        X = graph.scalar_values
        Y = cov.y
        p = cov.p
        Q = tau.shape[1]
        W, degen = _block_weights(tau, graph.n)
        G = np.empty((Q, Q, p, p))
        r = np.empty((Q, Q, p))
        M = _offdiag_mask(graph.n)
        for d in range(p):
            r[:, :, d] = tau.T @ (X * Y[:, :, d]) @ tau
            for e in range(d, p):
                G[:, :, d, e] = G[:, :, e, d] = tau.T @ (Y[:, :, d] * Y[:, :, e] * M) @ tau
        ex2 = tau.T @ (X * X) @ tau
        beta = np.zeros((Q, Q, p))
        sigma2 = np.ones((Q, Q))
        for q in range(Q):
            for l in range(Q):
                if degen[q, l]:
                    continue
                try:
                    b = np.linalg.solve(G[q, l], r[q, l])
                except np.linalg.LinAlgError:
                    raise SingularBlockError((q, l)) from None
                beta[q, l] = b
                rss = ex2[q, l] - 2.0 * b @ r[q, l] + b @ G[q, l] @ b
                sigma2[q, l] = max(rss / W[q, l], VAR_FLOOR)
        if np.any(degen):
            beta = _apply_freeze(beta, degen, None if prev is None else prev.beta,
                                 np.zeros(p))
            sigma2 = np.where(degen, prev.sigma2 if prev is not None else 1.0, sigma2)
        if not graph.directed:
            beta = _symmetrize(beta)
            sigma2 = _symmetrize(sigma2)
        return LinearRegressionParams(beta=beta, sigma2=sigma2, degenerate=degen)

    def param_count(self, Q, directed):
        blocks = Q * Q if directed else Q * (Q + 1) // 2
        return (self.spec.covariate_dim + 1) * blocks

    def sample_matrix(self, params, z, rng, cov, directed):
        B = _blockify(params.beta, z)
        mean = np.einsum("ijd,ijd->ij", cov.y, B)
        sd = np.sqrt(_blockify(params.sigma2, z))
        X = rng.normal(mean, sd)
        np.fill_diagonal(X, 0.0)
        return X if directed else _mirror_upper(X)

    def predicted_matrix(self, params, tau, graph, cov):
        out = np.zeros((graph.n, graph.n))
        for d in range(cov.p):
            out += (tau @ params.beta[:, :, d] @ tau.T) * cov.y[:, :, d]
        np.fill_diagonal(out, 0.0)
        return out

    def params_to_jsonable(self, params):
        return {"beta": params.beta.tolist(), "sigma2": params.sigma2.tolist()}

    def params_from_jsonable(self, data):
        return LinearRegressionParams(beta=np.asarray(data["beta"], dtype=float),
                                      sigma2=np.asarray(data["sigma2"], dtype=float))


class _SimpleRegressionFamily(_Family):
    kind = "simplereg"
    uses_covariates = True

    def validate_params(self, params):
        if params.sigma2 <= 0:
            raise FamilyError("regression variance must be > 0")
        if not (np.isfinite(params.slope) and np.all(np.isfinite(params.intercept))):
            raise FamilyError("regression parameters must be finite")

    def scorer(self, graph, cov):
        X = graph.scalar_values
        M = _offdiag_mask(graph.n)
        Y = cov.y[:, :, 0] * M
        XY = X * Y
        X2 = X * X
        Y2 = Y * Y
        directed = graph.directed

        def make(params):
            a, b, s2 = params.intercept, params.slope, params.sigma2
            ones = np.ones_like(a)
            stats = [X, XY, X2, Y, Y2, M]
            coeffs = [a / s2, ones * (b / s2), ones * (-0.5 / s2),
                      -a * b / s2, ones * (-0.5 * b * b / s2),
                      -0.5 * a * a / s2 - 0.5 * np.log(2.0 * np.pi * s2) * ones]
            return DecomposedScores(stats, coeffs, directed)

        return make

    def log_density(self, params, q, l, x, y=None):
        if y is None:
            raise FamilyError("covariate required for the simple regression family")
        y0 = float(np.atleast_1d(np.asarray(y, dtype=float))[0])
        s2 = float(params.sigma2)
        if s2 <= 0:
            raise FamilyError("regression variance must be > 0")
        mean = float(params.intercept[q, l]) + params.slope * y0
        return float(-0.5 * (x - mean) ** 2 / s2 - 0.5 * np.log(2.0 * np.pi * s2))

    def weighted_mle(self, tau, graph, cov, prev=None):
        """Common slope b as pooled weighted covariance over pooled weighted
        variance, block intercepts a_ql = Xbar_ql - b ybar_ql, and a single
        sigma2 normalized by the total weight."""
        X = graph.scalar_values
        M = _offdiag_mask(graph.n)
        Y = cov.y[:, :, 0] * M
        W, degen = _block_weights(tau, graph.n)
        sx = tau.T @ X @ tau
        sy = tau.T @ Y @ tau
        sxy = tau.T @ (X * Y) @ tau
        syy = tau.T @ (Y * Y) @ tau
        sxx = tau.T @ (X * X) @ tau
        ok = ~degen
        xbar = _weighted_ratio(sx, W, degen)
        ybar = _weighted_ratio(sy, W, degen)
        # centered pooled sums: sum_ql [ Sxy - W xbar ybar ]
        cov_xy = np.where(ok, sxy - W * xbar * ybar, 0.0).sum()
        var_y = np.where(ok, syy - W * ybar * ybar, 0.0).sum()
        if var_y <= 0:
            raise SingularBlockError((0, 0), "covariate has zero pooled variance")
        b = cov_xy / var_y
        a = xbar - b * ybar
        # sigma2: weighted residual moment pooled over all blocks and edges
        rss = (sxx - 2 * a * sx - 2 * b * sxy + a * a * W
               + 2 * a * b * sy + b * b * syy)
        sigma2 = max(np.where(ok, rss, 0.0).sum() / max(W.sum(), 1e-300), VAR_FLOOR)
        a = _apply_freeze(a, degen, None if prev is None else prev.intercept, 0.0)
        if not graph.directed:
            a = _symmetrize(a)
        return SimpleRegressionParams(intercept=a, slope=float(b), sigma2=float(sigma2),
                                      degenerate=degen)

    def param_count(self, Q, directed):
        blocks = Q * Q if directed else Q * (Q + 1) // 2
        return blocks + 2

    def sample_matrix(self, params, z, rng, cov, directed):
        mean = _blockify(params.intercept, z) + params.slope * cov.y[:, :, 0]
        X = rng.normal(mean, np.sqrt(params.sigma2))
        np.fill_diagonal(X, 0.0)
        return X if directed else _mirror_upper(X)

    def predicted_matrix(self, params, tau, graph, cov):
        out = tau @ params.intercept @ tau.T + params.slope * cov.y[:, :, 0]
        np.fill_diagonal(out, 0.0)
        return out

    def params_to_jsonable(self, params):
        return {"intercept": params.intercept.tolist(), "slope": params.slope,
                "sigma2": params.sigma2}

    def params_from_jsonable(self, data):
        return SimpleRegressionParams(intercept=np.asarray(data["intercept"], dtype=float),
                                      slope=float(data["slope"]),
                                      sigma2=float(data["sigma2"]))


_FAMILIES = {
    "poisson": _PoissonFamily,
    "poisson-prmh": _PoissonRegFamily,
    "poisson-prmi": _PoissonRegFamily,
    "bernoulli": _BernoulliFamily,
    "multinomial": _MultinomialFamily,
    "gaussian": _GaussianFamily,
    "bigauss": _BivariateGaussianFamily,
    "linreg": _LinearRegressionFamily,
    "simplereg": _SimpleRegressionFamily,
}


def get_family(spec: FamilySpec) -> _Family:
    return _FAMILIES[spec.kind](spec)


# ---------------------------------------------------------------------------
# Poisson regression (weighted GLM) fitting


def _poisson_regression_objective(tau, X, Y, mask, lam, beta, shared):
    """Exact weighted Poisson log-likelihood (without the x! constant)."""
    loglam = _safe_log(lam)
    A = tau.T @ X @ tau
    if shared:
        g = Y @ beta
        E = np.exp(g) * mask
        B = tau.T @ E @ tau
        cross = (X * g).sum()
        return float(np.sum(np.where(A > 0, A * loglam, 0.0)) + cross - np.sum(lam * B))
    Q = lam.shape[0]
    val = 0.0
    for q in range(Q):
        for l in range(Q):
            g = Y @ beta[q, l]
            E = np.exp(g) * mask
            B = (tau[:, q] @ E @ tau[:, l])
            cross = tau[:, q] @ (X * g) @ tau[:, l]
            val += (A[q, l] * loglam[q, l] if A[q, l] > 0 else 0.0) + cross - lam[q, l] * B
    return float(val)


def _newton_profile(A_vec, c_vec, B_fun, beta0, label):
    """Maximize h(beta) = c . beta - sum_r A_r log B_r(beta) by Newton with
    step halving.  ``B_fun(beta)`` returns (B, gradB, hessB) with shapes
    (R,), (R, p), (R, p, p).  Concave, so this is plain IRLS with the
    block intercepts profiled out exactly."""
    beta = np.array(beta0, dtype=float)
    pos = A_vec > 0

    def h(b):
        B = B_fun(b, order=0)
        if np.any(B[pos] <= 0):
            return -np.inf
        return float(c_vec @ b - np.sum(A_vec[pos] * np.log(B[pos])))

    val = h(beta)
    for it in range(REG_MAX_ITER):
        B, gB, hB = B_fun(beta, order=2)
        ratio = np.where(pos, A_vec / np.maximum(B, 1e-300), 0.0)
        grad = c_vec - gB.T @ ratio
        gnorm = np.max(np.abs(grad)) if grad.size else 0.0
        if gnorm <= REG_GRAD_TOL:
            break
        # negative Hessian of h (positive semidefinite)
        Hneg = np.einsum("r,rde->de", ratio, hB)
        Hneg -= np.einsum("r,rd,re->de", ratio / np.maximum(B, 1e-300), gB, gB)
        Hneg += 1e-12 * np.eye(len(beta)) * max(1.0, np.trace(Hneg))
        try:
            step = np.linalg.solve(Hneg, grad)
        except np.linalg.LinAlgError:
            raise NumericalError(f"singular IRLS system in {label}") from None
        accepted = None
        t = 1.0
        while t > 1e-12:
            cand = beta + t * step
            cand_val = h(cand)
            if cand_val >= val - 1e-12 * max(1.0, abs(val)):
                accepted = (cand, cand_val)
                break
            t *= 0.5
        if accepted is None:
            break  # no improving step at floating-point resolution
        moved = np.max(np.abs(accepted[0] - beta))
        improved = accepted[1] - val
        beta, val = accepted
        if np.max(np.abs(beta)) > REG_BETA_BOUND:
            raise NumericalError(
                f"unbounded Poisson regression (possible separation) in {label}")
        if improved <= REG_REL_TOL * max(1.0, abs(val)) and moved < 1e-12:
            break
    else:
        B, gB, _ = B_fun(beta, order=1)
        ratio = np.where(pos, A_vec / np.maximum(B, 1e-300), 0.0)
        grad = c_vec - gB.T @ ratio
        if np.max(np.abs(grad)) > 1e-4:
            raise NumericalError(f"Poisson regression did not converge in {label}")
    return beta


def _poisson_regression_fit(tau, graph, cov, shared, warm_start=None):
    """Weighted Poisson-regression M-step.

    Returns (lam, beta, degenerate_mask).  ``shared=True`` fits one beta
    jointly across blocks with per-block intercepts log lam_ql;
    ``shared=False`` fits each block independently.
    """
    X = graph.scalar_values
    Y = cov.y
    n, p = graph.n, cov.p
    Q = tau.shape[1]
    mask = _offdiag_mask(n)
    W, degen = _block_weights(tau, n)
    A = tau.T @ X @ tau

    if shared:
        beta0 = np.zeros(p) if warm_start is None else np.asarray(warm_start[1], dtype=float)
        c = np.array([(X * Y[:, :, d]).sum() for d in range(p)])
        A_vec = A.ravel()

        def B_fun(beta, order=2):
            E = np.exp(Y @ beta) * mask
            B = (tau.T @ E @ tau).ravel()
            if order == 0:
                return B
            gB = np.stack([(tau.T @ (E * Y[:, :, d]) @ tau).ravel() for d in range(p)],
                          axis=1)
            if order == 1:
                return B, gB, None
            hB = np.empty((B.size, p, p))
            for d in range(p):
                for e in range(d, p):
                    v = (tau.T @ (E * Y[:, :, d] * Y[:, :, e]) @ tau).ravel()
                    hB[:, d, e] = hB[:, e, d] = v
            return B, gB, hB

        beta = _newton_profile(A_vec, c, B_fun, beta0, "shared-beta fit")
        E = np.exp(Y @ beta) * mask
        B = tau.T @ E @ tau
        lam = np.where(B > 0, A / np.maximum(B, 1e-300), 0.0)
    else:
        beta = np.zeros((Q, Q, p)) if warm_start is None else np.array(warm_start[1], dtype=float)
        lam = np.zeros((Q, Q))
        pairs = [(q, l) for q in range(Q) for l in range(Q)
                 if graph.directed or q <= l]
        for q, l in pairs:
            if degen[q, l]:
                continue
            c_ql = np.array([tau[:, q] @ (X * Y[:, :, d]) @ tau[:, l] for d in range(p)])
            A_vec = np.array([A[q, l]])

            def B_fun(b, order=2, q=q, l=l):
                E = np.exp(Y @ b) * mask
                B = np.array([tau[:, q] @ E @ tau[:, l]])
                if order == 0:
                    return B
                gB = np.array([[tau[:, q] @ (E * Y[:, :, d]) @ tau[:, l] for d in range(p)]])
                if order == 1:
                    return B, gB, None
                hB = np.empty((1, p, p))
                for d in range(p):
                    for e in range(d, p):
                        hB[0, d, e] = hB[0, e, d] = tau[:, q] @ (E * Y[:, :, d] * Y[:, :, e]) @ tau[:, l]
                return B, gB, hB

            b = _newton_profile(A_vec, c_ql, B_fun, beta[q, l], f"block ({q},{l})")
            B = B_fun(b, order=0)[0]
            beta[q, l] = b
            lam[q, l] = A[q, l] / B if B > 0 else 0.0
            if not graph.directed and q != l:
                beta[l, q] = b
                lam[l, q] = lam[q, l]

    if np.any(degen):
        if warm_start is not None:
            lam = np.where(degen, warm_start[0], lam)
            if not shared:
                beta = np.where(degen[..., None], warm_start[1], beta)
        else:
            pooled = A.sum() / max(W.sum(), 1e-300)
            lam = np.where(degen, pooled, lam)
    return lam, beta, degen


# ---------------------------------------------------------------------------
# Module-level operations (dispatch on the family spec)


def log_density(spec: FamilySpec, params, q, l, x, y=None) -> float:
    """log f_ql(x), scalar path.

    Impossible values under boundary parameters (x > 0 with a zero rate,
    x = 1 with pi = 0, ...) return the LOG_ZERO surrogate instead of -inf
    so downstream fixed points stay well defined.
    """
    fam = get_family(spec)
    if fam.uses_covariates and y is None:
        raise FamilyError(f"family {spec.kind!r} requires a covariate vector")
    return fam.log_density(params, q, l, x, y=y)


def weighted_mle(spec: FamilySpec, tau, graph: ValuedGraph, cov: EdgeCovariates | None = None,
                 prev=None):
    """Maximize sum_{i != j} sum_ql tau_iq tau_jl log f_ql(X_ij) over theta.

    ``tau`` is (n, Q); the weight of edge (i, j) in block (q, l) is
    tau[i, q] * tau[j, l].  Closed forms for the classical families, Newton
    on the weighted GLM objective for the Poisson regressions.  Blocks with
    vanishing weight keep ``prev``'s value and are flagged in the result's
    ``degenerate`` mask.
    """
    fam = get_family(spec)
    fam.check_graph(graph, cov)
    tau = np.asarray(tau, dtype=float)
    return fam.weighted_mle(tau, graph, cov, prev=prev)


def poisson_pm_mle(tau, graph: ValuedGraph) -> np.ndarray:
    """lam_ql = sum_{i!=j} tau_iq tau_jl X_ij / sum_{i!=j} tau_iq tau_jl."""
    params = weighted_mle(FamilySpec("poisson"), tau, graph)
    return params.lam


def poisson_regression_mle(tau, graph: ValuedGraph, cov: EdgeCovariates,
                           mode: str = "homogeneous", warm_start=None):
    """Weighted Poisson-regression MLE.

    Parameters
    ----------
    mode : {"homogeneous", "inhomogeneous"}
        Homogeneous fits one shared coefficient vector across all blocks
        (block-specific intercepts log lam_ql); inhomogeneous fits each
        block independently.
    warm_start : (lam, beta), optional
        Starting point; the returned solution never has lower weighted
        log-likelihood than it.

    Returns
    -------
    (lam, beta) : rates (Q, Q) and coefficients ((p,) or (Q, Q, p)).
    """
    if mode not in ("homogeneous", "inhomogeneous"):
        raise ValueError(f"unknown mode {mode!r}")
    tau = np.asarray(tau, dtype=float)
    lam, beta, _ = _poisson_regression_fit(tau, graph, cov, shared=(mode == "homogeneous"),
                                           warm_start=warm_start)
    if not graph.directed:
        lam = _symmetrize(lam)
        if mode == "inhomogeneous":
            beta = _symmetrize(beta)
    return lam, beta


def expfam_mle(sufficient_stat, grad_A, inverse_grad_A, tau, graph: ValuedGraph) -> np.ndarray:
    """Generic natural-parameter update theta = (grad A)^{-1}(weighted mean of Psi).

    ``sufficient_stat`` maps a value array to Psi(x) elementwise, and
    ``grad_A`` / ``inverse_grad_A`` act elementwise on arrays.  Raises
    FamilyError when the weighted mean falls outside the range of grad A.
    """
    tau = np.asarray(tau, dtype=float)
    X = graph.scalar_values
    M = _offdiag_mask(graph.n)
    psi = np.asarray(sufficient_stat(X), dtype=float) * M
    W, degen = _block_weights(tau, graph.n)
    if np.any(degen):
        raise FamilyError("empty block: weighted sufficient statistic undefined")
    m = (tau.T @ psi @ tau) / W
    with np.errstate(all="ignore"):
        theta = np.asarray(inverse_grad_A(m), dtype=float)
        if not np.all(np.isfinite(theta)):
            raise FamilyError("weighted mean outside the range of grad A")
        back = np.asarray(grad_A(theta), dtype=float)
    if not np.allclose(back, m, rtol=1e-6, atol=1e-10):
        raise FamilyError("inverse_grad_A is not a right inverse of grad_A at the weighted mean")
    return theta


def param_count(spec: FamilySpec, Q: int, directed: bool) -> int:
    """Number of independent theta parameters P_Q for the ICL penalty."""
    if Q < 1:
        raise FamilyError("Q must be >= 1")
    return get_family(spec).param_count(Q, directed)


def theta_to_jsonable(spec: FamilySpec, params) -> dict:
    return get_family(spec).params_to_jsonable(params)


def theta_from_jsonable(spec: FamilySpec, data: dict):
    return get_family(spec).params_from_jsonable(data)
