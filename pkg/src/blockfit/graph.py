"""Immutable valued-graph containers with optional per-edge covariates.

Edge values are held densely in an (n, n) array (or (n, n, 2) for paired
values) whose diagonal is structurally zero and never read: every model in
this package sums over i != j only.  Undirected graphs store a symmetric
array so that reading (i, j) and (j, i) always agrees; for the paired kind
the two components swap under transposition.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GraphBuildError

VALUE_KINDS = ("count", "real", "label", "paired")


def _freeze(a):
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def _check_scalar_value(value, value_kind, num_labels, where):
    v = float(value)
    if not np.isfinite(v):
        raise GraphBuildError(f"non-finite value at {where}")
    if value_kind == "count":
        if v < 0 or v != int(v):
            raise GraphBuildError(f"count value must be a nonnegative integer at {where}, got {value!r}")
    elif value_kind == "label":
        if v != int(v) or not (1 <= int(v) <= num_labels):
            raise GraphBuildError(f"label value must lie in 1..{num_labels} at {where}, got {value!r}")
    return v


@dataclass(frozen=True)
class ValuedGraph:
    """A complete valued graph on n nodes without self-loops.

    Parameters
    ----------
    n : int
        Node count, at least 2.
    directed : bool
        Whether (i, j) and (j, i) carry independent values.
    value_kind : {"count", "real", "label", "paired"}
        Domain of the edge values.  "paired" holds (X_ij, X_ji) couples on
        undirected pairs and is the storage used by the bivariate-Gaussian
        family.
    values : ndarray
        Shape (n, n), or (n, n, 2) for "paired".  Zero diagonal.
    num_labels : int, optional
        Number of possible labels m for the "label" kind.
    """

    n: int
    directed: bool
    value_kind: str
    values: np.ndarray
    num_labels: int | None = None

    def __post_init__(self):
        if self.n < 2:
            raise GraphBuildError("graph needs at least 2 nodes")
        if self.value_kind not in VALUE_KINDS:
            raise GraphBuildError(f"unknown value kind {self.value_kind!r}")
        if self.value_kind == "paired" and self.directed:
            raise GraphBuildError("paired values are defined on undirected graphs only")
        if self.value_kind == "label" and not self.num_labels:
            raise GraphBuildError("label kind requires num_labels")
        want = (self.n, self.n, 2) if self.value_kind == "paired" else (self.n, self.n)
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != want:
            raise GraphBuildError(f"values must have shape {want}, got {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise GraphBuildError("non-finite edge value")
        object.__setattr__(self, "values", _freeze(vals))

    @classmethod
    def from_matrix(cls, values, directed, value_kind="count", num_labels=None):
        """Build directly from a dense value array, validating symmetry.

        The diagonal is ignored and forced to zero.  For undirected graphs
        the array must be symmetric ("paired": values[j, i] must equal the
        swapped couple values[i, j, ::-1]).
        """
        vals = np.array(values, dtype=float)
        n = vals.shape[0]
        if value_kind == "paired":
            if vals.ndim != 3 or vals.shape[:2] != (n, n) or vals.shape[2] != 2:
                raise GraphBuildError("paired values must have shape (n, n, 2)")
            vals[np.arange(n), np.arange(n)] = 0.0
            if not np.array_equal(vals, vals[:, :, ::-1].transpose(1, 0, 2)):
                raise GraphBuildError("paired values must satisfy values[j,i] == swap(values[i,j])")
        else:
            if vals.ndim != 2 or vals.shape != (n, n):
                raise GraphBuildError("values must be a square (n, n) array")
            np.fill_diagonal(vals, 0.0)
            if not directed and not np.array_equal(vals, vals.T):
                raise GraphBuildError("undirected graph requires a symmetric value matrix")
        g = cls(n=n, directed=bool(directed), value_kind=value_kind, values=vals,
                num_labels=num_labels)
        if value_kind in ("count", "label"):
            off = ~np.eye(n, dtype=bool)
            flat = vals[off]
            if value_kind == "count" and (np.any(flat < 0) or np.any(flat != np.round(flat))):
                raise GraphBuildError("count values must be nonnegative integers")
            if value_kind == "label" and (np.any(flat != np.round(flat)) or np.any(flat < 1)
                                          or np.any(flat > num_labels)):
                raise GraphBuildError(f"label values must lie in 1..{num_labels}")
        return g

    def value(self, i, j):
        """Edge value X_ij; a couple (X_ij, X_ji) for the paired kind."""
        if i == j:
            raise GraphBuildError("no value stored on the diagonal (self-loops excluded)")
        v = self.values[i, j]
        return tuple(v) if self.value_kind == "paired" else float(v)

    @property
    def scalar_values(self) -> np.ndarray:
        """The (n, n) matrix of X_ij (first component for the paired kind)."""
        return self.values[:, :, 0] if self.value_kind == "paired" else self.values

    def offdiag_mask(self) -> np.ndarray:
        return ~np.eye(self.n, dtype=bool)

    def pair_index(self):
        """Ordered index pairs (i, j), i != j for directed, i < j otherwise."""
        n = self.n
        if self.directed:
            return [(i, j) for i in range(n) for j in range(n) if i != j]
        return [(i, j) for i in range(n) for j in range(i + 1, n)]

    def n_pairs(self) -> int:
        return self.n * (self.n - 1) if self.directed else self.n * (self.n - 1) // 2

    def weighted_degrees(self) -> np.ndarray:
        """K_i = sum_{j != i} X_ij (row sums of the scalar values)."""
        return self.scalar_values.sum(axis=1)


@dataclass(frozen=True)
class EdgeCovariates:
    """Per-edge covariate vectors y_ij of fixed dimension p.

    Defined on exactly the same index set as the host graph; for undirected
    hosts y_ij == y_ji.
    """

    p: int
    y: np.ndarray = field(repr=False)  # (n, n, p), zero diagonal

    def __post_init__(self):
        arr = np.asarray(self.y, dtype=float)
        if arr.ndim != 3 or arr.shape[2] != self.p or arr.shape[0] != arr.shape[1]:
            raise GraphBuildError("covariates must have shape (n, n, p)")
        if not np.all(np.isfinite(arr)):
            raise GraphBuildError("non-finite covariate entry")
        object.__setattr__(self, "y", _freeze(arr))

    @classmethod
    def from_matrix(cls, y, directed):
        arr = np.array(y, dtype=float)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        n = arr.shape[0]
        arr[np.arange(n), np.arange(n), :] = 0.0
        if not directed and not np.array_equal(arr, arr.transpose(1, 0, 2)):
            raise GraphBuildError("undirected covariates must be symmetric")
        return cls(p=arr.shape[2], y=arr)

    def vector(self, i, j) -> np.ndarray:
        if i == j:
            raise GraphBuildError("no covariate stored on the diagonal")
        return self.y[i, j]


def build_graph(n, directed, entries, value_kind, num_labels=None, fill=None) -> ValuedGraph:
    """Validate an edge list and assemble a :class:`ValuedGraph`.

    Parameters
    ----------
    entries : iterable of (i, j, value)
        For the "paired" kind each value is a couple (X_ij, X_ji).
    fill : scalar or couple, optional
        Value assigned to unspecified pairs.  Without it the specification
        must be complete: every ordered (directed) or unordered (undirected)
        pair must appear exactly once, and absence is an error.

    Raises
    ------
    GraphBuildError
        On self-loops, out-of-range indices, conflicting duplicates,
        non-finite or out-of-domain values, or missing pairs when no fill
        value was given.
    """
    if n < 2:
        raise GraphBuildError("graph needs at least 2 nodes")
    if value_kind not in VALUE_KINDS:
        raise GraphBuildError(f"unknown value kind {value_kind!r}")
    if value_kind == "paired" and directed:
        raise GraphBuildError("paired values are defined on undirected graphs only")
    if value_kind == "label" and not num_labels:
        raise GraphBuildError("label kind requires num_labels")

    paired = value_kind == "paired"
    vals = np.zeros((n, n, 2) if paired else (n, n))
    seen = {}
    for entry in entries:
        i, j, value = entry
        i, j = int(i), int(j)
        if i == j:
            raise GraphBuildError(f"self-loop entry ({i},{j}) not allowed")
        if not (0 <= i < n and 0 <= j < n):
            raise GraphBuildError(f"node index out of range in entry ({i},{j}); n={n}")
        if paired:
            a, b = value
            v = (
                _check_scalar_value(a, "real", None, f"({i},{j})"),
                _check_scalar_value(b, "real", None, f"({i},{j})"),
            )
            key = (i, j) if i < j else (j, i)
            v = v if i < j else (v[1], v[0])
        else:
            v = _check_scalar_value(value, value_kind, num_labels, f"({i},{j})")
            key = (i, j) if directed else (min(i, j), max(i, j))
        if key in seen:
            if seen[key] != v:
                raise GraphBuildError(f"conflicting duplicate entry for pair {key}")
            continue
        seen[key] = v

    if fill is not None:
        if paired:
            fv = fill if isinstance(fill, (tuple, list)) else (fill, fill)
            fill_value = (
                _check_scalar_value(fv[0], "real", None, "fill"),
                _check_scalar_value(fv[1], "real", None, "fill"),
            )
        else:
            fill_value = _check_scalar_value(fill, value_kind, num_labels, "fill")

    expected = (
        [(i, j) for i in range(n) for j in range(n) if i != j]
        if directed
        else [(i, j) for i in range(n) for j in range(i + 1, n)]
    )
    for key in expected:
        if key not in seen:
            if fill is None:
                raise GraphBuildError(f"missing value for pair {key} (pass fill= to densify)")
            seen[key] = fill_value

    for (i, j), v in seen.items():
        if paired:
            vals[i, j] = v
            vals[j, i] = (v[1], v[0])
        else:
            vals[i, j] = v
            if not directed:
                vals[j, i] = v

    return ValuedGraph(n=n, directed=directed, value_kind=value_kind, values=vals,
                       num_labels=num_labels)


def attach_covariates(graph: ValuedGraph, cov_entries) -> EdgeCovariates:
    """Validate covariate vectors against a host graph.

    ``cov_entries`` is an iterable of (i, j, vector).  The index set must
    match the graph exactly (same symmetry convention), all vectors must
    share one dimension p >= 1 and all entries must be finite.
    """
    n = graph.n
    seen = {}
    p = None
    for i, j, vec in cov_entries:
        i, j = int(i), int(j)
        if i == j:
            raise GraphBuildError(f"self-loop covariate entry ({i},{j})")
        if not (0 <= i < n and 0 <= j < n):
            raise GraphBuildError(f"covariate index out of range in entry ({i},{j})")
        v = np.atleast_1d(np.asarray(vec, dtype=float))
        if p is None:
            p = v.size
            if p < 1:
                raise GraphBuildError("covariate dimension must be >= 1")
        elif v.size != p:
            raise GraphBuildError(f"covariate dimension mismatch at ({i},{j}): {v.size} != {p}")
        if not np.all(np.isfinite(v)):
            raise GraphBuildError(f"non-finite covariate entry at ({i},{j})")
        key = (i, j) if graph.directed else (min(i, j), max(i, j))
        if key in seen:
            if not np.array_equal(seen[key], v):
                raise GraphBuildError(f"conflicting duplicate covariate for pair {key}")
            continue
        seen[key] = v

    if p is None:
        raise GraphBuildError("empty covariate specification")

    expected = (
        [(i, j) for i in range(n) for j in range(n) if i != j]
        if graph.directed
        else [(i, j) for i in range(n) for j in range(i + 1, n)]
    )
    y = np.zeros((n, n, p))
    for key in expected:
        if key not in seen:
            raise GraphBuildError(f"missing covariate for pair {key}")
    for (i, j), v in seen.items():
        y[i, j] = v
        if not graph.directed:
            y[j, i] = v
    return EdgeCovariates(p=p, y=y)
