"""File formats: edge/covariate CSVs, fit JSON, selection tables, reports.

Edge-list CSV: header ``i,j,value`` (or ``i,j,v1,v2`` for paired values);
covariate CSV: header ``i,j,y1..yp``; 0-based node indices, UTF-8, LF.
Fit results serialize to JSON with full float precision, so a written and
re-read fit reproduces predictions bit-identically.
"""

from __future__ import annotations

import csv
import json

import numpy as np

from . import families
from .engine import FitResult, MixtureParams, VariationalPosterior
from .errors import InputFormatError
from .families import FamilySpec
from .graph import EdgeCovariates, ValuedGraph, attach_covariates, build_graph
from .selection import SelectionResult


def _read_rows(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputFormatError(f"cannot read {path}: {exc}") from exc
    rows = [r for r in rows if r and any(cell.strip() for cell in r)]
    if not rows:
        raise InputFormatError(f"{path}: empty file")
    return rows


def read_edge_csv(path):
    """Parse an edge-list CSV.  Returns (entries, paired) where entries are
    (i, j, value) triples (value is a couple when paired)."""
    rows = _read_rows(path)
    header = [h.strip().lower() for h in rows[0]]
    if header[:2] != ["i", "j"]:
        raise InputFormatError(f"{path}: header must start with i,j")
    if header[2:] == ["value"]:
        paired = False
    elif header[2:] == ["v1", "v2"]:
        paired = True
    else:
        raise InputFormatError(f"{path}: expected columns i,j,value or i,j,v1,v2")
    entries = []
    for ln, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise InputFormatError(f"{path}:{ln}: wrong number of columns")
        try:
            i, j = int(row[0]), int(row[1])
            value = (float(row[2]), float(row[3])) if paired else float(row[2])
        except ValueError as exc:
            raise InputFormatError(f"{path}:{ln}: {exc}") from exc
        entries.append((i, j, value))
    if not entries:
        raise InputFormatError(f"{path}: no edges")
    return entries, paired


def read_covariate_csv(path):
    """Parse a covariate CSV; returns (entries, p)."""
    rows = _read_rows(path)
    header = [h.strip().lower() for h in rows[0]]
    if header[:2] != ["i", "j"] or len(header) < 3:
        raise InputFormatError(f"{path}: header must be i,j,y1..yp")
    p = len(header) - 2
    if header[2:] != [f"y{d + 1}" for d in range(p)]:
        raise InputFormatError(f"{path}: covariate columns must be named y1..y{p}")
    entries = []
    for ln, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise InputFormatError(f"{path}:{ln}: wrong number of columns")
        try:
            entries.append((int(row[0]), int(row[1]),
                            [float(v) for v in row[2:]]))
        except ValueError as exc:
            raise InputFormatError(f"{path}:{ln}: {exc}") from exc
    return entries, p


def load_graph(edges_path, directed=False, value_kind="count", num_labels=None,
               n=None, fill=None) -> ValuedGraph:
    entries, paired = read_edge_csv(edges_path)
    if paired:
        value_kind = "paired"
    if n is None:
        n = 1 + max(max(int(e[0]), int(e[1])) for e in entries)
    return build_graph(n, directed, entries, value_kind, num_labels=num_labels, fill=fill)


def load_covariates(graph: ValuedGraph, cov_path) -> EdgeCovariates:
    entries, _ = read_covariate_csv(cov_path)
    return attach_covariates(graph, entries)


# ---------------------------------------------------------------------------
# Fit JSON


def fit_to_jsonable(fit: FitResult, spec: FamilySpec | None = None,
                    extra: dict | None = None) -> dict:
    spec = spec or fit.spec
    data = {
        "family": spec.kind,
        "num_labels": spec.num_labels,
        "covariate_dim": spec.covariate_dim,
        "Q": fit.params.Q,
        "alpha": fit.params.alpha.tolist(),
        "theta": families.theta_to_jsonable(spec, fit.params.theta),
        "tau": fit.posterior.tau.tolist(),
        "J_trajectory": [float(j) for j in fit.bound_trajectory],
        "entropy": float(fit.entropy),
        "map_assignment": [int(z) for z in fit.map_assignment],
        "converged": bool(fit.converged),
        "iterations": int(fit.iterations),
        "icl": None if fit.icl is None else float(fit.icl),
    }
    if extra:
        data.update(extra)
    return data


def write_fit_json(path, fit: FitResult, spec: FamilySpec | None = None,
                   extra: dict | None = None):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(fit_to_jsonable(fit, spec, extra), fh, indent=1, sort_keys=True)
        fh.write("\n")


def fit_from_jsonable(data: dict):
    """Rebuild (FitResult, FamilySpec) from the JSON payload."""
    try:
        spec = FamilySpec(kind=data["family"], num_labels=data.get("num_labels"),
                          covariate_dim=data.get("covariate_dim"))
        theta = families.theta_from_jsonable(spec, data["theta"])
        params = MixtureParams(alpha=np.asarray(data["alpha"], dtype=float), theta=theta)
        posterior = VariationalPosterior(tau=np.asarray(data["tau"], dtype=float))
        fit = FitResult(
            params=params,
            posterior=posterior,
            bound_trajectory=list(data["J_trajectory"]),
            entropy=float(data["entropy"]),
            map_assignment=np.asarray(data["map_assignment"], dtype=int),
            converged=bool(data["converged"]),
            iterations=int(data.get("iterations", 0)),
            icl=data.get("icl"),
            spec=spec,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise InputFormatError(f"malformed fit JSON: {exc}") from exc
    return fit, spec


def read_fit_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputFormatError(f"cannot read fit JSON {path}: {exc}") from exc
    fit, spec = fit_from_jsonable(data)
    return fit, spec, data


# ---------------------------------------------------------------------------
# Tables


def write_selection_table(path, result: SelectionResult, fmt="csv"):
    rows = []
    for rec in result.records:
        rows.append({
            "Q": rec.q,
            "J": "" if rec.fit is None else rec.fit.bound,
            "ICL": rec.icl,
            "entropy": "" if rec.fit is None else rec.fit.entropy,
            "chosen": int(rec.q == result.chosen_q),
            "error": rec.error or "",
        })
    if fmt == "json":
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"chosen_q": result.chosen_q, "sweep": rows}, fh, indent=1)
            fh.write("\n")
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def write_prediction_csv(fh, report, directed):
    """Single CSV stream with a record-type discriminator column."""
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["record", "i", "j", "observed", "predicted"])
    n = report.observed_degrees.size
    for i in range(n):
        writer.writerow(["degree", i, "", repr(float(report.observed_degrees[i])),
                         repr(float(report.predicted_degrees[i]))])
    for i in range(n):
        js = range(n) if directed else range(i + 1, n)
        for j in js:
            if i == j:
                continue
            writer.writerow(["edge", i, j, repr(float(report.observed_edges[i, j])),
                             repr(float(report.predicted_edges[i, j]))])
    writer.writerow(["r2", "degree", "", repr(float(report.r2_degrees)), ""])
    writer.writerow(["r2", "edge", "", repr(float(report.r2_edges)), ""])


def write_report_csv(path, report):
    rows = report.csv_rows()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def read_grid_config(path) -> dict:
    """Grid config as JSON, or as key=value lines."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise InputFormatError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
        if not isinstance(data, dict):
            raise InputFormatError(f"{path}: config must be a JSON object")
        return data
    except json.JSONDecodeError:
        pass
    data = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise InputFormatError(f"{path}:{ln}: expected key=value")
        key, _, value = line.partition("=")
        try:
            data[key.strip()] = json.loads(value.strip())
        except json.JSONDecodeError:
            data[key.strip()] = value.strip()
    return data
