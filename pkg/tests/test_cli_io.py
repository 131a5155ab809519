import csv
import json
import math

import numpy as np
import pytest

import blockfit as bf
from blockfit import FamilySpec
from blockfit.cli import main
from blockfit.engine import MixtureParams
from blockfit.families import PoissonParams, PoissonRegParams
from blockfit.graph import EdgeCovariates
from blockfit.io import (
    fit_from_jsonable,
    fit_to_jsonable,
    load_graph,
    read_edge_csv,
    read_fit_json,
    write_fit_json,
)
from blockfit.predict import predict_edges

POISSON = FamilySpec("poisson")


def write_edges_csv(path, graph):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "value"])
        for i, j in graph.pair_index():
            w.writerow([i, j, int(graph.values[i, j])])


def write_cov_csv(path, cov, graph):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j"] + [f"y{d + 1}" for d in range(cov.p)])
        for i, j in graph.pair_index():
            w.writerow([i, j] + [repr(float(v)) for v in cov.y[i, j]])


@pytest.fixture
def two_block_graph(tmp_path):
    params = MixtureParams(alpha=np.array([0.5, 0.5]),
                           theta=PoissonParams(lam=np.array([[6.0, 0.5], [0.5, 3.0]])))
    g, _ = bf.sample_graph(params, 30, False, POISSON, seed=0)
    edges = tmp_path / "edges.csv"
    write_edges_csv(edges, g)
    return g, edges


def test_edge_csv_round_trip(tmp_path, two_block_graph):
    g, edges = two_block_graph
    g2 = load_graph(edges)
    assert g2.n == g.n
    assert np.array_equal(g2.values, g.values)


def test_fit_json_round_trip_bit_identical(two_block_graph, tmp_path):
    g, _ = two_block_graph
    fr = bf.fit(g, POISSON, 2, seed=1, restarts=2)
    fr.icl = bf.icl(g, POISSON, fr)
    path = tmp_path / "fit.json"
    write_fit_json(path, fr, POISSON)
    fr2, spec2, _ = read_fit_json(path)
    assert spec2.kind == "poisson"
    p1 = predict_edges(fr, g, spec=POISSON)
    p2 = predict_edges(fr2, g, spec=spec2)
    assert np.array_equal(p1, p2)  # bit-identical predictions
    assert fr2.icl == fr.icl
    data = fit_to_jsonable(fr, POISSON)
    for key in ("alpha", "theta", "tau", "J_trajectory", "entropy",
                "map_assignment", "converged"):
        assert key in data


def test_cli_fit_select_predict_report(tmp_path, two_block_graph, capsys):
    g, edges = two_block_graph
    fit_json = tmp_path / "fit.json"
    assert main(["fit", "--edges", str(edges), "--family", "poisson", "--q", "2",
                 "--seed", "1", "--restarts", "2", "--out", str(fit_json)]) == 0
    data = json.loads(fit_json.read_text())
    assert len(data["alpha"]) == 2
    assert data["family"] == "poisson"

    table = tmp_path / "sweep.csv"
    best = tmp_path / "best.json"
    assert main(["select", "--edges", str(edges), "--family", "poisson",
                 "--qmin", "1", "--qmax", "3", "--seed", "1", "--restarts", "2",
                 "--out", str(table), "--fit-out", str(best)]) == 0
    rows = list(csv.DictReader(table.open()))
    assert [r["Q"] for r in rows] == ["1", "2", "3"]
    chosen = [int(r["Q"]) for r in rows if r["chosen"] == "1"]
    assert chosen == [2]

    pred_csv = tmp_path / "pred.csv"
    assert main(["predict", "--fit", str(fit_json), "--edges", str(edges),
                 "--out", str(pred_csv)]) == 0
    rows = list(csv.DictReader(pred_csv.open()))
    kinds = {r["record"] for r in rows}
    assert kinds == {"degree", "edge", "r2"}
    degrees = [r for r in rows if r["record"] == "degree"]
    assert len(degrees) == g.n
    # K_hat equals the row sums of X_hat exactly
    edge_rows = [r for r in rows if r["record"] == "edge"]
    khat = {int(r["i"]): float(r["predicted"]) for r in degrees}
    sums = dict.fromkeys(khat, 0.0)
    for r in edge_rows:
        i, j = int(r["i"]), int(r["j"])
        sums[i] += float(r["predicted"])
        sums[j] += float(r["predicted"])  # undirected: each pair listed once
    for i in khat:
        assert khat[i] == pytest.approx(sums[i], abs=1e-12)

    capsys.readouterr()
    assert main(["report", "--fit", str(best), "--baseline", str(fit_json)]) == 0
    out = capsys.readouterr().out
    assert "alpha_hat" in out and "delta ICL" in out
    a = json.loads(best.read_text())["icl"]
    b = json.loads(fit_json.read_text())["icl"]
    assert f"{a - b:.4f}" in out  # delta equals the stored difference exactly


def test_cli_simulate(tmp_path):
    cfg = tmp_path / "grid.json"
    cfg.write_text(json.dumps({"n": 25, "a": 1.0, "lambda": 4.0, "gamma": 0.1,
                               "q_star": 2, "s": 2, "seed": 3, "q_max": 3}))
    out = tmp_path / "rep"
    assert main(["simulate", "--config", str(cfg), "--mode", "selection",
                 "--out", str(out)]) == 0
    assert (out / "report.csv").exists()
    assert (out / "summary.txt").exists()
    rows = list(csv.DictReader((out / "report.csv").open()))
    assert rows and any(r["parameter"].startswith("freq_q_") for r in rows)


def test_cli_simulate_key_value_config(tmp_path):
    cfg = tmp_path / "grid.cfg"
    cfg.write_text("n = 20\na = 1.0\nlambda = 3.0\ngamma = 0.1\nq_star = 2\ns = 2\nseed = 1\n")
    out = tmp_path / "rep2"
    assert main(["simulate", "--config", str(cfg), "--mode", "estimation",
                 "--out", str(out)]) == 0
    assert (out / "report.csv").exists()


def test_cli_error_exit_codes(tmp_path, two_block_graph):
    g, edges = two_block_graph
    # usage errors -> 2
    assert main(["fit", "--edges", str(edges)]) == 2
    assert main(["nonsense"]) == 2
    # missing/malformed input -> 3
    assert main(["fit", "--edges", str(tmp_path / "missing.csv"), "--q", "2"]) == 3
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b,c\n1,2,3\n")
    assert main(["fit", "--edges", str(bad), "--q", "2"]) == 3
    # inconsistent dimensions: covariates required for PRMH
    assert main(["fit", "--edges", str(edges), "--family", "poisson-prmh",
                 "--q", "2"]) == 3
    # malformed fit JSON -> 3
    broken = tmp_path / "broken.json"
    broken.write_text("{}")
    assert main(["predict", "--fit", str(broken), "--edges", str(edges)]) == 3


def test_cli_fit_with_covariates_and_report_effect(tmp_path, capsys):
    rng = np.random.default_rng(5)
    n = 25
    t = rng.integers(0, 3, n).astype(float)
    y = np.abs(t[:, None] - t[None, :])
    cov = EdgeCovariates.from_matrix(y[:, :, None].copy(), directed=False)
    params = MixtureParams(alpha=np.array([0.5, 0.5]),
                           theta=PoissonRegParams(lam=np.array([[5.0, 0.8], [0.8, 2.0]]),
                                                  beta=np.array([-0.4]), shared=True))
    g, _ = bf.sample_graph(params, n, False, FamilySpec("poisson-prmh"), seed=6, cov=cov)
    edges = tmp_path / "edges.csv"
    write_edges_csv(edges, g)
    cov_csv = tmp_path / "cov.csv"
    write_cov_csv(cov_csv, cov, g)
    fit_json = tmp_path / "fit.json"
    assert main(["fit", "--edges", str(edges), "--cov", str(cov_csv),
                 "--family", "poisson-prmh", "--q", "2", "--seed", "0",
                 "--restarts", "2", "--out", str(fit_json)]) == 0
    capsys.readouterr()
    assert main(["report", "--fit", str(fit_json)]) == 0
    out = capsys.readouterr().out
    assert "beta_hat" in out
    assert "covariate effect" in out


def test_read_edge_csv_paired(tmp_path):
    path = tmp_path / "paired.csv"
    path.write_text("i,j,v1,v2\n0,1,1.5,2.5\n")
    entries, paired = read_edge_csv(path)
    assert paired and entries == [(0, 1, (1.5, 2.5))]


def test_fit_from_jsonable_rejects_garbage():
    with pytest.raises(bf.InputFormatError):
        fit_from_jsonable({"family": "poisson"})
