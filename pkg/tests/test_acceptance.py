"""Acceptance gate: one PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -s`` to see the lines as
they are produced; they are also repeated in the terminal summary.
"""

import json
import os
import time

import numpy as np
import pytest

from censcausal import Regime, oracle_censoring_fraction, oracle_curve, paper_dgp, psi1, psi2, simulate
from censcausal.cli import main
from censcausal.estimators import GFormula, IPW, default_designs, replication_study
from censcausal.glm import fit_logit, log_likelihood, score
from censcausal.graph import (LabeledDag, Node, check_all, check_assumption, d_separated, d_separated_moral,
                              load_fixture, node_split, psi1_estimand, psi2_estimand)
from censcausal.scm import enumerate_moments, random_spec

from conftest import ACCEPTANCE_LINES

REG = Regime.static(1, 5)
PAPER_PSI1 = np.array([0.7263, 0.6073, 0.5203, 0.4501, 0.3924])
PAPER_MEANS = np.array([0.7268, 0.6077, 0.5207, 0.4506, 0.3930])
PAPER_SDS = np.array([0.0125, 0.0152, 0.0175, 0.0192, 0.0204])


def report(n, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def _fmt(a, d=4):
    return "(" + ", ".join(f"{x:.{d}f}" for x in a) + ")"


def test_criterion_1_oracle_truth():
    t0 = time.perf_counter()
    v = oracle_curve(paper_dgp(-2.0, -2.0), psi1(REG)).values
    dt = time.perf_counter() - t0
    err = np.max(np.abs(v - PAPER_PSI1))
    report(1, err <= 0.001 and dt < 1.0, f"psi1 = {_fmt(v)}, max |diff| vs paper {err:.5f} <= 0.001, {dt:.3f}s < 1s")


def test_criterion_2_oracle_self_consistency():
    t0 = time.perf_counter()
    worst = 0.0
    specs = [paper_dgp(-2.0, -2.0)]
    rng = np.random.default_rng(2)
    specs += [random_spec(rng) for _ in range(100)]
    for spec in specs:
        reg = Regime.static(1, spec.K)
        for iv in (None, psi1(reg), psi2(reg)):
            e = enumerate_moments(spec, iv)
            worst = max(worst, float(np.max(np.abs(oracle_curve(spec, iv).values - e["survival"]))),
                        abs(e["censoring"][-1] - oracle_censoring_fraction(spec, spec.K, iv)))
    dt = time.perf_counter() - t0
    report(2, worst <= 1e-12 and dt < 60, f"DP vs enumeration on paper DGP + 100 fuzzed specs, "
                                          f"max |diff| {worst:.1e} <= 1e-12, {dt:.1f}s < 60s")


def test_criterion_3_estimand_identity():
    t0 = time.perf_counter()
    eq_gap = 0.0
    for gamma in (-3.0, -2.0, -1.0, 0.0, 1.0):
        s = paper_dgp(0.0, gamma)
        eq_gap = max(eq_gap, float(np.max(np.abs(oracle_curve(s, psi1(REG)).values - oracle_curve(s, psi2(REG)).values))))
    gaps = {}
    for gamma in (-2.0, -3.0):
        s = paper_dgp(-2.0, gamma)
        gaps[gamma] = oracle_curve(s, psi1(REG)).values - oracle_curve(s, psi2(REG)).values
    dt = time.perf_counter() - t0
    ok = eq_gap <= 1e-12 and gaps[-2.0][4] > 0.05 and np.all(gaps[-2.0] > gaps[-3.0]) and dt < 1.0
    report(3, ok, f"alpha=0 max |psi1-psi2| {eq_gap:.1e}; alpha=-2 gap(k=5) {gaps[-2.0][4]:.4f} > 0.05; "
                  f"gap gamma=-2 {_fmt(gaps[-2.0])} > gamma=-3 {_fmt(gaps[-3.0])}; {dt:.3f}s")


def test_criterion_4_censoring_calibration():
    # regime followed, censoring process allowed to run on after death
    f2 = oracle_censoring_fraction(paper_dgp(-2.0, -2.0), 5, psi2(REG), continue_after_death=True)
    f3 = oracle_censoring_fraction(paper_dgp(-2.0, -3.0), 5, psi2(REG), continue_after_death=True)
    ok = abs(f2 - 0.56) <= 0.03 and abs(f3 - 0.28) <= 0.03
    report(4, ok, f"P(delta_5=1) = {f2:.4f} at gamma=-2 (0.56 +/- 0.03), {f3:.4f} at gamma=-3 (0.28 +/- 0.03)")


def test_criterion_5_replication_study():
    spec = paper_dgp(-2.0, -2.0)
    t0 = time.perf_counter()
    st = replication_study(spec, REG, 1000, 1000, {"gformula": {"kind": "gformula"}}, seed=2024,
                           threads=os.cpu_count() or 1)
    dt = time.perf_counter() - t0
    t = st.table("gformula")
    mean_err = np.max(np.abs(t["mean"] - PAPER_MEANS))
    ratio = t["sd"] / PAPER_SDS
    ok = mean_err <= 0.005 and np.all(np.abs(ratio - 1) <= 0.15) and t["n_failed"][0] == 0
    report(5, ok, f"means {_fmt(t['mean'])} (max |diff| {mean_err:.4f} <= 0.005); SDs {_fmt(t['sd'])} "
                  f"(ratio to paper {_fmt(ratio, 3)}, within 15%); {int(t['n_ok'][0])} ok; {dt:.0f}s")


def test_criterion_6_estimator_cross_check():
    spec = paper_dgp(-2.0, -2.0)
    panel = simulate(spec, 100_000, seed=606)
    d = default_designs(spec)
    g = GFormula(outcome_design=d["outcome_design"], covariate_designs=d["covariate_designs"],
                 covariate_absorbing=d["covariate_absorbing"]).fit(panel, REG).predict()
    w = IPW(treatment_design=d["treatment_design"], censoring_design=d["censoring_design"]).fit(panel, REG).predict()
    truth = oracle_curve(spec, psi1(REG)).values
    gaps = [np.max(np.abs(g - w)), np.max(np.abs(g - truth)), np.max(np.abs(w - truth))]
    report(6, max(gaps) <= 0.01, f"N=1e5 g-formula {_fmt(g)}, Hajek IPW {_fmt(w)}; max |g-ipw| {gaps[0]:.4f}, "
                                 f"|g-psi1| {gaps[1]:.4f}, |ipw-psi1| {gaps[2]:.4f} <= 0.01")


def test_criterion_7_glm_numerics():
    spec = paper_dgp(-2.0, -2.0)
    d = default_designs(spec)
    fits = []
    for n, seed in ((1000, 1), (10_000, 2), (100_000, 3)):
        panel = simulate(spec, n, seed=seed)
        for pooling in ("pooled", "stratified"):
            g = GFormula(outcome_design=d["outcome_design"], covariate_designs=d["covariate_designs"],
                         covariate_absorbing=d["covariate_absorbing"], method="exact", pooling=pooling).fit(panel, REG)
            w = IPW(treatment_design=d["treatment_design"], censoring_design=d["censoring_design"],
                    pooling=pooling).fit(panel, REG)
            models = [g.outcome_model_, *g.covariate_models_.values(), w.treatment_model_, w.censoring_model_]
            fits += [f for m in models for f in m.fits.values()]
    worst_score = max(f.score_norm for f in fits)
    all_conv = all(f.converged for f in fits)
    rng = np.random.default_rng(7)
    worst_fd = 0.0
    for _ in range(50):
        n, p = int(rng.integers(20, 400)), int(rng.integers(1, 5))
        X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))]) if p > 1 else np.ones((n, 1))
        y = (rng.random(n) < 0.4).astype(float)
        wts = rng.uniform(0.2, 3.0, n)
        beta = rng.normal(scale=0.7, size=p)
        g_an = score(beta, X, y, wts)
        h = 1e-5
        g_fd = np.array([(log_likelihood(beta + h * e, X, y, wts) - log_likelihood(beta - h * e, X, y, wts)) / (2 * h)
                         for e in np.eye(p)])
        worst_fd = max(worst_fd, float(np.max(np.abs(g_an - g_fd)) / max(1.0, float(np.max(np.abs(g_an))))))
    ok = all_conv and worst_score <= 1e-8 and worst_fd <= 1e-6
    report(7, ok, f"{len(fits)} nuisance fits, all converged, max |score| {worst_score:.1e} <= 1e-8; "
                  f"finite-difference relative error {worst_fd:.1e} <= 1e-6")


def _random_dag(rng, n, p):
    nodes = [Node(f"v{i}", "covariate", i) for i in range(n)]
    return LabeledDag(nodes, [(f"v{i}", f"v{j}") for i in range(n) for j in range(i + 1, n) if rng.random() < p])


def test_criterion_8_graph_suite():
    f1 = load_fixture("figure1")
    iso = (node_split(f1, psi1_estimand(f1)).same_structure(load_fixture("figure2"))
           and node_split(f1, psi2_estimand(f1)).same_structure(load_fixture("figure3")))
    rng = np.random.default_rng(8)
    queries, disagree = 0, 0
    while queries < 10_000:
        g = _random_dag(rng, int(rng.integers(2, 13)), float(rng.uniform(0.1, 0.5)))
        for _ in range(20):
            perm = list(rng.permutation(list(g.names)))
            nx_, ny_ = rng.integers(1, 3, 2)
            nz = int(rng.integers(0, max(1, len(perm) - nx_ - ny_) + 1))
            X, Y, Z = perm[:nx_], perm[nx_:nx_ + ny_], perm[nx_ + ny_:nx_ + ny_ + nz]
            if not Y:
                continue
            disagree += d_separated(g, X, Y, Z) != d_separated_moral(g, X, Y, Z)
            queries += 1

    def verdicts(name):
        g = load_fixture(name)
        return {v.assumption: v.holds for e in (psi1_estimand(g), psi2_estimand(g)) for v in check_all(g, e, 2)}

    m1, m2 = verdicts("m1"), verdicts("m2")
    table1 = m1["1.1"] and m1["1.2"] and not m1["2.1a"] and m2["2.1a"] and m2["2.2a"]

    # whenever 2.1a holds on a generating spec, the oracle gives psi1 = psi2
    consistent, n_hold, n_specs = True, 0, 0
    specs = [paper_dgp(a, gm) for a in (0.0, -1.0, -2.0) for gm in (-3.0, -2.0)]
    rng = np.random.default_rng(88)
    specs += [random_spec(rng, censoring_effect=bool(i % 2)) for i in range(60)]
    for spec in specs:
        dag = spec.to_dag()
        e = psi2_estimand(dag)
        holds = all(check_assumption(dag, e, "2.1a", k).holds for k in range(1, spec.K + 1))
        n_specs += 1
        if holds:
            n_hold += 1
            reg = Regime.static(1, spec.K)
            gap = np.max(np.abs(oracle_curve(spec, psi1(reg)).values - oracle_curve(spec, psi2(reg)).values))
            consistent &= bool(gap <= 1e-9)
    ok = iso and disagree == 0 and table1 and consistent and n_hold > 0
    report(8, ok, f"node_split matches stored SWIG fixtures: {iso}; d-separation implementations disagree on "
                  f"{disagree}/{queries} queries; hold/fail pattern M1 {m1} M2 {m2}: {table1}; 2.1a held on "
                  f"{n_hold}/{n_specs} generating specs, all with psi1=psi2 to 1e-9: {consistent}")


def test_criterion_9_reproducibility(tmp_path):
    cfg = {"simulate": {"n": 2000}, "study": {"n": 200, "replicates": 4, "bootstrap": 5},
           "estimators": {"g": {"kind": "gformula"}, "ipw": {"kind": "ipw"}}}
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    outputs = {"simulate": "panel.csv", "oracle": "oracle.csv", "estimate": "estimates.csv",
               "study": "study.csv", "figure4": "figure4.csv", "figure5": "figure5.csv"}
    same = {}
    for cmd, name in outputs.items():
        blobs = []
        for run, threads in enumerate(("1", "1", "2")):
            out = tmp_path / f"{cmd}-{run}"
            assert main([cmd, "--config", str(cfg_path), "--out", str(out), "--seed", "99",
                         "--threads", threads]) == 0
            blobs.append((out / name).read_bytes())
        same[cmd] = blobs[0] == blobs[1] == blobs[2]
    dag = str(tmp_path / "m2.dag")
    with open(dag, "w") as fh:
        fh.write(load_fixture("m2").dumps())
    v = []
    for run in range(2):
        main(["check-dag", dag, "--out", str(tmp_path / f"dag-{run}")])
        v.append((tmp_path / f"dag-{run}" / "verdicts.json").read_bytes())
    same["check-dag"] = v[0] == v[1]
    report(9, all(same.values()), "byte-identical outputs across reruns and --threads 1/2: "
                                  + ", ".join(f"{k}={'yes' if s else 'NO'}" for k, s in same.items()))
