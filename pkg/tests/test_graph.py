import itertools

import networkx as nx
import numpy as np
import pytest

from censcausal.graph import (DagError, EstimandSpec, LabeledDag, Node, check_all, check_assumption,
                              classify_censoring, d_separated, d_separated_moral, load_fixture, node_split,
                              open_trail, parse_dag, psi1_estimand, psi2_estimand)
from censcausal.panel import Regime
from censcausal.scm import oracle_curve, paper_dgp, psi1, psi2, random_spec


def brute_force_dsep(dag, X, Y, Z):
    """Enumerate every simple trail in the skeleton and test each for blocking."""
    Z = set(Z)
    und = {n: set(dag.parents(n)) | set(dag.children(n)) for n in dag.names}
    anc_z = dag.ancestors(Z) | Z

    def blocked(path):
        for a, m, b in zip(path, path[1:], path[2:]):
            collider = dag.has_edge(a, m) and dag.has_edge(b, m)
            if collider and m not in anc_z:
                return True
            if not collider and m in Z:
                return True
        return False

    def walk(path):
        last = path[-1]
        if last in Y:
            return not blocked(path)
        for nb in und[last]:
            if nb not in path and nb not in X and walk(path + [nb]):
                return True
        return False

    return not any(walk([x]) for x in X)


def random_dag(rng, n, p):
    nodes = [Node(f"v{i}", "covariate", i) for i in range(n)]
    edges = [(f"v{i}", f"v{j}") for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    return LabeledDag(nodes, edges)


def random_query(rng, names):
    perm = list(rng.permutation(names))
    nx_, ny_ = rng.integers(1, 3, 2)
    nz = rng.integers(0, max(1, len(perm) - nx_ - ny_) + 1)
    X, Y = perm[:nx_], perm[nx_:nx_ + ny_]
    Z = perm[nx_ + ny_:nx_ + ny_ + nz]
    return set(X), set(Y), set(Z)


# parsing ----------------------------------------------------------------------

def test_figure_fixtures_parse():
    assert len(load_fixture("figure1")) == 8
    f1d = load_fixture("figure1_delta")
    assert len(f1d) == 9 and f1d.node("U").kind == "latent" and f1d.node("delta_2").rule == "max"
    assert len(load_fixture("figure2")) == 11 and len(load_fixture("figure3")) == 9


def test_time_order_violation():
    text = "node Y_2 kind=outcome time=2\nnode L_1 kind=covariate time=1\nedge Y_2 -> L_1\n"
    with pytest.raises(DagError, match="time-order") as e:
        parse_dag(text)
    assert e.value.diagnostics[0].line == 3


def test_within_interval_order():
    # same time: C before Y before L before A
    parse_dag("node C_1 kind=censoring time=1\nnode Y_1 kind=outcome time=1\nedge C_1 -> Y_1\n")
    with pytest.raises(DagError, match="time-order"):
        parse_dag("node A_1 kind=treatment time=1\nnode L_1 kind=covariate time=1\nedge A_1 -> L_1\n")


@pytest.mark.parametrize("text, message", [
    ("", "no nodes"),
    ("# comment only\n", "no nodes"),
    ("node a kind=foo time=0\n", "unknown kind"),
    ("node a kind=covariate time=0\nnode b kind=covariate time=0\nedge a -> b\nedge b -> a\n", "cycle"),
    ("node a kind=covariate time=0\nedge a -> z\n", "unknown node"),
    ("node a kind=covariate time=0\nedge a -> a\n", "self-loop"),
    ("node a kind=covariate time=x\n", "integer"),
    ("nodee a\n", "cannot parse"),
    ("node d kind=deterministic time=1 rule=max\n", "no parents"),
    ("node a kind=covariate time=0\nnode d kind=deterministic time=1 rule=max\nedge a -> d\n", "censoring parents"),
    ("node a kind=covariate time=0\nnode a kind=covariate time=1\n", "duplicate"),
])
def test_parse_errors(text, message):
    with pytest.raises(DagError, match=message):
        parse_dag(text)


def test_diagnostics_carry_line_and_column():
    with pytest.raises(DagError) as e:
        parse_dag("node a kind=covariate time=0\n\n   bogus line\n")
    d = e.value.diagnostics[0]
    assert (d.line, d.column) == (3, 4) and "line 3, column 4" in str(e.value)


def test_dumps_round_trip():
    for name in ("figure1", "figure2", "treatment_feedback"):
        g = load_fixture(name)
        assert parse_dag(g.dumps()).same_structure(g)


# node splitting -----------------------------------------------------------------

def _iso(a, b):
    match = lambda x, y: (x["kind"], x["time"], x.get("fixed")) == (y["kind"], y["time"], y.get("fixed"))  # noqa: E731
    return nx.is_isomorphic(a.to_networkx(), b.to_networkx(), node_match=match)


def test_node_split_reproduces_figures_2_and_3():
    f1 = load_fixture("figure1")
    s1 = node_split(f1, psi1_estimand(f1))
    s2 = node_split(f1, psi2_estimand(f1))
    assert s1.same_structure(load_fixture("figure2")) and _iso(s1, load_fixture("figure2"))
    assert s2.same_structure(load_fixture("figure3")) and _iso(s2, load_fixture("figure3"))
    assert len(s1) == len(f1) + 3 and len(s2) == len(f1) + 1
    assert set(s1.children("C1_2=0")) == {"Y_2"} and not s1.children("C1_2")
    assert set(s2.parents("A_1")) == set(f1.parents("A_1"))


def test_empty_intervention_is_identity():
    f1 = load_fixture("figure1")
    assert node_split(f1, EstimandSpec()).same_structure(f1)


def test_node_split_rejects_unknown_nodes():
    f1 = load_fixture("figure1")
    with pytest.raises(KeyError):
        node_split(f1, EstimandSpec(regime=(("A_9", "g"),)))
    with pytest.raises(ValueError):
        node_split(f1, EstimandSpec(censoring=("Y_2",)))


def test_node_split_preserves_random_ancestry():
    f1 = load_fixture("figure1")
    s = node_split(f1, psi1_estimand(f1))
    for n in ("U", "L_0", "Y_1", "L_1", "A_1"):
        assert s.ancestors({n}) == f1.ancestors({n})


# d-separation -------------------------------------------------------------------

def test_chain():
    g = parse_dag("node a kind=covariate time=0\nnode b kind=covariate time=1\nnode c kind=covariate time=2\n"
                  "edge a -> b\nedge b -> c\n")
    assert d_separated(g, {"a"}, {"c"}, {"b"}) and not d_separated(g, {"a"}, {"c"})
    assert open_trail(g, {"a"}, {"c"}) == ["a", "b", "c"]


def test_collider():
    g = parse_dag("node a kind=covariate time=0\nnode b kind=covariate time=0\nnode c kind=covariate time=1\n"
                  "node d kind=covariate time=2\nedge a -> c\nedge b -> c\nedge c -> d\n")
    assert d_separated(g, {"a"}, {"b"})
    assert not d_separated(g, {"a"}, {"b"}, {"c"}) and not d_separated(g, {"a"}, {"b"}, {"d"})


def test_figure1_examples():
    f1 = load_fixture("figure1")
    assert d_separated(f1, {"C2_2"}, {"Y_2"}, {"A_1", "Y_1"})
    nondesc = set(f1.names) - f1.descendants({"C1_2"}) - {"C1_2", "U"}
    assert not d_separated(f1, {"C1_2"}, {"Y_2"}, nondesc)
    assert d_separated(f1.without_edges(("C1_2", "Y_2")), {"C1_2"}, {"Y_2"}, nondesc)


def test_unknown_nodes_raise():
    f1 = load_fixture("figure1")
    with pytest.raises(KeyError):
        d_separated(f1, {"Q"}, {"Y_2"})
    with pytest.raises(ValueError):
        d_separated(f1, {"Y_1"}, {"Y_1"})


def test_implementations_agree_on_random_graphs():
    rng = np.random.default_rng(123)
    n_queries, brute = 0, 0
    while n_queries < 10_000:
        g = random_dag(rng, int(rng.integers(2, 13)), float(rng.uniform(0.1, 0.5)))
        G = g.to_networkx()
        for _ in range(20):
            X, Y, Z = random_query(rng, list(g.names))
            a = d_separated(g, X, Y, Z)
            assert a == d_separated_moral(g, X, Y, Z) == nx.is_d_separator(G, X, Y, Z)
            assert a == d_separated(g, Y, X, Z)
            if not a:
                trail = open_trail(g, X, Y, Z)
                assert trail[0] in X and trail[-1] in Y
            if len(g) <= 9 and brute < 2000:
                assert a == brute_force_dsep(g, X, Y, Z)
                brute += 1
            n_queries += 1
    assert brute == 2000


def test_isolated_nodes_do_not_change_verdicts():
    rng = np.random.default_rng(5)
    for _ in range(200):
        g = random_dag(rng, 8, 0.3)
        bigger = LabeledDag(list(g.nodes) + [Node("iso1", "covariate", 0), Node("iso2", "latent", 3)], g.edges)
        X, Y, Z = random_query(rng, list(g.names))
        assert d_separated(g, X, Y, Z) == d_separated(bigger, X, Y, Z) == d_separated(bigger, X, Y, Z | {"iso1"})


# assumptions ---------------------------------------------------------------------

def verdicts(name, estimand_fn, k=2):
    g = load_fixture(name)
    return {v.assumption: v for v in check_all(g, estimand_fn(g), k)}


def test_table1_pattern():
    m1_psi1, m1_psi2 = verdicts("m1", psi1_estimand), verdicts("m1", psi2_estimand)
    assert m1_psi1["1.1"].holds and m1_psi1["1.2"].holds
    assert not m1_psi2["2.1a"].holds and not m1_psi2["2.1b"].holds
    assert m1_psi2["2.2a"].holds and m1_psi2["2.2b"].holds
    assert m1_psi2["2.1a"].witness_path == ["delta_2", "C1_2", "Y_2"]
    m2 = {**verdicts("m2", psi1_estimand), **verdicts("m2", psi2_estimand)}
    assert all(v.holds for v in m2.values()) and len(m2) == 6


def test_figure1_without_delta_node():
    v = verdicts("figure1", psi2_estimand)["2.1a"]
    assert not v.holds and v.witness_path == ["C1_2", "Y_2"]
    g = load_fixture("figure1").without_edges(("C1_2", "Y_2"))
    assert check_assumption(g, psi2_estimand(g), "2.1a", 2).holds
    assert verdicts("figure1", psi1_estimand)["1.1"].holds


def test_treatment_feedback_pair():
    g = load_fixture("treatment_feedback")
    e = psi2_estimand(g)
    assert check_assumption(g, e, "2.1a", 1).holds
    v = check_assumption(g, e, "2.1b", 1)
    assert not v.holds and v.graph == "factual DAG" and v.witness_path == ["delta_1", "C_1", "A_1"]
    free = load_fixture("treatment_feedback_free")
    assert check_assumption(free, psi2_estimand(free), "2.1b", 1).holds


def test_assumption_estimand_compatibility():
    g = load_fixture("m1")
    with pytest.raises(ValueError):
        check_assumption(g, psi2_estimand(g), "1.1", 2)
    with pytest.raises(ValueError):
        check_assumption(g, psi1_estimand(g), "2.1a", 2)
    with pytest.raises(ValueError):
        check_assumption(g, psi2_estimand(g), "3.1", 2)


def test_verdict_json():
    v = verdicts("m1", psi2_estimand)["2.1a"].to_json()
    assert set(v) >= {"assumption", "holds", "witness_path"} and v["holds"] is False


# censoring classification -----------------------------------------------------

def test_classify_censoring():
    f1 = load_fixture("figure1")
    c1 = classify_censoring(f1, psi1_estimand(f1))
    assert c1.nuisance == () and set(c1.non_nuisance) == {"C1_2", "C2_2"} and c1.audit_ok
    c2 = classify_censoring(f1, psi2_estimand(f1))
    assert set(c2.nuisance) == {"C1_2", "C2_2"} and c2.non_nuisance == () and c2.audit_ok
    assert c2.non_adherence == ("A_1",)


def test_single_censoring_node():
    g = parse_dag("node C_1 kind=censoring time=1\nnode Y_1 kind=outcome time=1\nedge C_1 -> Y_1\n")
    c = classify_censoring(g, EstimandSpec(censoring=("C_1",)))
    assert c.non_nuisance == ("C_1",) and c.nuisance == ()


def test_audit_flags_non_terminating_nuisance_event():
    f1 = load_fixture("figure1")
    c = classify_censoring(f1, psi2_estimand(f1), extra_events=("L_1",))
    assert not c.audit_ok and "L_1" in c.nuisance and "L_1" in c.audit_violations[0]


# graphs against numbers ----------------------------------------------------------

def _2x_hold(spec):
    g = spec.to_dag()
    e = psi2_estimand(g)
    return all(check_assumption(g, e, "2.1a", k).holds for k in range(1, spec.K + 1))


@pytest.mark.parametrize("alpha", [0.0, -2.0])
def test_paper_dgp_graph_matches_oracle(alpha):
    spec = paper_dgp(alpha, -2.0)
    holds = _2x_hold(spec)
    gap = np.max(np.abs(oracle_curve(spec, psi1(Regime.static(1, 5))).values
                          - oracle_curve(spec, psi2(Regime.static(1, 5))).values))
    assert holds == (alpha == 0.0)
    assert (gap <= 1e-9) == holds


def test_fuzzed_specs_graph_matches_oracle():
    rng = np.random.default_rng(99)
    n_hold = 0
    for i in range(60):
        spec = random_spec(rng, censoring_effect=bool(i % 2))
        if _2x_hold(spec):
            n_hold += 1
            K = spec.K
            a0 = int(rng.integers(0, 2))
            reg = Regime.static(a0, K)
            gap = oracle_curve(spec, psi1(reg)).values - oracle_curve(spec, psi2(reg)).values
            assert np.max(np.abs(gap)) <= 1e-9
    assert n_hold >= 10
