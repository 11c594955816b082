"""Time-indexed causal DAGs, single world intervention graphs and
graphical checks of the identifying assumptions.

Verdicts rest on standard d-separation, with deterministic nodes such as
``delta_k = max(C_k)`` treated as ordinary nodes. They are therefore
conservative: a "fails" may be licensed away by determinism, a "holds" is
graphically licensed under faithfulness.
"""

from __future__ import annotations

import json
import re
from collections import deque
from dataclasses import dataclass, field
from importlib import resources

KINDS = ("latent", "censoring", "deterministic", "outcome", "covariate", "treatment")
# within-interval order (C, delta, Y, L, A); latent variables may precede anything
RANK = {k: i for i, k in enumerate(KINDS)}
ASSUMPTIONS = ("1.1", "1.2", "2.1a", "2.2a", "2.1b", "2.2b")

CONSERVATIVE_NOTE = ("standard d-separation with deterministic nodes as ordinary nodes; "
                     "'holds' is graphically licensed under faithfulness, 'fails' may be conservative")


@dataclass(frozen=True)
class Diagnostic:
    message: str
    line: int | None = None
    column: int | None = None

    def __str__(self):
        where = "" if self.line is None else f"line {self.line}" + (
            "" if self.column is None else f", column {self.column}") + ": "
        return where + self.message


class DagError(ValueError):
    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(str(d) for d in self.diagnostics))


@dataclass(frozen=True)
class Node:
    name: str
    kind: str
    time: int
    rule: str | None = None
    fixed: str | None = None  # assigned value label on the fixed half of a split node

    @property
    def is_fixed(self) -> bool:
        return self.fixed is not None


def _anchor(lines, key):
    at = lines.get(key)
    if at is None:
        return (None, None)
    return (at, None) if isinstance(at, int) else tuple(at)


class LabeledDag:
    """Immutable DAG over :class:`Node` objects; edges are name pairs."""

    def __init__(self, nodes, edges, lines=None):
        self._nodes = {}
        diags = []
        lines = lines or {}
        for nd in nodes:
            if nd.name in self._nodes:
                diags.append(Diagnostic(f"duplicate node {nd.name!r}", *_anchor(lines, nd.name)))
            self._nodes[nd.name] = nd
        self._edges = tuple(dict.fromkeys(tuple(e) for e in edges))
        self._lines = dict(lines)
        diags += self._validate()
        if diags:
            raise DagError(diags)
        self._children = {n: [] for n in self._nodes}
        self._parents = {n: [] for n in self._nodes}
        for a, b in self._edges:
            self._children[a].append(b)
            self._parents[b].append(a)

    def _validate(self):
        diags = []
        if not self._nodes:
            return [Diagnostic("graph has no nodes")]
        for nd in self._nodes.values():
            if nd.kind not in KINDS:
                diags.append(Diagnostic(f"unknown kind {nd.kind!r} for node {nd.name!r}",
                                        *_anchor(self._lines, nd.name)))
        if diags:
            return diags
        parents = {n: [] for n in self._nodes}
        for a, b in self._edges:
            line = _anchor(self._lines, (a, b))
            bad = [x for x in (a, b) if x not in self._nodes]
            if bad:
                diags.append(Diagnostic(f"edge {a} -> {b} references unknown node {bad[0]!r}", *line))
                continue
            if a == b:
                diags.append(Diagnostic(f"self-loop on {a}", *line))
                continue
            u, v = self._nodes[a], self._nodes[b]
            if u.is_fixed and v.name == u.name.split("=")[0]:
                diags.append(Diagnostic(f"fixed half {a} may not point into its own random half", *line))
            if (u.time, RANK[u.kind]) > (v.time, RANK[v.kind]):
                diags.append(Diagnostic(
                    f"time-order violation: {a} (time {u.time}, {u.kind}) -> {b} (time {v.time}, {v.kind})",
                    *line))
            if v.is_fixed:
                diags.append(Diagnostic(f"fixed node {b} may not have parents", *line))
            parents[b].append(a)
        for nd in self._nodes.values():
            if nd.kind == "deterministic":
                ps = parents[nd.name]
                if not ps:
                    diags.append(Diagnostic(f"deterministic node {nd.name} has no parents",
                                            *_anchor(self._lines, nd.name)))
                if nd.rule == "max" and any(self._nodes[p].kind != "censoring" for p in ps if p in self._nodes):
                    diags.append(Diagnostic(
                        f"max-rule node {nd.name} may only have censoring parents", *_anchor(self._lines, nd.name)))
        if not diags:
            cyc = _find_cycle(self._nodes, self._edges)
            if cyc:
                diags.append(Diagnostic("cycle " + " -> ".join(cyc), *_anchor(self._lines, (cyc[0], cyc[1]))))
        return diags

    # accessors -------------------------------------------------------------

    @property
    def nodes(self) -> tuple:
        return tuple(self._nodes.values())

    @property
    def names(self) -> tuple:
        return tuple(self._nodes)

    @property
    def edges(self) -> tuple:
        return self._edges

    def __contains__(self, name):
        return name in self._nodes

    def __len__(self):
        return len(self._nodes)

    def node(self, name) -> Node:
        try:
            return self._nodes[name]
        except KeyError:
            raise KeyError(f"unknown node {name!r}") from None

    def parents(self, name):
        return tuple(self._parents[name])

    def children(self, name):
        return tuple(self._children[name])

    def has_edge(self, a, b) -> bool:
        return b in self._children.get(a, ())

    def of_kind(self, *kinds, time=None, fixed=False):
        return tuple(n.name for n in self._nodes.values()
                     if n.kind in kinds and (time is None or time(n.time)) and n.is_fixed == fixed)

    def ancestors(self, names) -> set:
        seen, stack = set(), list(names)
        while stack:
            x = stack.pop()
            if x in seen:
                continue
            seen.add(x)
            stack.extend(self._parents[x])
        return seen

    def descendants(self, names) -> set:
        seen, stack = set(), list(names)
        while stack:
            x = stack.pop()
            if x in seen:
                continue
            seen.add(x)
            stack.extend(self._children[x])
        return seen

    def without_edges(self, *edges) -> "LabeledDag":
        drop = set(edges)
        return LabeledDag(self.nodes, [e for e in self._edges if e not in drop])

    def with_edges(self, *edges) -> "LabeledDag":
        return LabeledDag(self.nodes, list(self._edges) + list(edges))

    def same_structure(self, other: "LabeledDag") -> bool:
        return (set(self._nodes.values()) == set(other._nodes.values())
                and set(self._edges) == set(other._edges))

    def dumps(self) -> str:
        out = []
        for nd in self._nodes.values():
            line = f"node {nd.name} kind={nd.kind} time={nd.time}"
            if nd.rule:
                line += f" rule={nd.rule}"
            if nd.fixed is not None:
                line += f" fixed={nd.fixed}"
            out.append(line)
        out += [f"edge {a} -> {b}" for a, b in self._edges]
        return "\n".join(out) + "\n"

    def to_networkx(self):
        import networkx as nx

        g = nx.DiGraph()
        for nd in self._nodes.values():
            g.add_node(nd.name, kind=nd.kind, time=nd.time)
        g.add_edges_from(self._edges)
        return g


def _find_cycle(nodes, edges):
    children = {n: [] for n in nodes}
    for a, b in edges:
        children[a].append(b)
    color = dict.fromkeys(nodes, 0)
    for root in nodes:
        if color[root]:
            continue
        stack = [(root, iter(children[root]))]
        path = [root]
        color[root] = 1
        while stack:
            x, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                color[x] = 2
                stack.pop()
                path.pop()
            elif color[nxt] == 1:
                return path[path.index(nxt):] + [nxt]
            elif color[nxt] == 0:
                color[nxt] = 1
                stack.append((nxt, iter(children[nxt])))
                path.append(nxt)
    return None


# text format -----------------------------------------------------------------

_NODE = re.compile(r"^node\s+(\S+)((?:\s+\w+=\S+)*)\s*$")
_EDGE = re.compile(r"^edge\s+(\S+)\s*->\s*(\S+)\s*$")


def parse_dag(text: str) -> LabeledDag:
    """Parse ``node <name> kind=<kind> time=<k> [rule=max] [fixed=<v>]`` and
    ``edge <a> -> <b>`` lines; ``#`` starts a comment."""
    nodes, edges, lines, diags = [], [], {}, []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        col = raw.index(line[0]) + 1
        m = _NODE.match(line)
        if m:
            name = m.group(1)
            attrs = dict(a.split("=", 1) for a in m.group(2).split())
            unknown = set(attrs) - {"kind", "time", "rule", "fixed"}
            if unknown:
                diags.append(Diagnostic(f"unknown attribute {sorted(unknown)[0]!r}", lineno, col))
                continue
            if "kind" not in attrs or "time" not in attrs:
                diags.append(Diagnostic(f"node {name} needs kind= and time=", lineno, col))
                continue
            try:
                t = int(attrs["time"])
            except ValueError:
                diags.append(Diagnostic(f"time must be an integer, got {attrs['time']!r}", lineno, col))
                continue
            nodes.append(Node(name, attrs["kind"], t, attrs.get("rule"), attrs.get("fixed")))
            lines[name] = (lineno, col)
            continue
        m = _EDGE.match(line)
        if m:
            edges.append((m.group(1), m.group(2)))
            lines[(m.group(1), m.group(2))] = (lineno, col)
            continue
        diags.append(Diagnostic(f"cannot parse {line!r}", lineno, col))
    if diags:
        raise DagError(diags)
    return LabeledDag(nodes, edges, lines)


def load_fixture(name: str) -> LabeledDag:
    """Bundled graphs: figure1, figure1_delta, figure2, figure3, m1, m2,
    treatment_feedback, treatment_feedback_free."""
    text = resources.files("censcausal").joinpath("fixtures", f"{name}.dag").read_text()
    return parse_dag(text)


# estimands and SWIGs ---------------------------------------------------------

@dataclass(frozen=True)
class EstimandSpec:
    """Intervened treatment nodes with their values, censoring nodes set to 0,
    and the target outcome node."""

    regime: tuple = ()  # ((node, value), ...)
    censoring: tuple = ()
    target: str | None = None

    def __post_init__(self):
        reg = self.regime.items() if isinstance(self.regime, dict) else self.regime
        object.__setattr__(self, "regime", tuple((str(n), str(v)) for n, v in reg))
        object.__setattr__(self, "censoring", tuple(self.censoring))

    @property
    def intervened(self) -> dict:
        out = dict(self.regime)
        out.update({c: "0" for c in self.censoring})
        return out

    @property
    def eliminates_censoring(self) -> bool:
        return bool(self.censoring)

    def check(self, dag: LabeledDag):
        for n in self.intervened:
            if n not in dag:
                raise KeyError(f"intervention on non-existent node {n!r}")
        for n, _ in self.regime:
            if dag.node(n).kind != "treatment":
                raise ValueError(f"regime node {n} is not a treatment node")
        for n in self.censoring:
            if dag.node(n).kind != "censoring":
                raise ValueError(f"censoring intervention on non-censoring node {n}")
        if self.target is not None and dag.node(self.target).kind != "outcome":
            raise ValueError(f"target {self.target} is not an outcome node")


def psi1_estimand(dag: LabeledDag, value="g", target=None) -> EstimandSpec:
    """Regime on every treatment node and every censoring node set to 0."""
    return EstimandSpec(tuple((a, value) for a in dag.of_kind("treatment")),
                        dag.of_kind("censoring"), target or _last_outcome(dag))


def psi2_estimand(dag: LabeledDag, value="g", target=None) -> EstimandSpec:
    return EstimandSpec(tuple((a, value) for a in dag.of_kind("treatment")), (),
                        target or _last_outcome(dag))


def _last_outcome(dag):
    ys = sorted((dag.node(y).time, y) for y in dag.of_kind("outcome"))
    return ys[-1][1] if ys else None


def fixed_name(name, value) -> str:
    return f"{name}={value}"


def node_split(dag: LabeledDag, estimand: EstimandSpec) -> LabeledDag:
    """Split each intervened node into a random half (same name, incoming
    edges) and a fixed half ``name=value`` carrying the outgoing edges."""
    estimand.check(dag)
    iv = estimand.intervened
    nodes = list(dag.nodes)
    for n, v in iv.items():
        nd = dag.node(n)
        nodes.append(Node(fixed_name(n, v), nd.kind, nd.time, nd.rule, str(v)))
    edges = [(fixed_name(a, iv[a]) if a in iv else a, b) for a, b in dag.edges]
    return LabeledDag(nodes, edges)


# d-separation ----------------------------------------------------------------

def _check_sets(dag, X, Y, Z):
    X, Y, Z = set(X), set(Y), set(Z)
    for s in (X, Y, Z):
        for n in s:
            if n not in dag:
                raise KeyError(f"unknown node {n!r}")
    if X & Y or X & Z or Y & Z:
        raise ValueError("X, Y and Z must be disjoint")
    return X, Y, Z


def _reachable(dag, X, Z):
    """Bayes-ball: states ``(node, came_from_child)`` reachable along active
    trails from ``X`` given ``Z``, with back-pointers."""
    anz = dag.ancestors(Z)
    start = [(x, True) for x in X]  # leaving x as if arriving from a child
    prev = {s: None for s in start}
    queue = deque(start)
    while queue:
        node, up = queue.popleft()
        nxt = []
        if up:  # arrived from a child (or start)
            if node not in Z:
                nxt += [(p, True) for p in dag.parents(node)]
                nxt += [(c, False) for c in dag.children(node)]
        else:  # arrived from a parent
            if node not in Z:
                nxt += [(c, False) for c in dag.children(node)]
            if node in anz:  # collider with a conditioned descendant
                nxt += [(p, True) for p in dag.parents(node)]
        for s in nxt:
            if s not in prev:
                prev[s] = (node, up)
                queue.append(s)
    return prev


def d_separated(dag: LabeledDag, X, Y, Z=()) -> bool:
    """Reachability (Bayes-ball) d-separation test."""
    X, Y, Z = _check_sets(dag, X, Y, Z)
    reached = {n for n, _ in _reachable(dag, X, Z)}
    return not (reached & Y)


def d_separated_moral(dag: LabeledDag, X, Y, Z=()) -> bool:
    """d-separation as separation in the moralized ancestral graph."""
    X, Y, Z = _check_sets(dag, X, Y, Z)
    keep = dag.ancestors(X | Y | Z)
    adj = {n: set() for n in keep}
    for n in keep:
        ps = [p for p in dag.parents(n) if p in keep]
        for p in ps:
            adj[n].add(p)
            adj[p].add(n)
        for i, p in enumerate(ps):
            for q in ps[i + 1:]:
                adj[p].add(q)
                adj[q].add(p)
    seen = set(X)
    stack = list(X)
    while stack:
        x = stack.pop()
        if x in Y:
            return False
        for y in adj[x]:
            if y not in seen and y not in Z:
                seen.add(y)
                stack.append(y)
    return True


def open_trail(dag: LabeledDag, X, Y, Z=()):
    """An active trail from ``X`` to ``Y`` given ``Z`` as a node list, or None."""
    X, Y, Z = _check_sets(dag, X, Y, Z)
    prev = _reachable(dag, X, Z)
    hits = sorted((s for s in prev if s[0] in Y), key=lambda s: _depth(prev, s))
    if not hits:
        return None
    s, path = hits[0], []
    while s is not None:
        path.append(s[0])
        s = prev[s]
    return path[::-1]


def _depth(prev, s):
    d = 0
    while prev[s] is not None:
        s = prev[s]
        d += 1
    return d


def format_trail(dag: LabeledDag, path) -> str:
    out = path[0]
    for a, b in zip(path, path[1:]):
        out += f" -> {b}" if dag.has_edge(a, b) else f" <- {b}"
    return out


# identifying assumptions -----------------------------------------------------

@dataclass
class Verdict:
    assumption: str
    holds: bool
    witness_path: list = field(default_factory=list)
    graph: str = ""
    X: tuple = ()
    Y: tuple = ()
    Z: tuple = ()
    note: str = CONSERVATIVE_NOTE

    def to_json(self) -> dict:
        return {"assumption": self.assumption, "holds": self.holds, "witness_path": list(self.witness_path),
                "graph": self.graph, "X": list(self.X), "Y": list(self.Y), "Z": list(self.Z),
                "note": self.note}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def _censoring_state(dag: LabeledDag, time) -> tuple:
    """The max-rule node(s) at ``time``, falling back to censoring nodes."""
    delta = tuple(n.name for n in dag.nodes if n.kind == "deterministic" and n.rule == "max"
                  and n.time == time and not n.is_fixed)
    return delta or dag.of_kind("censoring", time=lambda t: t == time)


def check_assumption(dag: LabeledDag, estimand: EstimandSpec, assumption: str, k: int) -> Verdict:
    """Graphical verdict for one identifying assumption at interval ``k``.

    Counterfactual statements (1.1, 1.2, 2.1a, 2.2a, 2.2b) are read on the
    SWIG of the estimand's intervention, 2.1b on the factual DAG. Treatment
    exchangeability is tested for the treatment node at ``k-1`` against the
    outcomes from ``k`` on, conditioning on history through ``k-1``. Fixed
    halves are always conditioned on.
    """
    if assumption not in ASSUMPTIONS:
        raise ValueError(f"unknown assumption {assumption!r}; expected one of {ASSUMPTIONS}")
    estimand.check(dag)
    if assumption.startswith("1") and not estimand.eliminates_censoring:
        raise ValueError(f"assumption {assumption} concerns an estimand that eliminates censoring")
    if assumption.startswith("2") and estimand.eliminates_censoring:
        raise ValueError(f"assumption {assumption} concerns an estimand without censoring elimination")

    before = lambda t: t <= k - 1  # noqa: E731
    if assumption == "2.1b":
        g, label = dag, "factual DAG"
    else:
        g, label = node_split(dag, estimand), "SWIG"
    fixed = {n.name for n in g.nodes if n.is_fixed}
    history = set(g.of_kind("covariate", time=before)) | set(g.of_kind("outcome", time=before))
    treat_hist = set(g.of_kind("treatment", time=before))
    cens_hist = set(g.of_kind("censoring", time=before))
    delta_hist = {n.name for n in g.nodes if n.kind == "deterministic" and n.time <= k - 1 and not n.is_fixed}
    future_y = set(g.of_kind("outcome", time=lambda t: t >= k))

    if assumption in ("1.1", "2.1a", "2.1b"):
        X = set(g.of_kind("censoring", time=lambda t: t == k)) if assumption == "1.1" \
            else set(_censoring_state(g, k))
        Y = future_y
        if assumption == "2.1b":
            Y = Y | set(g.of_kind("covariate", "treatment", time=lambda t: t >= k))
        Z = history | treat_hist | (cens_hist if assumption == "1.1" else delta_hist) | fixed
    else:
        X = set(g.of_kind("treatment", time=lambda t: t == k - 1))
        Y = future_y
        Z = history | (treat_hist - X) | fixed
        if assumption == "1.2":
            Z |= cens_hist
        elif assumption == "2.2a":
            Z |= delta_hist
    Z -= X | Y
    if not X:
        return Verdict(assumption, True, [], label, (), tuple(sorted(Y)), tuple(sorted(Z)),
                       note="vacuous: no node at the tested time; " + CONSERVATIVE_NOTE)
    if not Y:
        raise ValueError(f"no outcome nodes at or after interval {k}")
    holds = d_separated(g, X, Y, Z)
    witness = [] if holds else open_trail(g, X, Y, Z)
    return Verdict(assumption, holds, witness or [], label, tuple(sorted(X)), tuple(sorted(Y)), tuple(sorted(Z)))


def check_all(dag: LabeledDag, estimand: EstimandSpec, k: int) -> list:
    ids = ASSUMPTIONS[:2] if estimand.eliminates_censoring else ASSUMPTIONS[2:]
    return [check_assumption(dag, estimand, a, k) for a in ids]


@dataclass
class CensoringClassification:
    nuisance: tuple
    non_nuisance: tuple
    non_adherence: tuple
    audit_ok: bool
    audit_violations: tuple = ()

    def to_json(self):
        return {"nuisance": list(self.nuisance), "non_nuisance": list(self.non_nuisance),
                "non_adherence": list(self.non_adherence), "audit_ok": self.audit_ok,
                "audit_violations": list(self.audit_violations)}


def classify_censoring(dag: LabeledDag, estimand: EstimandSpec, extra_events=()) -> CensoringClassification:
    """Partition right-censoring events relative to the estimand.

    Censoring nodes the estimand eliminates are non-nuisance, the others are
    nuisance; deviations from the regime at intervened treatment nodes are
    non-nuisance as well. ``extra_events`` are further nodes declared to be
    right-censoring events that the estimand does not eliminate; the audit
    fails if any nuisance event is not an observation-terminating node.
    """
    estimand.check(dag)
    elim = set(estimand.censoring)
    cens = dag.of_kind("censoring")
    nuisance = [c for c in cens if c not in elim]
    violations = []
    for e in extra_events:
        nd = dag.node(e)
        if e in elim or e in dict(estimand.regime):
            continue
        nuisance.append(e)
        if nd.kind != "censoring":
            violations.append(f"{e} ({nd.kind}) is a nuisance event but not observation-terminating")
    return CensoringClassification(
        tuple(nuisance), tuple(c for c in cens if c in elim), tuple(n for n, _ in estimand.regime),
        not violations, tuple(violations))
