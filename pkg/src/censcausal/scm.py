"""Binary longitudinal structural causal models.

A model is an ordered list of :class:`Variable` declarations evaluated in
every interval ``k = 1..K`` in declaration order, after a baseline pass at
``k = 0``. Each stochastic variable is Bernoulli with a logit-linear
equation over references such as ``"L1[k-1]"`` or ``"A[0]"`` and pairwise
products of them.

Two exact routes compute interventional means:

* :func:`oracle_curve` pushes the joint distribution of the per-interval
  state forward (dynamic programming over at most ``2**bits`` states);
* :func:`enumerate_moments` enumerates every trajectory with its exact
  probability, independent of state merging.

:func:`simulate` draws factual or intervened panels with a keyed random
stream per (seed, interval, variable) so that subject ``i`` gets the same
trajectory regardless of ``n`` or chunking.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .curve import SurvivalCurve
from .panel import DELTA, OUTCOME, TREATMENT, Panel, PanelSchema, Regime, apply_masking
from .terms import evaluate_term, parse_term, term_label

ROLES = ("latent", "censoring", "delta", "outcome", "covariate", "treatment")
_RANK = {r: i for i, r in enumerate(ROLES)}
# roles frozen at their last value once the subject has died
_GATED = ("censoring", "covariate", "treatment")


class SpecError(ValueError):
    pass


def expit(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass(frozen=True)
class Equation:
    """Logit-linear predictor: intercept plus coefficient-weighted terms."""

    intercept: float = 0.0
    coefficients: tuple = ()

    def __post_init__(self):
        coefs = self.coefficients
        if isinstance(coefs, dict):
            coefs = tuple(coefs.items())
        parsed = []
        for term, coef in coefs:
            factors = parse_term(term)
            if not factors:
                raise SpecError("the interval index is not allowed in structural equations")
            parsed.append((term_label(factors), float(coef)))
        object.__setattr__(self, "coefficients", tuple(parsed))
        object.__setattr__(self, "intercept", float(self.intercept))
        if not all(math.isfinite(c) for _, c in parsed) or not math.isfinite(self.intercept):
            raise SpecError("coefficients must be finite")

    @property
    def factors(self):
        return [(parse_term(t), c) for t, c in self.coefficients]

    def predictor(self, get, k, n):
        eta = np.full(n, self.intercept)
        for factors, coef in self.factors:
            if coef != 0.0:
                eta = eta + coef * evaluate_term(factors, get, k, n)
        return eta

    def scalar_predictor(self, get, k) -> float:
        eta = self.intercept
        for factors, coef in self.factors:
            if coef == 0.0:
                continue
            v = 1.0
            for f in factors:
                v *= get(f.name, f.time(k))
            eta += coef * v
        return eta

    def to_json(self):
        return {"intercept": self.intercept, "coefficients": dict(self.coefficients)}

    @classmethod
    def from_json(cls, obj):
        return cls(obj.get("intercept", 0.0), tuple(obj.get("coefficients", {}).items()))


@dataclass(frozen=True)
class Variable:
    name: str
    role: str
    equation: Equation | None = None
    initial: Equation | int | None = None
    absorbing_at: int | None = None
    deterministic: str | None = None  # "max" of parents, or "const"
    parents: tuple = ()
    value: int = 0
    times: tuple | None = None  # treatment assignment intervals

    def __post_init__(self):
        if self.role not in ROLES:
            raise SpecError(f"{self.name}: unknown role {self.role!r}")
        object.__setattr__(self, "parents", tuple(self.parents))
        if self.times is not None:
            object.__setattr__(self, "times", tuple(int(t) for t in self.times))

    @property
    def stochastic(self) -> bool:
        return self.deterministic is None

    def to_json(self):
        out = {"name": self.name, "role": self.role}
        if self.equation is not None:
            out["equation"] = self.equation.to_json()
        if isinstance(self.initial, Equation):
            out["initial"] = self.initial.to_json()
        elif self.initial is not None:
            out["initial"] = int(self.initial)
        if self.absorbing_at is not None:
            out["absorbing_at"] = self.absorbing_at
        if self.deterministic is not None:
            out["deterministic"] = {"rule": self.deterministic, "parents": list(self.parents),
                                    "value": self.value}
        if self.times is not None:
            out["times"] = list(self.times)
        return out

    @classmethod
    def from_json(cls, obj):
        init = obj.get("initial")
        if isinstance(init, dict):
            init = Equation.from_json(init)
        det = obj.get("deterministic")
        return cls(
            name=obj["name"],
            role=obj["role"],
            equation=Equation.from_json(obj["equation"]) if "equation" in obj else None,
            initial=init,
            absorbing_at=obj.get("absorbing_at"),
            deterministic=None if det is None else det["rule"],
            parents=tuple(det.get("parents", ())) if det else (),
            value=int(det.get("value", 0)) if det else 0,
            times=tuple(obj["times"]) if obj.get("times") is not None else None,
        )


@dataclass(frozen=True)
class InterventionSpec:
    """Treatments set by ``regime`` (None = natural course); censoring
    components forced to 0 when ``eliminate_censoring``."""

    regime: Regime | None = None
    eliminate_censoring: bool = False


def psi1(regime: Regime) -> InterventionSpec:
    return InterventionSpec(regime, eliminate_censoring=True)


def psi2(regime: Regime) -> InterventionSpec:
    return InterventionSpec(regime, eliminate_censoring=False)


@dataclass(frozen=True)
class ScmSpec:
    K: int
    variables: tuple
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        vs = list(self.variables)
        if not any(v.role == "delta" for v in vs):
            cens = [v.name for v in vs if v.role == "censoring"]
            pos = max((i for i, v in enumerate(vs) if v.role == "censoring"), default=-1) + 1
            vs.insert(pos, Variable(DELTA, "delta", deterministic="max", parents=tuple(cens)))
        object.__setattr__(self, "variables", tuple(vs))
        self.validate()

    # structure -----------------------------------------------------------

    def __getitem__(self, name) -> Variable:
        for v in self.variables:
            if v.name == name:
                return v
        raise KeyError(name)

    @property
    def names(self):
        return [v.name for v in self.variables]

    def by_role(self, role):
        return [v for v in self.variables if v.role == role]

    @property
    def treatment(self) -> Variable | None:
        t = self.by_role("treatment")
        return t[0] if t else None

    @property
    def treatment_times(self) -> tuple:
        t = self.treatment
        if t is None:
            return ()
        return t.times if t.times is not None else (0,)

    def schema(self) -> PanelSchema:
        return PanelSchema(
            K=self.K,
            covariates=tuple(v.name for v in self.by_role("covariate")),
            censoring=tuple(v.name for v in self.by_role("censoring")),
            treatment_times=self.treatment_times or (0,),
        )

    def validate(self):
        if int(self.K) != self.K or self.K < 1:
            raise SpecError("K must be a positive integer")
        names = self.names
        if len(set(names)) != len(names):
            raise SpecError(f"duplicate variable names: {names}")
        counts = {r: len(self.by_role(r)) for r in ROLES}
        if counts["outcome"] != 1 or self.by_role("outcome")[0].name != OUTCOME:
            raise SpecError(f"exactly one outcome variable named {OUTCOME!r} is required")
        if counts["delta"] != 1 or self.by_role("delta")[0].name != DELTA:
            raise SpecError(f"exactly one delta variable named {DELTA!r} is required")
        if counts["censoring"] < 1:
            raise SpecError("at least one censoring component is required")
        if counts["treatment"] > 1 or (counts["treatment"] and self.treatment.name != TREATMENT):
            raise SpecError(f"at most one treatment variable named {TREATMENT!r} is allowed")
        ranks = [_RANK[v.role] for v in self.variables]
        if ranks != sorted(ranks):
            raise SpecError("variables must follow the (latent, C, delta, Y, L, A) ordering")
        pos = {n: i for i, n in enumerate(names)}
        times = self.treatment_times
        full_treat = set(times) == set(range(self.K))
        for t in times:
            if not 0 <= t < self.K:
                raise SpecError(f"treatment time {t} outside 0..K-1")

        def check_refs(v, eq, baseline):
            for factors, _ in eq.factors:
                for f in factors:
                    if f.name not in pos:
                        raise SpecError(f"{v.name}: unknown parent {f.name!r}")
                    if f.absolute:
                        if f.offset != 0:
                            raise SpecError(f"{v.name}: only absolute references to interval 0 are supported")
                        if baseline and pos[f.name] >= pos[v.name]:
                            raise SpecError(f"{v.name}: {f} is not earlier in the ordering")
                        continue
                    if f.offset > 1:
                        raise SpecError(f"{v.name}: lags beyond k-1 are not supported")
                    if baseline and f.offset != 0:
                        raise SpecError(f"{v.name}: baseline equation references {f}")
                    if f.offset == 0 and pos[f.name] >= pos[v.name]:
                        raise SpecError(f"{v.name}: {f} is not earlier in the ordering (cycle)")
                    if f.name == TREATMENT and not full_treat:
                        raise SpecError(f"{v.name}: relative treatment reference {f} needs treatment at every interval")

        for v in self.variables:
            if v.deterministic is not None:
                if v.deterministic == "max":
                    if not v.parents:
                        raise SpecError(f"{v.name}: max rule needs parents")
                    for p in v.parents:
                        if p not in pos or pos[p] >= pos[v.name]:
                            raise SpecError(f"{v.name}: parent {p!r} missing or not earlier")
                elif v.deterministic == "const":
                    if v.value not in (0, 1):
                        raise SpecError(f"{v.name}: constant must be binary")
                else:
                    raise SpecError(f"{v.name}: unknown deterministic rule {v.deterministic!r}")
                continue
            if v.role == "delta":
                raise SpecError("delta must be deterministic")
            if v.equation is None and not (v.role == "treatment" and set(times) <= {0}):
                if v.role != "latent":
                    raise SpecError(f"{v.name}: missing structural equation")
            if v.equation is not None:
                check_refs(v, v.equation, baseline=False)
            if isinstance(v.initial, Equation):
                check_refs(v, v.initial, baseline=True)
            elif v.initial is None and v.role in ("covariate", "latent", "treatment"):
                raise SpecError(f"{v.name}: baseline value or equation required")
            if v.absorbing_at not in (None, 0, 1):
                raise SpecError(f"{v.name}: absorbing_at must be 0, 1 or omitted")
        d = self[DELTA]
        if d.deterministic == "max" and any(self[p].role != "censoring" for p in d.parents):
            raise SpecError("delta may only depend on censoring components")

    # transforms ----------------------------------------------------------

    def with_params(self, **meta):
        return replace(self, meta={**self.meta, **meta})

    def without_censoring(self) -> "ScmSpec":
        """Same model with every censoring component fixed at 0."""
        vs = tuple(
            Variable(v.name, v.role, deterministic="const", value=0) if v.role == "censoring" else v
            for v in self.variables
        )
        return ScmSpec(self.K, vs, meta={**self.meta, "censoring": "none"})

    def parents_of(self, v: Variable, k: int) -> set:
        """Nodes ``(name, t)`` feeding ``v`` at interval ``k`` in the unrolled graph."""
        out = set()
        if v.deterministic == "max":
            return {(p, k) for p in v.parents}
        if v.deterministic == "const":
            return out
        eq = v.initial if k == 0 else v.equation
        if v.role == "treatment" and k not in self.treatment_times:
            return {(v.name, k - 1)} if k > 0 else out
        if isinstance(eq, Equation):
            for factors, coef in eq.factors:
                if coef != 0.0:
                    out |= {(f.name, f.time(k)) for f in factors}
        if k > 0:
            if v.absorbing_at is not None:
                out.add((v.name, k - 1))
            if v.role in _GATED:
                out.add((v.name, k - 1))
                out.add((OUTCOME, k - 1 if v.role == "censoring" else k))
        return out

    def to_dag(self):
        """Unrolled causal DAG over all intervals (zero coefficients give no edge)."""
        from .graph import LabeledDag, Node

        kind = {"latent": "latent", "censoring": "censoring", "delta": "deterministic",
                "outcome": "outcome", "covariate": "covariate", "treatment": "treatment"}
        nodes, edges = [], []
        for k in range(self.K + 1):
            for v in self.variables:
                if k == 0 and v.role in ("censoring", "delta", "outcome"):
                    continue  # fixed baseline conventions
                if v.role == "treatment" and k not in self.treatment_times:
                    continue
                name = _node_name(v.name, k)
                nodes.append(Node(name, kind[v.role], k, "max" if v.role == "delta" else None))
                for pname, t in sorted(self.parents_of(v, k)):
                    pv = self[pname]
                    if t == 0 and pv.role in ("censoring", "delta", "outcome"):
                        continue
                    while pv.role == "treatment" and t not in self.treatment_times:
                        t -= 1
                    edges.append((_node_name(pname, t), name))
        return LabeledDag(nodes, sorted(set(edges)))

    # serialization -------------------------------------------------------

    def to_json(self) -> dict:
        return {"K": self.K, "variables": [v.to_json() for v in self.variables], "meta": dict(self.meta)}

    @classmethod
    def from_json(cls, obj) -> "ScmSpec":
        try:
            return cls(obj["K"], tuple(Variable.from_json(v) for v in obj["variables"]),
                       meta=dict(obj.get("meta", {})))
        except (KeyError, TypeError) as exc:
            raise SpecError(f"malformed model document: {exc}") from exc

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)

    @classmethod
    def loads(cls, text: str) -> "ScmSpec":
        return cls.from_json(json.loads(text))


def _node_name(name, k):
    return f"{name}_{k}"


def paper_dgp(alpha: float, gamma: float) -> ScmSpec:
    """Five-interval point-treatment model with confounders L1, L2.

    ``gamma`` shifts the censoring hazard and ``alpha`` is the effect of
    being censored on survival.
    """
    vs = (
        Variable("C", "censoring", initial=0, absorbing_at=1,
                 equation=Equation(gamma, {"A[0]": -1, "L1[k-1]": 1, "L2[k-1]": 1})),
        Variable(DELTA, "delta", deterministic="max", parents=("C",)),
        Variable(OUTCOME, "outcome", initial=1, absorbing_at=0,
                 equation=Equation(-1, {"A[0]": 2, "L1[k-1]": 2, "L2[k-1]": -2,
                                        "L1[k-1]*L2[k-1]": 2, "C[k]": alpha})),
        Variable("L1", "covariate", initial=Equation(0.0),
                 equation=Equation(0, {"A[0]": 1, "L1[k-1]": 1, "L2[k-1]": -1})),
        Variable("L2", "covariate", initial=Equation(0.0), absorbing_at=1,
                 equation=Equation(-2, {"A[0]": -2, "L1[k]": -1})),
        Variable(TREATMENT, "treatment", times=(0,),
                 initial=Equation(1, {"L1[k]": -2, "L2[k]": 1, "L1[k]*L2[k]": 1})),
    )
    return ScmSpec(5, vs, meta={"alpha": alpha, "gamma": gamma})


def random_spec(rng, K=None, censoring_effect=None, latent=None) -> ScmSpec:
    """Small random model for fuzzing the oracles.

    Draws one or two censoring components, one or two covariates, an
    optional time-invariant latent and a baseline treatment, with sparse
    coefficients in [-2, 2]. ``censoring_effect`` and ``latent`` force the
    presence or absence of censoring-to-outcome arrows and of the latent.
    """
    rng = np.random.default_rng(rng)
    K = int(rng.integers(2, 4)) if K is None else K
    d = int(rng.integers(1, 3))
    p = int(rng.integers(1, 3))
    has_u = bool(rng.random() < 0.4) if latent is None else latent
    cens_eff = bool(rng.random() < 0.5) if censoring_effect is None else censoring_effect
    cs = [f"C{i + 1}" for i in range(d)] if d > 1 else ["C"]
    ls = [f"L{i + 1}" for i in range(p)]

    def coef():
        return float(np.round(rng.uniform(-2, 2), 3))

    def eq(pool, products=True):
        picked = [t for t in pool if rng.random() < 0.6]
        if products and len(picked) >= 2 and rng.random() < 0.3:
            a, b = rng.choice(len(picked), 2, replace=False)
            picked.append(f"{picked[a]}*{picked[b]}")
        return Equation(coef(), {t: coef() for t in picked})

    lagged = [f"{x}[k-1]" for x in ls] + ["A[0]"] + (["U[k]"] if has_u else [])
    vs = []
    if has_u:
        vs.append(Variable("U", "latent", initial=Equation(coef())))
    for c in cs:
        vs.append(Variable(c, "censoring", initial=0, absorbing_at=1, equation=eq(lagged)))
    ypool = list(lagged)
    y = eq(ypool)
    if cens_eff:
        y = Equation(y.intercept, dict(y.coefficients) | {f"{cs[0]}[k]": coef() or 1.0})
    vs.append(Variable(OUTCOME, "outcome", initial=1, absorbing_at=0, equation=y))
    for i, l in enumerate(ls):
        pool = lagged + [f"{x}[k]" for x in ls[:i]]
        base = ([f"{x}[k]" for x in ls[:i]] + (["U[k]"] if has_u else []))
        vs.append(Variable(l, "covariate", initial=eq(base, products=False),
                           absorbing_at=1 if rng.random() < 0.3 else None, equation=eq(pool)))
    vs.append(Variable(TREATMENT, "treatment", times=(0,),
                       initial=eq([f"{x}[k]" for x in ls], products=False)))
    return ScmSpec(K, tuple(vs), meta={"fuzz": True})


# exact dynamic programming ---------------------------------------------------

def _needed(spec: ScmSpec) -> set:
    """Variables whose previous-interval value can influence the future."""
    need = {OUTCOME}
    for v in spec.variables:
        if v.absorbing_at is not None:
            need.add(v.name)
        if v.role == "treatment" and set(spec.treatment_times) != {0}:
            need.add(v.name)
        if v.equation is None:
            if v.deterministic is None:
                need.add(v.name)  # carried forward unchanged
            continue
        for factors, coef in v.equation.factors:
            need |= {f.name for f in factors if not f.absolute and f.offset == 1}
    return need


def _abs_refs(spec: ScmSpec) -> list:
    out = set()
    for v in spec.variables:
        if v.equation is None:
            continue
        for factors, _ in v.equation.factors:
            out |= {f.name for f in factors if f.absolute}
    return sorted(out)


def _forced(spec, v, k, intervention):
    """Value imposed by the intervention, or None."""
    if intervention is None:
        return None
    if v.role == "treatment" and intervention.regime is not None and k in spec.treatment_times:
        return intervention.regime[k]
    if v.role == "censoring" and intervention.eliminate_censoring:
        return 0
    return None


def _dp(spec: ScmSpec, intervention: InterventionSpec | None, continue_after_death=False):
    """Forward DP. Returns per-k P(Y_k=1), P(delta_k=1) for k = 0..K."""
    if intervention is not None and intervention.regime is not None:
        intervention.regime.check(spec.K)
    names = spec.names
    idx = {n: i for i, n in enumerate(names)}
    base_names = _abs_refs(spec)
    need = _needed(spec)
    keep = [n in need for n in names]
    surv = np.zeros(spec.K + 1)
    cens = np.zeros(spec.K + 1)

    def interval(prev, base, k):
        """Branch one state through interval k; yields (values, prob)."""
        partial = [([None] * len(names), 1.0)]
        for j, v in enumerate(spec.variables):
            nxt = []
            for vals, pr in partial:
                def get(name, t, vals=vals):
                    if t == k:
                        return vals[idx[name]]
                    if k > 0 and t == k - 1:
                        return prev[idx[name]]
                    return base[base_names.index(name)]

                forced = _forced(spec, v, k, intervention)
                if forced is not None:
                    vals[j] = forced
                    nxt.append((vals, pr))
                    continue
                if v.deterministic == "max":
                    vals[j] = max(vals[idx[p]] for p in v.parents)
                    nxt.append((vals, pr))
                    continue
                if v.deterministic == "const":
                    vals[j] = v.value
                    nxt.append((vals, pr))
                    continue
                if k == 0:
                    eq = v.initial
                    if not isinstance(eq, Equation):
                        vals[j] = {"outcome": 1}.get(v.role, 0) if eq is None else int(eq)
                        nxt.append((vals, pr))
                        continue
                else:
                    p_prev = prev[idx[v.name]]
                    hold = (
                        (v.absorbing_at is not None and p_prev == v.absorbing_at)
                        or (v.role == "treatment" and k not in spec.treatment_times)
                        or (v.role in _GATED and not continue_after_death
                            and get(OUTCOME, k - 1 if v.role == "censoring" else k) == 0)
                        or v.equation is None
                    )
                    if hold:
                        vals[j] = p_prev
                        nxt.append((vals, pr))
                        continue
                    eq = v.equation
                p1 = 1.0 / (1.0 + math.exp(-eq.scalar_predictor(get, k)))
                a = list(vals)
                a[j] = 1
                vals[j] = 0
                nxt.append((a, pr * p1))
                nxt.append((vals, pr * (1.0 - p1)))
            partial = nxt
        return partial

    states = {}
    for vals, pr in interval(None, None, 0):
        base = tuple(vals[idx[n]] for n in base_names)
        key = (tuple(vals), base)
        states[key] = states.get(key, 0.0) + pr
    surv[0] = 1.0
    for k in range(1, spec.K + 1):
        new = {}
        for (prev, base), pr in states.items():
            for vals, q in interval(prev, base, k):
                p = pr * q
                if p == 0.0:
                    continue
                if vals[idx[OUTCOME]] == 1:
                    surv[k] += p
                if vals[idx[DELTA]] == 1:
                    cens[k] += p
                key = (tuple(x if keep[i] else 0 for i, x in enumerate(vals)), base)
                new[key] = new.get(key, 0.0) + p
        states = new
    return surv, cens


def oracle_curve(spec: ScmSpec, intervention: InterventionSpec | None,
                 continue_after_death: bool = False) -> SurvivalCurve:
    surv, _ = _dp(spec, intervention, continue_after_death)
    return SurvivalCurve(surv[1:], provenance="oracle")


def _check_k(spec, k):
    if not 1 <= k <= spec.K:
        raise ValueError(f"k={k} outside 1..{spec.K}")


def oracle_mean(spec: ScmSpec, intervention: InterventionSpec, k: int) -> float:
    """Exact ``E(Y_k)`` under the intervention.

    With ``eliminate_censoring`` this is the mean had observation never been
    terminated; without it, censoring follows its natural course under the
    regime.
    """
    _check_k(spec, k)
    return oracle_curve(spec, intervention)[k]


def oracle_contrast(spec, regime_a: Regime, regime_b: Regime, eliminate_censoring: bool, k: int) -> float:
    _check_k(spec, k)
    a = oracle_curve(spec, InterventionSpec(regime_a, eliminate_censoring))
    if regime_a == regime_b:
        return 0.0
    b = oracle_curve(spec, InterventionSpec(regime_b, eliminate_censoring))
    return a[k] - b[k]


def oracle_censoring_fraction(spec: ScmSpec, k: int, intervention: InterventionSpec | None = None,
                              continue_after_death: bool = False) -> float:
    """Exact ``P(delta_k = 1)``.

    Defaults to the factual law with censoring stopped at death. Passing a
    regime and ``continue_after_death=True`` gives the fraction of subjects
    whose observation process (run regardless of death) has ended by ``k``.
    """
    _check_k(spec, k)
    _, cens = _dp(spec, intervention, continue_after_death)
    return float(cens[k])


# vectorized forward pass: simulation and enumeration ----------------------------

def _forward(spec: ScmSpec, intervention, n: int, choose, continue_after_death=False):
    """Evaluate the structural equations on ``n`` parallel trajectories.

    ``choose(j, k, p)`` returns binary draws for stochastic variable ``j`` at
    interval ``k`` given success probabilities ``p`` (None means the value is
    forced and ``choose`` is not called). Returns ``{name: (n, K+1) int8}``.
    """
    K = spec.K
    names = spec.names
    vals = {nm: np.zeros((n, K + 1), dtype=np.int8) for nm in names}

    def get(name, t):
        return vals[name][:, t]

    for k in range(K + 1):
        for j, v in enumerate(spec.variables):
            col = vals[v.name]
            forced = _forced(spec, v, k, intervention)
            if forced is not None:
                col[:, k] = forced
                continue
            if v.deterministic == "max":
                col[:, k] = np.max(np.stack([vals[p][:, k] for p in v.parents]), axis=0)
                continue
            if v.deterministic == "const":
                col[:, k] = v.value
                continue
            if k == 0:
                if not isinstance(v.initial, Equation):
                    col[:, 0] = {"outcome": 1}.get(v.role, 0) if v.initial is None else int(v.initial)
                    continue
                p = expit(v.initial.predictor(get, 0, n))
                col[:, 0] = choose(j, 0, p, None)
                continue
            prev = col[:, k - 1]
            if (v.role == "treatment" and k not in spec.treatment_times) or v.equation is None:
                col[:, k] = prev
                continue
            hold = np.zeros(n, dtype=bool)
            if v.absorbing_at is not None:
                hold |= prev == v.absorbing_at
            if v.role in _GATED and not continue_after_death:
                hold |= get(OUTCOME, k - 1 if v.role == "censoring" else k) == 0
            p = expit(v.equation.predictor(get, k, n))
            col[:, k] = choose(j, k, p, (hold, prev))
    return vals


def enumerate_moments(spec: ScmSpec, intervention: InterventionSpec | None = None,
                      continue_after_death: bool = False, chunk_bits: int = 18, max_bits: int = 26):
    """Brute force over every joint outcome of every stochastic draw.

    Each stochastic (variable, interval) slot gets one bit; a path whose bit
    disagrees with an absorbing or frozen value has probability zero.
    Returns a dict with ``survival`` (P(Y_k=1), k=1..K), ``censoring``
    (P(delta_k=1)) and ``total`` (sum of path probabilities, should be 1).
    """
    if intervention is not None and intervention.regime is not None:
        intervention.regime.check(spec.K)
    slots = {}
    for k in range(spec.K + 1):
        for j, v in enumerate(spec.variables):
            if v.deterministic is not None or _forced(spec, v, k, intervention) is not None:
                continue
            if k == 0 and not isinstance(v.initial, Equation):
                continue
            if k > 0 and ((v.role == "treatment" and k not in spec.treatment_times) or v.equation is None):
                continue
            slots[(j, k)] = len(slots)
    B = len(slots)
    if B > max_bits:
        raise ValueError(f"{B} stochastic slots exceed the enumeration limit of {max_bits}")
    surv = np.zeros(spec.K)
    cens = np.zeros(spec.K)
    total = 0.0
    chunk = 1 << min(B, chunk_bits)
    for start in range(0, 1 << B, chunk):
        codes = np.arange(start, start + chunk, dtype=np.int64)
        weight = np.ones(chunk)

        def choose(j, k, p, hold):
            nonlocal weight
            bit = ((codes >> slots[(j, k)]) & 1).astype(np.int8)
            w = np.where(bit == 1, p, 1.0 - p)
            if hold is not None:
                held, prev = hold
                w = np.where(held, (bit == prev).astype(float), w)
            weight = weight * w
            return bit

        vals = _forward(spec, intervention, chunk, choose, continue_after_death)
        total += weight.sum()
        surv += weight @ vals[OUTCOME][:, 1:].astype(float)
        cens += weight @ vals[DELTA][:, 1:].astype(float)
    return {"survival": surv, "censoring": cens, "total": total, "bits": B}


def _stream(seed: int, k: int, j: int, start: int, count: int) -> np.ndarray:
    bg = np.random.PCG64(np.random.SeedSequence([int(seed), int(k), int(j)]))
    if start:
        bg.advance(start)
    return np.random.Generator(bg).random(count)


def simulate(spec: ScmSpec, n: int, seed: int, masked: bool = True,
             intervention: InterventionSpec | None = None, continue_after_death: bool = False,
             threads: int = 1, chunk_size: int = 250_000) -> Panel:
    """Draw ``n`` independent trajectories.

    Subject ``i`` consumes element ``i`` of the uniform stream keyed by
    ``(seed, k, variable)``, so the result does not depend on ``threads`` or
    on how subjects are chunked.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    spec.validate()
    bounds = [(s, min(n, s + chunk_size)) for s in range(0, n, chunk_size)]

    def run(bound):
        lo, hi = bound
        m = hi - lo

        def choose(j, k, p, hold):
            draw = (_stream(seed, k, j, lo, m) < p).astype(np.int8)
            if hold is not None:
                held, prev = hold
                draw = np.where(held, prev, draw)
            return draw

        return _forward(spec, intervention, m, choose, continue_after_death)

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(run, bounds))
    else:
        parts = [run(b) for b in bounds]
    vals = {nm: np.concatenate([p[nm] for p in parts]) for nm in spec.names}
    schema = spec.schema()
    data = {v: vals[v] for v in schema.variables if v != TREATMENT}
    if TREATMENT in vals:
        data[TREATMENT] = vals[TREATMENT]
    else:
        data[TREATMENT] = np.ma.masked_all((n, spec.K + 1), dtype=np.int8)
    panel = Panel(schema, data)
    return apply_masking(panel) if masked else panel
