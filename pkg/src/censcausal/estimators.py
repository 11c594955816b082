"""Estimators of the regime-specific survival curve from masked panels.

Both estimators target the iterated-conditional g-formula functional: the
probability of surviving to ``k`` under the regime, integrating fitted
covariate laws among subjects still alive and under observation.

:class:`GFormula` plugs fitted nuisance models into that functional, by
Monte Carlo over synthetic histories or by exact summation over the
covariate space. :class:`IPW` reweights the observed, regime-consistent,
uncensored subjects by inverse treatment and observation probabilities.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .curve import EstimateReport, SurvivalCurve
from .glm import DesignSpec, build_design, design_matrix, fit_logit, predict_prob
from .panel import DELTA, OUTCOME, TREATMENT, Panel, Regime, at_risk, regime_consistent
from .terms import parse_term

POOLING = ("pooled", "time_effect", "stratified")


class PositivityError(RuntimeError):
    """An empty risk set or a vanishing weight denominator."""


class NotFittedError(RuntimeError):
    pass


def _as_design(d) -> DesignSpec:
    if d is None or isinstance(d, DesignSpec):
        return d
    return DesignSpec.from_json(d)


def _as_regime(regime, K) -> Regime:
    if isinstance(regime, Regime):
        regime.check(K)
        return regime
    if np.isscalar(regime):
        return Regime.static(int(regime), K)
    r = Regime(tuple(regime))
    r.check(K)
    return r


class _ModelSet:
    """One pooled fit or one fit per interval."""

    def __init__(self, design: DesignSpec, pooling: str):
        if pooling not in POOLING:
            raise ValueError(f"pooling must be one of {POOLING}")
        self.pooling = pooling
        self.design = design.with_terms("k") if pooling == "time_effect" and "k" not in design.terms else design
        self.fits = {}

    def fit(self, panel, subjects, intervals, response, label):
        subjects, intervals = np.asarray(subjects), np.asarray(intervals)
        if self.pooling == "stratified":
            for k in np.unique(intervals):
                sel = intervals == k
                X, y, w = build_design(panel, self.design, subjects[sel], intervals[sel], response)
                self.fits[int(k)] = fit_logit(X, y, w, terms=self.design.columns)
        else:
            if len(subjects) == 0:
                raise PositivityError(f"{label}: no rows to fit")
            X, y, w = build_design(panel, self.design, subjects, intervals, response)
            self.fits[None] = fit_logit(X, y, w, terms=self.design.columns)
        return self

    def fit_for(self, k):
        if self.pooling == "stratified":
            if k not in self.fits:
                raise PositivityError(f"no fitted model for interval {k}")
            return self.fits[k]
        return self.fits[None]

    def prob(self, get, k, n):
        return predict_prob(self.fit_for(k), design_matrix(self.design, get, k, n))

    @property
    def all_converged(self) -> bool:
        return all(f.converged for f in self.fits.values())

    def summary(self):
        return {("pooled" if k is None else int(k)): f.to_json() for k, f in self.fits.items()}


def _rows(mask_by_k: dict):
    subj = np.concatenate([np.flatnonzero(m) for m in mask_by_k.values()]) if mask_by_k else np.array([], int)
    ks = np.concatenate([np.full(int(m.sum()), k) for k, m in mask_by_k.items()]) if mask_by_k else np.array([], int)
    return subj.astype(np.int64), ks.astype(np.int64)


def _forbid_censoring_terms(design: DesignSpec, panel: Panel, what: str):
    bad = design.references() & ({DELTA, *panel.schema.censoring})
    if bad:
        raise ValueError(f"{what} design may not use censoring indicators as predictors: {sorted(bad)}")


def _drop_treatment(design: DesignSpec) -> DesignSpec:
    keep = tuple(t for t in design.terms if TREATMENT not in {f.name for f in parse_term(t)})
    return DesignSpec(keep, design.intercept)


def default_designs(spec) -> dict:
    """Correctly specified designs read off a structural model.

    Censoring terms drop out of the outcome design because the outcome model
    is fitted among subjects still under observation.
    """
    from .scm import Equation

    cens = {v.name for v in spec.by_role("censoring")} | {DELTA}

    def terms(eq, drop_cens=False):
        if not isinstance(eq, Equation):
            return ()
        out = []
        for t, c in eq.coefficients:
            names = {f.name for f in parse_term(t)}
            if drop_cens and names & cens:
                continue
            out.append(t)
        return tuple(out)

    y = terms(spec[OUTCOME].equation, drop_cens=True)
    covs = {v.name: DesignSpec(terms(v.equation)) for v in spec.by_role("covariate")}
    absorbing = {v.name: v.absorbing_at for v in spec.by_role("covariate") if v.absorbing_at is not None}
    cterms = []
    for v in spec.by_role("censoring"):
        for t in terms(v.equation):
            if t not in cterms:
                cterms.append(t)
    treat = spec.treatment
    if treat is not None and isinstance(treat.initial, Equation):
        tdesign = DesignSpec(tuple(t.replace("[k]", "[0]") for t in terms(treat.initial)))
    else:
        tdesign = DesignSpec(())
    return {
        "outcome_design": DesignSpec(y),
        "covariate_designs": covs,
        "covariate_absorbing": absorbing,
        "censoring_design": DesignSpec(tuple(cterms)),
        "treatment_design": tdesign,
    }


class GFormula(BaseEstimator):
    """Parametric g-formula for the survival curve under a static regime.

    Parameters
    ----------
    outcome_design : DesignSpec or list of terms
        Model for ``Y[k]`` among subjects with ``Y[k-1]=1, delta[k]=0``.
    covariate_designs : dict
        Covariate name -> design, fitted among ``Y[k]=1, delta[k]=0`` in
        schema order (a later covariate may use an earlier one at ``[k]``).
    covariate_absorbing : dict
        Covariate name -> absorbing value; the model is fitted only on rows
        not yet absorbed and the value is carried forward in simulation.
    method : {"mc", "exact"}
        Monte Carlo integration or exact summation over covariate histories.
    mc_replicates : int, optional
        Synthetic histories for ``method="mc"``; default ``min(100 n, 10**6)``.
    pooling : {"pooled", "time_effect", "stratified"}
    restrict_to_regime : bool
        Fit only on rows whose treatment history follows the regime.
    random_state : int
    """

    def __init__(self, outcome_design=None, covariate_designs=None, covariate_absorbing=None,
                 method="mc", mc_replicates=None, pooling="pooled", restrict_to_regime=False,
                 random_state=0, max_exact_rows=1 << 16):
        self.outcome_design = outcome_design
        self.covariate_designs = covariate_designs
        self.covariate_absorbing = covariate_absorbing
        self.method = method
        self.mc_replicates = mc_replicates
        self.pooling = pooling
        self.restrict_to_regime = restrict_to_regime
        self.random_state = random_state
        self.max_exact_rows = max_exact_rows

    def fit(self, panel: Panel, regime):
        K = panel.K
        regime = _as_regime(regime, K)
        schema = panel.schema
        ydes = _as_design(self.outcome_design) or DesignSpec(())
        cdes = {c: _as_design((self.covariate_designs or {}).get(c, ())) for c in schema.covariates}
        absorbing = dict(self.covariate_absorbing or {})
        if self.method not in ("mc", "exact"):
            raise ValueError("method must be 'mc' or 'exact'")
        if self.mc_replicates is not None and int(self.mc_replicates) < 1:
            raise ValueError("mc_replicates must be >= 1")
        _forbid_censoring_terms(ydes, panel, "outcome")
        for c, d in cdes.items():
            _forbid_censoring_terms(d, panel, f"covariate {c}")
        if self.restrict_to_regime:
            # treatment is constant among regime-consistent rows
            ydes = _drop_treatment(ydes)
            cdes = {c: _drop_treatment(d) for c, d in cdes.items()}

        consistent = {k: (regime_consistent(panel, k, regime) if self.restrict_to_regime
                          else np.ones(panel.n, bool)) for k in range(1, K + 1)}
        risk = {}
        for k in range(1, K + 1):
            risk[k] = at_risk(panel, k) & consistent[k]
            if not (risk[k] & regime_consistent(panel, k, regime)).any():
                raise PositivityError(f"empty risk set at k={k}: no subject alive, uncensored and "
                                      f"regime-consistent")
        self.outcome_model_ = _ModelSet(ydes, self.pooling).fit(panel, *_rows(risk), f"{OUTCOME}[k]", OUTCOME)
        self.covariate_models_ = {}
        for c in schema.covariates:
            sel = {}
            for k in range(1, K + 1):
                m = (panel[OUTCOME][:, k].filled(0) == 1) & (panel[DELTA][:, k].filled(1) == 0) & consistent[k]
                if c in absorbing:
                    m &= panel[c][:, k - 1].filled(absorbing[c]) != absorbing[c]
                sel[k] = m
            self.covariate_models_[c] = _ModelSet(cdes[c], self.pooling).fit(panel, *_rows(sel), f"{c}[k]", c)

        self.regime_ = regime
        self.baseline_ = {c: np.asarray(panel[c][:, 0].filled(0)) for c in schema.covariates}
        self.n_ = panel.n
        self.K_ = K
        self.schema_ = schema
        self.risk_set_sizes_ = [int(risk[k].sum()) for k in range(1, K + 1)]
        self.curve_ = self._integrate()
        return self

    # integration ---------------------------------------------------------

    def _integrate(self):
        K = self.K_
        covs = self.schema_.covariates
        absorbing = dict(self.covariate_absorbing or {})
        if self.method == "exact":
            keys = np.column_stack([self.baseline_[c] for c in covs]) if covs else np.zeros((self.n_, 0))
            uniq, counts = np.unique(keys, axis=0, return_counts=True)
            R = len(uniq)
            hist = {c: np.zeros((R, K + 1)) for c in covs}
            for j, c in enumerate(covs):
                hist[c][:, 0] = uniq[:, j]
            mass = counts / counts.sum()
            rng = None
        else:
            R = int(self.mc_replicates or min(100 * self.n_, 10 ** 6))
            rng = np.random.default_rng(self.random_state)
            pick = rng.integers(0, self.n_, R)
            hist = {c: np.zeros((R, K + 1)) for c in covs}
            for c in covs:
                hist[c][:, 0] = self.baseline_[c][pick]
            mass = np.full(R, 1.0 / R)
        surv = np.ones(len(mass))
        curve = np.zeros(K)

        def getter(h):
            def get(name, t):
                if name == TREATMENT:
                    return float(self.regime_[t]) if t < K else float(self.regime_[K - 1])
                if name == OUTCOME:
                    return 1.0
                return h[name][:, t]
            return get

        for k in range(1, K + 1):
            get = getter(hist)
            n = len(mass)
            surv = surv * self.outcome_model_.prob(get, k, n)
            curve[k - 1] = float(mass @ surv)
            if k == K:
                break
            for c in covs:
                get = getter(hist)
                n = len(mass)
                p = self.covariate_models_[c].prob(get, k, n)
                held = None
                if c in absorbing:
                    held = hist[c][:, k - 1] == absorbing[c]
                    p = np.where(held, float(absorbing[c]), p)
                if self.method == "exact":
                    branch = ~np.isclose(p, 0.0) & ~np.isclose(p, 1.0) if held is not None else np.ones(n, bool)
                    if held is not None:
                        branch &= ~held
                    fixed = ~branch
                    one = {h: v for h, v in hist.items()}
                    # rows with forced values keep a single copy
                    idx_b = np.flatnonzero(branch)
                    idx_f = np.flatnonzero(fixed)
                    new_hist = {}
                    for h, v in one.items():
                        new_hist[h] = np.concatenate([v[idx_f], v[idx_b], v[idx_b]])
                    new_hist[c][:, k] = np.concatenate(
                        [np.round(p[idx_f]), np.ones(len(idx_b)), np.zeros(len(idx_b))])
                    mass = np.concatenate([mass[idx_f], mass[idx_b] * p[idx_b], mass[idx_b] * (1 - p[idx_b])])
                    surv = np.concatenate([surv[idx_f], surv[idx_b], surv[idx_b]])
                    hist = new_hist
                    if len(mass) > self.max_exact_rows:
                        raise ValueError(f"exact integration exceeds {self.max_exact_rows} histories; "
                                         f"use method='mc'")
                else:
                    hist[c][:, k] = (rng.random(n) < p).astype(float)
        return curve

    def survival_curve(self) -> SurvivalCurve:
        if not hasattr(self, "curve_"):
            raise NotFittedError("call fit first")
        return SurvivalCurve(self.curve_, provenance="gformula")

    def report(self) -> EstimateReport:
        curve = self.survival_curve()
        models = {OUTCOME: self.outcome_model_, **self.covariate_models_}
        return EstimateReport(curve, "gformula", {
            "risk_set_sizes": self.risk_set_sizes_,
            "converged": {name: m.all_converged for name, m in models.items()},
            "fits": {name: m.summary() for name, m in models.items()},
            "method": self.method,
            "pooling": self.pooling,
        })

    def predict(self, X=None):
        """Fitted survival curve (``X`` is ignored)."""
        return self.survival_curve().values


class IPW(BaseEstimator):
    """Inverse probability weighted survival curve.

    Subject ``i`` contributes to interval ``k`` iff its treatment history
    follows the regime and ``delta[k] = 0``, with weight
    ``1 / (prod_t P(A_t = g_t | past) * prod_{j<=k} P(delta_j = 0 | past))``;
    the censoring factor runs only over intervals at which ``i`` was alive
    and under observation at ``j-1``.

    Parameters
    ----------
    treatment_design, censoring_design : DesignSpec or list of terms
    normalization : {"hajek", "horvitz-thompson"}
    truncation : float, optional
        Percentile (e.g. 99) at which weights are capped per interval.
    treatment_probability : float, optional
        Known ``P(A_t = 1)`` replacing the fitted treatment model.
    censoring_weights : bool
        False forces every censoring factor to 1.
    """

    def __init__(self, treatment_design=None, censoring_design=None, normalization="hajek",
                 truncation=None, treatment_probability=None, censoring_weights=True, pooling="pooled"):
        self.treatment_design = treatment_design
        self.censoring_design = censoring_design
        self.normalization = normalization
        self.truncation = truncation
        self.treatment_probability = treatment_probability
        self.censoring_weights = censoring_weights
        self.pooling = pooling

    def fit(self, panel: Panel, regime):
        K = panel.K
        regime = _as_regime(regime, K)
        if self.normalization not in ("hajek", "horvitz-thompson"):
            raise ValueError("normalization must be 'hajek' or 'horvitz-thompson'")
        tdes = _as_design(self.treatment_design) or DesignSpec(())
        cdes = _as_design(self.censoring_design) or DesignSpec(())
        _forbid_censoring_terms(tdes, panel, "treatment")
        _forbid_censoring_terms(cdes, panel, "censoring")
        n = panel.n
        alive = lambda t: panel[OUTCOME][:, t].filled(0) == 1  # noqa: E731
        observed = lambda t: panel[DELTA][:, t].filled(1) == 0  # noqa: E731

        # treatment factor: P(A_t = g_t | past) for treatment times t
        treat_times = [t for t in panel.schema.treatment_times if t < K]
        for k in range(1, K + 1):
            if not (regime_consistent(panel, k, regime) & observed(k)).any():
                raise PositivityError(f"k={k}: no regime-consistent uncensored subjects")
        p_treat = np.ones((n, K + 1))
        self.treatment_model_ = None
        if self.treatment_probability is None and treat_times:
            sel = {}
            for t in treat_times:
                m = alive(t) & observed(t)
                if t > 0:
                    m &= regime_consistent(panel, t, regime)
                sel[t] = m
            self.treatment_model_ = _ModelSet(tdes, self.pooling).fit(panel, *_rows(sel), f"{TREATMENT}[k]", TREATMENT)
        for t in treat_times:
            rows = np.flatnonzero(alive(t) & observed(t) & regime_consistent(panel, t, regime))
            if self.treatment_probability is not None:
                p1 = np.full(len(rows), float(self.treatment_probability))
            else:
                X, _, _ = build_design(panel, self.treatment_model_.design, rows, np.full(len(rows), t))
                p1 = predict_prob(self.treatment_model_.fit_for(t), X)
            p_treat[rows, t] = p1 if regime[t] == 1 else 1 - p1

        # censoring factor: P(delta_j = 0 | past) among Y[j-1]=1, delta[j-1]=0
        p_obs = np.ones((n, K + 1))
        self.censoring_model_ = None
        if self.censoring_weights:
            sel = {j: alive(j - 1) & observed(j - 1) for j in range(1, K + 1)}
            self.censoring_model_ = _ModelSet(cdes, self.pooling).fit(panel, *_rows(sel), f"{DELTA}[k]", DELTA)
            for j in range(1, K + 1):
                rows = np.flatnonzero(sel[j])
                X, _, _ = build_design(panel, self.censoring_model_.design, rows, np.full(len(rows), j))
                p_obs[rows, j] = 1 - predict_prob(self.censoring_model_.fit_for(j), X)

        curve = np.zeros(K)
        diag = {"ess": [], "weight_max": [], "weight_quantiles": [], "n_contributing": [],
                "truncated_at": [], "min_denominator": []}
        for k in range(1, K + 1):
            ind = regime_consistent(panel, k, regime) & observed(k)
            tt = [t for t in treat_times if t <= k - 1]
            denom = np.prod(p_treat[:, tt], axis=1) * np.prod(p_obs[:, 1:k + 1], axis=1)
            dmin = float(denom[ind].min()) if ind.any() else math.nan
            diag["min_denominator"].append(dmin)
            if ind.any() and dmin < 1e-12 and self.truncation is None:
                raise PositivityError(f"k={k}: weight denominator {dmin:.3g} < 1e-12")
            w = np.zeros(n)
            w[ind] = 1.0 / np.maximum(denom[ind], 1e-300)
            cap = None
            if self.truncation is not None and ind.any():
                cap = float(np.percentile(w[ind], self.truncation))
                w = np.minimum(w, cap)
            diag["truncated_at"].append(cap)
            y = panel[OUTCOME][:, k].filled(0).astype(float)
            total = w.sum()
            curve[k - 1] = (w @ y) / (total if self.normalization == "hajek" else n)
            diag["ess"].append(float(total ** 2 / (w ** 2).sum()))
            diag["weight_max"].append(float(w.max()))
            diag["weight_quantiles"].append(np.quantile(w[ind], [0.5, 0.9, 0.99]).tolist())
            diag["n_contributing"].append(int(ind.sum()))
        diag["exceeds_unit_interval"] = bool(np.any(curve > 1) or np.any(curve < 0))
        diag["monotone"] = bool(np.all(np.diff(curve) <= 1e-12))
        if self.treatment_model_ is not None:
            diag["treatment_converged"] = self.treatment_model_.all_converged
        if self.censoring_model_ is not None:
            diag["censoring_converged"] = self.censoring_model_.all_converged
        self.regime_ = regime
        self.curve_ = curve
        self.diagnostics_ = diag
        return self

    def survival_curve(self) -> SurvivalCurve:
        if not hasattr(self, "curve_"):
            raise NotFittedError("call fit first")
        return SurvivalCurve(self.curve_, provenance="ipw")

    def report(self) -> EstimateReport:
        return EstimateReport(self.survival_curve(), f"ipw-{self.normalization}", dict(self.diagnostics_))

    def predict(self, X=None):
        return self.survival_curve().values


def gformula_estimate(panel: Panel, regime, **params) -> EstimateReport:
    return GFormula(**params).fit(panel, regime).report()


def ipw_estimate(panel: Panel, regime, **params) -> EstimateReport:
    return IPW(**params).fit(panel, regime).report()


ESTIMATORS = {"gformula": GFormula, "ipw": IPW}


def make_estimator(config: dict):
    """Build an estimator from a JSON-style config with a ``kind`` key."""
    cfg = dict(config)
    kind = cfg.pop("kind", "gformula")
    if kind not in ESTIMATORS:
        raise ValueError(f"unknown estimator kind {kind!r}")
    cls = ESTIMATORS[kind]
    for key in ("outcome_design", "treatment_design", "censoring_design"):
        if key in cfg and cfg[key] is not None:
            cfg[key] = _as_design(cfg[key])
    if cfg.get("covariate_designs"):
        cfg["covariate_designs"] = {c: _as_design(d) for c, d in cfg["covariate_designs"].items()}
    return cls(**cfg)


def resolve_config(config: dict, spec=None) -> dict:
    """Fill unset designs of an estimator config from the model's equations."""
    cfg = dict(config)
    if spec is None:
        return cfg
    defaults = default_designs(spec)
    kind = cfg.get("kind", "gformula")
    keys = (("outcome_design", "covariate_designs", "covariate_absorbing") if kind == "gformula"
            else ("treatment_design", "censoring_design"))
    for key in keys:
        if cfg.get(key) is None:
            cfg[key] = defaults[key]
    return cfg


# resampling and replication ------------------------------------------------------

@dataclass
class BootstrapResult:
    se: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    replicates: np.ndarray
    failures: int = 0
    errors: list = field(default_factory=list)


def bootstrap_se(panel: Panel, estimator, B: int, seed: int, level: float = 0.95) -> BootstrapResult:
    """Nonparametric bootstrap over subjects.

    ``estimator(panel) -> array`` is evaluated on ``B`` resamples; failures
    are counted and skipped.
    """
    if B < 2:
        raise ValueError("B must be >= 2")
    rng = np.random.default_rng(seed)
    draws = [rng.integers(0, panel.n, panel.n) for _ in range(B)]
    reps, errors = [], []
    for b, idx in enumerate(draws):
        try:
            reps.append(np.asarray(estimator(panel.subset(idx)), dtype=float))
        except Exception as exc:  # noqa: BLE001 - failure accounting
            errors.append(f"resample {b}: {type(exc).__name__}: {exc}")
    if len(reps) < 2:
        raise RuntimeError(f"bootstrap failed: {len(errors)} of {B} resamples errored")
    reps = np.vstack(reps)
    a = (1 - level) / 2
    return BootstrapResult(
        se=reps.std(axis=0, ddof=1),
        lower=np.quantile(reps, a, axis=0),
        upper=np.quantile(reps, 1 - a, axis=0),
        replicates=reps,
        failures=len(errors),
        errors=errors,
    )


def _child_seed(seed, *path) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, path)]).generate_state(1)[0])


def _one_replicate(args):
    from .scm import simulate

    spec_json, regime_values, n, r, seed, configs, bootstrap = args
    from .scm import ScmSpec

    spec = ScmSpec.from_json(spec_json)
    regime = Regime(tuple(regime_values))
    panel = simulate(spec, n, _child_seed(seed, r, 0), masked=True)
    out = {}
    for e, (name, cfg) in enumerate(configs):
        cfg = dict(cfg)
        if cfg.get("kind", "gformula") == "gformula":
            cfg.setdefault("random_state", _child_seed(seed, r, 1, e))
        try:
            est = make_estimator(cfg).fit(panel, regime)
            values = est.predict()
            res = {"values": values, "error": None}
            if bootstrap:
                def fn(p, cfg=cfg):
                    return make_estimator(cfg).fit(p, regime).predict()
                bs = bootstrap_se(panel, fn, bootstrap, _child_seed(seed, r, 2, e))
                res.update(se=bs.se, lower=bs.lower, upper=bs.upper)
        except Exception as exc:  # noqa: BLE001 - per-replicate failure accounting
            res = {"values": None, "error": f"{type(exc).__name__}: {exc}"}
        out[name] = res
    return out


STUDY_COLUMNS = ("estimator", "k", "mean", "bias_psi1", "bias_psi2", "sd", "se_mean", "coverage",
                 "mean_boot_se", "n_ok", "n_failed")


@dataclass
class StudyResult:
    rows: list
    estimates: dict  # name -> (R_ok, K) array
    psi1: np.ndarray
    psi2: np.ndarray
    failures: dict

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(STUDY_COLUMNS)
        for row in self.rows:
            w.writerow([_fmt(row[c]) for c in STUDY_COLUMNS])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "rows": [{c: (None if isinstance(r[c], float) and math.isnan(r[c]) else r[c])
                      for c in STUDY_COLUMNS} for r in self.rows],
            "psi1": self.psi1.tolist(),
            "psi2": self.psi2.tolist(),
            "failures": self.failures,
        }

    def table(self, name) -> dict:
        return {c: np.array([r[c] for r in self.rows if r["estimator"] == name])
                for c in STUDY_COLUMNS if c != "estimator"}


def _fmt(x):
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(round(x, 12))
    return str(x)


def replication_study(spec, regime, n: int, replicates: int, estimators: dict, seed: int,
                      bootstrap: int = 0, threads: int = 1) -> StudyResult:
    """Repeat simulate-then-estimate ``replicates`` times.

    ``estimators`` maps a name to an estimator config (see
    :func:`make_estimator`); unset designs default to the correctly
    specified ones implied by ``spec``. Every replicate draws its own seeds
    from ``seed``, so results do not depend on ``threads``.
    """
    from .scm import oracle_curve, psi1, psi2

    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    regime = _as_regime(regime, spec.K)
    configs = [(name, resolve_config(cfg, spec)) for name, cfg in estimators.items()]
    # design objects are rebuilt per replicate from plain data
    plain = [(name, _plain(cfg)) for name, cfg in configs]
    p1 = oracle_curve(spec, psi1(regime)).values
    p2 = oracle_curve(spec, psi2(regime)).values
    jobs = [(spec.to_json(), regime.values, n, r, seed, plain, bootstrap) for r in range(replicates)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_one_replicate, jobs, chunksize=max(1, replicates // (4 * threads))))
    else:
        results = [_one_replicate(j) for j in jobs]

    rows, estimates, failures = [], {}, {}
    for name, _ in configs:
        ok = [res[name] for res in results if res[name]["values"] is not None]
        failures[name] = [f"replicate {r}: {res[name]['error']}" for r, res in enumerate(results)
                          if res[name]["values"] is None]
        est = np.vstack([o["values"] for o in ok]) if ok else np.full((0, spec.K), np.nan)
        estimates[name] = est
        R = len(ok)
        for k in range(spec.K):
            col = est[:, k]
            mean = float(col.mean()) if R else math.nan
            sd = float(col.std(ddof=1)) if R > 1 else math.nan
            if bootstrap and R:
                lo = np.array([o["lower"][k] for o in ok])
                hi = np.array([o["upper"][k] for o in ok])
                coverage = float(np.mean((lo <= p1[k]) & (p1[k] <= hi)))
                mean_se = float(np.mean([o["se"][k] for o in ok]))
            else:
                coverage = mean_se = math.nan
            rows.append({
                "estimator": name, "k": k + 1, "mean": mean,
                "bias_psi1": mean - float(p1[k]), "bias_psi2": mean - float(p2[k]),
                "sd": sd, "se_mean": sd / math.sqrt(R) if R > 1 else math.nan,
                "coverage": coverage, "mean_boot_se": mean_se,
                "n_ok": R, "n_failed": len(failures[name]),
            })
    return StudyResult(rows, estimates, p1, p2, failures)


def _plain(cfg: dict) -> dict:
    out = {}
    for key, val in cfg.items():
        if isinstance(val, DesignSpec):
            out[key] = val.to_json()
        elif isinstance(val, dict):
            out[key] = {c: (d.to_json() if isinstance(d, DesignSpec) else d) for c, d in val.items()}
        else:
            out[key] = val
    return out
