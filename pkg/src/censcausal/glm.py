"""Weighted Bernoulli regression with logit link fit by Newton-Raphson."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .terms import evaluate_term, parse_term, term_label

SEPARATION_THRESHOLD = 15.0
SEPARATION_RIDGE = 1e-6


class GLMFitError(RuntimeError):
    pass


class MaskedValueError(ValueError):
    """A design referenced a cell that was never observed."""

    def __init__(self, subject, k, term):
        self.subject, self.k, self.term = subject, k, term
        super().__init__(f"subject {subject}, interval {k}: term {term!r} references a masked value")


@dataclass(frozen=True)
class DesignSpec:
    """Regression terms: main effects like ``"L1[k-1]"``, pairwise products
    like ``"L1[k-1]*L2[k-1]"`` and the interval index ``"k"``."""

    terms: tuple = ()
    intercept: bool = True

    def __post_init__(self):
        labels = tuple(term_label(parse_term(t)) for t in self.terms)
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate design terms: {labels}")
        object.__setattr__(self, "terms", labels)

    @property
    def columns(self) -> tuple:
        return (("(intercept)",) if self.intercept else ()) + self.terms

    def references(self) -> set:
        return {f.name for t in self.terms for f in parse_term(t)}

    def with_terms(self, *extra) -> "DesignSpec":
        return DesignSpec(self.terms + tuple(extra), self.intercept)

    def check_schema(self, names):
        missing = self.references() - set(names)
        if missing:
            raise ValueError(f"design references unknown variables {sorted(missing)}")

    def to_json(self):
        return {"terms": list(self.terms), "intercept": self.intercept}

    @classmethod
    def from_json(cls, obj):
        if isinstance(obj, (list, tuple)):
            return cls(tuple(obj))
        return cls(tuple(obj.get("terms", ())), obj.get("intercept", True))


def design_matrix(design: DesignSpec, get, k, n) -> np.ndarray:
    cols = [np.ones(n)] if design.intercept else []
    cols += [evaluate_term(parse_term(t), get, k, n) for t in design.terms]
    return np.column_stack(cols) if cols else np.empty((n, 0))


def build_design(panel, design: DesignSpec, subjects, intervals, response: str | None = None,
                 weights=None):
    """Term matrix, response and weights for the selected subject-intervals.

    ``subjects`` and ``intervals`` are aligned position arrays; rows are
    returned sorted by (subject, k). Any masked cell among the referenced
    terms or the response raises :class:`MaskedValueError`.
    """
    subjects = np.asarray(subjects, dtype=np.int64)
    intervals = np.asarray(intervals, dtype=np.int64)
    order = np.lexsort((intervals, subjects))
    subjects, intervals = subjects[order], intervals[order]
    design.check_schema(panel.schema.variables)
    n = len(subjects)
    X = np.empty((n, len(design.columns)))
    y = np.empty(n) if response is not None else None
    resp = None if response is None else parse_term(response)
    for k in np.unique(intervals):
        rows = np.flatnonzero(intervals == k)
        subj = subjects[rows]

        def get(name, t, subj=subj, k=k):
            if not 0 <= t <= panel.K:
                raise ValueError(f"reference to interval {t} outside 0..{panel.K}")
            col = panel[name][subj, t]
            m = np.ma.getmaskarray(col)
            if m.any():
                i = int(np.argmax(m))
                raise MaskedValueError(int(panel.ids[subj[i]]), int(k), f"{name}[{t}]")
            return np.ma.getdata(col)

        X[rows] = design_matrix(design, get, int(k), len(rows))
        if resp is not None:
            y[rows] = evaluate_term(resp, get, int(k), len(rows))
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=float)[order]
    return X, y, w


@dataclass(frozen=True)
class FitResult:
    coefficients: np.ndarray
    converged: bool
    iterations: int
    score_norm: float
    ridge_applied: bool
    terms: tuple = ()
    loglik_trace: tuple = field(default=(), repr=False)

    def linear_predictor(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != len(self.coefficients):
            raise ValueError(f"expected {len(self.coefficients)} term values, got {X.shape[1]}")
        return X @ self.coefficients

    def to_json(self) -> dict:
        return {
            "terms": list(self.terms),
            "coefficients": self.coefficients.tolist(),
            "converged": self.converged,
            "iterations": self.iterations,
            "score_norm": self.score_norm,
            "ridge_applied": self.ridge_applied,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)

    @classmethod
    def from_json(cls, obj) -> "FitResult":
        return cls(np.asarray(obj["coefficients"], dtype=float), bool(obj["converged"]),
                   int(obj["iterations"]), float(obj["score_norm"]), bool(obj["ridge_applied"]),
                   tuple(obj.get("terms", ())))


def _expit(eta):
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    e = np.exp(eta[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def log_likelihood(beta, X, y, w, ridge=0.0):
    eta = X @ beta
    # log(1 + exp(eta)) computed stably
    ll = w @ (y * eta - np.logaddexp(0.0, eta))
    return ll - 0.5 * ridge * beta @ beta


def score(beta, X, y, w, ridge=0.0):
    return X.T @ (w * (y - _expit(X @ beta))) - ridge * beta


def information(beta, X, w, ridge=0.0):
    p = _expit(X @ beta)
    H = X.T @ ((w * p * (1 - p))[:, None] * X)
    if ridge:
        H = H + ridge * np.eye(X.shape[1])
    return H


def _newton(X, y, w, tol, max_iter, ridge):
    beta = np.zeros(X.shape[1])
    ll = log_likelihood(beta, X, y, w, ridge)
    trace = [ll]
    stalled = False
    for it in range(1, max_iter + 1):
        g = score(beta, X, y, w, ridge)
        if np.max(np.abs(g), initial=0.0) <= tol:
            return beta, True, it - 1, trace, False
        H = information(beta, X, w, ridge)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError as exc:
            raise GLMFitError("singular information matrix") from exc
        if not np.all(np.isfinite(step)):
            raise GLMFitError("singular information matrix")
        t = 1.0
        for _ in range(60):
            cand = beta + t * step
            ll_new = log_likelihood(cand, X, y, w, ridge)
            if ll_new >= ll - 1e-12 * max(1.0, abs(ll)):
                break
            t *= 0.5
        else:
            cand, ll_new = beta, ll
        change = abs(ll_new - ll)
        beta, ll = cand, ll_new
        trace.append(ll)
        if np.max(np.abs(beta), initial=0.0) > SEPARATION_THRESHOLD and not ridge:
            g = score(beta, X, y, w, ridge)
            if np.max(np.abs(g), initial=0.0) > tol:
                return beta, False, it, trace, True
        if 2 * change <= 1e-10:
            # polish with one more full step; deviance alone is not the score criterion
            if stalled:
                return beta, True, it, trace, False
            stalled = True
        else:
            stalled = False
    return beta, False, max_iter, trace, False


def fit_logit(X, y, weights=None, tolerance: float = 1e-8, max_iterations: int = 100,
              ridge: float = 0.0, terms=()) -> FitResult:
    """Maximize the weighted Bernoulli log-likelihood.

    Converged means max |score| <= tolerance, or a deviance change of at most
    1e-10 on two consecutive steps. If coefficients pass 15 on the logit
    scale before convergence (separation) the fit is redone with a 1e-6 ridge
    penalty. Non-convergence is reported, never raised.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    if X.ndim != 2 or X.shape[0] != len(y) or len(w) != len(y):
        raise ValueError("X, y and weights have inconsistent shapes")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("responses must be binary")
    if np.any(w < 0) or not np.any(w > 0):
        raise ValueError("weights must be non-negative with at least one positive")
    beta, conv, it, trace, separated = _newton(X, y, w, tolerance, max_iterations, ridge)
    ridge_applied = bool(ridge)
    if separated:
        ridge = max(ridge, SEPARATION_RIDGE)
        beta, conv, it2, trace, _ = _newton(X, y, w, tolerance, max_iterations, ridge)
        it += it2
        ridge_applied = True
    g = score(beta, X, y, w, ridge)
    if not np.all(np.isfinite(beta)):
        raise GLMFitError("non-finite coefficients")
    return FitResult(beta, bool(conv), int(it), float(np.max(np.abs(g), initial=0.0)),
                     ridge_applied, tuple(terms), tuple(trace))


def predict_prob(fit: FitResult, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if not np.all(np.isfinite(X)):
        raise ValueError("term values must be finite")
    return _expit(fit.linear_predictor(X))


class LogisticNewton(ClassifierMixin, BaseEstimator):
    """scikit-learn front end to :func:`fit_logit`.

    ``X`` is used as given; include a column of ones for an intercept or set
    ``fit_intercept=True``.
    """

    def __init__(self, fit_intercept=True, tol=1e-8, max_iter=100, ridge=0.0):
        self.fit_intercept = fit_intercept
        self.tol = tol
        self.max_iter = max_iter
        self.ridge = ridge

    def _augment(self, X):
        return np.column_stack([np.ones(len(X)), X]) if self.fit_intercept else X

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y, dtype=float)
        self.classes_ = np.array([0, 1])
        self.fit_result_ = fit_logit(self._augment(X), y, sample_weight, self.tol, self.max_iter, self.ridge)
        beta = self.fit_result_.coefficients
        self.intercept_ = np.array([beta[0] if self.fit_intercept else 0.0])
        self.coef_ = (beta[1:] if self.fit_intercept else beta)[None, :]
        self.n_iter_ = np.array([self.fit_result_.iterations])
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "fit_result_")
        X = check_array(X, dtype=float)
        return self.fit_result_.linear_predictor(self._augment(X))

    def predict_proba(self, X):
        p = _expit(self.decision_function(X))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        return (self.decision_function(X) > 0).astype(int)
