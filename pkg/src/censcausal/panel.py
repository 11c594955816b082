"""Longitudinal panel data with observation-termination masking.

Survival is coded ``Y[k] = 1`` for alive. Interval 0 is baseline, with
``Y[0] = 1``, ``delta[0] = 0`` and every censoring component 0. Within an
interval the ordering is (censoring, delta, Y, covariates, treatment).

Masked cells are stored as ``numpy.ma`` masks, never as sentinel numbers:
once ``delta[k] = 1`` every later ``Y``, covariate and treatment value
(from ``k`` on) is unobserved, and censoring/delta are unobserved after ``k``.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

OUTCOME = "Y"
DELTA = "delta"
TREATMENT = "A"
NA = "NA"


class PanelValidationError(ValueError):
    """Raised when a trajectory breaks a structural invariant."""

    def __init__(self, violations):
        self.violations = list(violations)
        first = self.violations[0]
        super().__init__(
            f"subject {first.subject}, interval {first.k}: {first.rule}"
            + (f" (+{len(self.violations) - 1} more)" if len(self.violations) > 1 else "")
        )


@dataclass(frozen=True)
class Violation:
    subject: int
    k: int
    rule: str


@dataclass(frozen=True)
class TimeGrid:
    K: int

    def __post_init__(self):
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"K must be a positive integer, got {self.K!r}")

    @property
    def intervals(self) -> range:
        return range(self.K + 1)


@dataclass(frozen=True)
class Regime:
    """Static deterministic treatment plan ``g_0, ..., g_{K-1}``."""

    values: tuple[int, ...]

    def __post_init__(self):
        vals = tuple(int(v) for v in self.values)
        if any(v not in (0, 1) for v in vals):
            raise ValueError("regime values must be binary")
        object.__setattr__(self, "values", vals)

    @classmethod
    def static(cls, value: int, K: int) -> "Regime":
        return cls((value,) * K)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, t):
        return self.values[t]

    def check(self, K: int):
        if len(self.values) != K:
            raise ValueError(f"regime has length {len(self.values)}, expected K={K}")


@dataclass(frozen=True)
class PanelSchema:
    K: int
    covariates: tuple[str, ...] = ()
    censoring: tuple[str, ...] = ("C",)
    treatment_times: tuple[int, ...] = (0,)

    def __post_init__(self):
        TimeGrid(self.K)
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "censoring", tuple(self.censoring))
        object.__setattr__(self, "treatment_times", tuple(int(t) for t in self.treatment_times))
        if not self.censoring:
            raise ValueError("at least one censoring component is required")
        if any(t < 0 or t >= self.K for t in self.treatment_times):
            raise ValueError("treatment times must lie in 0..K-1")
        names = self.variables
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate variable names in schema: {names}")

    @property
    def variables(self) -> tuple[str, ...]:
        return (*self.censoring, DELTA, OUTCOME, *self.covariates, TREATMENT)

    def to_json(self) -> dict:
        return {
            "K": self.K,
            "covariates": list(self.covariates),
            "censoring": list(self.censoring),
            "treatment_times": list(self.treatment_times),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PanelSchema":
        return cls(
            K=obj["K"],
            covariates=tuple(obj.get("covariates", ())),
            censoring=tuple(obj.get("censoring", ("C",))),
            treatment_times=tuple(obj.get("treatment_times", (0,))),
        )


def _as_masked(a, shape):
    arr = np.ma.masked_array(np.asarray(np.ma.getdata(a), dtype=np.int8),
                             mask=np.ma.getmaskarray(a), copy=True)
    if arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    arr.data.setflags(write=False)
    arr.mask.setflags(write=False)
    return arr


class Panel:
    """Collection of trajectories, one array of shape ``(n, K+1)`` per variable.

    Treatment values at intervals that are not treatment times are always
    masked (absent). Instances are treated as immutable.
    """

    def __init__(self, schema: PanelSchema, data: dict, ids=None):
        self.schema = schema
        n = None
        arrays = {}
        for name in schema.variables:
            if name not in data:
                raise ValueError(f"missing variable {name!r}")
            a = data[name]
            if n is None:
                n = np.shape(a)[0]
            arrays[name] = _as_masked(a, (n, schema.K + 1))
        absent = np.ones(schema.K + 1, dtype=bool)
        absent[list(schema.treatment_times)] = False
        if np.any(~np.ma.getmaskarray(arrays[TREATMENT])[:, absent]):
            a = np.ma.masked_array(arrays[TREATMENT].data,
                                   mask=arrays[TREATMENT].mask | absent[None, :])
            arrays[TREATMENT] = _as_masked(a, (n, schema.K + 1))
        self._data = arrays
        self.n = int(n)
        self.ids = np.arange(self.n) if ids is None else np.asarray(ids)
        if len(self.ids) != self.n:
            raise ValueError("ids length does not match number of subjects")

    @property
    def K(self) -> int:
        return self.schema.K

    def __len__(self):
        return self.n

    def __getitem__(self, name) -> np.ma.MaskedArray:
        return self._data[name]

    def get(self, name: str, k: int) -> np.ma.MaskedArray:
        return self._data[name][:, k]

    def is_masked(self) -> bool:
        return any(np.ma.getmaskarray(self._data[v]).any()
                   for v in self.schema.variables if v != TREATMENT)

    def subset(self, index) -> "Panel":
        """Panel restricted to (possibly repeated) subject positions."""
        index = np.asarray(index)
        return Panel(self.schema, {v: self._data[v][index] for v in self.schema.variables},
                     ids=np.arange(len(index)))

    def trajectory(self, i: int) -> "Trajectory":
        return Trajectory(self.schema, {v: self._data[v][i] for v in self.schema.variables})

    def equals(self, other: "Panel") -> bool:
        if self.schema != other.schema or self.n != other.n:
            return False
        for v in self.schema.variables:
            a, b = self._data[v], other._data[v]
            if not np.array_equal(np.ma.getmaskarray(a), np.ma.getmaskarray(b)):
                return False
            if not np.array_equal(a.filled(-1), b.filled(-1)):
                return False
        return True

    # file format ---------------------------------------------------------

    def to_csv(self, path, schema_path=None):
        """Write one row per subject-interval plus a JSON schema sidecar.

        Masked cells are written as ``NA``; treatment cells at intervals with
        no treatment decision are left blank."""
        s = self.schema
        cols = ([f"c{i + 1}" for i in range(len(s.censoring))] + ["delta", "y"]
                + [f"l{i + 1}" for i in range(len(s.covariates))] + ["a"])
        names = [*s.censoring, DELTA, OUTCOME, *s.covariates, TREATMENT]
        K1 = s.K + 1
        columns = [np.repeat(self.ids.astype(str), K1), np.tile(np.arange(K1).astype(str), self.n)]
        undefined = ~np.isin(np.arange(K1), s.treatment_times)
        for v in names:
            x = self._data[v].filled(-1)
            col = np.where(x < 0, NA, x.astype(str)).astype(object)
            if v == TREATMENT:
                col[:, undefined] = ""
            columns.append(col.reshape(-1))
        lines = [",".join(["id", "k", *cols])]
        lines += map(",".join, zip(*(c.tolist() for c in columns)))
        write_atomic(path, "\n".join(lines) + "\n")
        if schema_path is None:
            schema_path = schema_sidecar(path)
        write_atomic(schema_path, json.dumps(s.to_json(), indent=2) + "\n")

    @classmethod
    def from_csv(cls, path, schema_path=None) -> "Panel":
        if schema_path is None:
            schema_path = schema_sidecar(path)
        with open(schema_path, encoding="utf-8") as fh:
            schema = PanelSchema.from_json(json.load(fh))
        names = [*schema.censoring, DELTA, OUTCOME, *schema.covariates, TREATMENT]
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        expected = 2 + len(names)
        if len(header) != expected or header[:2] != ["id", "k"]:
            raise ValueError(f"{path}: unexpected header {header}")
        K1 = schema.K + 1
        if len(body) % K1:
            raise ValueError(f"{path}: row count {len(body)} is not a multiple of K+1={K1}")
        n = len(body) // K1
        vals = np.full((len(names), n, K1), -1, dtype=np.int8)
        ids = []
        for r, row in enumerate(body):
            i, k = divmod(r, K1)
            if int(row[1]) != k:
                raise ValueError(f"{path}: line {r + 2}: expected k={k}, got {row[1]}")
            if k == 0:
                ids.append(row[0])
            for j, cell in enumerate(row[2:]):
                if cell not in (NA, ""):
                    vals[j, i, k] = int(cell)
        data = {v: np.ma.masked_less(vals[j], 0) for j, v in enumerate(names)}
        try:
            ids = np.asarray([int(x) for x in ids])
        except ValueError:
            ids = np.asarray(ids)
        return cls(schema, data, ids=ids)


@dataclass
class Trajectory:
    """Single-subject view: each variable is a length ``K+1`` masked array."""

    schema: PanelSchema
    values: dict = field(repr=False)

    def __getitem__(self, name):
        return self.values[name]

    def as_panel(self) -> Panel:
        return Panel(self.schema, {v: np.ma.atleast_2d(self.values[v]) for v in self.schema.variables})


def schema_sidecar(path) -> str:
    root, _ = os.path.splitext(str(path))
    return root + ".schema.json"


def write_atomic(path, text: str):
    path = str(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# validation ------------------------------------------------------------------

def _first_delta(panel: Panel) -> np.ndarray:
    """Index of the first visible ``delta == 1`` per subject (K+1 if none)."""
    d = panel[DELTA].filled(0) == 1
    return np.where(d.any(axis=1), d.argmax(axis=1), panel.K + 1)


def _structural_violations(panel: Panel):
    """Monotonicity and baseline rules, evaluated on visible cells only."""
    s = panel.schema
    out = []

    def add(mask, rule):
        subj, ks = np.nonzero(mask)
        out.extend(Violation(int(panel.ids[i]), int(k), rule) for i, k in zip(subj, ks))

    y = panel[OUTCOME]
    base_bad = np.zeros(panel.n, dtype=bool)
    base_bad |= y[:, 0].filled(1) != 1
    base_bad |= panel[DELTA][:, 0].filled(0) != 0
    for c in s.censoring:
        base_bad |= panel[c][:, 0].filled(0) != 0
    add(np.column_stack([base_bad, np.zeros((panel.n, s.K), dtype=bool)]), "baseline")

    prev_dead = np.ma.getdata(y[:, :-1]) == 0
    both = ~np.ma.getmaskarray(y[:, :-1]) & ~np.ma.getmaskarray(y[:, 1:])
    bad = np.zeros_like(np.ma.getdata(y), dtype=bool)
    bad[:, 1:] = both & prev_dead & (np.ma.getdata(y[:, 1:]) == 1)
    add(bad, "monotone death")

    for c in s.censoring:
        a = panel[c]
        vis = ~np.ma.getmaskarray(a[:, :-1]) & ~np.ma.getmaskarray(a[:, 1:])
        bad = np.zeros_like(np.ma.getdata(a), dtype=bool)
        bad[:, 1:] = vis & (np.ma.getdata(a[:, :-1]) == 1) & (np.ma.getdata(a[:, 1:]) == 0)
        add(bad, f"monotone censoring ({c})")

    cs = np.stack([panel[c] for c in s.censoring])
    vis = ~np.ma.getmaskarray(cs).any(axis=0) & ~np.ma.getmaskarray(panel[DELTA])
    mx = np.ma.getdata(cs).max(axis=0)
    add(vis & (mx != np.ma.getdata(panel[DELTA])), "delta = max(C)")
    return out


def _masking_violations(panel: Panel):
    s = panel.schema
    first = _first_delta(panel)
    ks = np.arange(s.K + 1)[None, :]
    out = []

    def add(mask, rule):
        subj, kk = np.nonzero(mask)
        out.extend(Violation(int(panel.ids[i]), int(k), rule) for i, k in zip(subj, kk))

    treat_time = np.zeros(s.K + 1, dtype=bool)
    treat_time[list(s.treatment_times)] = True
    for v in s.variables:
        m = np.ma.getmaskarray(panel[v])
        if v in s.censoring or v == DELTA:
            after = ks > first[:, None]
            before = ks <= first[:, None]
        else:
            after = ks >= first[:, None]
            before = ks < first[:, None]
        if v == TREATMENT:
            after = after & treat_time[None, :]
            before = before & treat_time[None, :]
        add(after & ~m, f"masking ({v} observed after observation terminated)")
        add(before & m, f"premature mask ({v})")
    return out


def validate_panel(panel: Panel) -> list[Violation]:
    """Every invariant violation as (subject, interval, rule); empty if valid.

    Masking is only checked on panels that carry masks; an unmasked
    full-data panel is valid as long as its structural rules hold.
    """
    out = _structural_violations(panel)
    has_mask = np.zeros(panel.n, dtype=bool)
    for v in panel.schema.variables:
        if v != TREATMENT:
            has_mask |= np.ma.getmaskarray(panel[v]).any(axis=1)
    observed_ids = set(panel.ids[~has_mask].tolist())
    for viol in _masking_violations(panel):
        # subjects without any mask are full-data records; masking rules do not apply
        if viol.rule.startswith("masking") and viol.subject in observed_ids:
            continue
        out.append(viol)
    out.sort(key=lambda v: (v.subject, v.k))
    return out


def apply_masking(data):
    """Mask everything the investigator cannot see after observation ends.

    Accepts a :class:`Panel` or a :class:`Trajectory` and returns the same
    kind. Idempotent.
    """
    if isinstance(data, Trajectory):
        return apply_masking(data.as_panel()).trajectory(0)
    panel = data
    viol = _structural_violations(panel)
    if viol:
        raise PanelValidationError(viol)
    s = panel.schema
    first = _first_delta(panel)
    ks = np.arange(s.K + 1)[None, :]
    post = ks >= first[:, None]
    post_c = ks > first[:, None]
    out = {}
    for v in s.variables:
        a = panel[v]
        m = np.ma.getmaskarray(a) | (post_c if (v in s.censoring or v == DELTA) else post)
        out[v] = np.ma.masked_array(np.ma.getdata(a), mask=m)
    return Panel(s, out, ids=panel.ids)


def regime_consistent(panel: Panel, k: int, regime: Regime) -> np.ndarray:
    """Boolean mask: treatment history through interval ``k-1`` follows ``regime``."""
    ok = np.ones(panel.n, dtype=bool)
    for t in panel.schema.treatment_times:
        if t <= k - 1:
            ok &= panel[TREATMENT][:, t].filled(-1) == regime[t]
    return ok


def at_risk(panel: Panel, k: int) -> np.ndarray:
    """Alive through ``k-1`` and still under observation at ``k``."""
    return (panel[OUTCOME][:, k - 1].filled(0) == 1) & (panel[DELTA][:, k].filled(1) == 0)


def risk_set(panel: Panel, k: int, regime: Regime) -> np.ndarray:
    """Subject positions with ``Y[k-1]=1``, ``delta[k]=0`` and treatment
    history consistent with ``regime`` through ``k-1``."""
    if not 1 <= k <= panel.K:
        raise ValueError(f"k={k} outside 1..{panel.K}")
    regime.check(panel.K)
    return np.flatnonzero(at_risk(panel, k) & regime_consistent(panel, k, regime))
