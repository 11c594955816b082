from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROVENANCES = ("oracle", "gformula", "ipw", "empirical")


@dataclass(frozen=True)
class SurvivalCurve:
    """``P(Y_k = 1)`` for ``k = 1..K``."""

    values: np.ndarray
    provenance: str = "oracle"
    se: np.ndarray | None = None
    label: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1:
            raise ValueError("curve values must be one-dimensional")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        object.__setattr__(self, "values", v)
        if self.se is not None:
            se = np.asarray(self.se, dtype=float)
            if se.shape != v.shape or np.any(se < 0):
                raise ValueError("standard errors must be non-negative and match the curve")
            object.__setattr__(self, "se", se)

    @property
    def K(self) -> int:
        return len(self.values)

    def __getitem__(self, k: int) -> float:
        """Value at interval ``k`` (1-based)."""
        if not 1 <= k <= self.K:
            raise IndexError(f"k={k} outside 1..{self.K}")
        return float(self.values[k - 1])

    def in_unit_interval(self, tol: float = 1e-12) -> bool:
        return bool(np.all((self.values >= -tol) & (self.values <= 1 + tol)))

    def is_monotone(self, tol: float = 1e-12) -> bool:
        return bool(np.all(np.diff(self.values) <= tol))


@dataclass
class EstimateReport:
    curve: SurvivalCurve
    method: str
    diagnostics: dict = field(default_factory=dict)

    @property
    def values(self) -> np.ndarray:
        return self.curve.values

    @property
    def se(self):
        return self.curve.se

    def to_json(self) -> dict:
        def clean(x):
            if isinstance(x, np.ndarray):
                return x.tolist()
            if isinstance(x, (np.floating, np.integer, np.bool_)):
                return x.item()
            if isinstance(x, dict):
                return {str(k): clean(v) for k, v in x.items()}
            if isinstance(x, (list, tuple)):
                return [clean(v) for v in x]
            return x

        return {
            "method": self.method,
            "provenance": self.curve.provenance,
            "values": self.curve.values.tolist(),
            "se": None if self.curve.se is None else self.curve.se.tolist(),
            "diagnostics": clean(self.diagnostics),
        }
