"""Time-indexed variable references shared by structural models and designs.

A reference names a variable at a time relative to the current interval
``k`` or at an absolute interval::

    "L1[k]"     current interval
    "L1[k-1]"   previous interval
    "A[0]"      absolute interval 0

A term is a single reference or a product of references joined by ``*``;
the special term ``"k"`` evaluates to the interval index itself.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

_REF = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*\[\s*(k\s*(?:-\s*(\d+))?|\d+)\s*\]\s*$")


@dataclass(frozen=True)
class Ref:
    name: str
    offset: int  # relative lag (>= 0) when absolute is False
    absolute: bool = False

    def time(self, k: int) -> int:
        return self.offset if self.absolute else k - self.offset

    def __str__(self) -> str:
        if self.absolute:
            return f"{self.name}[{self.offset}]"
        return f"{self.name}[k]" if self.offset == 0 else f"{self.name}[k-{self.offset}]"


def parse_ref(text: str) -> Ref:
    m = _REF.match(text)
    if m is None:
        raise ValueError(f"malformed variable reference {text!r}")
    name, idx, lag = m.group(1), m.group(2), m.group(3)
    if idx.strip().startswith("k"):
        return Ref(name, int(lag) if lag else 0)
    return Ref(name, int(idx), absolute=True)


def parse_term(text: str) -> tuple[Ref, ...]:
    """Split a term into its factors. ``"k"`` parses to an empty tuple."""
    if text.strip() == "k":
        return ()
    factors = tuple(parse_ref(part) for part in text.split("*"))
    if len(factors) > 2:
        raise ValueError(f"only pairwise interactions are supported: {text!r}")
    return factors


def term_label(factors: tuple[Ref, ...]) -> str:
    return "k" if not factors else "*".join(str(f) for f in factors)


def evaluate_term(factors, get, k, n):
    """Vectorized value of a term.

    ``get(name, t)`` must return an array of length ``n`` (or a scalar) with
    the value of ``name`` at interval ``t``.
    """
    if not factors:
        return np.full(n, float(k))
    out = np.ones(n)
    for f in factors:
        out = out * np.asarray(get(f.name, f.time(k)), dtype=float)
    return out
