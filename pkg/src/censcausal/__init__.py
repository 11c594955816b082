"""Causal survival estimands under right censoring: simulation, exact
oracles, g-formula and IPW estimators, and graphical identification checks."""

from .curve import EstimateReport, SurvivalCurve
from .panel import Panel, PanelSchema, PanelValidationError, Regime, TimeGrid, validate_panel
from .scm import (Equation, InterventionSpec, ScmSpec, SpecError, Variable, oracle_censoring_fraction,
                  oracle_contrast, oracle_curve, oracle_mean, paper_dgp, psi1, psi2, simulate)

__version__ = "0.1.0"
