"""Command-line front end.

    censcausal <command> [--config cfg.json] [--out DIR] [--seed N] [--threads N]

Commands: simulate, oracle, estimate, study, figure4, figure5, check-dag.
Exit codes: 0 success, 2 configuration error, 3 positivity or assumption
failure, 4 numerical non-convergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .estimators import (PositivityError, make_estimator, replication_study, resolve_config)
from .glm import GLMFitError
from .graph import (DagError, check_assumption, classify_censoring, node_split, parse_dag,
                    psi1_estimand, psi2_estimand, ASSUMPTIONS)
from .panel import DELTA, OUTCOME, Panel, Regime, write_atomic
from .scm import (ScmSpec, SpecError, oracle_censoring_fraction, oracle_curve, paper_dgp, psi1, psi2,
                  simulate)

EXIT_OK, EXIT_CONFIG, EXIT_POSITIVITY, EXIT_CONVERGENCE = 0, 2, 3, 4

DEFAULTS = {
    "dgp": {"alpha": -2.0, "gamma": -2.0},
    "regime": 1,
    "seed": 2024,
    "simulate": {"n": 1000, "masked": True, "intervention": None, "continue_after_death": False},
    "estimators": {"gformula": {"kind": "gformula"}},
    "study": {"n": 1000, "replicates": 1000, "bootstrap": 0},
    "sweep": {"alpha": [0.0, -1.0, -2.0], "gamma": [-3.0, -2.0], "figure5_alpha": -2.0},
}


class ConfigError(ValueError):
    pass


class NonConvergence(RuntimeError):
    pass


# configuration ----------------------------------------------------------------

def load_config(path=None, seed=None) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))
    base = None
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        base = os.path.dirname(os.path.abspath(path))
        for key, val in user.items():
            if isinstance(val, dict) and isinstance(cfg.get(key), dict) and key != "estimators":
                cfg[key].update(val)
            else:
                cfg[key] = val
    if seed is not None:
        cfg["seed"] = seed
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
        raise ConfigError("seed must be an integer")
    cfg["_base"] = base or os.getcwd()
    for key in ("alpha", "gamma"):
        if not cfg["sweep"].get(key):
            raise ConfigError(f"sweep.{key} must be a non-empty list")
    return cfg


def _path(cfg, p):
    p = os.path.join(cfg["_base"], p)
    if not os.path.exists(p):
        raise ConfigError(f"referenced path does not exist: {p}")
    return p


def build_spec(cfg) -> ScmSpec:
    dgp = cfg["dgp"]
    try:
        if "spec" in dgp:
            with open(_path(cfg, dgp["spec"]), encoding="utf-8") as fh:
                return ScmSpec.loads(fh.read())
        return paper_dgp(float(dgp["alpha"]), float(dgp["gamma"]))
    except (SpecError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"dgp: {exc}") from exc


def build_regime(cfg, K) -> Regime:
    r = cfg["regime"]
    try:
        regime = Regime.static(int(r), K) if np.isscalar(r) else Regime(tuple(int(x) for x in r))
        regime.check(K)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"regime: {exc}") from exc
    return regime


def _intervention(cfg, K):
    iv = cfg["simulate"].get("intervention")
    if iv is None:
        return None
    from .scm import InterventionSpec

    reg = iv.get("regime")
    regime = None if reg is None else build_regime({"regime": reg}, K)
    return InterventionSpec(regime, bool(iv.get("eliminate_censoring", False)))


# output helpers -----------------------------------------------------------------

def _num(x) -> str:
    return repr(round(float(x), 12))


def _csv(header, rows) -> str:
    return "\n".join([",".join(header)] + [",".join(str(c) for c in r) for r in rows]) + "\n"


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _out(args, name):
    return os.path.join(args.out, name)


CURVE_HEADER = ("estimand", "alpha", "gamma", "k", "value")


def _curve_rows(estimand, alpha, gamma, values):
    a = "" if alpha is None else _num(alpha)
    g = "" if gamma is None else _num(gamma)
    return [(estimand, a, g, k, _num(v)) for k, v in enumerate(values, 1)]


# commands -----------------------------------------------------------------------

def cmd_simulate(cfg, args):
    spec = build_spec(cfg)
    sim = cfg["simulate"]
    n = int(sim.get("n", 1000))
    if n < 1:
        raise ConfigError("simulate.n must be >= 1")
    panel = simulate(spec, n, cfg["seed"], masked=bool(sim.get("masked", True)),
                     intervention=_intervention(cfg, spec.K),
                     continue_after_death=bool(sim.get("continue_after_death", False)),
                     threads=args.threads)
    path = _out(args, "panel.csv")
    panel.to_csv(path)
    delta = panel[DELTA][:, spec.K].filled(1)
    seen = ~np.ma.getmaskarray(panel[OUTCOME])
    died = (panel[OUTCOME].filled(1) == 0) & seen
    summary = {
        "n": n,
        "K": spec.K,
        "seed": cfg["seed"],
        "censored_by_K": float(np.mean(delta == 1)),
        "observed_death_by_K": float(np.mean(died.any(axis=1))),
        "panel": os.path.basename(path),
        "schema": panel.schema.to_json(),
    }
    write_atomic(_out(args, "simulate_summary.json"), _json(summary))
    print(f"N={n}  censored by k={spec.K}: {summary['censored_by_K']:.3f}  "
          f"observed deaths: {summary['observed_death_by_K']:.3f}")
    return EXIT_OK


def cmd_oracle(cfg, args):
    spec = build_spec(cfg)
    regime = build_regime(cfg, spec.K)
    a, g = spec.meta.get("alpha"), spec.meta.get("gamma")
    p1 = oracle_curve(spec, psi1(regime)).values
    p2 = oracle_curve(spec, psi2(regime)).values
    rows = _curve_rows("psi1", a, g, p1) + _curve_rows("psi2", a, g, p2)
    write_atomic(_out(args, "oracle.csv"), _csv(CURVE_HEADER, rows))
    summary = {
        "psi1": p1.tolist(), "psi2": p2.tolist(),
        "censoring_fraction_factual": oracle_censoring_fraction(spec, spec.K),
        "censoring_fraction_regime_uninterrupted":
            oracle_censoring_fraction(spec, spec.K, psi2(regime), continue_after_death=True),
    }
    write_atomic(_out(args, "oracle.json"), _json(summary))
    for k in range(spec.K):
        print(f"k={k + 1}  psi1={p1[k]:.4f}  psi2={p2[k]:.4f}")
    return EXIT_OK


def _panel_from(cfg, args):
    if cfg.get("panel"):
        try:
            return Panel.from_csv(_path(cfg, cfg["panel"]))
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"panel: {exc}") from exc
    spec = build_spec(cfg)
    sim = cfg["simulate"]
    return simulate(spec, int(sim.get("n", 1000)), cfg["seed"], threads=args.threads)


def _estimator_configs(cfg, spec):
    ests = cfg["estimators"]
    if not isinstance(ests, dict) or not ests:
        raise ConfigError("estimators must be a non-empty object of name -> config")
    out = {}
    for i, (name, ec) in enumerate(sorted(ests.items())):
        ec = dict(ec)
        if ec.get("kind", "gformula") == "gformula":
            ec.setdefault("random_state", int(np.random.SeedSequence([cfg["seed"], 99, i]).generate_state(1)[0]))
        out[name] = resolve_config(ec, spec)
    return out


def _converged(report) -> bool:
    d = report.diagnostics
    flags = list(d.get("converged", {}).values())
    flags += [d[k] for k in ("treatment_converged", "censoring_converged") if k in d]
    return all(flags)


def cmd_estimate(cfg, args):
    panel = _panel_from(cfg, args)
    spec = build_spec(cfg)  # unset designs default to the model's equations
    regime = build_regime(cfg, panel.K)
    configs = _estimator_configs(cfg, spec)
    rows, reports = [], {}
    try:
        for name, ec in configs.items():
            est = make_estimator(ec).fit(panel, regime)
            rep = est.report()
            reports[name] = rep.to_json()
            rows += [(name, k, _num(v)) for k, v in enumerate(rep.values, 1)]
            if not _converged(rep):
                raise NonConvergence(f"estimator {name}: a nuisance model did not converge")
    except TypeError as exc:
        raise ConfigError(f"estimators: {exc}") from exc
    write_atomic(_out(args, "estimates.csv"), _csv(("estimator", "k", "value"), rows))
    write_atomic(_out(args, "estimates.json"), _json(reports))
    for name, rep in reports.items():
        print(name, " ".join(f"{v:.4f}" for v in rep["values"]))
    return EXIT_OK


def cmd_study(cfg, args):
    spec = build_spec(cfg)
    regime = build_regime(cfg, spec.K)
    st = cfg["study"]
    n, R, B = int(st.get("n", 1000)), int(st.get("replicates", 1000)), int(st.get("bootstrap", 0))
    if n < 1 or R < 1:
        raise ConfigError("study.n and study.replicates must be >= 1")
    ests = cfg["estimators"]
    if not isinstance(ests, dict) or not ests:
        raise ConfigError("estimators must be a non-empty object of name -> config")
    res = replication_study(spec, regime, n, R, dict(sorted(ests.items())), cfg["seed"],
                            bootstrap=B, threads=args.threads)
    write_atomic(_out(args, "study.csv"), res.to_csv())
    write_atomic(_out(args, "study.json"), _json(res.to_json()))
    for name in sorted(ests):
        t = res.table(name)
        print(f"{name}: mean {np.round(t['mean'], 4).tolist()}")
        print(f"  bias vs psi1 {np.round(t['bias_psi1'], 4).tolist()}")
        print(f"  bias vs psi2 {np.round(t['bias_psi2'], 4).tolist()}")
        print(f"  sd {np.round(t['sd'], 4).tolist()}  failed {res.failures[name].__len__()}")
    return EXIT_OK


def cmd_figure4(cfg, args):
    base = build_spec(cfg) if "spec" in cfg["dgp"] else None
    rows = []
    for estimand in ("psi1", "psi2"):
        for alpha in cfg["sweep"]["alpha"]:
            for gamma in cfg["sweep"]["gamma"]:
                spec = paper_dgp(float(alpha), float(gamma)) if base is None else base
                regime = build_regime(cfg, spec.K)
                iv = psi1(regime) if estimand == "psi1" else psi2(regime)
                rows += _curve_rows(estimand, alpha, gamma, oracle_curve(spec, iv).values)
    write_atomic(_out(args, "figure4.csv"), _csv(CURVE_HEADER, rows))
    print(f"wrote {len(rows)} rows")
    return EXIT_OK


def cmd_figure5(cfg, args):
    alpha = float(cfg["sweep"].get("figure5_alpha", -2.0))
    rows = []
    spec = None
    for gamma in cfg["sweep"]["gamma"]:
        spec = paper_dgp(alpha, float(gamma))
        regime = build_regime(cfg, spec.K)
        rows += _curve_rows("psi2", alpha, gamma, oracle_curve(spec, psi2(regime)).values)
    free = spec.without_censoring()
    rows += _curve_rows("no_censoring", alpha, None,
                        oracle_curve(free, psi2(build_regime(cfg, spec.K))).values)
    write_atomic(_out(args, "figure5.csv"), _csv(CURVE_HEADER, rows))
    print(f"wrote {len(rows)} rows")
    return EXIT_OK


def cmd_check_dag(cfg, args):
    try:
        with open(args.dag, encoding="utf-8") as fh:
            dag = parse_dag(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read {args.dag}: {exc}") from exc
    except DagError as exc:
        for d in exc.diagnostics:
            print(f"{args.dag}: {d}", file=sys.stderr)
        return EXIT_CONFIG
    estimand = psi1_estimand(dag) if args.estimand == "psi1" else psi2_estimand(dag)
    if args.k is not None:
        ks = [args.k]
    else:
        ks = sorted({n.time for n in dag.nodes if n.kind == "outcome" and n.time >= 1})
    wanted = args.assumption or [a for a in ASSUMPTIONS if a.startswith("1" if args.estimand == "psi1" else "2")]
    try:
        verdicts = [check_assumption(dag, estimand, a, k).to_json() | {"k": k} for k in ks for a in wanted]
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    report = {
        "estimand": args.estimand,
        "classification": classify_censoring(dag, estimand).to_json(),
        "swig_nodes": len(node_split(dag, estimand)),
        "verdicts": verdicts,
        "all_hold": all(v["holds"] for v in verdicts),
    }
    text = _json(report)
    if args.out_given:
        write_atomic(_out(args, "verdicts.json"), text)
    print(text, end="")
    return EXIT_OK if report["all_hold"] else EXIT_POSITIVITY


COMMANDS = {
    "simulate": cmd_simulate, "oracle": cmd_oracle, "estimate": cmd_estimate, "study": cmd_study,
    "figure4": cmd_figure4, "figure5": cmd_figure5, "check-dag": cmd_check_dag,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config with sections dgp, regime, estimators, study, sweep")
    common.add_argument("--out", help="output directory (default: current directory)")
    common.add_argument("--seed", type=int, help="master seed, overrides the config")
    common.add_argument("--threads", type=int, default=1)
    p = argparse.ArgumentParser(prog="censcausal", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "check-dag":
            sp.add_argument("dag", help="DAG file")
            sp.add_argument("--estimand", choices=("psi1", "psi2"), default="psi2")
            sp.add_argument("--k", type=int, help="interval to test (default: every outcome time)")
            sp.add_argument("--assumption", action="append", choices=ASSUMPTIONS)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.out_given = args.out is not None
    args.out = args.out or os.getcwd()
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = load_config(args.config, args.seed)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PositivityError as exc:
        print(f"positivity failure: {exc}", file=sys.stderr)
        return EXIT_POSITIVITY
    except (NonConvergence, GLMFitError) as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
