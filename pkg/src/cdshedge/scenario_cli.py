"""Command-line batch runner for pricing, hedging and replication scenarios.

    cdshedge run <config.yaml | bundled name> [--seed N] [--paths N] [--steps N] [--out DIR]
    cdshedge validate <config>
    cdshedge list
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import math
import subprocess
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from . import __version__
from .claims_contracts import AffinePayoff, CdsSpec, DefaultableClaim, FtdClaim
from .errors import CdsHedgeError, ConfigError, NonHedgeableError
from .market_model import ConstantIntensity, MarketEnv, PiecewiseIntensity, SquareRootIntensity
from .multi_name import Clayton, Independence, MultiNameModel, ftd_price, survivor_curve
from .replication_lab import (
    SimConfig,
    convergence_study,
    replicate,
    simulate_paths,
)
from .rolling_cds import RollingFamily
from .single_name_pricer import AffineClaimKernel, market_spread

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_NON_HEDGEABLE, EXIT_NUMERICAL = 0, 1, 2, 3, 4

_NONNEG = {"type": "number", "minimum": 0}
_POS = {"type": "number", "exclusiveMinimum": 0}
_SPREAD = {"oneOf": [_NONNEG, {"const": "market"}]}
_PAYOFF = {
    "oneOf": [
        _NONNEG,
        {"type": "object", "additionalProperties": False, "required": ["kind"],
         "properties": {"kind": {"enum": ["constant", "affine"]}, "value": _NONNEG,
                        "level": {"type": "number"}, "slope": {"type": "number"}}},
    ]
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["market", "model", "instruments", "claim", "simulation"],
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "market": {
            "type": "object", "additionalProperties": False, "required": ["rates"],
            "properties": {"rates": {"type": "array", "items": _NONNEG, "minItems": 1},
                           "knots": {"type": "array", "items": _POS}},
        },
        "model": {
            "type": "object", "additionalProperties": False, "required": ["kind"],
            "properties": {
                "kind": {"enum": ["constant", "piecewise", "square_root", "basket"]},
                "rate": _NONNEG,
                "knots": {"type": "array", "items": _POS},
                "values": {"type": "array", "items": _NONNEG, "minItems": 1},
                "a": _NONNEG, "b": _NONNEG, "sigma": _NONNEG, "x0": _NONNEG, "scale": _NONNEG,
                "hazards": {"type": "array", "items": _NONNEG, "minItems": 1},
                "copula": {
                    "type": "object", "additionalProperties": False, "required": ["kind"],
                    "properties": {"kind": {"enum": ["independence", "clayton"]}, "theta": _POS},
                },
            },
        },
        "instruments": {
            "type": "array", "minItems": 1,
            "items": {
                "type": "object", "additionalProperties": False, "required": ["kind"],
                "properties": {
                    "kind": {"enum": ["cds", "rolling"]},
                    "spread": _SPREAD,
                    "spread_multiplier": _POS,
                    "protection": _NONNEG,
                    "maturity": _POS,
                    "reference_name": {"type": "integer", "minimum": 1},
                    "duration": _POS,
                    "lifespan": _POS,
                },
            },
        },
        "claim": {
            "type": "object", "additionalProperties": False, "required": ["kind", "maturity"],
            "properties": {
                "kind": {"enum": ["claim", "cds", "ftd"]},
                "maturity": _POS,
                "payoff": _PAYOFF,
                "dividend_rate": {"type": "number"},
                "recovery": _NONNEG,
                "recoveries": {"type": "array", "items": _NONNEG, "minItems": 1},
                "protection": _NONNEG,
                "spread": _SPREAD,
                "reference_name": {"type": "integer", "minimum": 1},
            },
        },
        "simulation": {
            "type": "object", "additionalProperties": False, "required": ["paths", "steps"],
            "properties": {
                "paths": {"type": "integer", "minimum": 1},
                "steps": {"type": "integer", "minimum": 2},
                "seed": {"type": "integer", "minimum": 0},
                "antithetic": {"type": "boolean"},
                "mode": {"enum": ["grid", "continuous"]},
                "convergence_steps": {"type": "array", "items": {"type": "integer", "minimum": 2}},
            },
        },
        "outputs": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "directory": {"type": "string"},
                "price_table": {"type": "boolean"},
                "hedge_table": {"type": "boolean"},
                "replication_report": {"type": "boolean"},
                "convergence": {"type": "boolean"},
            },
        },
    },
}

DEFAULTS = {
    "market": {"knots": []},
    "simulation": {"seed": 0, "antithetic": False, "mode": "grid"},
    "outputs": {"directory": "out", "price_table": True, "hedge_table": True,
                "replication_report": True, "convergence": True},
}


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def bundled_scenarios() -> dict[str, Path]:
    root = resources.files("cdshedge") / "scenarios"
    return {Path(p.name).stem: Path(str(p)) for p in sorted(root.iterdir(), key=lambda p: p.name)
            if p.name.endswith(".yaml")}


def resolve_config_path(ref: str) -> Path:
    p = Path(ref)
    if p.exists():
        return p
    scen = bundled_scenarios()
    if ref in scen:
        return scen[ref]
    raise ConfigError(f"no such config file or bundled scenario: {ref}", field=None)


def _field_of(err: jsonschema.ValidationError) -> str:
    path = ".".join(str(p) for p in err.absolute_path)
    if err.validator == "required":
        missing = err.message.split("'")[1] if "'" in err.message else ""
        return f"{path}.{missing}" if path else missing
    if err.validator == "additionalProperties" and "'" in err.message:
        extra = err.message.split("'")[1]
        return f"{path}.{extra}" if path else extra
    return path


def validate_config(raw) -> dict:
    """Schema-check and normalise a parsed config (defaults filled in)."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping", field="")
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: (len(list(e.absolute_path)), e.message))
    if errors:
        e = errors[0]
        raise ConfigError(e.message, field=_field_of(e))
    cfg = copy.deepcopy(raw)
    for section, vals in DEFAULTS.items():
        cfg.setdefault(section, {})
        for k, v in vals.items():
            cfg[section].setdefault(k, v)
    _semantic_checks(cfg)
    return cfg


def _semantic_checks(cfg):
    m = cfg["model"]
    need = {"constant": ["rate"], "piecewise": ["values"], "square_root": ["a", "b", "sigma", "x0"],
            "basket": ["hazards"]}[m["kind"]]
    for k in need:
        if k not in m:
            raise ConfigError(f"model kind {m['kind']} needs '{k}'", field=f"model.{k}")
    if m["kind"] == "piecewise" and len(m["values"]) != len(m.get("knots", [])) + 1:
        raise ConfigError("piecewise hazard needs one more value than knots", field="model.values")
    if len(cfg["market"]["rates"]) != len(cfg["market"]["knots"]) + 1:
        raise ConfigError("rate curve needs one more rate than knots", field="market.rates")
    basket = m["kind"] == "basket"
    c = cfg["claim"]
    if (c["kind"] == "ftd") != basket:
        raise ConfigError("ftd claims go with basket models and vice versa", field="claim.kind")
    if basket and len(c.get("recoveries", [])) != len(m["hazards"]):
        raise ConfigError("need one recovery per basket name", field="claim.recoveries")
    for i, inst in enumerate(cfg["instruments"]):
        if inst["kind"] == "rolling":
            if "duration" not in inst:
                raise ConfigError("rolling instruments need a duration", field=f"instruments.{i}.duration")
            if basket:
                raise ConfigError("rolling instruments are single-name", field=f"instruments.{i}.kind")
        elif "maturity" not in inst:
            raise ConfigError("CDS instruments need a maturity", field=f"instruments.{i}.maturity")
        elif inst["maturity"] < c["maturity"]:
            raise ConfigError("instruments must not mature before the claim", field=f"instruments.{i}.maturity")
        if basket and inst.get("reference_name", 1) > len(m["hazards"]):
            raise ConfigError("reference_name outside the basket", field=f"instruments.{i}.reference_name")
    if cfg["simulation"]["mode"] == "continuous" and m["kind"] == "square_root":
        raise ConfigError("continuous rebalancing needs deterministic hazards", field="simulation.mode")


def load_config(ref: str) -> tuple[dict, bytes]:
    path = resolve_config_path(ref)
    try:
        text = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}", field=None) from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}", field=None) from exc
    return validate_config(raw), text


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def build_tag() -> str:
    try:
        here = Path(__file__).resolve().parent
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


# --------------------------------------------------------------------------
# scenario objects
# --------------------------------------------------------------------------

@dataclass
class Scenario:
    env: MarketEnv
    model: object
    instruments: list
    claim: object
    sim: SimConfig
    mode: str
    convergence_steps: list


def _payoff(spec):
    if isinstance(spec, dict):
        if spec["kind"] == "affine":
            return AffinePayoff(spec.get("level", 0.0), spec.get("slope", 0.0))
        return float(spec.get("value", 0.0))
    return float(spec if spec is not None else 0.0)


def build_scenario(cfg: dict) -> Scenario:
    mk = cfg["market"]
    env = MarketEnv(tuple(mk["rates"]), tuple(mk["knots"]))
    m = cfg["model"]
    kind = m["kind"]
    if kind == "constant":
        model = ConstantIntensity(m["rate"])
    elif kind == "piecewise":
        model = PiecewiseIntensity(tuple(m.get("knots", [])), tuple(m["values"]))
    elif kind == "square_root":
        model = SquareRootIntensity(m["a"], m["b"], m["sigma"], m["x0"], m.get("scale", 1.0))
    else:
        cop = m.get("copula", {"kind": "independence"})
        if cop["kind"] == "clayton" and "theta" not in cop:
            raise ConfigError("Clayton copula needs theta", field="model.copula.theta")
        copula = Clayton(cop["theta"]) if cop["kind"] == "clayton" else Independence()
        model = MultiNameModel(tuple(m["hazards"]), copula)

    def spread_for(item, protection, maturity, name):
        s = item.get("spread", "market")
        if s != "market":
            return float(s)
        if isinstance(model, MultiNameModel):
            base = float(market_spread(survivor_curve(model, name - 1, 0.0), env, protection, maturity))
        else:
            base = float(market_spread(model, env, protection, maturity))
        return base * item.get("spread_multiplier", 1.0)

    insts = []
    for item in cfg["instruments"]:
        prot = item.get("protection", 1.0)
        if item["kind"] == "rolling":
            insts.append(RollingFamily(item["duration"], item.get("lifespan", 0.25), prot))
        else:
            name = item.get("reference_name", 1)
            insts.append(CdsSpec(spread_for(item, prot, item["maturity"], name), prot, item["maturity"], name))

    c = cfg["claim"]
    T = c["maturity"]
    if c["kind"] == "cds":
        prot = c.get("protection", 1.0)
        name = c.get("reference_name", 1)
        claim = CdsSpec(spread_for(c, prot, T, name), prot, T, name)
    elif c["kind"] == "claim":
        claim = DefaultableClaim(T, _payoff(c.get("payoff", 0.0)), c.get("dividend_rate", 0.0), c.get("recovery", 0.0))
    else:
        recs = tuple(c["recoveries"])
        X = _payoff(c.get("payoff", 0.0))
        if callable(X):
            raise ConfigError("basket claims take constant payoffs", field="claim.payoff")
        if c.get("spread") == "market":
            prot_v = ftd_price(model, env, FtdClaim(T, X, 0.0, recs), 0.0)
            ann_v = ftd_price(model, env, FtdClaim(T, 0.0, 1.0, (0.0,) * len(recs)), 0.0)
            rate = -prot_v / ann_v
        elif "spread" in c:
            rate = -float(c["spread"])
        else:
            rate = c.get("dividend_rate", 0.0)
        claim = FtdClaim(T, X, rate, recs)
    s = cfg["simulation"]
    sim = SimConfig(s["paths"], s["steps"], T, s["seed"], s["antithetic"])
    return Scenario(env, model, insts, claim, sim, s["mode"], list(s.get("convergence_steps", [])))


# --------------------------------------------------------------------------
# running
# --------------------------------------------------------------------------

def _spread_series(batch, sc: Scenario) -> np.ndarray:
    """Mean market spread of the first instrument over alive paths at each node."""
    inst = sc.instruments[0]
    t = batch.times
    out = np.full(len(t), np.nan)
    for k, tk in enumerate(t):
        if isinstance(inst, RollingFamily):
            spec = inst.contract_at(tk)
            prot, T, name = spec.protection, spec.expiry, 1
        else:
            prot, T, name = inst.protection, inst.maturity, inst.reference_name
        if tk >= T - 1e-12:
            continue
        alive = batch.tau > tk
        if not np.any(alive):
            continue
        if isinstance(sc.model, MultiNameModel):
            out[k] = float(market_spread(survivor_curve(sc.model, name - 1, tk), sc.env, prot, T))
        elif isinstance(sc.model, SquareRootIntensity):
            legs = [DefaultableClaim(T, 0.0, 0.0, prot), DefaultableClaim(T, 0.0, 1.0, 0.0)]
            p, _ = AffineClaimKernel(sc.model, sc.env, tk, T, legs).evaluate(batch.state_at(k)[alive])
            out[k] = float(np.mean(p[0] / p[1]))
        else:
            out[k] = float(market_spread(sc.model, sc.env, prot, T, tk))
    return out


@dataclass
class RunOutput:
    tables: dict
    summary: dict


def run_scenario(cfg: dict, seed=None, paths=None, steps=None) -> RunOutput:
    """Run a validated config; returns CSV tables (name -> rows) and a summary."""
    cfg = copy.deepcopy(cfg)
    sim = cfg["simulation"]
    if seed is not None:
        sim["seed"] = int(seed)
    if paths is not None:
        sim["paths"] = int(paths)
    if steps is not None:
        sim["steps"] = int(steps)
    cfg = validate_config(cfg)
    sc = build_scenario(cfg)
    batch = simulate_paths(sc.model, sc.sim)
    grid = replicate(batch, sc.instruments, sc.claim, sc.env, mode="grid")
    main = grid if sc.mode == "grid" else replicate(batch, sc.instruments, sc.claim, sc.env, mode="continuous")
    rep = main.report
    if rep.singular_paths:
        raise NonHedgeableError("matching system is singular on some paths", residual=rep.max_residual,
                                where=[int(rep.singular_paths)])
    t = batch.times
    B = grid.savings
    wp = grid.rollforward
    k = len(sc.instruments)
    spreads = _spread_series(batch, sc)
    cum = np.mean(grid.claim, axis=0) * B
    price_rows = [["t", "ex_dividend", "cumulative", "spread"]]
    for i, ti in enumerate(t):
        price_rows.append([ti, wp.mean_target_price[i], cum[i], spreads[i]])
    hedge_rows = [["t", *[f"phi_{j}" for j in range(k + 1)], "condition_number"]]
    for i in range(len(t) - 1):
        hedge_rows.append([t[i], wp.mean_bank[i], *wp.mean_positions[i], wp.condition_number[i]])
    report_rows = [["statistic", "value"],
                   ["mode", sc.mode], ["path_count", rep.path_count], ["step_count", rep.step_count],
                   ["initial_price", main.initial_price], ["mean_error", rep.mean_error], ["rmse", rep.rmse],
                   ["max_abs_error", rep.max_abs_error],
                   *[[f"sup_error_q{int(q * 100)}", v] for q, v in rep.sup_error_quantiles.items()],
                   ["max_default_mismatch", rep.max_default_mismatch], ["max_residual", rep.max_residual],
                   ["singular_paths", rep.singular_paths]]
    conv_rows = [["step_count", "rmse", "mean_error", "max_abs_error"]]
    if sc.convergence_steps:
        for row in convergence_study(sc.model, sc.env, sc.instruments, sc.claim, sc.sim, sc.convergence_steps,
                                     mode=sc.mode):
            conv_rows.append([row.step_count, row.rmse, row.mean_error, row.max_abs_error])
    else:
        conv_rows.append([rep.step_count, rep.rmse, rep.mean_error, rep.max_abs_error])
    tables = {}
    outs = cfg["outputs"]
    for name, rows in (("price_table", price_rows), ("hedge_table", hedge_rows),
                       ("replication_report", report_rows), ("convergence", conv_rows)):
        if outs.get(name, True):
            tables[name] = rows
    return RunOutput(tables, {"rmse": rep.rmse, "initial_price": main.initial_price, "seed": sc.sim.seed,
                              "config_hash": config_hash(cfg)})


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(v)


def render_csv(rows, seed: int, chash: str, build: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    buf.write(f"# seed={seed}, build={build}, config_hash={chash}\n")
    return buf.getvalue()


def write_tables(out: RunOutput, directory: Path) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    build = build_tag()
    written = []
    for name, rows in out.tables.items():
        p = directory / f"{name}.csv"
        p.write_text(render_csv(rows, out.summary["seed"], out.summary["config_hash"], build))
        written.append(p)
    return written


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def _fail(exc: Exception, code: int) -> int:
    rec = exc.record() if isinstance(exc, CdsHedgeError) else {"error": type(exc).__name__, "message": str(exc)}
    sys.stderr.write(json.dumps(rec, sort_keys=True, default=str) + "\n")
    return code


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, NonHedgeableError):
        return EXIT_NON_HEDGEABLE
    if isinstance(exc, (CdsHedgeError, ArithmeticError, ValueError)):
        return EXIT_NUMERICAL
    return EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cdshedge", description="CDS hedging and replication scenarios")
    sub = ap.add_subparsers(dest="verb", required=True)
    run = sub.add_parser("run", help="run a scenario and write CSV reports")
    run.add_argument("config")
    run.add_argument("--seed", type=int)
    run.add_argument("--paths", type=int)
    run.add_argument("--steps", type=int)
    run.add_argument("--out", type=Path)
    val = sub.add_parser("validate", help="schema-check a config without running it")
    val.add_argument("config")
    sub.add_parser("list", help="list bundled scenarios")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "list":
            for name, path in bundled_scenarios().items():
                desc = (yaml.safe_load(path.read_text()) or {}).get("description", "")
                print(f"{name}\t{desc}")
            return EXIT_OK
        cfg, _ = load_config(args.config)
        if args.verb == "validate":
            print("OK")
            print(yaml.safe_dump(cfg, sort_keys=True), end="")
            return EXIT_OK
        out = run_scenario(cfg, args.seed, args.paths, args.steps)
        directory = args.out if args.out is not None else Path(cfg["outputs"]["directory"])
        for p in write_tables(out, directory):
            print(p)
        return EXIT_OK
    except Exception as exc:  # reported as a machine-readable record
        return _fail(exc, _exit_code(exc))


if __name__ == "__main__":
    raise SystemExit(main())
