"""
Scenario-driven command line front end.

    gdfolio run SCENARIO [--out-dir DIR] [--seed N] [--projection P] [--optimizer O]
    gdfolio sweep SCENARIO --grid GRID.json
    gdfolio replicate SCENARIO --k K --min-assets M [--max-assets M2] [--step S]
    gdfolio synth SPEC.json --out PATH

A scenario is a JSON document::

    {
      "schema": 1,
      "name": "case3_ucits",
      "data": {"path": "synthetic_prices.csv", "mode": "prices",
               "kind": "simple", "benchmark": "INDEX"},
      "train": {"learning_rate": 0.001, "epochs": 2000, "optimizer": "adam",
                "projection": "sparsemax", "seed": 0},
      "loss": [{"kind": "cvar", "weight": 1.0},
               {"kind": "ucits10", "weight": 1.0},
               {"kind": "ucits540", "weight": 1.0}],
      "output_dir": "runs/case3"
    }

``data`` may instead hold ``{"synthetic": {...}}`` with the fields accepted by
``synth``. Data paths resolve against the scenario file; ``output_dir``
resolves against the working directory.

Exit codes: 0 when every constraint holds, 1 when a constraint is violated,
2 for usage or configuration errors, 3 for ingestion errors, 4 for training
errors, 5 for any other failure. Errors print one ``error: <Kind>: <cause>``
line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import engine, finance
from .data import (ReturnsPanel, SyntheticMarketSpec, load_panel, synthesize,
                   write_csv_atomic, write_prices_csv)
from .errors import (ConfigError, EnumerationError, GdfolioError, IngestionError,
                     TrainingError)

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_CONFIG = 2
EXIT_INGESTION = 3
EXIT_TRAINING = 4
EXIT_OTHER = 5

_SYNTH_KEYS = {"n_assets", "n_periods", "seed", "n_factors", "start_date",
               "asset_prefix", "benchmark_name", "format"}


@dataclass
class Scenario:
    name: str
    panel: ReturnsPanel
    return_kind: str          # "simple" or "log"
    spec: engine.LossSpec
    config: engine.TrainConfig
    output_dir: Path


# ---------------------------------------------------------------------------
# scenario parsing

def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return doc


def _synthetic_spec(doc: dict, seed: int | None = None) -> tuple[SyntheticMarketSpec, str]:
    unknown = set(doc) - _SYNTH_KEYS
    if unknown:
        raise ConfigError(f"synthetic spec: unknown keys {sorted(unknown)}")
    for key in ("n_assets", "n_periods"):
        if not isinstance(doc.get(key), int) or doc[key] < 2:
            raise ConfigError(f"synthetic spec: {key} must be an integer >= 2")
    fmt = doc.get("format", "prices")
    if fmt not in ("prices", "returns"):
        raise ConfigError(f"synthetic spec: format must be 'prices' or 'returns', got {fmt!r}")
    extra = {k: doc[k] for k in ("start_date", "asset_prefix", "benchmark_name") if k in doc}
    spec = SyntheticMarketSpec.random(
        doc["n_assets"], doc["n_periods"], n_factors=int(doc.get("n_factors", 2)),
        seed=int(doc.get("seed", 0) if seed is None else seed), **extra)
    return spec, fmt


def _load_data(data: dict, base: Path) -> tuple[ReturnsPanel, str]:
    if not isinstance(data, dict):
        raise ConfigError("'data' must be an object")
    if "synthetic" in data:
        spec, _ = _synthetic_spec(data["synthetic"])
        return synthesize(spec), "simple"
    if "path" not in data:
        raise ConfigError("'data' needs either 'path' or 'synthetic'")
    unknown = set(data) - {"path", "mode", "kind", "benchmark"}
    if unknown:
        raise ConfigError(f"'data': unknown keys {sorted(unknown)}")
    path = base / data["path"]
    if not path.is_file():
        raise IngestionError(f"{path}: no such file")
    mode = data.get("mode", "prices")
    kind = data.get("kind", "simple")
    if mode not in ("prices", "returns"):
        raise ConfigError(f"'data.mode' must be 'prices' or 'returns', got {mode!r}")
    if kind not in ("simple", "log"):
        raise ConfigError(f"'data.kind' must be 'simple' or 'log', got {kind!r}")
    return load_panel(path, mode=mode, benchmark=data.get("benchmark"), kind=kind), kind


def _term(doc: dict, assets: list[str], index: int) -> engine.Term:
    if not isinstance(doc, dict) or "kind" not in doc:
        raise ConfigError(f"loss[{index}]: each term needs a 'kind'")
    unknown = set(doc) - {"kind", "weight", "params", "name"}
    if unknown:
        raise ConfigError(f"loss[{index}]: unknown keys {sorted(unknown)}")
    params = dict(doc.get("params", {}))
    if doc["kind"] == "group_mask" and "groups" in params:
        groups = params.pop("groups")
        try:
            masks = finance.GroupMaskSet.from_members(
                assets, [g["assets"] for g in groups], [g["max_weight"] for g in groups])
        except KeyError as exc:
            raise ConfigError(f"loss[{index}]: {exc.args[0]}") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"loss[{index}]: bad group definition ({exc})") from None
        params["matrix"], params["max_weights"] = masks.matrix, masks.max_weights
    return engine.Term(doc["kind"], doc.get("weight", 1.0), params, doc.get("name"))


def load_scenario(path, overrides: dict | None = None) -> Scenario:
    """Parse and validate a scenario file; ``overrides`` patch the train block."""
    path = Path(path)
    doc = _read_json(path)
    if doc.get("schema") != SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported schema {doc.get('schema')!r}; expected {SCHEMA_VERSION}")
    unknown = set(doc) - {"schema", "name", "description", "data", "train", "loss", "output_dir"}
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    name = str(doc.get("name", path.stem))
    panel, kind = _load_data(doc.get("data"), path.parent)
    terms = doc.get("loss")
    if not isinstance(terms, list) or not terms:
        raise ConfigError(f"{path}: 'loss' must be a non-empty list")
    spec = engine.LossSpec([_term(t, panel.assets, i) for i, t in enumerate(terms)])
    train = dict(doc.get("train", {}))
    train.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        cfg = engine.TrainConfig(**train)
    except TypeError as exc:
        raise ConfigError(f"{path}: bad 'train' block ({exc})") from None
    out = Path(doc.get("output_dir", os.path.join("runs", name)))
    return Scenario(name, panel, kind, spec, cfg, out)


# ---------------------------------------------------------------------------
# file writers

def _fmt(x) -> str:
    x = float(x)
    return repr(x) if math.isfinite(x) else ("nan" if math.isnan(x) else repr(x))


def _json_value(x):
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return float(x) if math.isfinite(x) else None
    return x


def write_json_atomic(path, payload: dict) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            json.dump({k: _json_value(v) for k, v in payload.items()}, fh,
                      indent=2, sort_keys=True, allow_nan=False)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def cumulative_returns(returns, kind: str = "simple") -> np.ndarray:
    """Running compounded return: ``prod(1 + r) - 1`` (``exp(sum r) - 1`` for log returns)."""
    r = np.asarray(returns, dtype=float)
    if kind == "log":
        return np.expm1(np.cumsum(r))
    return np.cumprod(1.0 + r) - 1.0


def write_run_outputs(out: Path, scenario: Scenario, trace: engine.TrainTrace,
                      checks: list[engine.ComplianceRow]) -> dict:
    panel, w = scenario.panel, trace.weights
    write_csv_atomic(out / "weights.csv", ["asset", "weight"],
                     [[a, _fmt(x)] for a, x in zip(panel.assets, w) if x > 0])
    write_csv_atomic(out / "compliance.csv", ["constraint", "kind", "residual", "measure", "satisfied"],
                     [[c.label, c.kind, _fmt(c.residual), _fmt(c.measure), str(c.satisfied).lower()]
                      for c in checks])
    labels = scenario.spec.labels
    write_csv_atomic(out / "trace.csv", ["epoch", "total", *labels],
                     [[e, _fmt(trace.losses[e]), *(_fmt(trace.terms[k][e]) for k in labels)]
                      for e in range(trace.epochs)])
    port = cumulative_returns(panel.returns @ w, scenario.return_kind)
    bench = (None if panel.benchmark is None
             else cumulative_returns(panel.benchmark, scenario.return_kind))
    write_csv_atomic(out / "cumulative.csv", ["date", "portfolio", "benchmark"],
                     [[d, _fmt(port[t]), "" if bench is None else _fmt(bench[t])]
                      for t, d in enumerate(panel.dates)])
    feasible = all(c.satisfied for c in checks)
    metrics = dict(trace.metrics)
    metrics.update({
        "scenario": scenario.name,
        "epochs": trace.epochs,
        "final_loss": trace.final_loss,
        "objective": trace.objective,
        "active_assets": int(np.count_nonzero(w > 0)),
        "non_monotonic": trace.non_monotonic,
        "feasible": feasible,
    })
    for label, value in trace.final_terms.items():
        metrics[f"term.{label}"] = value
    write_json_atomic(out / "metrics.json", metrics)
    return metrics


# ---------------------------------------------------------------------------
# commands

def _overrides(args) -> dict:
    return {"seed": args.seed, "projection": args.projection, "optimizer": args.optimizer}


def _output_dir(args, scenario: Scenario) -> Path:
    return Path(args.out_dir) if args.out_dir else scenario.output_dir


def cmd_run(args) -> int:
    scenario = load_scenario(args.scenario, _overrides(args))
    trace = engine.train(scenario.spec, scenario.panel, scenario.config)
    checks = engine.compliance(scenario.spec, trace.weights, scenario.panel)
    metrics = write_run_outputs(_output_dir(args, scenario), scenario, trace, checks)
    for c in checks:
        if not c.satisfied:
            print(f"violated: {c.label} residual={c.residual:.6g} measure={c.measure:.6g}",
                  file=sys.stderr)
    return EXIT_OK if metrics["feasible"] else EXIT_VIOLATION


def _read_grid(path, spec: engine.LossSpec) -> dict[str, list[float]]:
    doc = _read_json(path)
    grid = {}
    for label, values in doc.items():
        spec.term(label)
        if not isinstance(values, list) or not values:
            raise ConfigError(f"{path}: grid entry {label!r} must be a non-empty list")
        grid[label] = [float(v) for v in values]
    if not grid:
        raise ConfigError(f"{path}: grid is empty")
    return grid


def cmd_sweep(args) -> int:
    scenario = load_scenario(args.scenario, _overrides(args))
    grid = _read_grid(args.grid, scenario.spec)
    rows = engine.grid_search(scenario.spec, grid, scenario.panel, scenario.config,
                              workers=args.workers)
    constraint_labels = [t.label for t in scenario.spec.constraints]
    header = [f"lambda.{k}" for k in grid] + ["objective"]
    header += [f"residual.{k}" for k in constraint_labels] + ["feasible", "error"]
    table = []
    for row in rows:
        line = [_fmt(row.lambdas[k]) for k in grid] + [_fmt(row.objective)]
        line += [_fmt(row.residuals.get(k, float("nan"))) for k in constraint_labels]
        line += [str(row.feasible).lower(), row.error or ""]
        table.append(line)
    write_csv_atomic(_output_dir(args, scenario) / "sweep.csv", header, table)
    return EXIT_OK


def cmd_replicate(args) -> int:
    scenario = load_scenario(args.scenario, _overrides(args))
    if args.k < 1:
        raise ConfigError("--k must be >= 1")
    result = engine.replication_study(
        scenario.panel, args.k, args.min_assets, scenario.spec, scenario.config,
        max_assets=args.max_assets, min_periods=args.min_periods, step=args.step,
        seed=scenario.config.seed if args.seed is None else args.seed, workers=args.workers)
    out = _output_dir(args, scenario)
    header = ["replication", "n_assets", "start", "length", "weight_mse",
              "objective_gd", "objective_oracle", "objective_gap", "assets", "error"]
    write_csv_atomic(out / "replication.csv", header, [
        [r.replication, len(r.assets), r.start, r.length, _fmt(r.weight_mse),
         _fmt(r.objective_gd), _fmt(r.objective_oracle), _fmt(r.objective_gap),
         ";".join(r.assets), r.error or ""] for r in result.rows])
    ok = [r for r in result.rows if r.error is None]
    summary = {"k": args.k, "completed": len(ok), "step": args.step}
    if ok:
        summary.update(weight_mse=result.weight_mse, objective_mse=result.objective_mse,
                       mean_objective_gap=result.mean_gap)
    write_json_atomic(out / "replication_summary.json", summary)
    if not ok:
        raise EnumerationError(f"all {args.k} replications failed; first: {result.rows[0].error}")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec, fmt = _synthetic_spec(_read_json(args.spec), args.seed)
    panel = synthesize(spec)
    if fmt == "prices":
        write_prices_csv(panel, args.out)
    else:
        panel.to_csv(args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gdfolio", description="Gradient-descent portfolio optimisation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, workers=False):
        p.add_argument("scenario", help="scenario JSON file")
        p.add_argument("--out-dir", help="output directory (overrides the scenario)")
        p.add_argument("--seed", type=int, help="override the training seed")
        p.add_argument("--projection", choices=["softmax", "sparsemax"])
        p.add_argument("--optimizer", choices=["gd", "adam"])
        if workers:
            p.add_argument("--workers", type=int, default=1, help="parallel processes")

    p_run = sub.add_parser("run", help="train one scenario")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="grid search over term multipliers")
    common(p_sweep, workers=True)
    p_sweep.add_argument("--grid", required=True, help="JSON object: term label -> list of multipliers")
    p_sweep.set_defaults(func=cmd_sweep)

    p_rep = sub.add_parser("replicate", help="compare against the simplex-grid oracle")
    common(p_rep, workers=True)
    p_rep.add_argument("--k", type=int, required=True, help="number of replications")
    p_rep.add_argument("--min-assets", type=int, required=True)
    p_rep.add_argument("--max-assets", type=int)
    p_rep.add_argument("--min-periods", type=int)
    p_rep.add_argument("--step", type=float, default=0.01, help="oracle grid resolution")
    p_rep.set_defaults(func=cmd_replicate)

    p_syn = sub.add_parser("synth", help="write a synthetic market panel")
    p_syn.add_argument("spec", help="JSON synthetic market spec")
    p_syn.add_argument("--out", required=True, help="output CSV path")
    p_syn.add_argument("--seed", type=int, help="override the seed in the market file")
    p_syn.set_defaults(func=cmd_synth)
    return parser


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, IngestionError):
        return EXIT_INGESTION
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, TrainingError):
        return EXIT_TRAINING
    return EXIT_OTHER


def main(argv=None) -> int:
    logging.basicConfig(format="warning: %(message)s", level=logging.WARNING)
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (GdfolioError, OSError) as exc:
        cause = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {cause}", file=sys.stderr)
        return _exit_code(exc) if isinstance(exc, GdfolioError) else EXIT_OTHER


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
