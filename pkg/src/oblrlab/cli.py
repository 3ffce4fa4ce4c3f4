"""Command-line entry point: ``oblrlab run|sweep|oracle-check|allocate``."""

from __future__ import annotations

import argparse
import copy
import csv
import itertools
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

from .checks import FAULTS, CheckConfig, run_checks
from .estimators import AdvantageMethod, UnsupportedGroupSize
from .schedule import InfeasibleBudget, LrPolicy, allocate_budget
from .task import TaskSpec, make_random_task, make_table_task
from .trainer import RunConfig, run

log = logging.getLogger("oblrlab")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2
SWEEP_AXES = ("algorithm", "task_seed", "seed", "N", "G", "lr_mode")
LOG_LEVELS = {"debug": logging.DEBUG, "info": logging.INFO, "quiet": logging.WARNING}


class ConfigError(ValueError):
    pass


def _setup_logging() -> None:
    name = os.environ.get("OBLR_LOG", "info").lower()
    logging.basicConfig(level=LOG_LEVELS.get(name, logging.INFO),
                        format="%(levelname)s %(message)s", stream=sys.stderr)


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    doc.setdefault("_base_dir", str(Path(path).resolve().parent))
    return doc


def build_task(doc: dict) -> TaskSpec:
    entry = doc.get("task")
    if entry is None:
        raise ConfigError("missing required field 'task'")
    if not isinstance(entry, dict):
        raise ConfigError("field 'task' must be an object")
    try:
        if "generator" in entry:
            gen = entry["generator"]
            return make_random_task(int(gen.get("num_queries", 2)), int(gen.get("num_outputs", 3)),
                                    float(gen.get("reward_bound", 1.0)), int(gen.get("seed", 0)))
        if "file" in entry:
            path = Path(entry["file"])
            if not path.is_absolute():
                path = Path(doc.get("_base_dir", ".")) / path
            return TaskSpec.load(path)
        if "query_probs" in entry and "rewards" in entry:
            if "reward_bound" in entry:
                return TaskSpec.from_dict(entry)
            return make_table_task(entry["query_probs"], entry["rewards"])
    except (ValueError, TypeError, KeyError, OSError) as exc:
        raise ConfigError(f"invalid field 'task': {exc}") from None
    raise ConfigError("field 'task' needs 'generator', 'file', or 'query_probs' and 'rewards'")


def build_run_config(doc: dict) -> RunConfig:
    if "algorithm" not in doc:
        raise ConfigError("missing required field 'algorithm'")
    task = build_task(doc)
    try:
        method = AdvantageMethod.parse(doc["algorithm"])
        lr_doc = dict(doc.get("lr", {}))
        lr = LrPolicy(**lr_doc)
        diag = doc.get("diagnostics", {})
        return RunConfig(task, method, lr,
                         steps=int(doc.get("steps", 200)),
                         n=int(doc.get("N", 4)),
                         g=int(doc.get("G", 4)),
                         seed=int(doc.get("seed", 0)),
                         exact_stats_every=int(diag.get("exact_stats_every", 1)))
    except UnsupportedGroupSize as exc:
        raise ConfigError(f"unsupported group size: {exc}") from None
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def cmd_run(args) -> int:
    doc = load_config(args.config)
    if args.seed_override is not None:
        doc["seed"] = args.seed_override
    config = build_run_config(doc)
    out = args.out or doc.get("out")
    if out is None:
        raise ConfigError("no output directory: pass --out or set 'out'")
    log.info("running %s for %d steps (N=%d, G=%d, seed=%d)", config.algorithm.tag.value,
             config.steps, config.n, config.g, config.seed)
    record = run(config)
    record.save(out)
    print(f"final loss {record.final_loss:.6g}; wrote {out}")
    return EXIT_OK


def _cells(doc: dict) -> list[dict]:
    axes = doc.get("sweep")
    if not isinstance(axes, dict) or not axes:
        raise ConfigError("sweep needs a non-empty 'sweep' object of axis lists")
    for name, values in axes.items():
        if name not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {name!r}; known: {', '.join(SWEEP_AXES)}")
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep axis {name!r} must be a non-empty list")
    names = list(axes)
    return [dict(zip(names, combo)) for combo in itertools.product(*axes.values())]


def _cell_doc(base: dict, cell: dict) -> dict:
    doc = copy.deepcopy(base)
    doc.pop("sweep", None)
    for name, value in cell.items():
        if name == "lr_mode":
            doc.setdefault("lr", {})["mode"] = value
        elif name == "task_seed":
            gen = doc.get("task", {}).get("generator")
            if gen is None:
                raise ConfigError("sweep axis 'task_seed' needs a generated task")
            gen["seed"] = value
        else:
            doc[name] = value
    return doc


def cell_name(cell: dict) -> str:
    return "_".join(f"{k}-{v}" for k, v in cell.items())


def _run_cell(base: dict, cell: dict, out_dir: str) -> dict:
    row = {"cell": cell_name(cell), **cell, "status": "ok", "final_loss": "",
           "mean_grad_norm": "", "loss_auc": "", "error": ""}
    try:
        record = run(build_run_config(_cell_doc(base, cell)))
        record.save(Path(out_dir) / row["cell"])
        loss = record.column("loss")
        row.update(final_loss=record.final_loss,
                   mean_grad_norm=float(record.column("grad_norm_exact").mean()),
                   loss_auc=float(loss.sum()))
    except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the sweep
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
    return row


def cmd_sweep(args) -> int:
    doc = load_config(args.config)
    if args.seed_override is not None:
        doc["seed"] = args.seed_override
    cells = _cells(doc)
    out = args.out or doc.get("out")
    if out is None:
        raise ConfigError("no output directory: pass --out or set 'out'")
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    Path(out).mkdir(parents=True, exist_ok=True)
    log.info("sweep of %d cells with %d job(s)", len(cells), args.jobs)
    if args.jobs == 1:
        rows = [_run_cell(doc, c, out) for c in cells]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_run_cell, [doc] * len(cells), cells, [out] * len(cells)))
    axis_cols = list(cells[0])
    cols = ["cell", *axis_cols, "status", "final_loss", "mean_grad_norm", "loss_auc", "error"]
    with open(Path(out) / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, cols, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    failed = [r for r in rows if r["status"] != "ok"]
    for r in failed:
        log.warning("cell %s failed: %s", r["cell"], r["error"])
    print(f"{len(rows) - len(failed)}/{len(rows)} cells succeeded; wrote {out}/summary.csv")
    return EXIT_FAILURE if failed else EXIT_OK


def cmd_oracle_check(args) -> int:
    doc = load_config(args.config).get("oracle_check", {})
    try:
        cfg = CheckConfig(**doc)
    except TypeError as exc:
        raise ConfigError(f"invalid 'oracle_check': {exc}") from None
    if args.seed_override is not None:
        cfg.seed = args.seed_override
    results = run_checks(cfg, args.inject_fault)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}  {r.detail}")
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(json.dumps({"check": r.name, "counterexample": r.counterexample}), file=sys.stderr)
    return EXIT_FAILURE if failed else EXIT_OK


def cmd_allocate(args) -> int:
    try:
        with open(args.stats) as fh:
            stats = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read stats file: {exc}") from None
    for key in ("tr_H", "grad_sq"):
        if key not in stats:
            raise ConfigError(f"stats file is missing field {key!r}")
    if len(stats["tr_H"]) != len(stats["grad_sq"]):
        raise ConfigError(f"tr_H has {len(stats['tr_H'])} entries but grad_sq has "
                          f"{len(stats['grad_sq'])}")
    try:
        plan = allocate_budget(stats["tr_H"], stats["grad_sq"], args.budget)
    except InfeasibleBudget as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    text = json.dumps(plan.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oblrlab",
                                     description="Policy-gradient baselines and SNR step sizes "
                                                 "on tabular softmax tasks.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON config file")
        p.add_argument("--seed-override", type=int, default=None)

    p = sub.add_parser("run", help="train one configuration")
    common(p)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="train the cross product of the sweep axes")
    common(p)
    p.add_argument("--out", help="output directory")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle-check", help="run the invariant suite")
    common(p, config_required=False)
    p.add_argument("--inject-fault", choices=FAULTS, default=None)
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("allocate", help="split a query budget across steps")
    p.add_argument("--stats", required=True, help="JSON with tr_H and grad_sq lists")
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--out", help="where to write the plan JSON")
    p.set_defaults(func=cmd_allocate)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled error", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
