"""Command-line experiment runner: train, compare, sweep and eval."""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import yaml

from . import metrics as M
from .config import RunConfig, load_config, parse_config
from .errors import BayesAggError, ConfigError
from .network import TaskHead, TrunkParams
from .trainer import FitResult, MethodConfig, TrainConfig, evaluate, fit, init_state

log = logging.getLogger("bayesagg")

WORKERS_ENV = "BAYESAGG_WORKERS"
CONVENTIONS = {
    "brier": M.BRIER_CONVENTION,
    "ece_bins": M.ECE_BINS,
    "normalization_std": "population",
    "delta_m": "percent relative to single-task reference, lower is better",
    "regression_criterion": "MAE on de-normalized targets",
    "classification_criterion": "accuracy",
    "aggregate_std": "sample std (ddof=1)",
}


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(WORKERS_ENV, f"expected an integer, got {raw!r}") from None


def _map(fn, jobs: Sequence[Any]) -> list[Any]:
    workers = min(worker_count(), len(jobs))
    if workers <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


# --------------------------------------------------------------------------- single-task reference

def stl_reference(cfg: RunConfig, seed: int) -> dict[str, dict[str, float]]:
    """Per-task val/test criteria of single-task LS models trained under the same budget."""
    ds = cfg.build_dataset(seed)
    out: dict[str, dict[str, float]] = {"val": {}, "test": {}}
    for task in ds.tasks:
        single = ds.select_tasks([task.name])
        tc = TrainConfig(seed=seed, method=MethodConfig("ls"), **cfg.training)
        res = fit(single, cfg.model, tc)
        out["val"][task.name] = res.val[task.name]["criterion"]
        out["test"][task.name] = res.test[task.name]["criterion"]
    return out


def _stl_job(args) -> dict:
    raw, source, seed = args
    return stl_reference(parse_config(raw, source), seed)


# --------------------------------------------------------------------------- one run

def _delta(tasks, values: dict[str, float], reference: dict[str, float]) -> float:
    rec = M.MetricRecord([values[t.name] for t in tasks], [reference[t.name] for t in tasks],
                         M.higher_is_better([t.kind for t in tasks]))
    return M.delta_m(rec)


def _write_csv(path: Path, rows: list[dict], columns: list[str] | None = None) -> None:
    columns = columns or (list(rows[0]) if rows else [])
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in columns})


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value


def save_model(path: Path, result: FitResult) -> None:
    state = result.state
    arrays = {f"trunk_{i}": p for i, p in enumerate(state.trunk.params())}
    arrays["activations"] = np.array(state.trunk.activations)
    for name, head in state.heads.items():
        arrays[f"head__{name}"] = head.weights
    np.savez(path, **arrays)


def load_model(path: Path, cfg: RunConfig, seed: int):
    ds = cfg.build_dataset(seed)
    state = init_state(ds.tasks, ds.x.shape[1], cfg.model, cfg.train_config(seed))
    with np.load(path, allow_pickle=False) as z:
        n = len([k for k in z.files if k.startswith("trunk_")])
        state.trunk = TrunkParams([z[f"trunk_{i}"] for i in range(0, n, 2)], [z[f"trunk_{i}"] for i in range(1, n, 2)],
                                  [str(a) for a in z["activations"]])
        for t in ds.tasks:
            state.heads[t.name] = TaskHead(t.name, t.kind, z[f"head__{t.name}"])
    state.ready = True
    return ds, state


def run_one(cfg: RunConfig, seed: int, run_dir: Path, reference: dict | None) -> dict:
    """Train one (method, seed) and write its artifacts; returns the summary record."""
    run_dir.mkdir(parents=True, exist_ok=True)
    ds = cfg.build_dataset(seed)
    tc = cfg.train_config(seed)
    ref_val = reference["val"] if reference and cfg.selection == "delta_m" else None
    res = fit(ds, cfg.model, tc, reference_val=ref_val)
    chash = cfg.hash()
    method = cfg.method.name
    tasks = {t.name: {"kind": t.kind, "val": res.val[t.name], "test": res.test[t.name]} for t in ds.tasks}
    summary = {
        "method": method,
        "seed": seed,
        "data_seed": cfg.data_seed(seed),
        "config_hash": chash,
        "selection": cfg.selection if reference else "loss",
        "best_epoch": res.best_epoch,
        "tasks": tasks,
        "delta_m": None,
        "reference": reference,
        "conventions": CONVENTIONS,
        "files": {
            "history.csv": "one row per epoch: phase, lr, selection score, train loss and val criterion per task",
            "weights.csv": "one row per (epoch, aggregation unit): mean aggregation weight",
        },
    }
    if reference:
        summary["delta_m"] = {split: _delta(ds.tasks, {k: v[split]["criterion"] for k, v in tasks.items()},
                                            reference[split]) for split in ("val", "test")}
    meta = {"method": method, "seed": seed, "config_hash": chash}
    history = [{**meta, **row} for row in res.history]
    _write_csv(run_dir / "history.csv", history)
    if method == "bayesagg":
        _write_csv(run_dir / "weights.csv", [{**meta, **row} for row in res.weights],
                   ["method", "seed", "config_hash", "epoch", "phase", "task", "mean_weight"])
    resolved = cfg.resolved()
    resolved["seeds"] = [seed]
    resolved["config_hash"] = chash
    (run_dir / "config.resolved").write_text(yaml.safe_dump(resolved, sort_keys=True), encoding="utf-8")
    save_model(run_dir / "model.npz", res)
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


def _run_job(args) -> dict:
    raw, source, seed, run_dir, reference = args
    run_dir = Path(run_dir)
    try:
        return {"ok": True, "summary": run_one(parse_config(raw, source), seed, run_dir, reference)}
    except Exception as exc:  # one failed run must not take the rest down
        run_dir.mkdir(parents=True, exist_ok=True)
        diag = {"seed": seed, "error": type(exc).__name__, "message": str(exc), "traceback": traceback.format_exc()}
        (run_dir / "diagnostics.json").write_text(json.dumps(diag, indent=2) + "\n", encoding="utf-8")
        log.error("run %s failed: %s: %s", run_dir, type(exc).__name__, exc)
        return {"ok": False, "seed": seed, "error": f"{type(exc).__name__}: {exc}"}


# --------------------------------------------------------------------------- tables

def summary_row(summary: dict) -> dict:
    row = {"method": summary["method"], "seed": summary["seed"], "config_hash": summary["config_hash"]}
    for name, rec in summary["tasks"].items():
        row[f"test/{name}"] = rec["test"]["criterion"]
        for key in ("ece", "brier"):
            if key in rec["test"]:
                row[f"test_{key}/{name}"] = rec["test"][key]
    dm = summary["delta_m"]
    row["val_delta_m"] = dm["val"] if dm else ""
    row["delta_m"] = dm["test"] if dm else ""
    return row


def aggregate_row(rows: list[dict], label: dict) -> dict:
    out = dict(label)
    for key in rows[0]:
        if key in out or key in ("seed", "config_hash"):
            continue
        vals = [r[key] for r in rows if isinstance(r[key], float)]
        if len(vals) == len(rows):
            std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            out[key] = f"{np.mean(vals):.6g}±{std:.6g}"
    return out


def _columns(rows: list[dict]) -> list[str]:
    cols: list[str] = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    return cols


def _references(cfg: RunConfig, seeds: Iterable[int], enabled: bool) -> dict[int, dict | None]:
    seeds = list(seeds)
    if not enabled:
        return {s: None for s in seeds}
    refs = _map(_stl_job, [(cfg.raw, cfg.source, s) for s in seeds])
    return dict(zip(seeds, refs))


def _write_references(path: Path, refs: dict[int, dict | None]) -> None:
    rows = []
    for seed, ref in refs.items():
        if ref is None:
            continue
        for split in ("val", "test"):
            rows.append({"seed": seed, "split": split, **ref[split]})
    if rows:
        _write_csv(path, rows)


# --------------------------------------------------------------------------- commands

def cmd_train(cfg: RunConfig, seeds: list[int], with_reference: bool) -> int:
    method = cfg.method.name
    base = cfg.output_dir / method
    refs = _references(cfg, seeds, with_reference)
    jobs = [(cfg.raw, cfg.source, s, str(base / f"seed_{s}"), refs[s]) for s in seeds]
    results = _map(_run_job, jobs)
    rows = [summary_row(r["summary"]) for r in results if r["ok"]]
    if len(seeds) > 1 and rows:
        rows.append(aggregate_row(rows, {"method": method, "seed": "mean±std"}))
        _write_csv(base / "summary.csv", rows, _columns(rows))
    for r in results:
        if r["ok"]:
            s = r["summary"]
            dm = s["delta_m"]["test"] if s["delta_m"] else float("nan")
            print(f"{method} seed={s['seed']} best_epoch={s['best_epoch']} delta_m={dm:.4f}")
    return 0 if all(r["ok"] for r in results) else 1


def cmd_compare(cfg: RunConfig, methods: list[str], seeds: list[int]) -> int:
    out = cfg.output_dir / "compare"
    refs = _references(cfg, seeds, True)
    out.mkdir(parents=True, exist_ok=True)
    _write_references(out / "stl.csv", refs)
    jobs, groups = [], []
    for gi, method in enumerate(methods):
        mcfg = cfg.with_overrides({"method.name": method})
        # a method listed twice gets its own directory
        name = method if method not in methods[:gi] else f"{method}_{gi}"
        for s in seeds:
            jobs.append((mcfg.raw, mcfg.source, s, str(out / name / f"seed_{s}"), refs[s]))
            groups.append(gi)
    results = _map(_run_job, jobs)
    rows: list[dict] = []
    for gi, method in enumerate(methods):
        mine = [summary_row(r["summary"]) for r, g in zip(results, groups) if g == gi and r["ok"]]
        rows += mine
        if mine:
            rows.append(aggregate_row(mine, {"method": method, "seed": "mean±std"}))
    if rows:
        _write_csv(out / "compare.csv", rows, _columns(rows))
        for row in rows:
            print(f"{row['method']:>10} {row['seed']!s:>10}  delta_m={row['delta_m']}")
    return 0 if all(r["ok"] for r in results) else 1


def _tie_key(overrides: dict) -> tuple:
    return (overrides.get("method.s_regression", float("inf")), overrides.get("method.s_classification", float("inf")))


def load_grid(path: str | Path) -> list[dict]:
    path = Path(path)
    try:
        grid = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError("<file>", "grid file not found", str(path)) from None
    if not isinstance(grid, dict) or not grid:
        raise ConfigError("<grid>", "expected a non-empty mapping of dotted keys to value lists", str(path))
    for key, values in grid.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(key, "expected a non-empty list of values", str(path))
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def cmd_sweep(cfg: RunConfig, grid_path: str, seeds: list[int]) -> int:
    cells = load_grid(grid_path)
    out = cfg.output_dir / "sweep"
    cfgs = [cfg.with_overrides(c) for c in cells]
    refs = _references(cfg, seeds, True)
    jobs = [(c.raw, c.source, s, str(out / f"cell_{i}" / f"seed_{s}"), refs[s])
            for i, c in enumerate(cfgs) for s in seeds]
    results = iter(_map(_run_job, jobs))
    table, ok = [], True
    for i, (cell, c) in enumerate(zip(cells, cfgs)):
        runs = [next(results) for _ in seeds]
        ok &= all(r["ok"] for r in runs)
        vals = [r["summary"]["delta_m"]["val"] for r in runs if r["ok"]]
        tests = [r["summary"]["delta_m"]["test"] for r in runs if r["ok"]]
        row = {"cell": i, **cell, "config_hash": c.hash(), "n_ok": len(vals),
               "val_delta_m": float(np.mean(vals)) if vals else float("nan"),
               "test_delta_m": float(np.mean(tests)) if tests else float("nan")}
        table.append(row)
    candidates = [(r["val_delta_m"], _tie_key(cells[r["cell"]]), r["cell"]) for r in table if r["n_ok"]]
    best = min(candidates)[2] if candidates else None
    _write_csv(out / "sweep.csv", table, _columns(table))
    report = {"best_cell": best, "best_overrides": cells[best] if best is not None else None,
              "rule": "lowest mean validation delta_m; ties go to smaller s", "cells": table}
    (out / "best.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for row in table:
        mark = "*" if row["cell"] == best else " "
        print(f"{mark} cell {row['cell']}: {cells[row['cell']]} val_delta_m={row['val_delta_m']:.4f}")
    return 0 if ok and best is not None else 1


def cmd_eval(run_dir: str | Path) -> int:
    run_dir = Path(run_dir)
    resolved_path = run_dir / "config.resolved"
    if not resolved_path.exists():
        raise ConfigError("--run-dir", "no config.resolved found", str(run_dir))
    raw = yaml.safe_load(resolved_path.read_text(encoding="utf-8"))
    seed = raw["seeds"][0]
    raw.pop("config_hash", None)
    training = raw["training"]
    training["betas"] = list(training["betas"])
    cfg = parse_config(raw, str(resolved_path))
    ds, state = load_model(run_dir / "model.npz", cfg, seed)
    report = {"seed": seed, "method": cfg.method.name, "config_hash": cfg.hash(),
              "val": evaluate(state, ds, "val"), "test": evaluate(state, ds, "test")}
    (run_dir / "eval.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for name, rec in report["test"].items():
        print(f"{name}: " + " ".join(f"{k}={v:.6g}" for k, v in sorted(rec.items())))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bayesagg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", help="train one method over the configured seeds")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None, help="run only this seed")
    t.add_argument("--no-reference", action="store_true",
                   help="skip single-task reference runs (no delta_m; selection by validation loss)")
    c = sub.add_parser("compare", help="train several methods against a shared single-task reference")
    c.add_argument("--config", required=True)
    c.add_argument("--methods", required=True, help="comma-separated, e.g. ls,bayesagg")
    c.add_argument("--seed", type=int, default=None)
    s = sub.add_parser("sweep", help="grid search selected on validation delta_m")
    s.add_argument("--config", required=True)
    s.add_argument("--grid", required=True, help="YAML mapping of dotted config keys to value lists")
    s.add_argument("--seed", type=int, default=None)
    e = sub.add_parser("eval", help="re-evaluate a saved run directory")
    e.add_argument("--run-dir", required=True)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "eval":
            return cmd_eval(args.run_dir)
        cfg = load_config(args.config)
        seeds = [args.seed] if args.seed is not None else cfg.seeds
        if args.command == "train":
            return cmd_train(cfg, seeds, not args.no_reference)
        if args.command == "compare":
            methods = [m.strip().lower() for m in args.methods.split(",") if m.strip()]
            if not methods:
                raise ConfigError("--methods", "no methods given")
            for m in methods:
                cfg.with_overrides({"method.name": m})
            return cmd_compare(cfg, methods, seeds)
        return cmd_sweep(cfg, args.grid, seeds)
    except BayesAggError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
