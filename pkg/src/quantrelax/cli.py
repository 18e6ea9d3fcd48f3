"""Command-line harness: ``run``, ``compare``, ``quantize`` and ``verify``.

Exit codes: 0 success, 1 validation error, 2 runtime failure, 3 property
failure. ``QUANTRELAX_OUT`` sets the default output directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import re
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, apply_overrides, execute, load_config, run_quiet
from .objectives import DatasetError
from .optimizers import Optimizer, TrainingError, derive_seed
from .quantizer import (OracleSizeError, QuantScheme, QuantizerError, SchemeError, Solver,
                        brute_force_quantize, dist_to_q, project)
from . import verify

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_PROPERTY = 0, 1, 2, 3

log = logging.getLogger("quantrelax")


def _default_out() -> str:
    return os.environ.get("QUANTRELAX_OUT", "runs")


def _load(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"seed={args.seed}")
    return apply_overrides(cfg, overrides) if overrides else cfg


def _validation_failed(exc: Exception) -> int:
    errors = exc.errors if isinstance(exc, ConfigError) else [str(exc)]
    for e in errors:
        print(f"error: {e}", file=sys.stderr)
    return EXIT_VALIDATION


def cmd_run(args) -> int:
    try:
        cfg = _load(args)
        for w in cfg.validate():
            print(f"warning: {w}", file=sys.stderr)
    except (ConfigError, DatasetError, ValueError) as exc:
        return _validation_failed(exc)
    out = Path(args.out or cfg.out or _default_out())
    try:
        summary = execute(cfg, out, overrides=args.set)
    except ValueError as exc:
        return _validation_failed(exc)
    except TrainingError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"wrote {out / 'metrics.csv'} and {out / 'summary.json'}")
    print(f"final val_acc={summary['final_val_acc']} train_loss={summary['final_train_loss']} "
          f"dist_to_q={summary['final_dist_to_q']}")
    return EXIT_OK


def _parse_list(text: str) -> list[str]:
    return [t for t in re.split(r"[,\s]+", text.strip()) if t]


def compare_runs(cfg: RunConfig, optimizers: list[str], seeds: list[int],
                 jobs: int = 1) -> list[dict]:
    """Run every (optimizer, seed) pair; rows keep that order whatever ``jobs`` is."""
    pairs = [(opt, seed) for opt in optimizers for seed in seeds]

    def one(pair):
        opt, seed = pair
        run_cfg = apply_overrides(cfg, [f"optimizer={json.dumps(opt)}", f"seed={seed}"])
        try:
            result = run_quiet(run_cfg)
        except (TrainingError, ValueError) as exc:
            return {"optimizer": opt, "seed": seed, "status": f"failed: {exc}",
                    "val_acc": math.nan, "train_loss": math.nan}
        return {"optimizer": opt, "seed": seed, "status": "ok",
                "val_acc": result.final.val_acc, "train_loss": result.final.train_loss}

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, pairs))
    return [one(p) for p in pairs]


COMPARE_COLUMNS = ("optimizer", "seed", "status", "val_acc", "train_loss",
                   "val_acc_std", "train_loss_std")


def write_comparison(rows: list[dict], optimizers: list[str], path) -> None:
    from .config import format_value

    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARE_COLUMNS)
        for r in rows:
            w.writerow([r["optimizer"], r["seed"], r["status"], format_value(r["val_acc"]),
                        format_value(r["train_loss"]), "", ""])
        for opt in optimizers:
            ok = [r for r in rows if r["optimizer"] == opt and r["status"] == "ok"]
            acc = np.array([r["val_acc"] for r in ok])
            loss = np.array([r["train_loss"] for r in ok])
            if ok:
                stats = [acc.mean(), loss.mean(), acc.std(), loss.std()]
            else:
                stats = [math.nan] * 4
            w.writerow([opt, "mean", f"{len(ok)}/{sum(r['optimizer'] == opt for r in rows)} ok",
                        format_value(stats[0]), format_value(stats[1]),
                        format_value(stats[2]), format_value(stats[3])])


def cmd_compare(args) -> int:
    try:
        cfg = _load(args)
        optimizers = _parse_list(args.optimizers)
        for o in optimizers:
            Optimizer(o)
        if args.seeds:
            seeds = [int(s) for s in _parse_list(args.seeds)]
        else:
            master = cfg.seed
            seeds = [derive_seed(master, 100 + i) for i in range(args.num_seeds)]
        if not optimizers or not seeds:
            raise ConfigError(["need at least one optimizer and one seed"])
        for opt in optimizers:
            apply_overrides(cfg, [f"optimizer={json.dumps(opt)}"]).validate()
    except (ConfigError, ValueError) as exc:
        return _validation_failed(exc)
    out = Path(args.out or cfg.out or _default_out())
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    rows = compare_runs(cfg, optimizers, seeds, jobs=args.jobs)
    path = out / "comparison.csv"
    write_comparison(rows, optimizers, path)
    failed = [r for r in rows if r["status"] != "ok"]
    print(f"wrote {path} ({len(rows)} runs in {time.perf_counter() - start:.1f}s)")
    for opt in optimizers:
        accs = [r["val_acc"] for r in rows if r["optimizer"] == opt and r["status"] == "ok"]
        if accs:
            print(f"  {opt:14s} val_acc mean={np.mean(accs):.4f} std={np.std(accs):.4f}")
    if failed:
        print(f"{len(failed)} run(s) failed", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


SCHEMES = {
    "binary": (Solver.BINARY_EXACT, (1.0,)),
    "ternary": (Solver.TERNARY_EXACT, (0.0, 1.0)),
    "twn": (Solver.TERNARY_THRESHOLD, (0.0, 1.0)),
    "lloyd": (Solver.LLOYD, None),
}


def read_vector(path) -> np.ndarray:
    text = Path(path).read_text() if path != "-" else sys.stdin.read()
    tokens = [t for t in re.split(r"[,\s]+", text) if t]
    if not tokens:
        raise QuantizerError(f"{path}: no numbers found")
    values = []
    for i, tok in enumerate(tokens, start=1):
        try:
            values.append(float(tok))
        except ValueError:
            raise QuantizerError(f"{path}: value {i} ({tok!r}) is not a number") from None
    return np.array(values)


def cmd_quantize(args) -> int:
    try:
        y = read_vector(args.file)
        solver, levels = SCHEMES[args.scheme]
        if args.levels:
            levels = tuple(float(v) for v in _parse_list(args.levels))
        if levels is None:
            raise SchemeError("--levels is required for the lloyd scheme")
        scheme = QuantScheme(levels, solver, args.max_iters)
        q = project(y, scheme)
    except (QuantizerError, SchemeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    residual = q.residual(y)
    print(f"n={y.size} scheme={args.scheme} solver={scheme.solver.value}")
    print(f"s={format(q.scale, '.17g')}")
    values, counts = np.unique(q.codes, return_counts=True)
    print("codes: " + " ".join(f"{v:g}:{c}" for v, c in zip(values, counts)))
    print(f"residual={format(residual, '.17g')} residual_sq={format(residual**2, '.17g')}")
    bound = "" if scheme.exact else " (upper bound)"
    print(f"dist_to_q={format(dist_to_q(y, scheme), '.17g')}{bound}")
    if args.codes:
        print("code_vector: " + " ".join(f"{v:g}" for v in q.codes))
    if args.oracle:
        try:
            ref = brute_force_quantize(y, levels)
        except OracleSizeError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_VALIDATION
        a, b = residual**2, ref.residual(y) ** 2
        if abs(a - b) <= 1e-10 * max(b, 1e-300) or (not scheme.exact and a >= b):
            verdict = "MATCH" if abs(a - b) <= 1e-10 * max(b, 1e-300) else "SUBOPTIMAL"
            print(f"oracle: {verdict} (brute force residual_sq={format(b, '.17g')})")
        else:
            print(f"oracle: MISMATCH (brute force residual_sq={format(b, '.17g')})")
            return EXIT_PROPERTY
    return EXIT_OK


def cmd_verify(args) -> int:
    start = time.perf_counter()
    results = list(verify.run_checks(args.filter, args.inject_fault or ()))
    if not results:
        print(f"no checks match filter {args.filter!r}", file=sys.stderr)
        return EXIT_VALIDATION
    failed = []
    for c, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {c.name} [{c.module}]: {detail}")
        if not ok:
            failed.append(c.name)
    print(f"{len(results) - len(failed)}/{len(results)} passed in {time.perf_counter() - start:.1f}s")
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_PROPERTY
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="quantrelax",
                                     description="Relaxed quantized training experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p):
        p.add_argument("--config", help="JSON run config (defaults apply when omitted)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field, e.g. relax.rho=1.02 (repeatable)")
        p.add_argument("--out", help="output directory (default: $QUANTRELAX_OUT or ./runs)")
        p.add_argument("--seed", type=int, help="master seed")

    p = sub.add_parser("run", help="train once and write metrics.csv + summary.json")
    config_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="optimizer x seed comparison table")
    config_args(p)
    p.add_argument("--optimizers", default="binaryconnect,binaryrelax")
    p.add_argument("--seeds", help="explicit comma-separated seeds")
    p.add_argument("--num-seeds", type=int, default=10,
                   help="seeds derived from the master seed when --seeds is absent")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("quantize", help="quantize a vector read from a file ('-' for stdin)")
    p.add_argument("file")
    p.add_argument("--scheme", choices=sorted(SCHEMES), default="ternary")
    p.add_argument("--levels", help="levels for lloyd, e.g. 1,2,3")
    p.add_argument("--max-iters", type=int, default=1)
    p.add_argument("--codes", action="store_true", help="print the full code vector")
    p.add_argument("--oracle", action="store_true", help="cross-check against brute force")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("verify", help="run the fast property checks")
    p.add_argument("--filter", help="check name or module (quantizer, relaxation, ...)")
    p.add_argument("--inject-fault", action="append", choices=["prox"], help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
