"""``ssmreduce`` command line: train, reduce, analyze, bench, eval, baseline-match.

Exit status: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import apply_overrides, load_config, load_document, to_document, to_train_config
from .exceptions import ConfigError, FormatError, SSMReduceError
from .io import is_checkpoint, load_checkpoint, load_system, read_manifest, save_checkpoint, save_system
from .lti import gramian_diagonal
from .reduction import reduce_system
from .ssm import extract_system, write_back
from .tasks import make_task
from .tracking import TrajectoryLog, hankel_operator, write_tracking_csv
from .train import (TrainingFailure, baseline_config, build_model, evaluate, scan_flops, step_time_ms,
                    train_run)

log = logging.getLogger("ssmreduce")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad invocation detected after argument parsing."""


def _dump(obj, path):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _single_thread(enabled):
    if not enabled:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=1)


def _config_from_args(args):
    return load_config(args.config, args.set, args.seed, args.paper_scale)


# --------------------------------------------------------------------------
# train


def cmd_train(args):
    cfg = _config_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump(to_document(cfg), out / "config.json")
    try:
        rec = train_run(cfg, out)
    except TrainingFailure as exc:
        log.error("%s", exc)
        if exc.checkpoint:
            print(f"post-mortem checkpoint: {exc.checkpoint}", file=sys.stderr)
        return EXIT_RUNTIME
    s = rec.summary()
    print(f"final orders {s['final_orders']} (mean {s['final_mean_order']:.2f}), "
          f"{s['executed_reductions']} reductions, {s['metric']}={s['final_eval'].get(s['metric'])}")
    return EXIT_OK


# --------------------------------------------------------------------------
# reduce


def cmd_reduce(args):
    src = Path(args.checkpoint)
    out = Path(args.out)
    try:
        manifest = read_manifest(src)
    except FormatError as exc:
        raise UsageError(str(exc)) from exc
    if manifest.get("kind") in ("dense_system", "diagonal_system"):
        sys_ = load_system(src)
        res = reduce_system(sys_, args.tau, args.frac_gate)
        save_system(res.system, out)
        _dump(res.as_event(tau=args.tau), out / "reduction_event.json")
        print(f"order {res.n_before} -> {res.system.n}, bound {res.error_bound:.3e}")
        return EXIT_OK
    model, manifest = load_checkpoint(src)
    events = []
    for i, block in enumerate(model.blocks):
        res = reduce_system(extract_system(block), args.tau, args.frac_gate, diagonal=True)
        if res.executed:
            model.blocks[i] = write_back(block, res.system)
        events.append(res.as_event(block=i, tau=args.tau))
    save_checkpoint(model, out, step=manifest.get("step", 0), seed=manifest.get("seed", 0),
                    policy={"tau": args.tau, "frac_gate": args.frac_gate, "offline": True},
                    extra=manifest.get("extra"))
    _dump({"source": str(src), "blocks": events}, out / "reduction_event.json")
    print(f"orders {[e['n_before'] for e in events]} -> {model.orders}")
    return EXIT_OK


# --------------------------------------------------------------------------
# analyze


def _snapshot_dirs(paths):
    dirs = []
    for p in map(Path, paths):
        if is_checkpoint(p):
            dirs.append(p)
        elif p.is_dir():
            found = [c for c in sorted(p.iterdir()) if c.is_dir() and is_checkpoint(c)]
            if not found:
                raise UsageError(f"{p} holds no checkpoints")
            dirs.extend(found)
        else:
            raise UsageError(f"not a checkpoint directory: {p}")
    return dirs


def _load_events(path):
    if path is None:
        return []
    with open(path) as f:
        data = json.load(f)
    return data if isinstance(data, list) else data.get("blocks", [])


def analyze_snapshots(dirs, events=(), tracked_r=(1, 2)):
    """Tracking logs for a sequence of checkpoints (sorted by step)."""
    snaps = []
    for d in dirs:
        model, m = load_checkpoint(d)
        snaps.append((int(m.get("step", 0)), str(d), model))
    snaps.sort(key=lambda t: t[0])
    if len(snaps) < 2:
        raise UsageError("analyze needs at least two snapshots")
    depth = len(snaps[0][2].blocks)
    logs = [TrajectoryLog(block=i, tracked_r=tuple(tracked_r)) for i in range(depth)]
    executed = [(e["step"], e.get("block", 0)) for e in events if e.get("executed")]
    prev_step, prev_orders = None, None
    for step, path, model in snaps:
        if len(model.blocks) != depth:
            raise UsageError(f"{path}: depth {len(model.blocks)} differs from {depth}")
        for i, block in enumerate(model.blocks):
            if prev_orders is not None and block.n != prev_orders[i]:
                if not any(b == i and prev_step < s <= step for s, b in executed):
                    raise UsageError(f"{path}: block {i} order changed {prev_orders[i]} -> {block.n} "
                                     "without a recorded reduction event")
                logs[i].restart()
            logs[i].append(hankel_operator(gramian_diagonal(extract_system(block)), step))
        prev_step, prev_orders = step, model.orders
    return logs


def cmd_analyze(args):
    dirs = _snapshot_dirs(args.checkpoints)
    events_path = args.events
    if events_path is None:
        guess = [Path(p).parent / "reduction_events.json" for p in args.checkpoints]
        guess += [Path(p) / "reduction_events.json" for p in args.checkpoints]
        events_path = next((g for g in guess if g.is_file()), None)
    logs = analyze_snapshots(dirs, _load_events(events_path), args.tracked_r)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tracking_csv(logs, out / "tracking.csv")
    summary = []
    for lg in logs:
        bounds = [r.weyl_bound for r in lg.records if r.weyl_bound is not None]
        summary.append({
            "block": lg.block,
            "snapshots": len(lg.records),
            "max_weyl_bound": max(bounds) if bounds else None,
            "violations": int(sum(r.violations for r in lg.records)),
            "isolated_fraction": (float(np.mean([bool(r.isolated) for r in lg.records if r.isolated is not None]))
                                  if bounds else None),
            "bottom2_stability": lg.bottom_identity_stability(2, 0.1),
        })
    _dump({"snapshots": len(dirs), "blocks": summary}, out / "analysis.json")
    for s in summary:
        print(f"block {s['block']}: bottom-2 identity stable in {s['bottom2_stability']:.3f} of pairs")
    return EXIT_OK


# --------------------------------------------------------------------------
# bench


def cmd_bench(args):
    cfg = _config_from_args(args)
    ladder = [int(v) for v in args.ladder.split(",")]
    data = make_task(cfg.task, seed=cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    L = data.featurize(data.train_x[:1]).shape[1]
    for n in ladder:
        model = build_model(replace(cfg, n=n), data, np.random.default_rng(cfg.seed))
        t = step_time_ms(model, data, cfg.batch, steps=args.steps, mode=cfg.scan_mode, seed=cfg.seed)
        rows.append({"n": n, "median_ms": float(np.median(t)), "p10": float(np.percentile(t, 10)),
                     "p90": float(np.percentile(t, 90)),
                     "scan_flops": scan_flops(n, cfg.H, L, cfg.batch, cfg.depth)})
        log.info("n=%d median %.3f ms", n, rows[-1]["median_ms"])
    with open(out / "bench.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["n", "median_ms", "p10", "p90"])
        for r in rows:
            w.writerow([r["n"], r["median_ms"], r["p10"], r["p90"]])
    _dump({"H": cfg.H, "L": L, "batch": cfg.batch, "depth": cfg.depth, "steps": args.steps, "rows": rows},
          out / "bench.json")
    for r in rows:
        print(f"n={r['n']:5d}  median {r['median_ms']:.3f} ms  flops {r['scan_flops']}")
    return EXIT_OK


# --------------------------------------------------------------------------
# eval


def cmd_eval(args):
    model, m = load_checkpoint(args.checkpoint)
    if args.config:
        task = to_train_config(apply_overrides(load_document(args.config), args.set)).task
    else:
        task = (m.get("extra") or {}).get("task")
        if task is None:
            raise UsageError("checkpoint records no task; pass --config")
    data = make_task(task, seed=m.get("seed", 0))
    res = evaluate(model, data)
    res = {k: float(v) for k, v in res.items()}
    res.update({"orders": model.orders, "step": m.get("step"), "checkpoint": str(args.checkpoint)})
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _dump(res, out / "eval.json")
    print(json.dumps(res, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------
# baseline-match


def cmd_baseline_match(args):
    run = Path(args.run)
    try:
        with open(run / "summary.json") as f:
            summary = json.load(f)
    except FileNotFoundError as exc:
        raise UsageError(f"{run} has no summary.json") from exc
    doc = load_document(args.config if args.config else run / "config.json")
    doc = apply_overrides(doc, args.set)
    if args.seed is not None:
        doc["seed"] = int(args.seed)
    cfg = baseline_config(to_train_config(doc), summary["final_mean_order"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump(to_document(cfg), out / "config.json")
    try:
        rec = train_run(cfg, out)
    except TrainingFailure as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME
    base = rec.summary()
    _dump({"reduced_run": str(run), "matched_order": cfg.n, "reduced": summary, "baseline": base},
          out / "comparison.json")
    metric = base["metric"]
    print(f"matched order {cfg.n}: reduced {metric} {summary['final_eval'].get(metric)} vs "
          f"baseline {base['final_eval'].get(metric)}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _config_flags(p):
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. policy.tau=0 (repeatable)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--paper-scale", action="store_true", help="use the original-scale hyperparameters")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0)
    common.add_argument("--single-thread", action="store_true",
                        help="limit BLAS to one thread for bitwise reproducibility")

    parser = argparse.ArgumentParser(prog="ssmreduce", description=__doc__.splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train with in-training reduction")
    _config_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reduce", parents=[common], help="one-shot reduction of a checkpoint or system")
    p.add_argument("--checkpoint", required=True, help="checkpoint or system directory")
    p.add_argument("--tau", type=float, required=True)
    p.add_argument("--frac-gate", type=float, default=0.95)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reduce)

    p = sub.add_parser("analyze", parents=[common], help="HSV tracking over a sequence of checkpoints")
    p.add_argument("checkpoints", nargs="+", help="checkpoint directories or directories holding them")
    p.add_argument("--events", default=None, help="reduction_events.json of the run")
    p.add_argument("--tracked-r", type=lambda s: tuple(int(v) for v in s.split(",")), default=(1, 2))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("bench", parents=[common], help="per-step time over a ladder of state sizes")
    _config_flags(p)
    p.add_argument("--ladder", default="32,64,128,256")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on its task's test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=[])
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline-match", parents=[common],
                       help="train an unreduced model at a finished run's mean final order")
    p.add_argument("--run", required=True, help="output directory of a train run")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=[])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline_match)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        with _single_thread(args.single_thread):
            return args.func(args)
    except (ConfigError, UsageError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (SSMReduceError, ArithmeticError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
