"""Command-line entry point: ``needleforge <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 data or configuration error,
3 simulation divergence that defeats the requested task.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import dataset, elm, evaluation
from .config import load_config
from .errors import (ConfigError, DataError, MeshError, NeedleForgeError, SimulationDiverged,
                     UsageError)
from .io import atomic_open
from .mesh import build_foam_mesh
from .trajectory import trajectory_set

log = logging.getLogger("needleforge")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit(args, payload, text):
    if args.json:
        print(json.dumps(payload, sort_keys=True))
    else:
        print(text)


def _header(args, cfg):
    if not args.json:
        print(f"config {cfg.hash()} seed {cfg.seed}")


def _config(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _jobs(args):
    return args.jobs if args.jobs else (os.cpu_count() or 1)


def _load_model(path):
    if not Path(path).is_file():
        raise DataError(f"model file not found: {path}")
    return elm.load_model(path)


def cmd_gen_mesh(args):
    cfg = _config(args)
    _header(args, cfg)
    mesh = build_foam_mesh(cfg.scene.foam)
    mesh.save(args.out)
    _emit(args, {"config_hash": cfg.hash(), "seed": cfg.seed, "nodes": mesh.n_nodes,
                 "tets": mesh.n_tets, "out": str(args.out)},
          f"mesh: {mesh.n_nodes} nodes, {mesh.n_tets} tets -> {args.out}")
    return EXIT_OK


def cmd_gen_data(args):
    cfg = _config(args)
    _header(args, cfg)
    trajs = trajectory_set(args.trajectories, cfg.data, cfg.seed, foam=cfg.scene.foam,
                           entry=cfg.scene.entry_point)
    if args.limit:
        trajs = trajs[:args.limit]
    start = time.perf_counter()

    def progress(traj, n, status):
        log.info("trajectory %d: %d samples (%s)", traj.id, n, status)

    ds = dataset.generate(trajs, cfg, budget=args.budget, seed=cfg.seed, jobs=_jobs(args),
                          on_result=progress)
    out = Path(args.out)
    dataset.save_csv(ds, out)
    files = [str(out)]
    if args.split:
        train, test = dataset.split(ds, cfg.data.split_ratio, cfg.seed)
        for part, sub in (("train", train), ("test", test)):
            p = out.with_name(f"{out.stem}_{part}{out.suffix}")
            dataset.save_csv(sub, p)
            files.append(str(p))
    diverged = ds.provenance["diverged"]
    _emit(args, {"config_hash": cfg.hash(), "seed": cfg.seed, "rows": len(ds),
                 "produced": ds.provenance["produced"], "diverged": len(diverged),
                 "files": files, "seconds": time.perf_counter() - start},
          f"{len(ds)} rows ({ds.provenance['produced']} produced, {len(diverged)} diverged runs)"
          f" -> {', '.join(files)}")
    return EXIT_OK


def cmd_train(args):
    cfg = _config(args)
    _header(args, cfg)
    ds = dataset.load_csv(args.data)
    tc = cfg.train
    seed = tc.seed if args.seed is None else args.seed
    hidden = tc.hidden_count if args.hidden is None else args.hidden
    ridge = tc.ridge if args.ridge is None else args.ridge
    model = elm.init_model(type(tc)(ridge=ridge, seed=seed, hidden_count=hidden))
    model = elm.train(model, ds.X, ds.Y, trained_on=ds.content_hash())
    elm.save_model(model, args.out)
    err = elm.rmse(model, ds.X, ds.Y)
    _emit(args, {"config_hash": cfg.hash(), "seed": seed, "rows": len(ds), "train_rmse_mm": err,
                 "out": str(args.out)},
          f"trained on {len(ds)} rows, training RMSE {err:.4f} mm -> {args.out}")
    return EXIT_OK


def cmd_eval_model(args):
    model = _load_model(args.model)
    ds = dataset.load_csv(args.data)
    err = elm.rmse(model, ds.X, ds.Y)
    _emit(args, {"rows": len(ds), "rmse_mm": err}, f"RMSE {err:.4f} mm over {len(ds)} rows")
    return EXIT_OK


def cmd_run(args):
    cfg = _config(args)
    _header(args, cfg)
    model = _load_model(args.model) if args.controller == "elm" else None
    trajs = trajectory_set(args.set, cfg.data, cfg.seed, foam=cfg.scene.foam,
                           entry=cfg.scene.entry_point)
    if not 0 <= args.trajectory < len(trajs):
        raise UsageError(f"trajectory id must lie in [0, {len(trajs) - 1}]")
    traj = trajs[args.trajectory]
    trace = evaluation.run_closed_loop(cfg, traj, evaluation.make_controller(args.controller,
                                                                             cfg, model))
    if args.out:
        with atomic_open(args.out, newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(evaluation.TRACE_COLUMNS)
            w.writerows([[repr(v) for v in row] for row in trace.to_csv_rows().tolist()])
        from .plotting import plot_trace
        plot_trace(trace, Path(args.out).with_suffix(".svg"))
    fe = evaluation.final_error(trace) if trace.rows else float("nan")
    _emit(args, {"config_hash": cfg.hash(), "seed": cfg.seed, "trajectory": traj.id,
                 "controller": args.controller, "status": trace.status,
                 "final_error_mm": fe, "mean_latency_ms": float(np.mean(trace.latencies_ms()))},
          f"{args.set} #{traj.id} {args.controller}: {trace.status}, final error {fe:.4f} mm, "
          f"mean latency {np.mean(trace.latencies_ms()):.3f} ms")
    if trace.diverged:
        log.error("run ended early: %s", trace.message)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_compare(args):
    cfg = _config(args)
    _header(args, cfg)
    model = _load_model(args.model)
    sets = [s.strip() for s in args.sets.split(",") if s.strip()]
    for s in sets:
        if s not in ("straight", "curved"):
            raise UsageError(f"unknown trajectory set {s!r}")

    def progress(r):
        log.info("%s #%d %s: %s %.4f mm", r.set, r.trajectory, r.controller, r.status,
                 r.final_error_mm)

    runs, summary = evaluation.compare_report(cfg, model, sets, args.out, jobs=_jobs(args),
                                              on_result=progress)
    text = evaluation.summary_text({(c["set"], c["controller"]): c for c in summary["cells"]})
    _emit(args, summary, text.rstrip() + f"\nreport -> {args.out}")
    return EXIT_OK


def cmd_bench(args):
    cfg = _config(args)
    _header(args, cfg)
    model = _load_model(args.model)
    res = {}
    for kind in ("inverse", "elm"):
        ctrl = evaluation.make_controller(kind, cfg, model)
        mean, std, _ = evaluation.bench_latency(cfg, ctrl, n_steps=args.steps)
        res[kind] = {"mean_ms": mean, "std_ms": std, "steps": args.steps}
    ratio = res["elm"]["mean_ms"] / res["inverse"]["mean_ms"]
    payload = {"config_hash": cfg.hash(), "seed": cfg.seed, "latency": res, "ratio": ratio,
               "reduction": 1.0 - ratio}
    text = "\n".join(f"{k:<8} {v['mean_ms']:.4f} ± {v['std_ms']:.4f} ms over {v['steps']} steps"
                     for k, v in res.items())
    _emit(args, payload, text + f"\nelm/inverse {ratio:.3f} (reduction {100 * (1 - ratio):.1f}%)")
    return EXIT_OK


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="configuration file (defaults when omitted)")
    common.add_argument("--json", action="store_true", help="print a JSON summary")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="needleforge", description="Needle insertion simulation, data "
                "generation, ELM training and controller comparison.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("gen-mesh", parents=[common], help="build and save the foam mesh")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_mesh)

    s = sub.add_parser("gen-data", parents=[common], help="inverse-controller rollouts to CSV")
    s.add_argument("--trajectories", choices=("straight", "curved"), default="straight")
    s.add_argument("--budget", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--split", action="store_true",
                   help="also write <stem>_train and <stem>_test files")
    s.add_argument("--limit", type=int, help="use only the first N trajectories")
    s.add_argument("--jobs", type=int, default=0, help="worker processes (default: all cores)")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", parents=[common], help="train the ELM on a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--lambda", dest="ridge", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--hidden", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval-model", parents=[common], help="RMSE of a model on a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True)
    s.set_defaults(func=cmd_eval_model)

    s = sub.add_parser("run", parents=[common], help="one closed-loop insertion")
    s.add_argument("--controller", choices=("inverse", "elm"), default="inverse")
    s.add_argument("--model")
    s.add_argument("--set", choices=("straight", "curved"), default="straight")
    s.add_argument("--trajectory", type=int, default=52)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="trace CSV (an SVG plot is written next to it)")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("compare", parents=[common], help="both controllers over trajectory sets")
    s.add_argument("--model", required=True)
    s.add_argument("--sets", default="straight,curved")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default="report")
    s.add_argument("--jobs", type=int, default=0, help="worker processes (default: all cores)")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("bench", parents=[common], help="command latency of both controllers")
    s.add_argument("--model", required=True)
    s.add_argument("--steps", type=int, default=1000)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "run" and args.controller == "elm" and not args.model:
            raise UsageError("run --controller elm needs --model")
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DataError, MeshError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SimulationDiverged as exc:
        print(f"error: simulation diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except NeedleForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
