"""Closed-loop runs, final-error statistics, latency benchmark and reports."""

from __future__ import annotations

import csv
import itertools
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import beam, elm
from .config import Config, SceneConfig
from .errors import UsageError
from .fem import build_tissue_model
from .inverse import InverseController
from .io import atomic_open, atomic_write_json, atomic_write_text
from .mesh import build_foam_mesh
from .simulator import DIVERGED, DONE, OUT_OF_DOMAIN, EffectorCommand, SimScene, build_scene, step
from .trajectory import (Trajectory, perturb_target, straight_grid, target_schedule,
                         trajectory_set)

log = logging.getLogger(__name__)

WARMUP_STEPS = 50
TRACE_COLUMNS = ("t_ms", "effx_mm", "effy_mm", "effz_mm", "tipx_mm", "tipy_mm", "tipz_mm",
                 "tgtx_mm", "tgty_mm", "tgtz_mm", "ex_mm", "ey_mm", "ez_mm", "cmd_ms")


@lru_cache(maxsize=4)
def _models(foam, material, needle):
    mesh = build_foam_mesh(foam)
    return mesh, build_tissue_model(mesh, material), beam.build_needle_model(needle)


def new_scene(scene_cfg: SceneConfig, traj: Trajectory | None = None) -> SimScene:
    """Fresh scene; mesh and models are built once per process and configuration.

    With a trajectory, the needle starts aligned with the path tangent at the
    entry point (the robot pre-orients the needle before inserting).
    """
    if traj is not None:
        axis = tuple(float(v) for v in traj.start_direction())
        scene_cfg = replace(scene_cfg, insertion_axis=axis)
    mesh, tm, nm = _models(scene_cfg.foam, scene_cfg.material, scene_cfg.needle)
    return build_scene(scene_cfg, mesh, tm, nm)


@dataclass
class RunTrace:
    trajectory_id: int
    controller: str
    rows: list = field(default_factory=list)  # see TRACE_COLUMNS, SI units
    commands: list = field(default_factory=list)
    inserting: list = field(default_factory=list)
    status: str = "inserting"
    message: str = ""
    flags: int = 0

    @property
    def table(self):
        return np.array(self.rows).reshape(-1, len(TRACE_COLUMNS))

    @property
    def n_steps(self):
        return len(self.rows)

    @property
    def diverged(self):
        return self.status in (DIVERGED, OUT_OF_DOMAIN)

    def error_norms(self):
        return np.linalg.norm(self.table[:, 10:13], axis=1)

    def latencies_ms(self):
        return self.table[:, 13]

    def to_csv_rows(self):
        """Rows in the trace-file units (ms, mm)."""
        t = self.table
        out = np.empty_like(t)
        out[:, 0] = t[:, 0] * 1e3
        out[:, 1:13] = t[:, 1:13] * 1e3
        out[:, 13] = t[:, 13]
        return out


def run_steps(traj: Trajectory, scene_cfg: SceneConfig):
    """Control steps of a run: the schedule's travel time plus the settle window."""
    travel = traj.length / (scene_cfg.insertion_speed * scene_cfg.dt)
    return math.ceil(travel - 1e-9) + scene_cfg.settle_steps


def run_closed_loop(cfg: Config, traj: Trajectory, controller, noise=0.0, rng=None,
                    scene=None, on_step=None, max_steps=None) -> RunTrace:
    """Drive one trajectory with ``controller(scene, P_target) -> C``.

    The target handed to the controller at time ``t`` is the schedule point at
    ``t + dt`` (where the tip should be after the step), optionally perturbed.
    """
    sc = cfg.scene
    scene = scene if scene is not None else new_scene(sc, traj)
    if noise and rng is None:
        raise UsageError("noisy runs need a random generator")
    if hasattr(controller, "reset"):
        controller.reset()
    trace = RunTrace(traj.id, getattr(controller, "name", "custom"))
    entry = np.asarray(sc.entry_point, dtype=float)
    n_steps = run_steps(traj, sc) if max_steps is None else min(max_steps, run_steps(traj, sc))
    for k in range(n_steps):
        t = k * sc.dt
        target = target_schedule(traj, t + sc.dt, sc.insertion_speed)
        if noise:
            target = perturb_target(target, rng, noise)
        eff = scene.effector_position()
        tip = scene.needle_tip()
        tic = time.perf_counter()
        C = np.asarray(controller(scene, target), dtype=float)
        latency = (time.perf_counter() - tic) * 1e3
        trace.rows.append(np.concatenate([[t], eff, tip, target, target - tip, [latency]]))
        trace.commands.append(C)
        trace.inserting.append(scene.status == "inserting")
        if not np.all(np.isfinite(C)):
            trace.status, trace.message = DIVERGED, "non-finite command"
            break
        step(scene, EffectorCommand(C, entry))
        if on_step is not None:
            on_step(scene)
        if scene.status in (DIVERGED, OUT_OF_DOMAIN):
            trace.status, trace.message = scene.status, scene.message
            log.warning("trajectory %d (%s): %s at t=%.2f s: %s", traj.id, trace.controller,
                        scene.status, scene.time, scene.message)
            break
    else:
        trace.status = DONE if n_steps == run_steps(traj, sc) else trace.status
    trace.flags = getattr(controller, "flags", 0)
    return trace


def final_error(trace: RunTrace):
    """Norm of the last recorded tip-to-target error, in mm."""
    if not trace.rows:
        raise UsageError("empty trace")
    return float(np.linalg.norm(trace.rows[-1][10:13]) * 1e3)


def aggregate(values):
    """Mean and sample standard deviation (nan when undefined)."""
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return float("nan"), float("nan")
    std = float(np.std(v, ddof=1)) if len(v) > 1 else 0.0
    return float(np.mean(v)), std


class ElmController:
    """Learned controller: displacement ``C = f([E_ff, e])`` with the model working in mm.

    Returns the absolute goal ``E_ff + C`` expected by the simulator.
    """

    name = "elm"

    def __init__(self, model):
        self.model = model
        self.flags = 0

    def __call__(self, scene, P_target):
        eff = scene.effector_position()
        e = np.asarray(P_target, dtype=float) - scene.needle_tip()
        return eff + elm.predict(self.model, np.concatenate([eff, e]) * 1e3) * 1e-3


def make_controller(kind, cfg: Config, model=None):
    if kind == "inverse":
        return InverseController(cfg.gains)
    if kind == "elm":
        if model is None:
            raise UsageError("the elm controller needs a trained model")
        return ElmController(model)
    raise UsageError(f"unknown controller {kind!r}")


def bench_latency(cfg: Config, controller, n_steps=1000, trajectories=None, warmup=WARMUP_STEPS):
    """Per-step command latency in ms over ``n_steps`` measured steps.

    Runs closed-loop insertions (central straight path first) and discards the
    first ``warmup`` steps.  Returns ``(mean, std, samples)``.
    """
    if n_steps < 1:
        raise UsageError("bench needs at least one measured step after warmup")
    if trajectories is None:
        grid = straight_grid(*cfg.data.grid, extent=cfg.data.extent, depth=cfg.data.depth,
                             entry=cfg.scene.entry_point, foam=cfg.scene.foam)
        trajectories = sorted(grid, key=lambda t: np.linalg.norm(np.subtract(t.endpoint, t.entry)
                                                                  * [1, 1, 0]))
    need = n_steps + warmup
    lat = []
    for traj in itertools.cycle(trajectories):
        trace = run_closed_loop(cfg, traj, controller, max_steps=need - len(lat))
        lat.extend(trace.latencies_ms().tolist() if trace.rows else [])
        if len(lat) >= need:
            break
        if not trace.rows:
            raise UsageError("benchmark runs produce no steps")
    samples = np.array(lat[warmup:need])
    return float(samples.mean()), float(samples.std(ddof=1)) if len(samples) > 1 else 0.0, samples


RUN_COLUMNS = ("set", "trajectory", "controller", "status", "final_error_mm", "n_steps")
LATENCY_COLUMNS = ("set", "trajectory", "controller", "mean_latency_ms")


@dataclass
class RunSummary:
    set: str
    trajectory: int
    controller: str
    status: str
    final_error_mm: float
    n_steps: int
    mean_latency_ms: float
    depth_mm: np.ndarray = None
    error_mm: np.ndarray = None


def summarize(set_name, trace: RunTrace, keep_curve=False):
    fe = final_error(trace) if trace.rows else float("nan")
    run = RunSummary(set_name, trace.trajectory_id, trace.controller, trace.status, fe,
                     trace.n_steps, float(np.mean(trace.latencies_ms())) if trace.rows else 0.0)
    if keep_curve and trace.rows:
        t = trace.table
        run.depth_mm = t[:, 6] * 1e3
        run.error_mm = np.linalg.norm(t[:, 10:13], axis=1) * 1e3
    return run


def _compare_job(args):
    cfg, set_name, traj, kind, model_doc, keep_curve = args
    model = elm.from_dict(model_doc) if model_doc is not None else None
    trace = run_closed_loop(cfg, traj, make_controller(kind, cfg, model))
    return summarize(set_name, trace, keep_curve)


def run_batch(cfg: Config, jobs_spec, jobs=1, on_result=None):
    """Run ``(set, trajectory, controller kind, model, keep_curve)`` tuples; order preserved."""
    work = [(cfg, s, t, k, elm.to_dict(m) if m is not None else None, keep)
            for s, t, k, m, keep in jobs_spec]
    out = []
    if jobs <= 1:
        results = map(_compare_job, work)
        pool = None
    else:
        pool = ProcessPoolExecutor(max_workers=jobs)
        results = pool.map(_compare_job, work)
    try:
        for r in results:
            out.append(r)
            if on_result is not None:
                on_result(r)
    finally:
        if pool is not None:
            pool.shutdown()
    return out


def aggregate_runs(runs):
    """Cells keyed by (set, controller): final-error mean/std over completed runs."""
    cells = {}
    for key in sorted({(r.set, r.controller) for r in runs}):
        group = [r for r in runs if (r.set, r.controller) == key]
        ok = [r.final_error_mm for r in group if r.status == DONE]
        mean, std = aggregate(ok)
        cells[key] = {"set": key[0], "controller": key[1], "runs": len(group),
                      "completed": len(ok), "diverged": len(group) - len(ok),
                      "final_error_mean_mm": mean, "final_error_std_mm": std}
    return cells


def _fmt(v):
    return repr(float(v))


def write_report(runs, out_dir, cfg: Config, plot_ids=None):
    """Write runs.csv, latency.csv, summary.json, summary.txt and SVG plots.

    Everything except latency.csv is a pure function of the simulation results.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with atomic_open(out / "runs.csv", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RUN_COLUMNS)
        for r in runs:
            w.writerow([r.set, r.trajectory, r.controller, r.status, _fmt(r.final_error_mm),
                        r.n_steps])
    with atomic_open(out / "latency.csv", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LATENCY_COLUMNS)
        for r in runs:
            w.writerow([r.set, r.trajectory, r.controller, f"{r.mean_latency_ms:.6f}"])
    cells = aggregate_runs(runs)
    summary = {"config_hash": cfg.hash(), "seed": cfg.seed,
               "cells": [cells[k] for k in sorted(cells)]}
    atomic_write_json(out / "summary.json", summary)
    atomic_write_text(out / "summary.txt", summary_text(cells))
    plots = []
    for r in runs:
        if r.error_mm is not None and (plot_ids is None or r.trajectory in plot_ids):
            plots.append(r)
    if plots:
        from .plotting import plot_error_vs_depth
        for set_name in sorted({r.set for r in plots}):
            sel = [r for r in plots if r.set == set_name]
            plot_error_vs_depth(sel, out / f"error_vs_depth_{set_name}.svg",
                                title=f"{set_name} trajectories")
    return summary


def summary_text(cells):
    lines = ["final tip-to-target error (mean ± std over completed runs, mm)"]
    for key in sorted(cells):
        c = cells[key]
        lines.append(f"  {c['set']:<9} {c['controller']:<8} {c['final_error_mean_mm']:.4f} ± "
                     f"{c['final_error_std_mm']:.4f}  (runs {c['runs']}, diverged {c['diverged']})")
    return "\n".join(lines) + "\n"


def compare_report(cfg: Config, model, sets=("straight", "curved"), out_dir="report", jobs=1,
                   plot_count=3, on_result=None):
    """Both controllers over every trajectory of each set, then the report files."""
    spec, plot_ids = [], set()
    for set_name in sets:
        trajs = trajectory_set(set_name, cfg.data, cfg.seed, foam=cfg.scene.foam,
                               entry=cfg.scene.entry_point)
        keep = {t.id for t in trajs[:plot_count]}
        plot_ids |= keep
        for kind in ("inverse", "elm"):
            spec += [(set_name, t, kind, model if kind == "elm" else None, t.id in keep)
                     for t in trajs]
    runs = run_batch(cfg, spec, jobs=jobs, on_result=on_result)
    summary = write_report(runs, out_dir, cfg, plot_ids=plot_ids)
    return runs, summary
