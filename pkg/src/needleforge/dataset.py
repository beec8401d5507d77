"""Training data from noisy inverse-controller rollouts: (E_ff, e) -> C samples.

``C`` is the effector displacement the robot executes for the step: the
controller's goal relative to ``E_ff``, shortened to the per-step reach
``effector_speed * dt`` exactly as the simulator moves the base.

Values are stored in millimetres.  Every trajectory draws its target noise
from its own stream ``SeedSequence([seed, trajectory_id])`` so the result does
not depend on how runs are distributed over worker processes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config
from .errors import DataError, UsageError
from .evaluation import run_closed_loop
from .inverse import InverseController
from .io import atomic_open, atomic_write_json
from .simulator import executed_translation
from .trajectory import Trajectory

log = logging.getLogger(__name__)

COLUMNS = ("effx_mm", "effy_mm", "effz_mm", "ex_mm", "ey_mm", "ez_mm", "cx_mm", "cy_mm", "cz_mm")
SUBSAMPLE_STREAM = 2
SPLIT_STREAM = 3


@dataclass
class Dataset:
    data: np.ndarray  # (N, 9) in COLUMNS order
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float).reshape(-1, len(COLUMNS))

    def __len__(self):
        return len(self.data)

    @property
    def X(self):
        return self.data[:, :6]

    @property
    def Y(self):
        return self.data[:, 6:]

    def content_hash(self):
        return hashlib.sha256(np.ascontiguousarray(self.data, dtype="<f8").tobytes()).hexdigest()[:16]


def noise_rng(seed, trajectory_id):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(trajectory_id)]))


def rollout(cfg: Config, traj: Trajectory, seed, noise=None):
    """One noisy inverse-controller run; returns ``(samples in mm, status, message)``.

    A sample is recorded for every control step taken while inserting.
    """
    noise = cfg.data.noise if noise is None else noise
    trace = run_closed_loop(cfg, traj, InverseController(cfg.gains), noise=noise,
                            rng=noise_rng(seed, traj.id))
    if not trace.rows:
        return np.zeros((0, len(COLUMNS))), trace.status, trace.message
    t = trace.table
    eff = t[:, 1:4]
    reach = cfg.scene.effector_speed * cfg.scene.dt
    C = np.array([executed_translation(p, c, reach) for p, c in zip(eff, trace.commands)])
    rows = np.column_stack([eff, t[:, 10:13], C]) * 1e3
    mask = np.array(trace.inserting, dtype=bool)
    if trace.diverged:
        log.warning("data rollout of trajectory %d %s: %s (partial samples kept)",
                    traj.id, trace.status, trace.message)
    return rows[mask], trace.status, trace.message


def _rollout_job(args):
    return rollout(*args)


def generate(trajectories, cfg: Config, budget=None, seed=None, jobs=1, on_result=None):
    """Roll out every trajectory and subsample to exactly ``budget`` rows.

    ``on_result(trajectory, n_samples, status)`` is called in trajectory order.
    """
    budget = cfg.data.budget if budget is None else int(budget)
    seed = cfg.seed if seed is None else int(seed)
    if budget < 1:
        raise UsageError("sample budget must be >= 1")
    jobs = max(1, int(jobs))
    work = [(cfg, traj, seed) for traj in trajectories]
    parts, diverged = [], []
    if jobs == 1:
        results = map(_rollout_job, work)
        pool = None
    else:
        pool = ProcessPoolExecutor(max_workers=jobs)
        results = pool.map(_rollout_job, work)
    try:
        for traj, (rows, status, message) in zip(trajectories, results):
            parts.append(rows)
            if status in ("diverged", "out-of-domain"):
                diverged.append({"trajectory": traj.id, "status": status, "message": message})
            if on_result is not None:
                on_result(traj, len(rows), status)
    finally:
        if pool is not None:
            pool.shutdown()
    data = np.concatenate(parts) if parts else np.zeros((0, len(COLUMNS)))
    produced = len(data)
    if produced > budget:
        rng = np.random.default_rng([seed, SUBSAMPLE_STREAM])
        data = data[np.sort(rng.choice(produced, size=budget, replace=False))]
    elif produced < budget:
        log.warning("only %d samples produced for a budget of %d", produced, budget)
    prov = {
        "trajectory_ids": [t.id for t in trajectories],
        "trajectory_kind": sorted({t.kind for t in trajectories}),
        "seed": seed, "noise_mm": cfg.data.noise * 1e3, "config_hash": cfg.hash(),
        "produced": produced, "budget": budget, "rows": len(data), "diverged": diverged,
    }
    return Dataset(data, prov)


def split(ds: Dataset, ratio=0.9, seed=0):
    """Seeded shuffle; the first ``floor(ratio N)`` rows train, the rest test."""
    if not 0 < ratio < 1:
        raise UsageError("split ratio must lie in (0, 1)")
    n = len(ds)
    if n < 2:
        raise DataError("need at least 2 samples to split")
    perm = np.random.default_rng([int(seed), SPLIT_STREAM]).permutation(n)
    n_train = math.floor(ratio * n)
    parent = ds.content_hash()
    out = []
    for part, idx in (("train", perm[:n_train]), ("test", perm[n_train:])):
        prov = dict(ds.provenance, rows=len(idx),
                    split={"part": part, "ratio": ratio, "seed": int(seed), "parent": parent})
        out.append(Dataset(ds.data[idx], prov))
    return out[0], out[1]


def meta_path(path):
    p = Path(path)
    return p.with_name(p.name + ".meta.json")


def save_csv(ds: Dataset, path):
    with atomic_open(path, newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        # repr gives the shortest string that round-trips the float exactly
        w.writerows([[repr(v) for v in row] for row in ds.data.tolist()])
    meta = dict(ds.provenance, rows=len(ds), columns=list(COLUMNS), content_hash=ds.content_hash())
    atomic_write_json(meta_path(path), meta)


def load_csv(path) -> Dataset:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"dataset file not found: {p}")
    with open(p, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != COLUMNS:
            raise DataError(f"{p}: bad header; expected {','.join(COLUMNS)}, "
                            f"found {','.join(header or [])}")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            try:
                vals = [float(v) for v in row]
            except ValueError:
                raise DataError(f"{p}: line {line_no}: non-numeric value") from None
            if len(vals) != len(COLUMNS) or not all(math.isfinite(v) for v in vals):
                raise DataError(f"{p}: line {line_no}: expected {len(COLUMNS)} finite values")
            rows.append(vals)
    prov = {}
    mp = meta_path(p)
    if mp.is_file():
        try:
            prov = json.loads(mp.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"{mp}: invalid JSON ({exc})") from None
        if prov.get("rows", len(rows)) != len(rows):
            raise DataError(f"{p}: {len(rows)} rows but provenance records {prov['rows']}")
    ds = Dataset(np.array(rows, dtype=float).reshape(-1, len(COLUMNS)), prov)
    return ds
