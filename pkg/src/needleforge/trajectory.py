"""Insertion trajectories: straight grid, sinusoidal overlays, moving targets."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import DataConfig, FoamSpec
from .errors import ConfigError

log = logging.getLogger(__name__)

_TABLE = 4097
CURVED_STREAM = 1
MARGIN = 0.005  # clearance kept between a path and the foam side walls


@dataclass(frozen=True)
class Trajectory:
    id: int
    kind: str  # "straight" or "curved"
    entry: tuple
    endpoint: tuple
    depth: float
    amplitude: float = 0.0
    phase_x: float = 0.0
    phase_y: float = 0.0
    base_id: int = -1

    def points(self, s):
        """Path points at arc-depth ``s`` (distance travelled along the axis)."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        entry, end = np.asarray(self.entry), np.asarray(self.endpoint)
        frac = s / self.depth if self.depth > 0 else np.zeros_like(s)
        p = entry + frac[:, None] * (end - entry)
        if self.amplitude:
            w = 2 * np.pi * frac
            p[:, 0] += self.amplitude * (np.sin(w + self.phase_x) - np.sin(self.phase_x))
            p[:, 1] += self.amplitude * (np.sin(w + self.phase_y) - np.sin(self.phase_y))
        return p

    def start_direction(self):
        """Unit path tangent at the entry point (straight down for a degenerate path)."""
        entry, end = np.asarray(self.entry), np.asarray(self.endpoint)
        if self.depth <= 0:
            return np.array([0.0, 0.0, 1.0])
        d = (end - entry) / self.depth
        if self.amplitude:
            k = 2 * np.pi / self.depth
            d = d + self.amplitude * k * np.array([np.cos(self.phase_x), np.cos(self.phase_y), 0.0])
        return d / np.linalg.norm(d)

    def arc_table(self):
        """Dense (arc-depth, cumulative length) table; exact for straight paths."""
        if not self.amplitude:
            length = float(np.linalg.norm(np.subtract(self.endpoint, self.entry)))
            return np.array([0.0, self.depth]), np.array([0.0, length])
        s = np.linspace(0.0, self.depth, _TABLE)
        p = self.points(s)
        seg = np.linalg.norm(np.diff(p, axis=0), axis=1)
        return s, np.concatenate([[0.0], np.cumsum(seg)])

    @property
    def length(self):
        return float(self.arc_table()[1][-1])

    def to_dict(self):
        return dict(id=self.id, kind=self.kind, entry=list(self.entry),
                    endpoint=list(self.endpoint), depth=self.depth, amplitude=self.amplitude,
                    phase_x=self.phase_x, phase_y=self.phase_y, base_id=self.base_id)

    @classmethod
    def from_dict(cls, d):
        return cls(id=int(d["id"]), kind=d["kind"], entry=tuple(d["entry"]),
                   endpoint=tuple(d["endpoint"]), depth=float(d["depth"]),
                   amplitude=float(d.get("amplitude", 0.0)), phase_x=float(d.get("phase_x", 0.0)),
                   phase_y=float(d.get("phase_y", 0.0)), base_id=int(d.get("base_id", -1)))


def _inside(points, foam: FoamSpec, margin=MARGIN):
    half = np.array(foam.size[:2]) / 2 - margin
    return bool(np.all(np.abs(points[:, :2]) <= half + 1e-12)
                and np.all((points[:, 2] >= 0) & (points[:, 2] <= foam.size[2])))


def straight_grid(count_x=15, count_y=7, extent=(0.042, 0.018), depth=0.110,
                  entry=(0.0, 0.0, 0.0), foam: FoamSpec | None = None):
    """Regular grid of straight paths from the common entry point.

    Endpoints lie on the plane ``z = entry_z + depth``; ids run along x first.
    """
    if count_x < 1 or count_y < 1:
        raise ConfigError("grid counts must be >= 1")
    foam = foam or FoamSpec()
    xs = np.linspace(-extent[0] / 2, extent[0] / 2, count_x) if count_x > 1 else np.zeros(1)
    ys = np.linspace(-extent[1] / 2, extent[1] / 2, count_y) if count_y > 1 else np.zeros(1)
    entry = tuple(float(v) for v in entry)
    out = []
    for j, y in enumerate(ys):
        for i, x in enumerate(xs):
            end = (entry[0] + float(x), entry[1] + float(y), entry[2] + depth)
            traj = Trajectory(id=j * count_x + i, kind="straight", entry=entry, endpoint=end,
                              depth=depth)
            if not _inside(traj.points([0.0, depth]), foam, margin=0.0):
                raise ConfigError(f"endpoint {end} lies outside the foam")
            out.append(traj)
    return out


def curved_set(count=200, amplitude=0.010, seed=42, bases=None, foam: FoamSpec | None = None,
               max_tries=100):
    """Sinusoidal X/Y overlays (one period over the depth) on random straight bases.

    Returns ``(trajectories, rejected)``.  The overlay is shifted so the path
    starts exactly at the entry point.
    """
    foam = foam or FoamSpec()
    bases = bases if bases is not None else straight_grid(foam=foam)
    rng = np.random.default_rng([int(seed), CURVED_STREAM])
    out, rejected = [], 0
    check = np.linspace(0, 1, 257)
    while len(out) < count:
        if rejected > max_tries * max(count, 1):
            raise ConfigError("curved paths keep leaving the foam; reduce amplitude or extent")
        base = bases[int(rng.integers(len(bases)))]
        px, py = rng.uniform(0, 2 * np.pi, size=2)
        traj = Trajectory(id=len(out), kind="curved", entry=base.entry, endpoint=base.endpoint,
                          depth=base.depth, amplitude=float(amplitude), phase_x=float(px),
                          phase_y=float(py), base_id=base.id)
        if _inside(traj.points(check * traj.depth), foam):
            out.append(traj)
        else:
            rejected += 1
    if rejected:
        log.info("curved set: %d paths rejected (%.1f%%)", rejected,
                 100 * rejected / (rejected + count))
    if count and rejected / (rejected + count) > 0.05:
        log.warning("curved rejection rate above 5%%: check extent and amplitude")
    return out, rejected


def trajectory_set(kind, data: DataConfig, seed, foam: FoamSpec | None = None,
                   entry=(0.0, 0.0, 0.0)):
    grid = straight_grid(*data.grid, extent=data.extent, depth=data.depth, entry=entry, foam=foam)
    if kind == "straight":
        return grid
    if kind == "curved":
        return curved_set(data.curved_count, data.amplitude, seed, bases=grid, foam=foam)[0]
    raise ConfigError(f"unknown trajectory set {kind!r}")


def target_schedule(traj: Trajectory, t, speed):
    """Target at arc length ``min(speed t, L)`` along the path."""
    s_tab, l_tab = traj.arc_table()
    arc = min(max(speed * float(t), 0.0), l_tab[-1])
    if not traj.amplitude:
        frac = arc / l_tab[-1] if l_tab[-1] > 0 else 0.0
        return traj.points(frac * traj.depth)[0]
    return traj.points(np.interp(arc, l_tab, s_tab))[0]


def perturb_target(P_target, rng, amplitude=0.25e-3):
    """Per-component uniform noise on ``[-amplitude, amplitude]``."""
    if amplitude == 0:
        return np.asarray(P_target, dtype=float)
    return np.asarray(P_target, dtype=float) + rng.uniform(-amplitude, amplitude, size=3)
