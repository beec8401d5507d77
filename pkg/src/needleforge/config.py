"""Parameter records and the key-value configuration file.

Internal units are SI (m, s, Pa, kg).  The configuration file uses the unit
suffix of each key (``_mm``, ``_ms``, ``_pa`` ...) and is converted on load.

File format (INI style, dotted names map to ``section.key``)::

    seed = 42

    [foam]
    size_mm = 100, 100, 130
    resolution = 8, 8, 10

    [sim]
    dt_ms = 10
    speed_mm_s = 5
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

SEED_ENV = "NEEDLEFORGE_SEED"


def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


@dataclass(frozen=True)
class FoamSpec:
    size: tuple = (0.100, 0.100, 0.130)
    resolution: tuple = (8, 8, 10)
    fix_far_face: bool = True

    def __post_init__(self):
        _require(len(self.size) == 3 and all(s > 0 for s in self.size),
                 f"foam size must be three positive lengths, got {self.size}")
        _require(len(self.resolution) == 3 and all(int(r) == r and r >= 1 for r in self.resolution),
                 f"foam resolution must be three integers >= 1, got {self.resolution}")


@dataclass(frozen=True)
class MaterialParams:
    young_modulus: float = 3000.0
    poisson_ratio: float = 0.45
    density: float = 1000.0
    rayleigh_mass: float = 0.1
    rayleigh_stiffness: float = 0.01

    def __post_init__(self):
        _require(self.young_modulus > 0, "young_modulus must be > 0")
        _require(0 <= self.poisson_ratio < 0.5, "poisson_ratio must lie in [0, 0.5)")
        _require(self.density > 0, "density must be > 0")
        _require(self.rayleigh_mass >= 0 and self.rayleigh_stiffness >= 0,
                 "damping coefficients must be >= 0")


@dataclass(frozen=True)
class BeamParams:
    young_modulus: float = 200e9
    shear_modulus: float = 200e9 / 2.6
    radius: float = 0.5e-3
    length: float = 0.150
    n_elements: int = 30
    shear_correction: float = 0.9
    density: float = 7850.0
    rayleigh_mass: float = 0.1
    rayleigh_stiffness: float = 0.01

    def __post_init__(self):
        for name in ("young_modulus", "shear_modulus", "radius", "length",
                     "shear_correction", "density"):
            _require(getattr(self, name) > 0, f"needle {name} must be > 0")
        _require(int(self.n_elements) == self.n_elements and self.n_elements >= 2,
                 "needle n_elements must be an integer >= 2")

    @property
    def area(self):
        return math.pi * self.radius ** 2

    @property
    def inertia(self):
        return math.pi * self.radius ** 4 / 4.0

    @property
    def polar_inertia(self):
        return math.pi * self.radius ** 4 / 2.0


@dataclass(frozen=True)
class SceneConfig:
    foam: FoamSpec = field(default_factory=FoamSpec)
    material: MaterialParams = field(default_factory=MaterialParams)
    needle: BeamParams = field(default_factory=BeamParams)
    entry_point: tuple = (0.0, 0.0, 0.0)
    insertion_axis: tuple = (0.0, 0.0, 1.0)
    dt: float = 0.010
    insertion_speed: float = 0.005
    effector_speed: float = 0.020
    constraint_spacing: float = 0.002
    position_tol: float = 1e-6
    baumgarte: float = 1.0
    gravity: tuple = (0.0, 0.0, 0.0)
    tangent_refresh: float = 0.1
    settle_steps: int = 20
    seed: int = 42

    def __post_init__(self):
        _require(self.dt > 0, "dt must be > 0")
        _require(self.insertion_speed > 0 and self.effector_speed > 0, "speeds must be > 0")
        _require(self.constraint_spacing > 0, "constraint spacing must be > 0")
        _require(self.position_tol > 0, "position tolerance must be > 0")
        _require(0 < self.baumgarte <= 1, "baumgarte factor must lie in (0, 1]")
        _require(self.tangent_refresh >= 0, "tangent_refresh must be >= 0")
        _require(self.settle_steps >= 0, "settle_steps must be >= 0")
        axis = np.asarray(self.insertion_axis, dtype=float)
        _require(abs(np.linalg.norm(axis) - 1.0) < 1e-9, "insertion_axis must have unit norm")
        # entry point must sit on the insertion face z = 0 of the foam block
        sx, sy, _ = self.foam.size
        x, y, z = self.entry_point
        _require(abs(z) < 1e-12 and abs(x) <= sx / 2 and abs(y) <= sy / 2,
                 "entry_point must lie on the insertion face (z = 0)")


@dataclass(frozen=True)
class ControlGains:
    weight_tip: float = 1.0
    weight_entry: float = 0.1
    alpha: float = 1e-3
    fd_step: float = 1e-4
    jacobian_reuse: int = 1

    def __post_init__(self):
        _require(self.weight_tip > 0 and self.weight_entry >= 0, "invalid objective weights")
        _require(self.alpha > 0, "damping alpha must be > 0")
        _require(self.fd_step > 0, "fd_step must be > 0")
        _require(int(self.jacobian_reuse) == self.jacobian_reuse and self.jacobian_reuse >= 1,
                 "jacobian_reuse must be an integer >= 1")


@dataclass(frozen=True)
class TrainConfig:
    ridge: float = 1e-6
    seed: int = 42
    hidden_count: int = 25

    def __post_init__(self):
        _require(self.ridge >= 0, "ridge lambda must be >= 0")
        _require(self.hidden_count >= 1, "hidden_count must be >= 1")


@dataclass(frozen=True)
class DataConfig:
    grid: tuple = (15, 7)
    extent: tuple = (0.042, 0.018)
    depth: float = 0.110
    noise: float = 0.25e-3
    curved_count: int = 200
    amplitude: float = 0.010
    budget: int = 100000
    split_ratio: float = 0.9

    def __post_init__(self):
        _require(all(g >= 1 for g in self.grid), "grid counts must be >= 1")
        _require(self.depth >= 0, "depth must be >= 0")
        _require(self.noise >= 0 and self.amplitude >= 0, "noise/amplitude must be >= 0")
        _require(0 < self.split_ratio < 1, "split ratio must lie in (0, 1)")


@dataclass(frozen=True)
class Config:
    scene: SceneConfig = field(default_factory=SceneConfig)
    gains: ControlGains = field(default_factory=ControlGains)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @property
    def seed(self):
        return self.scene.seed

    def to_dict(self):
        return dataclasses.asdict(self)

    def hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, default=float).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_seed(self, seed):
        return dataclasses.replace(self, scene=dataclasses.replace(self.scene, seed=int(seed)))


def _floats(text, n=None, scale=1.0):
    vals = [float(v) * scale for v in text.replace(";", ",").split(",") if v.strip()]
    if n is not None and len(vals) != n:
        raise ConfigError(f"expected {n} values, got {text!r}")
    return tuple(vals) if n != 1 else vals[0]


def _ints(text, n):
    vals = _floats(text, n)
    vals = vals if isinstance(vals, tuple) else (vals,)
    if any(v != int(v) for v in vals):
        raise ConfigError(f"expected integers, got {text!r}")
    vals = tuple(int(v) for v in vals)
    return vals if n != 1 else vals[0]


MM, MS = 1e-3, 1e-3

# dotted key -> (record, field, parser)
_KEYS = {
    "seed": ("scene", "seed", lambda s: _ints(s, 1)),
    "foam.size_mm": ("foam", "size", lambda s: _floats(s, 3, MM)),
    "foam.resolution": ("foam", "resolution", lambda s: _ints(s, 3)),
    "material.young_pa": ("material", "young_modulus", lambda s: _floats(s, 1)),
    "material.poisson": ("material", "poisson_ratio", lambda s: _floats(s, 1)),
    "material.density_kg_m3": ("material", "density", lambda s: _floats(s, 1)),
    "material.rayleigh_mass": ("material", "rayleigh_mass", lambda s: _floats(s, 1)),
    "material.rayleigh_stiffness": ("material", "rayleigh_stiffness", lambda s: _floats(s, 1)),
    "needle.young_pa": ("needle", "young_modulus", lambda s: _floats(s, 1)),
    "needle.shear_pa": ("needle", "shear_modulus", lambda s: _floats(s, 1)),
    "needle.radius_mm": ("needle", "radius", lambda s: _floats(s, 1, MM)),
    "needle.length_mm": ("needle", "length", lambda s: _floats(s, 1, MM)),
    "needle.elements": ("needle", "n_elements", lambda s: _ints(s, 1)),
    "needle.kappa": ("needle", "shear_correction", lambda s: _floats(s, 1)),
    "needle.density_kg_m3": ("needle", "density", lambda s: _floats(s, 1)),
    "sim.dt_ms": ("scene", "dt", lambda s: _floats(s, 1, MS)),
    "sim.speed_mm_s": ("scene", "insertion_speed", lambda s: _floats(s, 1, MM)),
    "sim.effector_speed_mm_s": ("scene", "effector_speed", lambda s: _floats(s, 1, MM)),
    "sim.gravity_m_s2": ("scene", "gravity", lambda s: _floats(s, 3)),
    "sim.tangent_refresh_rad": ("scene", "tangent_refresh", lambda s: _floats(s, 1)),
    "sim.settle_steps": ("scene", "settle_steps", lambda s: _ints(s, 1)),
    "coupling.spacing_mm": ("scene", "constraint_spacing", lambda s: _floats(s, 1, MM)),
    "coupling.position_tol_m": ("scene", "position_tol", lambda s: _floats(s, 1)),
    "coupling.baumgarte": ("scene", "baumgarte", lambda s: _floats(s, 1)),
    "controller.weight_tip": ("gains", "weight_tip", lambda s: _floats(s, 1)),
    "controller.weight_entry": ("gains", "weight_entry", lambda s: _floats(s, 1)),
    "controller.alpha": ("gains", "alpha", lambda s: _floats(s, 1)),
    "controller.fd_step_mm": ("gains", "fd_step", lambda s: _floats(s, 1, MM)),
    "controller.jacobian_reuse": ("gains", "jacobian_reuse", lambda s: _ints(s, 1)),
    "train.lambda": ("train", "ridge", lambda s: _floats(s, 1)),
    "train.hidden": ("train", "hidden_count", lambda s: _ints(s, 1)),
    "train.seed": ("train", "seed", lambda s: _ints(s, 1)),
    "data.grid": ("data", "grid", lambda s: _ints(s, 2)),
    "data.extent_mm": ("data", "extent", lambda s: _floats(s, 2, MM)),
    "data.depth_mm": ("data", "depth", lambda s: _floats(s, 1, MM)),
    "data.noise_mm": ("data", "noise", lambda s: _floats(s, 1, MM)),
    "data.curved_count": ("data", "curved_count", lambda s: _ints(s, 1)),
    "data.amplitude_mm": ("data", "amplitude", lambda s: _floats(s, 1, MM)),
    "data.budget": ("data", "budget", lambda s: _ints(s, 1)),
    "data.split": ("data", "split_ratio", lambda s: _floats(s, 1)),
}

CONFIG_KEYS = tuple(_KEYS)


def parse_config(text):
    """Parse configuration text into a :class:`Config`; unknown keys are rejected."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=", ":"))
    parser.optionxform = str
    try:
        parser.read_string("[__root__]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable configuration: {exc}") from None

    updates = {"foam": {}, "material": {}, "needle": {}, "scene": {},
               "gains": {}, "train": {}, "data": {}}
    for section in parser.sections():
        for key, value in parser.items(section):
            dotted = key if section == "__root__" else f"{section}.{key}"
            if dotted not in _KEYS:
                raise ConfigError(f"unknown configuration key {dotted!r}")
            record, name, conv = _KEYS[dotted]
            updates[record][name] = conv(value)

    foam = FoamSpec(**updates["foam"])
    material = MaterialParams(**updates["material"])
    needle_kw = dict(updates["needle"])
    if "young_modulus" in needle_kw and "shear_modulus" not in needle_kw:
        needle_kw["shear_modulus"] = needle_kw["young_modulus"] / 2.6
    needle = BeamParams(**needle_kw)
    scene = SceneConfig(foam=foam, material=material, needle=needle, **updates["scene"])
    return Config(scene=scene, gains=ControlGains(**updates["gains"]),
                  train=TrainConfig(**updates["train"]), data=DataConfig(**updates["data"]))


def load_config(path=None, env=None):
    """Load a configuration file (defaults when ``path`` is None).

    The ``NEEDLEFORGE_SEED`` environment variable overrides the file seed.
    """
    if path is None:
        cfg = Config()
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"configuration file not found: {p}")
        cfg = parse_config(p.read_text())
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg = cfg.with_seed(int(env[SEED_ENV]))
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    return cfg
