"""Run configuration: a TOML file with dotted keys.

An empty file runs the reference experiment. ``profile = "desk"`` swaps in
settings tuned for a single CPU core (smaller nets, smaller batches, higher
learning rates, more epochs). Any explicit key overrides the profile.

Example::

    scene = "two-spheres"
    profile = "desk"
    distance.M = 20
    classifier.epochs = 5
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import tomli

from .errors import ConfigError
from .scene import CATALOG, Scene, make_scene, orbit_trajectory, scene_from_primitives
from .training import ClassifierConfig, DistanceConfig

PROFILES = {
    "reference": {},
    "desk": {
        "classifier": dict(epochs=5, batch_size=1024, lr_max=1e-4, hidden=256, trunk_layers=4, omega0=10.0),
        "distance": dict(epochs=30, batch_size=512, lr_init=1e-4, lr_final=1e-6, layers=5, hidden=128,
                         radiance_hidden=128),
    },
}


@dataclass
class TrajectoryConfig:
    radius: float = 0.36
    train_elevations: list = field(default_factory=lambda: [-20.0, 30.0])
    train_azimuths: int = 10
    test_elevations: list = field(default_factory=lambda: [5.0])
    test_azimuths: int = 10
    fov_deg: float = 50.0


@dataclass
class EvalConfig:
    outlier_threshold: float = 5.0
    n_points: int = 10000
    render_resolution: list = field(default_factory=lambda: [800, 800])


@dataclass
class RunConfig:
    scene: str = "two-spheres"
    primitives: list = field(default_factory=list)
    diameter: float = 0.3
    resolution: list = field(default_factory=lambda: [64, 64])
    sparsity: float = 1.0
    color: bool = False
    seed: int = 0
    profile: str = "reference"
    out: str = "runs/default"
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    distance: DistanceConfig = field(default_factory=DistanceConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def build_scene(self) -> Scene:
        if self.primitives:
            scene = scene_from_primitives(self.primitives, self.diameter)
        elif self.scene in CATALOG:
            scene = make_scene(self.scene, self.diameter)
        else:
            raise ConfigError(f"unknown scene {self.scene!r}; choose one of {', '.join(CATALOG)}")
        return scene

    def build_trajectory(self):
        t = self.trajectory
        return orbit_trajectory(t.radius, tuple(t.train_elevations), t.train_azimuths,
                                tuple(t.test_elevations), t.test_azimuths, tuple(self.resolution),
                                t.fov_deg)

    def subseed(self, name: str) -> int:
        """Named sub-seed derived from the global seed."""
        return int(np.random.SeedSequence([self.seed, zlib.crc32(name.encode())]).generate_state(1)[0])


_SECTIONS = {"trajectory": TrajectoryConfig, "classifier": ClassifierConfig, "distance": DistanceConfig,
             "eval": EvalConfig}


def _build(cls, values: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {where}: {e}") from e


def from_dict(raw: dict, seed=None, out=None) -> RunConfig:
    raw = dict(raw)
    profile = raw.get("profile", "reference")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    sections = {}
    for name, cls in _SECTIONS.items():
        sub = raw.pop(name, {})
        if not isinstance(sub, dict):
            raise ConfigError(f"{name} must be a table")
        if "seed" in sub:
            raise ConfigError(f"{name}.seed is derived from the global seed")
        merged = {**PROFILES[profile].get(name, {}), **sub}
        sections[name] = _build(cls, merged, name)
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out"] = str(out)
    cfg = replace(_build(RunConfig, raw, "top level"), **sections)
    if not cfg.diameter > 0:
        raise ConfigError("diameter must be positive")
    cfg.classifier.seed = cfg.subseed("classifier")
    cfg.distance.seed = cfg.subseed("distance")
    return cfg


def load(path=None, seed=None, out=None) -> RunConfig:
    """Load a config file (or defaults when ``path`` is None)."""
    raw = {}
    if path is not None:
        try:
            raw = tomli.loads(Path(path).read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"config file not found: {path}") from e
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
    return from_dict(raw, seed=seed, out=out)


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, dict):
        return "{ " + ", ".join(f"{k} = {_toml_value(x)}" for k, x in v.items()) + " }"
    raise ConfigError(f"cannot serialize {v!r}")


def dumps(cfg: RunConfig) -> str:
    """Effective config as dotted-key TOML. Unset optional values are
    written as comments so the file reloads to the same config."""
    lines = []
    data = asdict(cfg)
    for key, value in data.items():
        if isinstance(value, dict):
            continue
        lines.append(f"{key} = {_toml_value(value)}")
    for name in _SECTIONS:
        for key, value in data[name].items():
            if key == "seed":
                continue  # derived from the global seed
            if value is None:
                lines.append(f"# {name}.{key} unset")
            else:
                lines.append(f"{name}.{key} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"
