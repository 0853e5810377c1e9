"""Run configuration files (YAML or JSON) with a strict schema.

A run file looks like::

    seed: 0                 # required
    run_id: ring-logan
    profile: small          # latent defaults: small | large
    train:   {total_steps: 5000, optimizer: adam, lr_d: 0.001, lr_g: 0.001}
    latent:  {enabled: true, alpha: 0.9}
    ablation: {block_d_term: false, block_g_term: false}
    data:    {kind: ring, n_modes: 8, radius: 2.0, std: 0.02}
    eval:    {truncation: [1.0, 0.5], steps: [0, 1, 5], samples: 1000}

Unknown keys anywhere are errors. ``canonical()`` returns the fully
populated form, and parsing that form gives back an equal config.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .latent import PROFILES, LatentOptConfig, LatentConfigError
from .models import LossKind
from .trainer import AblationFlags, DataDistribution, TrainConfig, TrainConfigError


class ConfigError(ValueError):
    """Schema violation; ``path`` names the offending key."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


def _check_keys(section: str, given: dict, allowed) -> None:
    if not isinstance(given, dict):
        raise ConfigError(section, f"expected a mapping, got {type(given).__name__}")
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        where = f"{section}." if section else ""
        raise ConfigError(f"{where}{unknown[0]}", "unknown key")


def _typed(path: str, value, kind):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


@dataclass(frozen=True)
class TrainSection:
    batch_size: int = 64
    total_steps: int = 5000
    optimizer: str = "adam"
    lr_d: float = 1e-3
    lr_g: float = 1e-3
    loss: str = "wasserstein"
    latent_dim: int = 16
    gen_hidden: tuple = (64, 64)
    disc_hidden: tuple = (64, 64)
    update_mode: str = "simultaneous"
    metric_interval: int = 1
    eval_interval: int = 500
    eval_samples: int = 1000
    coverage_radius: float = 0.1
    checkpoint_interval: int = 0


@dataclass(frozen=True)
class LatentSection:
    enabled: bool = True
    method: str = "ngd"
    alpha: float = 0.9
    beta: float = 0.1
    w_r: float = 0.1
    c: float = 0.8
    steps: int = 1
    eval_steps: int = 0

    def to_config(self) -> LatentOptConfig | None:
        if not self.enabled:
            return None
        return LatentOptConfig(self.method, self.alpha, self.beta, self.w_r, self.c, self.steps, self.eval_steps)


@dataclass(frozen=True)
class DataSection:
    kind: str = "ring"
    n_modes: int = 8
    radius: float = 2.0
    side: int = 5
    spacing: float = 2.0
    std: float = 0.02
    centers: tuple = ()

    def to_distribution(self) -> DataDistribution:
        if self.kind == "ring":
            return DataDistribution.ring(self.n_modes, self.radius, self.std)
        if self.kind == "grid":
            return DataDistribution.grid(self.side, self.spacing, self.std)
        return DataDistribution("custom", self.centers, self.std)


@dataclass(frozen=True)
class EvalSection:
    truncation: tuple = (1.0,)
    steps: tuple = (0,)
    samples: int = 1000


_SECTION_TYPES = {"train": TrainSection, "latent": LatentSection, "ablation": AblationFlags,
                  "data": DataSection, "eval": EvalSection}
_TOP_KEYS = {"seed", "run_id", "out_dir", "profile", *_SECTION_TYPES}


def _tuple_of(path, value, kind):
    if not isinstance(value, (list, tuple)):
        raise ConfigError(path, f"expected a list, got {value!r}")
    return tuple(_typed(f"{path}[{i}]", v, kind) for i, v in enumerate(value))


def _parse_section(name: str, cls, raw: dict, base=None):
    raw = {} if raw is None else raw
    _check_keys(name, raw, [f.name for f in fields(cls)])
    base = base if base is not None else cls()
    values = {}
    for f in fields(cls):
        if f.name not in raw:
            continue
        path, v = f"{name}.{f.name}", raw[f.name]
        default = getattr(base, f.name)
        if f.name == "centers":
            if not isinstance(v, (list, tuple)):
                raise ConfigError(path, "expected a list of points")
            values[f.name] = tuple(_tuple_of(f"{path}[{i}]", c, float) for i, c in enumerate(v))
        elif isinstance(default, tuple):
            kind = float if f.name == "truncation" else int
            values[f.name] = _tuple_of(path, v, kind)
        else:
            values[f.name] = _typed(path, v, type(default))
    return dataclasses.replace(base, **values)


@dataclass(frozen=True)
class RunConfig:
    seed: int
    run_id: str = "run"
    out_dir: str | None = None
    profile: str = "small"
    train: TrainSection = TrainSection()
    latent: LatentSection = LatentSection()
    ablation: AblationFlags = AblationFlags()
    data: DataSection = DataSection()
    eval: EvalSection = EvalSection()

    def train_config(self) -> TrainConfig:
        t = self.train
        try:
            return TrainConfig(
                seed=self.seed, batch_size=t.batch_size, total_steps=t.total_steps, optimizer=t.optimizer,
                lr_d=t.lr_d, lr_g=t.lr_g, loss=LossKind(t.loss), latent=self.latent.to_config(),
                ablation=self.ablation, data=self.data.to_distribution(), latent_dim=t.latent_dim,
                gen_hidden=t.gen_hidden, disc_hidden=t.disc_hidden, update_mode=t.update_mode,
                metric_interval=t.metric_interval, eval_interval=t.eval_interval,
                eval_samples=t.eval_samples, coverage_radius=t.coverage_radius,
                checkpoint_interval=t.checkpoint_interval)
        except (TrainConfigError, LatentConfigError, ValueError) as exc:
            raise ConfigError("", str(exc)) from None

    def canonical(self) -> dict:
        def conv(v):
            if isinstance(v, tuple):
                return [conv(x) for x in v]
            return v
        out: dict[str, Any] = {"seed": self.seed, "run_id": self.run_id, "profile": self.profile}
        if self.out_dir is not None:
            out["out_dir"] = self.out_dir
        for name in _SECTION_TYPES:
            sec = getattr(self, name)
            out[name] = {f.name: conv(getattr(sec, f.name)) for f in fields(sec)}
        return out

    def with_seed(self, seed: int) -> RunConfig:
        return dataclasses.replace(self, seed=int(seed))


def profile_latent(profile: str) -> LatentSection:
    if profile not in PROFILES:
        raise ConfigError("profile", f"unknown profile {profile!r} (expected one of {sorted(PROFILES)})")
    p = PROFILES[profile]
    return LatentSection(True, p.method, p.alpha, p.beta, p.w_r, p.c, p.steps, p.eval_steps)


def parse_config(raw: dict) -> RunConfig:
    _check_keys("", raw, _TOP_KEYS)
    if "seed" not in raw:
        raise ConfigError("seed", "missing required key")
    seed = _typed("seed", raw["seed"], int)
    if seed < 0:
        raise ConfigError("seed", "must be non-negative")
    profile = _typed("profile", raw.get("profile", "small"), str)
    sections = {name: _parse_section(name, cls, raw.get(name),
                                     profile_latent(profile) if name == "latent" else None)
                for name, cls in _SECTION_TYPES.items()}
    out_dir = raw.get("out_dir")
    cfg = RunConfig(seed, _typed("run_id", raw.get("run_id", "run"), str),
                    None if out_dir is None else _typed("out_dir", out_dir, str), profile, **sections)
    cfg.train_config()  # cross-field validation
    return cfg


def load_mapping(path) -> dict:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError("", f"{path}: cannot parse ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError("", f"{path}: top level must be a mapping")
    return data


def load_config(path) -> RunConfig:
    return parse_config(load_mapping(path))


def dump_config(cfg: RunConfig, path=None, fmt: str = "yaml") -> str:
    data = cfg.canonical()
    text = json.dumps(data, indent=2) + "\n" if fmt == "json" else yaml.safe_dump(data, sort_keys=False)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


# -- sweeps ---------------------------------------------------------------------

GRID_KEYS = ("alpha", "beta", "w_r", "c", "seed")


@dataclass(frozen=True)
class SweepConfig:
    base: RunConfig
    grid: dict = field(default_factory=dict)

    def cells(self) -> list[tuple[int, dict, RunConfig]]:
        """Every grid point in row-major order of GRID_KEYS, with its index."""
        import itertools
        keys = [k for k in GRID_KEYS if k in self.grid]
        out = []
        for i, combo in enumerate(itertools.product(*(self.grid[k] for k in keys))):
            point = dict(zip(keys, combo))
            latent = dataclasses.replace(self.base.latent, **{k: v for k, v in point.items() if k != "seed"})
            cfg = dataclasses.replace(self.base, latent=latent, run_id=f"{self.base.run_id}-cell{i:03d}")
            if "seed" in point:
                cfg = cfg.with_seed(point["seed"])
            out.append((i, point, cfg))
        return out


def parse_sweep(raw: dict) -> SweepConfig:
    _check_keys("", raw, ["base", "grid"])
    if "base" not in raw:
        raise ConfigError("base", "missing required key")
    base = parse_config(raw["base"])
    grid_raw = raw.get("grid", {})
    _check_keys("grid", grid_raw, GRID_KEYS)
    grid = {}
    for k, v in grid_raw.items():
        vals = _tuple_of(f"grid.{k}", v, int if k == "seed" else float)
        if not vals:
            raise ConfigError(f"grid.{k}", "empty value list")
        grid[k] = vals
    return SweepConfig(base, grid)
