"""GAN training with latent refinement on toy 2-D mixtures.

Each step samples z ~ U(-1, 1) and x from the data, refines z into z' with
one recorded latent step, and updates both players from the batch-mean
losses plus R_z. The whole step is one compiled ``Program`` built once per
configuration, so the per-step cost is a single forward/backward sweep.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import storage
from .latent import LatentOptConfig, latent_regulariser, refine_latent
from .metrics import generate_samples, mode_coverage, proxy_fid
from .models import GanModel, LossKind, MlpSpec, critic_value, discriminate, init_model, losses

METRIC_COLUMNS = ("step", "L_D", "L_G", "R_z", "dz_norm", "df_abs", "dtheta_D", "dtheta_G",
                  "dtheta_diff", "curvature_mean", "proxy_fid", "mode_coverage", "hq_fraction")


class TrainConfigError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, reason: str, dump: Path | None = None):
        super().__init__(f"training aborted at step {step}: {reason}")
        self.step = step
        self.reason = reason
        self.dump = dump


@dataclass(frozen=True)
class AblationFlags:
    block_d_term: bool = False
    block_g_term: bool = False


@dataclass(frozen=True)
class DataDistribution:
    kind: str
    centers: tuple[tuple[float, ...], ...]
    std: float

    def __post_init__(self):
        centers = tuple(tuple(float(v) for v in c) for c in self.centers)
        object.__setattr__(self, "centers", centers)
        if self.kind not in ("ring", "grid", "custom"):
            raise TrainConfigError(f"unknown data kind {self.kind!r}")
        if not centers:
            raise TrainConfigError("data distribution needs at least one mode")
        if len({len(c) for c in centers}) != 1:
            raise TrainConfigError("all mode centers must share a dimension")
        if not self.std > 0:
            raise TrainConfigError("mode std must be positive")

    @classmethod
    def ring(cls, n_modes: int = 8, radius: float = 2.0, std: float = 0.02) -> DataDistribution:
        ang = 2.0 * np.pi * np.arange(n_modes) / n_modes
        return cls("ring", tuple(zip(radius * np.cos(ang), radius * np.sin(ang))), std)

    @classmethod
    def grid(cls, side: int = 5, spacing: float = 2.0, std: float = 0.02) -> DataDistribution:
        ticks = (np.arange(side) - (side - 1) / 2.0) * spacing
        return cls("grid", tuple((a, b) for a in ticks for b in ticks), std)

    @property
    def dim(self) -> int:
        return len(self.centers[0])

    @property
    def center_array(self) -> np.ndarray:
        return np.array(self.centers)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        idx = rng.integers(0, len(self.centers), size=n)
        return self.center_array[idx] + self.std * rng.standard_normal((n, self.dim))


@dataclass(frozen=True)
class TrainConfig:
    seed: int
    batch_size: int = 64
    total_steps: int = 5000
    optimizer: str = "sgd"
    lr_d: float = 0.01
    lr_g: float = 0.01
    loss: LossKind = LossKind.WASSERSTEIN
    latent: LatentOptConfig | None = field(default_factory=lambda: LatentOptConfig(c=0.5))
    ablation: AblationFlags = AblationFlags()
    data: DataDistribution = field(default_factory=DataDistribution.ring)
    latent_dim: int = 16
    gen_hidden: tuple[int, ...] = (64, 64)
    disc_hidden: tuple[int, ...] = (64, 64)
    update_mode: str = "simultaneous"
    metric_interval: int = 1
    eval_interval: int = 500
    eval_samples: int = 1000
    coverage_radius: float = 0.1
    checkpoint_interval: int = 0

    def __post_init__(self):
        object.__setattr__(self, "loss", LossKind(self.loss))
        object.__setattr__(self, "gen_hidden", tuple(int(w) for w in self.gen_hidden))
        object.__setattr__(self, "disc_hidden", tuple(int(w) for w in self.disc_hidden))
        if not isinstance(self.seed, (int, np.integer)) or isinstance(self.seed, bool) or self.seed < 0:
            raise TrainConfigError("seed must be a non-negative integer")
        if self.batch_size < 1:
            raise TrainConfigError("batch_size must be at least 1")
        if self.total_steps < 0:
            raise TrainConfigError("total_steps must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise TrainConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if not (self.lr_d > 0 and self.lr_g > 0):
            raise TrainConfigError("learning rates must be positive")
        if self.update_mode not in ("simultaneous", "alternating"):
            raise TrainConfigError(f"update_mode must be 'simultaneous' or 'alternating'")
        if self.latent is not None and self.latent.steps != 1:
            # a second recorded step would need third-order derivatives
            raise TrainConfigError("training supports exactly one differentiable latent step")
        if self.latent_dim < 1 or self.metric_interval < 1 or self.eval_interval < 0:
            raise TrainConfigError("latent_dim and metric_interval must be positive, eval_interval >= 0")
        if self.eval_samples < 2 or not self.coverage_radius > 0 or self.checkpoint_interval < 0:
            raise TrainConfigError("eval_samples >= 2, coverage_radius > 0, checkpoint_interval >= 0 required")

    @property
    def gen_spec(self) -> MlpSpec:
        return MlpSpec((self.latent_dim, *self.gen_hidden, self.data.dim))

    @property
    def disc_spec(self) -> MlpSpec:
        return MlpSpec((self.data.dim, *self.disc_hidden, 1))

    def with_(self, **kw) -> TrainConfig:
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = self.loss.value
        d["data"] = {"kind": self.data.kind, "centers": [list(c) for c in self.data.centers], "std": self.data.std}
        d["gen_hidden"], d["disc_hidden"] = list(self.gen_hidden), list(self.disc_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        if d.get("latent") is not None:
            d["latent"] = LatentOptConfig(**d["latent"])
        d["ablation"] = AblationFlags(**d.get("ablation", {}))
        if "data" in d:
            d["data"] = DataDistribution(**d["data"])
        return cls(**d)


# -- optimiser ------------------------------------------------------------------

ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.0, 0.999, 1e-8


@dataclass(frozen=True)
class OptimizerState:
    kind: str
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    v: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @classmethod
    def fresh(cls, kind: str, params: dict[str, np.ndarray]) -> OptimizerState:
        if kind == "sgd":
            return cls("sgd")
        return cls("adam", 0, {k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def apply_updates(params: dict, grads: dict, lrs: dict, opt: OptimizerState, tick: bool = True):
    """One optimiser step on the parameters named in ``grads``.

    ``tick=False`` reuses the current Adam step count, so the second half
    of an alternating update shares the bias correction of the first.
    """
    new = dict(params)
    if opt.kind == "sgd":
        for k, g in grads.items():
            new[k] = params[k] - lrs[k] * g
        return new, opt
    t = opt.t + 1 if tick else opt.t
    m, v = dict(opt.m), dict(opt.v)
    for k, g in grads.items():
        m[k] = ADAM_BETA1 * opt.m[k] + (1.0 - ADAM_BETA1) * g
        v[k] = ADAM_BETA2 * opt.v[k] + (1.0 - ADAM_BETA2) * g * g
        m_hat = m[k] / (1.0 - ADAM_BETA1 ** t)
        v_hat = v[k] / (1.0 - ADAM_BETA2 ** t)
        new[k] = params[k] - lrs[k] * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return new, OptimizerState("adam", t, m, v)


# -- diagnostics ----------------------------------------------------------------

def _norm(arrays) -> float:
    with np.errstate(over="ignore"):
        return math.sqrt(sum(float(np.sum(a * a)) for a in arrays))


def update_norm_diagnostics(before: dict, after: dict) -> tuple[float, float, float]:
    """(|d theta_D|, |d theta_G|, their difference) over concatenated parameters."""
    if before.keys() != after.keys():
        raise ValueError("parameter sets differ")
    for k in before:
        if np.shape(before[k]) != np.shape(after[k]):
            raise ValueError(f"shape mismatch for {k}")
    d = _norm([np.asarray(after[k]) - before[k] for k in before if k.startswith("D/")])
    g = _norm([np.asarray(after[k]) - before[k] for k in before if k.startswith("G/")])
    return d, g, d - g


def _dz_stats(z, z_prime, f_z, f_zp) -> tuple[float, float]:
    dz = np.sqrt(np.sum((z_prime - z) ** 2, axis=-1))
    return float(dz.mean()), float(np.abs(f_zp - f_z).mean())


def delta_z_diagnostics(model: GanModel, z, z_prime) -> tuple[float, float]:
    """(mean |z' - z|, mean |f(z') - f(z)|) over the rows of a batch."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    z_prime = np.atleast_2d(np.asarray(z_prime, dtype=np.float64))
    if z.shape != z_prime.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {z_prime.shape}")
    u = ad.var("z", z.shape)
    prog = ad.Program([critic_value(model, u)])
    f_z = prog.run(model.env(z=z))[0]
    f_zp = prog.run(model.env(z=z_prime))[0]
    return _dz_stats(z, z_prime, f_z, f_zp)


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    L_D: float
    L_G: float
    R_z: float
    dz_norm: float
    df_abs: float
    dtheta_D: float
    dtheta_G: float
    dtheta_diff: float
    curvature_mean: float | None = None
    proxy_fid: float | None = None
    mode_coverage: int | None = None
    hq_fraction: float | None = None


# -- the compiled step ----------------------------------------------------------

@dataclass
class StepGraph:
    """Loss and gradient expressions for one configuration and model shape."""

    d_names: list[str]
    g_names: list[str]
    full: ad.Program
    d_only: ad.Program
    g_only: ad.Program


def build_losses(model: GanModel, n: int, loss: LossKind, latent: LatentOptConfig | None,
                 ablation: AblationFlags = AblationFlags()):
    """Batch losses over input variables ``z`` and ``x``.

    Returns (L_D, L_G, R_z, z', f(z'), f(z), curvature); the last is None
    for GD and for vanilla training.
    """
    z = ad.var("z", (n, model.latent_dim))
    x = ad.var("x", (n, model.data_dim))
    if latent is None:
        zp, r_z, curv = z, ad.const(0.0), None
    else:
        step = refine_latent(model, z, latent, stop_d=ablation.block_d_term, stop_g=ablation.block_g_term)
        zp, curv = step.z_prime, step.curvature
        r_z = latent_regulariser(step.delta_z, latent.w_r)
    f_fake = critic_value(model, zp)
    l_d, l_g = losses(loss, discriminate(model, x), f_fake)
    l_d = ad.mean(l_d) + r_z
    l_g = ad.mean(l_g) + r_z
    return l_d, l_g, r_z, zp, f_fake, critic_value(model, z), curv


@lru_cache(maxsize=16)
def _compile(gen: MlpSpec, disc: MlpSpec, n: int, loss: LossKind,
             latent: LatentOptConfig | None, ablation: AblationFlags) -> StepGraph:
    model = init_model(gen, disc, gen.widths[0], gen.widths[-1], 0)  # shapes only
    l_d, l_g, r_z, zp, f_fake, f_z, curv = build_losses(model, n, loss, latent, ablation)
    diag = [r_z, zp, f_fake, f_z] + ([curv] if curv is not None else [])
    g_d = [ad.gradient_expr(l_d, k) for k in model.d_names]
    g_g = [ad.gradient_expr(l_g, k) for k in model.g_names]
    return StepGraph(model.d_names, model.g_names,
                     ad.Program([l_d, l_g, *diag, *g_d, *g_g]),
                     ad.Program([l_d, *diag, *g_d]),
                     ad.Program([l_g, *g_g]))


def step_graph(config: TrainConfig) -> StepGraph:
    return _compile(config.gen_spec, config.disc_spec, config.batch_size, config.loss,
                    config.latent, config.ablation)


@dataclass(frozen=True)
class TrainState:
    model: GanModel
    opt: OptimizerState
    rng_state: dict
    step: int = 0


def initial_state(config: TrainConfig) -> TrainState:
    model = init_model(config.gen_spec, config.disc_spec, config.latent_dim, config.data.dim, config.seed)
    rng = np.random.default_rng([config.seed, 1])
    return TrainState(model, OptimizerState.fresh(config.optimizer, model.params), rng.bit_generator.state, 0)


def _rng(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


def train_step(state: TrainState, config: TrainConfig) -> tuple[TrainState, MetricsRecord]:
    graph = step_graph(config)
    rng = _rng(state.rng_state)
    n = config.batch_size
    z = rng.uniform(-1.0, 1.0, size=(n, config.latent_dim))
    x = config.data.sample(rng, n)
    model = state.model
    lrs = {k: config.lr_d for k in graph.d_names} | {k: config.lr_g for k in graph.g_names}
    nd, ng = len(graph.d_names), len(graph.g_names)
    has_curv = config.latent is not None and config.latent.method == "ngd"
    k = 5 if has_curv else 4
    if config.update_mode == "simultaneous":
        out = graph.full.run(model.env(z=z, x=x))
        l_d, l_g, diag = out[0], out[1], out[2:2 + k]
        grads = out[2 + k:]
        g = dict(zip(graph.d_names + graph.g_names, grads))
        params, opt = apply_updates(model.params, g, lrs, state.opt)
    else:
        out = graph.d_only.run(model.env(z=z, x=x))
        l_d, diag = out[0], out[1:1 + k]
        params, opt = apply_updates(model.params, dict(zip(graph.d_names, out[1 + k:])), lrs, state.opt)
        mid = model.with_params(params)
        out_g = graph.g_only.run(mid.env(z=z, x=x))
        l_g = out_g[0]
        params, opt = apply_updates(params, dict(zip(graph.g_names, out_g[1:])), lrs, opt, tick=False)
        assert len(out_g) == 1 + ng and len(out) == 1 + k + nd
    for name, p in params.items():
        if not np.isfinite(p).all():
            raise ad.NonFiniteError(f"parameter {name} became non-finite")
    r_z, zp, f_fake, f_z = diag[:4]
    dz_norm, df_abs = _dz_stats(z, zp, f_z, f_fake)
    dd, dg, diff = update_norm_diagnostics(model.params, params)
    record = MetricsRecord(state.step + 1, float(l_d), float(l_g), float(r_z), dz_norm, df_abs, dd, dg, diff,
                           float(np.mean(diag[4])) if has_curv else None)
    bad = [f.name for f in fields(record) if isinstance(getattr(record, f.name), float)
           and not math.isfinite(getattr(record, f.name))]
    if bad:
        raise ad.NonFiniteError(f"non-finite diagnostics: {', '.join(bad)}")
    return TrainState(model.with_params(params), opt, rng.bit_generator.state, state.step + 1), record


# -- evaluation during training --------------------------------------------------

def eval_metrics(model: GanModel, config: TrainConfig) -> tuple[float, int, float]:
    """(proxy-FID, modes hit, high-quality fraction) on a fixed per-seed draw.

    The draw uses its own RNG stream, so evaluating never perturbs training.
    """
    rng = np.random.default_rng([config.seed, 2])
    z = rng.uniform(-1.0, 1.0, size=(config.eval_samples, config.latent_dim))
    ref = config.data.sample(rng, config.eval_samples)
    samples = generate_samples(model, z)
    hit, hq = mode_coverage(samples, config.data.center_array, config.coverage_radius)
    return proxy_fid(samples, ref), hit, hq


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(path, state: TrainState, config: TrainConfig) -> Path:
    m = state.model
    arrays = {f"param/{k}": v for k, v in m.params.items()}
    if state.opt.kind == "adam":
        arrays |= {f"adam_m/{k}": v for k, v in state.opt.m.items()}
        arrays |= {f"adam_v/{k}": v for k, v in state.opt.v.items()}
    header = {
        "architecture": {"gen": m.gen.to_dict(), "disc": m.disc.to_dict(),
                         "latent_dim": m.latent_dim, "data_dim": m.data_dim},
        "optimizer": {"kind": state.opt.kind, "t": state.opt.t},
        "rng_state": state.rng_state,
        "config": config.to_dict(),
    }
    return storage.write_checkpoint(path, state.step, header, arrays)


def load_checkpoint(path) -> tuple[TrainState, TrainConfig]:
    ck = storage.read_checkpoint(path)
    h = ck.header
    try:
        arch = h["architecture"]
        gen, disc = MlpSpec.from_dict(arch["gen"]), MlpSpec.from_dict(arch["disc"])
        params = {k[len("param/"):]: v for k, v in ck.arrays.items() if k.startswith("param/")}
        model = GanModel(gen, disc, params)
        kind, t = h["optimizer"]["kind"], int(h["optimizer"]["t"])
        if kind == "adam":
            m = {k[len("adam_m/"):]: v for k, v in ck.arrays.items() if k.startswith("adam_m/")}
            v = {k[len("adam_v/"):]: v for k, v in ck.arrays.items() if k.startswith("adam_v/")}
            opt = OptimizerState("adam", t, m, v)
        else:
            opt = OptimizerState("sgd", t)
        config = TrainConfig.from_dict(h["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise storage.CheckpointError(f"{path}: inconsistent checkpoint contents ({exc})") from None
    return TrainState(model, opt, h["rng_state"], ck.step), config


# -- driver ----------------------------------------------------------------------

@dataclass
class RunResult:
    state: TrainState
    records: list[MetricsRecord]
    checkpoints: list[Path]
    final_eval: tuple[float, int, float] | None = None


def _compatible(a: TrainConfig, b: TrainConfig) -> bool:
    return replace(a, total_steps=0, checkpoint_interval=0) == replace(b, total_steps=0, checkpoint_interval=0)


def train(config: TrainConfig, out_dir=None, resume_from=None,
          on_record: Callable[[MetricsRecord], None] | None = None) -> RunResult:
    """Run ``config.total_steps`` steps, optionally continuing a checkpoint.

    With ``out_dir`` set, writes ``metrics.csv`` and ``ckpt_<step>.logn``
    files there. A fresh run always writes the step-0 checkpoint.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if resume_from is not None:
        state, saved = load_checkpoint(resume_from)
        if not _compatible(saved, config):
            raise TrainConfigError("resume config differs from the checkpointed one beyond total_steps")
    else:
        state = initial_state(config)
    checkpoints: list[Path] = []
    log = None
    if out is not None:
        metrics_path = out / "metrics.csv"
        resuming = resume_from is not None and metrics_path.exists()
        if resuming:
            storage.truncate_csv(metrics_path, state.step)
        log = storage.CsvLog(metrics_path, METRIC_COLUMNS, append=resuming)
        if resume_from is None:
            checkpoints.append(save_checkpoint(out / f"ckpt_{0:07d}.logn", state, config))
    records: list[MetricsRecord] = []
    final_eval = None
    try:
        while state.step < config.total_steps:
            try:
                state, rec = train_step(state, config)
            except ad.NonFiniteError as exc:
                dump = None
                if out is not None:
                    dump = out / "abort_dump.json"
                    last = asdict(records[-1]) if records else None
                    dump.write_text(json.dumps({"step": state.step + 1, "reason": str(exc), "last_record": last},
                                               indent=2))
                raise TrainingAborted(state.step + 1, str(exc), dump) from exc
            last_step = state.step == config.total_steps
            if config.eval_interval and (state.step % config.eval_interval == 0 or last_step):
                final_eval = eval_metrics(state.model, config)
                rec = replace(rec, proxy_fid=final_eval[0], mode_coverage=final_eval[1], hq_fraction=final_eval[2])
            records.append(rec)
            if log is not None and (state.step % config.metric_interval == 0 or last_step):
                log.write(rec)
            if out is not None and config.checkpoint_interval and state.step % config.checkpoint_interval == 0:
                checkpoints.append(save_checkpoint(out / f"ckpt_{state.step:07d}.logn", state, config))
            if on_record is not None:
                on_record(rec)
        if out is not None and state.step > 0 and (not checkpoints or checkpoints[-1].name != f"ckpt_{state.step:07d}.logn"):
            checkpoints.append(save_checkpoint(out / f"ckpt_{state.step:07d}.logn", state, config))
    finally:
        if log is not None:
            log.close()
    return RunResult(state, records, checkpoints, final_eval)
