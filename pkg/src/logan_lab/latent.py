"""Latent refinement: gradient ascent or damped natural-gradient steps on z.

With the empirical Fisher ``F = g g^T + beta I`` the natural-gradient step
``alpha F^{-1} g`` collapses (Sherman-Morrison) to ``alpha g / (beta + |g|^2)``;
``ngd_step`` uses that closed form and ``ngd_step_oracle`` solves the dense
system so the two can be checked against each other.

Batched latents are ``(N, dim)`` matrices and every row is treated as its
own sample: norms and curvature estimates are per row, never pooled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Expr
from .models import GanModel, critic_value


class LatentConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LatentOptConfig:
    method: str = "ngd"
    alpha: float = 0.9
    beta: float = 0.1
    w_r: float = 0.1
    c: float = 0.8
    steps: int = 1
    eval_steps: int = 0

    def __post_init__(self):
        if self.method not in ("gd", "ngd"):
            raise LatentConfigError(f"method must be 'gd' or 'ngd', got {self.method!r}")
        if not self.alpha >= 0:
            raise LatentConfigError("alpha must be non-negative")
        if self.method == "ngd" and not self.beta > 0:
            raise LatentConfigError("beta must be positive for natural gradient steps")
        if not self.w_r >= 0:
            raise LatentConfigError("w_r must be non-negative")
        if not 0.0 <= self.c <= 1.0:
            raise LatentConfigError("c must lie in [0, 1]")
        if int(self.steps) != self.steps or self.steps < 1:
            raise LatentConfigError("steps must be a positive integer")
        if int(self.eval_steps) != self.eval_steps or self.eval_steps < 0:
            raise LatentConfigError("eval_steps must be a non-negative integer")

    def with_(self, **kw) -> LatentOptConfig:
        return replace(self, **kw)


# Latent defaults for small and for large, deep models.
SMALL_PROFILE = LatentOptConfig("ngd", alpha=0.9, beta=0.1, w_r=0.1, c=0.8)
LARGE_PROFILE = LatentOptConfig("ngd", alpha=0.9, beta=5.0, w_r=300.0, c=0.5)
PROFILES = {"small": SMALL_PROFILE, "large": LARGE_PROFILE}


def _checked(g) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if not np.isfinite(g).all():
        raise ad.NonFiniteError("latent gradient is not finite")
    return g


def gd_step(g, alpha: float):
    """Delta z = alpha * g."""
    if isinstance(g, Expr):
        return g * float(alpha)
    return float(alpha) * _checked(g)


def ngd_step(g, alpha: float, beta: float):
    """Closed-form damped NGD step, alpha * g / (beta + |g|^2), per row."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    if isinstance(g, Expr):
        return _ngd_expr(g, alpha, beta)[0]
    g = _checked(g)
    sq = np.sum(g * g, axis=-1, keepdims=True)
    return (alpha / (beta + sq)) * g


def _ngd_expr(g: Expr, alpha, beta):
    if len(g.shape) == 2:
        curvature = 1.0 / (float(beta) + ad.sum_axis(g * g, 1))
        return ad.expand(curvature * float(alpha), g.shape) * g, curvature
    curvature = 1.0 / (float(beta) + ad.total(g * g))
    return g * (curvature * float(alpha)), curvature


def ngd_step_oracle(g, alpha: float, beta: float) -> np.ndarray:
    """Solve (g g^T + beta I) dz = alpha g densely; rows are separate samples."""
    g = _checked(g)
    if g.ndim == 2:
        return np.stack([ngd_step_oracle(row, alpha, beta) for row in g])
    assert beta > 0, "damped Fisher is singular only for beta <= 0"
    if g.size > 512:
        raise ValueError("dense oracle is limited to dimension 512")
    fisher = np.outer(g, g) + beta * np.eye(g.size)
    return np.linalg.solve(fisher, alpha * g)


def curvature_estimate(g, beta: float) -> np.ndarray:
    g = _checked(g)
    return 1.0 / (beta + np.sum(g * g, axis=-1))


def n_optimised(c: float, dim: int) -> int:
    # guard against c * dim landing a hair above an integer
    return min(dim, max(0, math.ceil(c * dim - 1e-9)))


def mask_vector(c: float, dim: int) -> np.ndarray:
    """1 on the leading ceil(c * dim) coordinates, 0 elsewhere."""
    if not 0.0 <= c <= 1.0:
        raise ValueError("c must lie in [0, 1]")
    m = np.zeros(dim)
    m[: n_optimised(c, dim)] = 1.0
    return m


def apply_mask(dz, c: float, dim: int | None = None):
    if isinstance(dz, Expr):
        dim = dz.shape[-1] if dim is None else dim
        m = mask_vector(c, dim)
        if np.all(m == 1.0):
            return dz
        return dz * ad.const(np.broadcast_to(m, dz.shape))
    dz = np.asarray(dz, dtype=np.float64)
    return dz * mask_vector(c, dz.shape[-1] if dim is None else dim)


def latent_regulariser(dz, w_r: float):
    """R_z = w_r * |dz|^2; for a batch, the mean over rows."""
    if w_r < 0:
        raise ValueError("w_r must be non-negative")
    if isinstance(dz, Expr):
        rows = dz.shape[0] if len(dz.shape) == 2 else 1
        return ad.total(dz * dz) * (float(w_r) / rows)
    dz = np.asarray(dz, dtype=np.float64)
    rows = dz.shape[0] if dz.ndim == 2 else 1
    return float(w_r) * float(np.sum(dz * dz)) / rows


@dataclass(frozen=True)
class LatentStepResult:
    """Refined latent as expressions over the model parameters.

    ``delta_z`` is the masked, pre-clip update (summed over steps) and
    ``g`` the first step's gradient. ``curvature`` is the per-row
    1/(beta + |g|^2) for NGD and None for GD.
    """

    z_prime: Expr
    delta_z: Expr
    g: Expr
    curvature: Expr | None


_POINT = "__latent_point__"


def latent_gradient(model: GanModel, n: int, stop_d: bool = False, stop_g: bool = False) -> tuple[Expr, Expr]:
    """(u, df/du) for a fresh (n, latent_dim) variable u; substitute u to move the point."""
    u = ad.var(_POINT, (n, model.latent_dim))
    f = ad.total(critic_value(model, u, stop_d=stop_d, stop_g=stop_g))
    return u, ad.gradient_expr(f, u)


def refine_latent(model: GanModel, z, config: LatentOptConfig,
                  stop_d: bool = False, stop_g: bool = False) -> LatentStepResult:
    """Record ``config.steps`` latent steps as a differentiable sub-graph.

    ``stop_d``/``stop_g`` cut the dependence of the step on theta_D/theta_G
    (the ablations that remove the second-order terms).
    """
    z = z if isinstance(z, Expr) else ad.const(np.atleast_2d(z))
    if len(z.shape) != 2 or z.shape[1] != model.latent_dim:
        raise ValueError(f"z must have shape (N, {model.latent_dim}), got {z.shape}")
    u, grad_at_u = latent_gradient(model, z.shape[0], stop_d, stop_g)
    point, total_dz, first_g, first_curv = z, None, None, None
    for _ in range(config.steps):
        g = ad.substitute(grad_at_u, {u.name: point})
        if config.method == "gd":
            dz, curv = gd_step(g, config.alpha), None
        else:
            dz, curv = _ngd_expr(g, config.alpha, config.beta)
        dz = apply_mask(dz, config.c)
        if first_g is None:
            first_g, first_curv = g, curv
        total_dz = dz if total_dz is None else total_dz + dz
        point = ad.clip(point + dz, -1.0, 1.0)
    return LatentStepResult(point, total_dz, first_g, first_curv)


class LatentRefiner:
    """Numeric (non-differentiable) refinement for evaluation-time sweeps."""

    def __init__(self, model: GanModel, n: int, config: LatentOptConfig):
        self.model = model
        self.config = config
        u, g = latent_gradient(model, n)
        self._u = u.name
        self._grad = ad.Program([g])
        self._f = ad.Program([critic_value(model, u)])

    def critic(self, z) -> np.ndarray:
        return self._f.run(self.model.env(**{self._u: z}))[0][:, 0]

    def step(self, z: np.ndarray) -> np.ndarray:
        g = self._grad.run(self.model.env(**{self._u: z}))[0]
        if self.config.method == "gd":
            dz = gd_step(g, self.config.alpha)
        else:
            dz = ngd_step(g, self.config.alpha, self.config.beta)
        return np.clip(z + apply_mask(dz, self.config.c), -1.0, 1.0)

    def refine(self, z: np.ndarray, steps: int) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        for _ in range(steps):
            z = self.step(z)
        return z
