"""Differentiable-games reference math on models small enough for dense Hessians.

A :class:`Game` is an ordered list of players, each owning some identifiers
and a scalar loss expression. From it we compute the simultaneous gradient,
the game Hessian, its antisymmetric part and the SGA-adjusted gradient, and
we run plain gradient dynamics with several update rules.

The LOGAN-specific pieces compare the gradients obtained by differentiating
through one latent step with the approximate SGA update of the three-player
game, and the first-order (Taylor) form of one-step unrolling with the exact
unrolled gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Expr
from .latent import LatentOptConfig, refine_latent
from .models import GanModel, critic_value

MAX_GAME_PARAMS = 512


class GameError(ValueError):
    pass


@dataclass(frozen=True)
class Player:
    name: str
    params: tuple[str, ...]
    loss: Expr


@dataclass(frozen=True)
class LatentHelper:
    """A latent identifier that is refined by ``alpha`` steps descending the
    loss of ``helps`` before every update (the LOGAN update rule)."""

    name: str
    helps: int
    alpha: float


@dataclass
class Game:
    players: list[Player]
    env: dict[str, np.ndarray]
    latent: LatentHelper | None = None

    def __post_init__(self):
        self.env = {k: np.asarray(v, dtype=np.float64) for k, v in self.env.items()}
        for p in self.players:
            if p.loss.shape != ():
                raise GameError(f"loss of player {p.name!r} is not scalar")
            own = ad.free_vars(p.loss)
            if not any(n in own for n in p.params):
                raise GameError(f"loss of player {p.name!r} does not depend on its own parameters")
            for n in p.params:
                if n not in self.env:
                    raise GameError(f"parameter {n!r} is not bound")
        if self.n_params > MAX_GAME_PARAMS:
            raise GameError(f"{self.n_params} parameters exceed the dense limit of {MAX_GAME_PARAMS}")

    @property
    def param_names(self) -> list[str]:
        return [n for p in self.players for n in p.params]

    @property
    def n_params(self) -> int:
        return sum(self.env[n].size for n in self.param_names)

    def flat_params(self) -> np.ndarray:
        return flatten([self.env[n] for n in self.param_names])

    def with_flat_params(self, theta: np.ndarray) -> Game:
        env = dict(self.env)
        env.update(unflatten(theta, {n: self.env[n].shape for n in self.param_names}))
        return Game(self.players, env, self.latent)


def flatten(arrays: Sequence[np.ndarray]) -> np.ndarray:
    if not arrays:
        return np.zeros(0)
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])


def unflatten(theta: np.ndarray, shapes: Mapping[str, tuple]) -> dict[str, np.ndarray]:
    out, i = {}, 0
    for n, s in shapes.items():
        k = int(np.prod(s, dtype=np.int64))
        out[n] = theta[i:i + k].reshape(s)
        i += k
    return out


# --------------------------------------------------------------------------
# Named games
# --------------------------------------------------------------------------


def bilinear_game(x: float = 1.0, y: float = 1.0) -> Game:
    """L1 = x y, L2 = -x y: the textbook cycling game."""
    vx, vy = ad.param("x"), ad.param("y")
    return Game([Player("p1", ("x",), vx * vy), Player("p2", ("y",), -(vx * vy))],
                {"x": x, "y": y})


def potential_game(x: float = 1.0, y: float = 1.0) -> Game:
    """Both players minimise x^2 + y^2."""
    vx, vy = ad.param("x"), ad.param("y")
    loss = vx * vx + vy * vy
    return Game([Player("p1", ("x",), loss), Player("p2", ("y",), loss)], {"x": x, "y": y})


def quadratic_game(q1, q2, b1=(0.0, 0.0), b2=(0.0, 0.0), x: float = 1.0, y: float = 1.0) -> Game:
    """Two scalar players with L_i = 1/2 t^T Q_i t + b_i^T t, t = (x, y)."""
    vx, vy = ad.param("x"), ad.param("y")

    def loss(q, b):
        q = np.asarray(q, dtype=np.float64)
        return (0.5 * q[0, 0] * vx * vx + 0.5 * (q[0, 1] + q[1, 0]) * vx * vy
                + 0.5 * q[1, 1] * vy * vy + b[0] * vx + b[1] * vy)

    return Game([Player("p1", ("x",), loss(q1, b1)), Player("p2", ("y",), loss(q2, b2))],
                {"x": x, "y": y})


NAMED_GAMES = {"bilinear": bilinear_game, "potential": potential_game}


# --------------------------------------------------------------------------
# Simultaneous gradient, Hessian, SGA
# --------------------------------------------------------------------------


def _own_gradients(game: Game) -> list[Expr]:
    return [ad.gradient_expr(p.loss, n) for p in game.players for n in p.params]


def simultaneous_grad(game: Game) -> np.ndarray:
    """Each player's own-loss gradient w.r.t. its own parameters, stacked."""
    parts = []
    for p in game.players:
        parts.extend(ad.gradient(p.loss, list(p.params), game.env))
    return flatten(parts)


def game_hessian(game: Game) -> np.ndarray:
    """H = d g / d theta, assembled row block by row block."""
    names = game.param_names
    rows = [ad.jacobian(g, names, game.env) for g in _own_gradients(game)]
    return np.vstack(rows)


def antisymmetric_part(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise GameError(f"expected a square matrix, got shape {h.shape}")
    return 0.5 * (h - h.T)


def sga_adjust(g, h, lam: float) -> np.ndarray:
    """g* = g + lam * A^T g."""
    g = np.asarray(g, dtype=np.float64)
    a = antisymmetric_part(h)
    if a.shape[0] != g.size:
        raise GameError(f"gradient of size {g.size} does not match Hessian {a.shape}")
    return g + lam * (a.T @ g)


# --------------------------------------------------------------------------
# Dynamics
# --------------------------------------------------------------------------


@dataclass
class Trajectory:
    method: str
    params: list[np.ndarray] = field(default_factory=list)
    param_norms: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    diverged: bool = False

    @property
    def steps(self) -> int:
        return len(self.grad_norms)


def _unrolled_grads(game: Game, alpha: float) -> list[Expr]:
    # each player differentiates its loss through every opponent's GD step
    exprs = []
    for i, p in enumerate(game.players):
        repl = {}
        for j, q in enumerate(game.players):
            if j == i:
                continue
            for n in q.params:
                repl[n] = ad.param(n, game.env[n].shape) - alpha * ad.gradient_expr(q.loss, n)
        loss = ad.substitute(p.loss, repl)
        exprs.extend(ad.gradient_expr(loss, n) for n in p.params)
    return exprs


def _logan_grads(game: Game) -> list[Expr]:
    if game.latent is None:
        raise GameError("the logan update needs a game with a latent helper")
    lat = game.latent
    helped = game.players[lat.helps].loss
    shape = game.env[lat.name].shape
    moved = ad.param(lat.name, shape) - lat.alpha * ad.gradient_expr(helped, lat.name)
    return [ad.gradient_expr(ad.substitute(p.loss, {lat.name: moved}), n)
            for p in game.players for n in p.params]


def simulate_dynamics(game: Game, method: str, lr: float, steps: int, lam: float = 1.0,
                      unroll_alpha: float | None = None, max_norm: float = 1e6) -> Trajectory:
    """Plain gradient steps theta <- theta - lr * direction(theta).

    ``method`` is one of simgrad, sga, unrolled, logan. The trajectory stops
    early and is flagged diverged once the parameter norm exceeds ``max_norm``.
    """
    if not lr > 0:
        raise GameError("lr must be positive")
    if method not in ("simgrad", "sga", "unrolled", "logan"):
        raise GameError(f"unknown method {method!r}")
    if method == "unrolled":
        prog = ad.Program(_unrolled_grads(game, lr if unroll_alpha is None else unroll_alpha))
    elif method == "logan":
        prog = ad.Program(_logan_grads(game))
    else:
        prog = ad.Program(_own_gradients(game))

    traj = Trajectory(method)
    theta = game.flat_params()
    current = game
    traj.params.append(theta.copy())
    traj.param_norms.append(float(np.linalg.norm(theta)))
    for _ in range(steps):
        g = flatten(prog.run(current.env))
        if method == "sga":
            g = sga_adjust(g, game_hessian(current), lam)
        theta = theta - lr * g
        traj.grad_norms.append(float(np.linalg.norm(g)))
        norm = float(np.linalg.norm(theta))
        if not np.isfinite(norm) or norm > max_norm:
            traj.diverged = True
            break
        current = current.with_flat_params(theta)
        traj.params.append(theta.copy())
        traj.param_norms.append(norm)
    return traj


# --------------------------------------------------------------------------
# LOGAN as approximate SGA
# --------------------------------------------------------------------------


def _single_latent(model: GanModel, z) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape != (1, model.latent_dim):
        raise GameError(f"expected one latent of dimension {model.latent_dim}, got shape {z.shape}")
    return z


def logan_game(model: GanModel, z, alpha: float, eta: float) -> Game:
    """Three players (latent step, D, G) with losses [eta L_G, L_D, L_G].

    The latent player's parameter ``dz`` is bound to the GD step alpha df/dz.
    """
    z = _single_latent(model, z)
    dz = ad.param("dz", z.shape)
    f = ad.total(critic_value(model, ad.const(z) + dz))
    u = ad.var("u", z.shape)
    step = alpha * ad.gradient(ad.total(critic_value(model, u)), ["u"], model.env(u=z))[0]
    env = model.env(dz=step)
    players = [Player("latent", ("dz",), -eta * f),
               Player("D", tuple(model.d_names), f),
               Player("G", tuple(model.g_names), -f)]
    return Game(players, env)


@dataclass
class SgaCheckReport:
    alpha: float
    eta: float
    lam: float
    logan: np.ndarray           # [dL_D/dtheta_D, dL_G/dtheta_G] through the latent step
    approx_sga: np.ndarray      # SGA without D-G cross terms, mixed partials at z'
    adjustment: np.ndarray      # the second-order part of approx_sga
    exact_sga_without_cross: np.ndarray  # from the full three-player Hessian
    cross_terms: np.ndarray
    clip_active: bool

    @property
    def discrepancy(self) -> float:
        return float(np.max(np.abs(self.approx_sga - self.logan)))

    @property
    def relative_discrepancy(self) -> float:
        scale = float(np.max(np.abs(self.logan)))
        return self.discrepancy / scale if scale > 0 else self.discrepancy


def logan_approx_sga_check(model: GanModel, z, alpha: float, eta: float,
                           block_d: bool = False, block_g: bool = False) -> SgaCheckReport:
    """Compare gradients through one GD latent step with approximate SGA.

    The SGA coefficient is fixed by lam * gamma = alpha with
    gamma = (1 + eta) / 2, so both forms carry the same factor on their
    second-order term.
    """
    if model.n_params > 64:
        raise GameError("the SGA check is meant for tiny models (<= 64 parameters)")
    z = _single_latent(model, z)
    d_names, g_names = model.d_names, model.g_names
    env = model.env()

    cfg = LatentOptConfig("gd", alpha=alpha, beta=1.0, w_r=0.0, c=1.0)
    step = refine_latent(model, ad.const(z), cfg, stop_d=block_d, stop_g=block_g)
    f_prime = ad.total(critic_value(model, step.z_prime))
    z_prime = ad.evaluate(step.z_prime, env)
    unclipped = z + ad.evaluate(step.delta_z, env)
    clip_active = bool(np.any(np.abs(unclipped) >= 1.0))
    grads = ad.gradient(f_prime, d_names + g_names, env)
    logan_d = flatten(grads[:len(d_names)])
    logan_g = -flatten(grads[len(d_names):])

    # approximate SGA: second-order terms use mixed partials at z'
    u = ad.var("u", z.shape)
    f_u = ad.total(critic_value(model, u))
    env_u = model.env(u=z_prime)
    direct = ad.gradient(f_u, d_names + g_names, env_u)
    df_dz = ad.gradient(f_u, ["u"], env_u)[0]
    mixed = ad.gradient(ad.total(ad.gradient_expr(f_u, "u") * ad.const(df_dz)), d_names + g_names, env_u)
    direct_d, direct_g = flatten(direct[:len(d_names)]), flatten(direct[len(d_names):])
    mixed_d, mixed_g = flatten(mixed[:len(d_names)]), flatten(mixed[len(d_names):])
    adjustment = np.concatenate([alpha * mixed_d, -alpha * mixed_g])
    approx = np.concatenate([direct_d, -direct_g]) + adjustment

    # exact SGA on the three-player game at the same point, split into the
    # latent-coupling part and the expensive D-G cross terms
    gamma = 0.5 * (1.0 + eta)
    lam = alpha / gamma
    game = logan_game(model, z, alpha, eta)
    game.env["dz"] = z_prime - z
    g = simultaneous_grad(game)
    a = antisymmetric_part(game_hessian(game))
    k = z.size
    n_d = logan_d.size
    exact = g + lam * (a.T @ g)
    cross = np.zeros_like(g)
    cross[k:k + n_d] = lam * (a[k + n_d:, k:k + n_d].T @ g[k + n_d:])
    cross[k + n_d:] = lam * (a[k:k + n_d, k + n_d:].T @ g[k:k + n_d])
    return SgaCheckReport(
        alpha=alpha, eta=eta, lam=lam,
        logan=np.concatenate([logan_d, logan_g]),
        approx_sga=approx,
        adjustment=adjustment,
        exact_sga_without_cross=(exact - cross)[k:],
        cross_terms=cross[k:],
        clip_active=clip_active,
    )


# --------------------------------------------------------------------------
# Unrolled GAN correspondence
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Critic:
    """A scalar critic f(theta_D, theta_G) with its parameter split."""

    f: Expr
    d_names: tuple[str, ...]
    g_names: tuple[str, ...]
    env: dict

    @classmethod
    def from_model(cls, model: GanModel, z) -> Critic:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        return cls(ad.total(critic_value(model, z)), tuple(model.d_names),
                   tuple(model.g_names), model.env())


def quadratic_critic(rng: np.random.Generator, n_d: int = 3, n_g: int = 3) -> Critic:
    """Random f = 1/2 d^T A d + d^T B g + 1/2 g^T C g + a^T d + b^T g."""
    def sym(n):
        m = rng.normal(size=(n, n))
        return 0.5 * (m + m.T)

    d, g = ad.param("theta_D", (n_d, 1)), ad.param("theta_G", (n_g, 1))
    a_m, b_m, c_m = sym(n_d), rng.normal(size=(n_d, n_g)), sym(n_g)
    a_v, b_v = rng.normal(size=(n_d, 1)), rng.normal(size=(n_g, 1))
    f = ad.total(0.5 * (d.T @ ad.const(a_m) @ d) + d.T @ ad.const(b_m) @ g
                 + 0.5 * (g.T @ ad.const(c_m) @ g) + ad.const(a_v).T @ d + ad.const(b_v).T @ g)
    env = {"theta_D": rng.normal(size=(n_d, 1)), "theta_G": rng.normal(size=(n_g, 1))}
    return Critic(f, ("theta_D",), ("theta_G",), env)


@dataclass(frozen=True)
class UnrolledResult:
    exact: np.ndarray
    taylor: np.ndarray

    @property
    def error(self) -> float:
        return float(np.max(np.abs(self.exact - self.taylor)))


def unrolled_gradient(critic: Critic | GanModel, alpha: float, which: str = "unroll_D", z=None) -> UnrolledResult:
    """Exact one-step-unrolled gradient vs its first-order Taylor form.

    ``unroll_D``: D takes the step theta_D - alpha df/dtheta_D and we return
    the gradient for theta_G. ``unroll_G``: G takes theta_G + alpha
    df/dtheta_G and we return the gradient for theta_D.
    """
    if isinstance(critic, GanModel):
        if z is None:
            raise GameError("a latent z is required when unrolling a GanModel")
        critic = Critic.from_model(critic, z)
    if which == "unroll_D":
        moved, target, sign = critic.d_names, critic.g_names, -1.0
    elif which == "unroll_G":
        moved, target, sign = critic.g_names, critic.d_names, 1.0
    else:
        raise GameError(f"which must be 'unroll_D' or 'unroll_G', got {which!r}")
    f, env = critic.f, critic.env
    shapes = ad.free_vars(f)
    step = {n: ad.gradient_expr(f, n) for n in moved}
    unrolled = ad.substitute(f, {n: ad.param(n, shapes[n]) + sign * alpha * step[n] for n in moved})
    exact = flatten(ad.gradient(unrolled, list(target), env))

    g_moved = ad.gradient(f, list(moved), env)
    direct = flatten(ad.gradient(f, list(target), env))
    coupling = None
    for n, gv in zip(moved, g_moved):
        term = ad.total(step[n] * ad.const(gv))
        coupling = term if coupling is None else coupling + term
    mixed = flatten(ad.gradient(coupling, list(target), env))
    return UnrolledResult(exact=exact, taylor=direct + sign * 2.0 * alpha * mixed)
