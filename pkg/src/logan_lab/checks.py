"""Oracle and property checks, runnable from the CLI (``logan-lab check``).

Every check returns a :class:`CheckResult` holding the worst error seen
and the tolerance it was held to. The builders of toy models and the
finite-difference oracles live here too so tests can reuse them.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import games
from .latent import LatentOptConfig, ngd_step, ngd_step_oracle, refine_latent
from .metrics import GaussianSummary, gaussian_frechet, moving_normalise
from .models import GanModel, LossKind, MlpSpec, critic_value, init_model
from .trainer import AblationFlags, build_losses


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_error: float
    tolerance: float
    passed: bool
    seconds: float = 0.0
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} max_err={self.max_error:.3e}  tol={self.tolerance:.1e}  {self.detail}"


# -- model builders ---------------------------------------------------------------

def toy_model(theta_d: float, theta_g: float) -> GanModel:
    """The scalar model f = theta_D * theta_G * z (linear G and D, no biases)."""
    spec = MlpSpec((1, 1), bias=False)
    return GanModel(spec, spec, {"G/W0": np.array([[float(theta_g)]]), "D/W0": np.array([[float(theta_d)]])})


def random_tiny_model(rng: np.random.Generator, activation: str = "leaky_relu") -> GanModel:
    """Random G: 2 -> 4 -> 2 and D: 2 -> 3 -> 1 (37 parameters at most)."""
    latent = int(rng.integers(1, 3))
    gen = MlpSpec((latent, 4, 2), activation=activation)
    disc = MlpSpec((2, 3, 1), activation=activation)
    model = init_model(gen, disc, latent, 2, int(rng.integers(0, 2**31)))
    # random biases so kinks are not all at the origin
    params = {k: (rng.normal(scale=0.3, size=v.shape) if "/b" in k else v) for k, v in model.params.items()}
    return model.with_params(params)


def slope(alphas, errors) -> float:
    """Least-squares slope of log(error) against log(alpha)."""
    return float(np.polyfit(np.log(alphas), np.log(errors), 1)[0])


def relative_error(a, b, floor: float = 1e-12) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(b))), floor))


# -- derivative oracles -----------------------------------------------------------

def critic_fn(model: GanModel, n: int = 1) -> Callable[[dict, np.ndarray], float]:
    """Numeric f(params, z) summed over rows, with one compiled program."""
    u = ad.var("u", (n, model.latent_dim))
    prog = ad.Program([ad.total(critic_value(model, u))])
    return lambda params, z: float(prog.run({**params, "u": z})[0])


def fd_logan_gradient(model: GanModel, z: np.ndarray, alpha: float,
                      eps_outer: float = 1e-4, eps_inner: float = 1e-5) -> np.ndarray:
    """d f(z'(theta); theta) / d theta by nested central differences.

    The inner difference supplies the latent gradient for the GD step
    z' = clip(z + alpha df/dz); the outer one differentiates the result.
    """
    f = critic_fn(model, z.shape[0])
    names = model.d_names + model.g_names

    def refined_value(params):
        g = ad.finite_difference(lambda zz: f(params, zz), z, eps_inner)
        return f(params, np.clip(z + alpha * g, -1.0, 1.0))

    flat = np.concatenate([model.params[k].ravel() for k in names])
    shapes = {k: model.params[k].shape for k in names}

    def as_params(vec):
        return games.unflatten(vec, shapes)

    return ad.finite_difference(lambda v: refined_value(as_params(v)), flat, eps_outer)


def autodiff_logan_gradient(model: GanModel, z: np.ndarray, alpha: float,
                            ablation: AblationFlags = AblationFlags()) -> np.ndarray:
    cfg = LatentOptConfig("gd", alpha=alpha, beta=1.0, w_r=0.0, c=1.0)
    step = refine_latent(model, ad.const(z), cfg, stop_d=ablation.block_d_term, stop_g=ablation.block_g_term)
    f = ad.total(critic_value(model, step.z_prime))
    return games.flatten(ad.gradient(f, model.d_names + model.g_names, model.env()))


def toy_hand_gradient(theta_d: float, theta_g: float, z: float, alpha: float) -> tuple[float, float]:
    """Hand expansion for f = theta_D theta_G z after one GD latent step.

    dz = alpha theta_D theta_G, so d f(z')/d theta_D = theta_G z' + alpha theta_D theta_G^2
    and symmetrically for theta_G (clip inactive).
    """
    zp = z + alpha * theta_d * theta_g
    return theta_g * zp + alpha * theta_d * theta_g**2, theta_d * zp + alpha * theta_d**2 * theta_g


def smooth_latent(model: GanModel, rng, alpha: float, margin: float = 0.01, tries: int = 200) -> np.ndarray:
    """A latent whose pre-activations stay ``margin`` away from the leaky-ReLU
    kink and whose refined value stays inside the clip box."""
    for _ in range(tries):
        z = rng.uniform(-0.5, 0.5, size=(1, model.latent_dim))
        if _kink_margin(model, z) > margin:
            cfg = LatentOptConfig("gd", alpha=alpha, beta=1.0, w_r=0.0, c=1.0)
            step = refine_latent(model, ad.const(z), cfg)
            zp = ad.evaluate(step.z_prime, model.env())
            unclipped = z + ad.evaluate(step.delta_z, model.env())
            if np.all(np.abs(unclipped) < 0.95) and _kink_margin(model, zp) > margin:
                return z
    raise RuntimeError("could not find a latent away from activation kinks")


def _kink_margin(model: GanModel, z: np.ndarray) -> float:
    if model.gen.activation != "leaky_relu":
        return math.inf
    pre = []
    h = z
    for prefix, spec in (("G", model.gen), ("D", model.disc)):
        for i in range(spec.n_layers):
            h = h @ model.params[f"{prefix}/W{i}"]
            b = model.params.get(f"{prefix}/b{i}")
            if b is not None:
                h = h + b
            if i < spec.n_layers - 1:
                pre.append(np.abs(h).min())
                h = np.where(h > 0, h, spec.slope * h)
    return float(min(pre)) if pre else math.inf


def ablation_gradients(model: GanModel, n: int, latent: LatentOptConfig, env: dict,
                       loss: LossKind = LossKind.WASSERSTEIN) -> dict[tuple[bool, bool], np.ndarray]:
    """Stacked [dL_D/dtheta_D, dL_G/dtheta_G] for all four ablation settings."""
    out = {}
    for bd in (False, True):
        for bg in (False, True):
            l_d, l_g, *_ = build_losses(model, n, loss, latent, AblationFlags(bd, bg))
            exprs = ([ad.gradient_expr(l_d, k) for k in model.d_names]
                     + [ad.gradient_expr(l_g, k) for k in model.g_names])
            out[(bd, bg)] = games.flatten(ad.Program(exprs).run(env))
    return out


def frechet_bruteforce(p: GaussianSummary, q: GaussianSummary) -> float:
    """Trace of (S_p S_q)^(1/2) from the eigenvalues of the non-symmetric product."""
    ev = np.linalg.eigvals(p.cov @ q.cov)
    cross = float(np.sum(np.sqrt(np.clip(ev.real, 0.0, None))))
    d = p.mean - q.mean
    return float(d @ d + np.trace(p.cov) + np.trace(q.cov) - 2.0 * cross)


def bilinear_oracle(steps: int, lr: float, lam: float | None, x: float = 1.0, y: float = 1.0):
    """Norms from iterating the bilinear game updates by hand.

    simgrad: (x, y) <- (x - lr y, y + lr x); SGA adds -lr lam (x, y).
    """
    norms = [math.hypot(x, y)]
    for _ in range(steps):
        gx, gy = y, -x
        if lam is not None:
            gx, gy = gx + lam * x, gy + lam * y
        x, y = x - lr * gx, y - lr * gy
        norms.append(math.hypot(x, y))
    return norms


# -- the checks --------------------------------------------------------------------

def sherman_morrison_draw(rng, dim: int):
    """Random (g, alpha, beta) with g ~ N(0, s^2 I), s in [0.01, 3], beta in [0.1, 10].

    The dense oracle loses about log10(1 + |g|^2 / beta) digits, so the
    scales are kept where its own error stays far below 1e-10.
    """
    g = rng.normal(size=dim) * 10.0 ** rng.uniform(-2, 0.5)
    return g, 10.0 ** rng.uniform(-3, 1), 10.0 ** rng.uniform(-1, 1)


def check_sherman_morrison(rng, n: int = 1000) -> CheckResult:
    worst = 0.0
    dims = (2, 16, 128, 512)
    for i in range(n):
        dim = dims[i % len(dims)]
        g, alpha, beta = sherman_morrison_draw(rng, dim)
        worst = max(worst, relative_error(ngd_step(g, alpha, beta), ngd_step_oracle(g, alpha, beta), 1e-300))
    return CheckResult("sherman_morrison", worst, 1e-10, worst < 1e-10, detail=f"{n} draws")


def check_ngd_properties(rng, n: int = 500) -> CheckResult:
    worst = 0.0
    for _ in range(n):
        g = rng.normal(size=int(rng.integers(1, 64))) * 10.0 ** rng.uniform(-3, 3)
        alpha, beta = 10.0 ** rng.uniform(-3, 1), 10.0 ** rng.uniform(-3, 2)
        dz = ngd_step(g, alpha, beta)
        cos = dz @ g / (np.linalg.norm(dz) * np.linalg.norm(g))
        bound = alpha / (2.0 * math.sqrt(beta))
        worst = max(worst, abs(1.0 - cos), max(0.0, np.linalg.norm(dz) - bound) / bound)
    return CheckResult("ngd_colinear_bounded", worst, 1e-12, worst < 1e-12)


def check_mlp_gradient(rng, n: int = 20) -> CheckResult:
    worst = 0.0
    for _ in range(n):
        spec_g = MlpSpec((3, 5, 4, 2), activation="tanh")
        spec_d = MlpSpec((2, 4, 3, 1), activation="tanh")
        model = init_model(spec_g, spec_d, 3, 2, int(rng.integers(0, 2**31)))
        z = rng.uniform(-1, 1, size=(1, 3))
        f = critic_fn(model)
        names = model.d_names + model.g_names
        shapes = {k: model.params[k].shape for k in names}
        flat = games.flatten([model.params[k] for k in names])
        fd = ad.finite_difference(lambda v: f(games.unflatten(v, shapes), z), flat, 1e-5)
        u = ad.var("u", z.shape)
        exact = games.flatten(ad.gradient(ad.total(critic_value(model, u)), names, model.env(u=z)))
        worst = max(worst, relative_error(exact, fd))
    return CheckResult("mlp_gradient_vs_fd", worst, 1e-5, worst < 1e-5)


def check_nested_gradient(rng, n: int = 10) -> CheckResult:
    worst = 0.0
    x = ad.param("x")
    cube = x * x * x
    second = ad.gradient_expr(ad.gradient_expr(cube, "x"), "x")
    for v in rng.uniform(-2, 2, size=n):
        fd = ad.finite_difference(lambda p: ad.evaluate(ad.gradient_expr(cube, "x"), {"x": p}), np.array(v), 1e-5)
        worst = max(worst, relative_error(ad.evaluate(second, {"x": v}), fd), abs(ad.evaluate(second, {"x": v}) - 6 * v))
    for _ in range(n):
        model = random_tiny_model(rng, "tanh")
        z = rng.uniform(-1, 1, size=(1, model.latent_dim))
        u = ad.var("u", z.shape)
        gz = ad.gradient_expr(ad.total(critic_value(model, u)), "u")
        inner = ad.total(gz * ad.const(np.ones(z.shape)))
        names = model.d_names
        exact = games.flatten(ad.gradient(inner, names, model.env(u=z)))
        f = critic_fn(model)
        shapes = {k: model.params[k].shape for k in names}
        flat = games.flatten([model.params[k] for k in names])

        def dfdz_sum(v):
            params = {**model.params, **games.unflatten(v, shapes)}
            return float(ad.finite_difference(lambda zz: f(params, zz), z, 1e-5).sum())

        worst = max(worst, relative_error(exact, ad.finite_difference(dfdz_sum, flat, 1e-4)))
    return CheckResult("nested_gradient_vs_fd", worst, 1e-4, worst < 1e-4)


def check_logan_gradient_fd(rng, n: int = 10, alpha: float = 0.1) -> CheckResult:
    worst = 0.0
    for i in range(n):
        while True:
            model = random_tiny_model(rng, "tanh" if i % 2 else "leaky_relu")
            try:
                z = smooth_latent(model, rng, alpha)
                break
            except RuntimeError:
                continue
        worst = max(worst, relative_error(autodiff_logan_gradient(model, z, alpha), fd_logan_gradient(model, z, alpha)))
    return CheckResult("logan_gradient_vs_nested_fd", worst, 1e-4, worst < 1e-4, detail=f"{n} models")


def check_logan_toy(rng, n: int = 20) -> CheckResult:
    worst = 0.0
    for _ in range(n):
        td, tg = rng.uniform(-1, 1, size=2)
        z, alpha = rng.uniform(-0.3, 0.3), rng.uniform(0.0, 0.5)
        got = autodiff_logan_gradient(toy_model(td, tg), np.array([[z]]), alpha)
        worst = max(worst, float(np.max(np.abs(got - np.array(toy_hand_gradient(td, tg, z, alpha))))))
    return CheckResult("logan_toy_hand_expansion", worst, 1e-10, worst < 1e-10)


def check_sga_multilinear(rng) -> CheckResult:
    worst = 0.0
    for alpha in (1e-3, 1e-2, 1e-1):
        for _ in range(5):
            td, tg = rng.uniform(-1, 1, size=2)
            rep = games.logan_approx_sga_check(toy_model(td, tg), [[rng.uniform(-0.5, 0.5)]], alpha, 1.0 / 64)
            worst = max(worst, rep.discrepancy)
    return CheckResult("sga_multilinear_exact", worst, 1e-8, worst <= 1e-8)


def sga_mlp_sweep(rng, alphas=(1e-1, 1e-2, 1e-3)) -> list[float]:
    model = random_tiny_model(rng, "tanh")
    z = rng.uniform(-0.5, 0.5, size=(1, model.latent_dim))
    return [games.logan_approx_sga_check(model, z, a, 1.0 / 64).relative_discrepancy for a in alphas]


def check_sga_mlp_order(rng, n: int = 3) -> CheckResult:
    alphas = (1e-1, 1e-2, 1e-3)
    worst_slope, monotone = math.inf, True
    for _ in range(n):
        d = sga_mlp_sweep(rng, alphas)
        monotone &= d[0] > d[1] > d[2]
        worst_slope = min(worst_slope, slope(alphas, d))
    ok = monotone and worst_slope >= 0.9
    return CheckResult("sga_mlp_order", worst_slope, 0.9, ok, detail=f"min order {worst_slope:.2f}")


def check_unrolled(rng) -> CheckResult:
    toy = games.Critic(ad.param("tD") * ad.param("tG"), ("tD",), ("tG",), {"tD": np.array(1.0), "tG": np.array(2.0)})
    hand = abs(float(games.unrolled_gradient(toy, 0.1).taylor[0]) - 0.6)
    alphas = (1e-1, 1e-2, 1e-3, 1e-4)
    worst_slope = math.inf
    for _ in range(5):
        critic = games.quadratic_critic(rng)
        errs = [games.unrolled_gradient(critic, a).error for a in alphas]
        worst_slope = min(worst_slope, slope(alphas, errs))
    ok = hand < 1e-12 and worst_slope >= 1.9
    return CheckResult("unrolled_taylor_order", hand, 1e-12, ok, detail=f"min slope {worst_slope:.2f}")


def check_hessian_fd(rng, n: int = 5) -> CheckResult:
    worst = 0.0
    for _ in range(n):
        game = games.quadratic_game(rng.normal(size=(2, 2)), rng.normal(size=(2, 2)),
                                    rng.normal(size=2), rng.normal(size=2), *rng.normal(size=2))
        h = games.game_hessian(game)
        theta = game.flat_params()

        def g_at(v):
            return games.simultaneous_grad(game.with_flat_params(v))

        fd = np.stack([(g_at(theta + 1e-5 * e) - g_at(theta - 1e-5 * e)) / 2e-5 for e in np.eye(theta.size)], axis=1)
        worst = max(worst, relative_error(h, fd))
    return CheckResult("hessian_vs_fd", worst, 1e-4, worst < 1e-4)


def check_bilinear_dynamics(rng) -> CheckResult:
    sim = games.simulate_dynamics(games.bilinear_game(), "simgrad", 0.1, 100)
    sga = games.simulate_dynamics(games.bilinear_game(), "sga", 0.1, 100, lam=1.0)
    err = max(np.max(np.abs(np.array(sim.param_norms) - bilinear_oracle(100, 0.1, None))),
              np.max(np.abs(np.array(sga.param_norms) - bilinear_oracle(100, 0.1, 1.0))))
    ok = bool(np.all(np.diff(sim.param_norms) > 0) and np.all(np.diff(sga.param_norms) < 0)) and err < 1e-12
    return CheckResult("bilinear_dynamics", float(err), 1e-12, ok)


def check_ablation_decomposition(rng, n: int = 5) -> CheckResult:
    worst = 0.0
    latent = LatentOptConfig("ngd", alpha=0.9, beta=0.1, w_r=0.1, c=1.0)
    for _ in range(n):
        model = random_tiny_model(rng)
        nb = 4
        env = model.env(z=rng.uniform(-1, 1, size=(nb, model.latent_dim)), x=rng.normal(size=(nb, 2)))
        g = ablation_gradients(model, nb, latent, env)
        base = g[(True, True)]
        d_term, g_term = g[(False, True)] - base, g[(True, False)] - base
        worst = max(worst, relative_error(base + d_term + g_term, g[(False, False)]))
    return CheckResult("ablation_decomposition", worst, 1e-12, worst < 1e-12)


def check_frechet(rng, n: int = 20) -> CheckResult:
    worst = 0.0
    for i in range(n):
        dim = 2 if i % 2 else 8
        a, b = rng.normal(size=(dim, dim)), rng.normal(size=(dim, dim))
        p = GaussianSummary(rng.normal(size=dim), a @ a.T, 100)
        q = GaussianSummary(rng.normal(size=dim), b @ b.T, 100)
        ref = frechet_bruteforce(p, q)
        worst = max(worst, abs(gaussian_frechet(p, q) - ref) / max(1.0, abs(ref)),
                    abs(gaussian_frechet(p, q) - gaussian_frechet(q, p)))
    return CheckResult("frechet_vs_bruteforce", worst, 1e-8, worst < 1e-8)


def check_moving_normalise(rng) -> CheckResult:
    x = rng.normal(size=200)
    base = moving_normalise(x, 20).values
    exact = all(np.array_equal(moving_normalise(k * x, 20).values, base) for k in (0.25, 2.0, 1024.0))
    alt = np.array([1.0, -1.0] * 10)
    err = float(np.max(np.abs(moving_normalise(alt, 2).values - alt[:-1] / math.sqrt(2.0))))
    return CheckResult("moving_normalise", err, 1e-12, exact and err < 1e-12)


ALL_CHECKS = (check_sherman_morrison, check_ngd_properties, check_mlp_gradient, check_nested_gradient,
              check_logan_gradient_fd, check_logan_toy, check_sga_multilinear, check_sga_mlp_order,
              check_unrolled, check_hessian_fd, check_bilinear_dynamics, check_ablation_decomposition,
              check_frechet, check_moving_normalise)


def run_checks(seed: int = 0) -> list[CheckResult]:
    results = []
    for i, check in enumerate(ALL_CHECKS):
        rng = np.random.default_rng([seed, i])
        t0 = time.perf_counter()
        try:
            res = check(rng)
        except Exception as exc:  # a crashing check is a failing check
            res = CheckResult(check.__name__.removeprefix("check_"), math.inf, 0.0, False,
                              detail=f"{type(exc).__name__}: {exc}")
        results.append(CheckResult(res.name, res.max_error, res.tolerance, res.passed,
                                   time.perf_counter() - t0, res.detail))
    return results
