"""Small MLP generator/discriminator pairs and the GAN losses.

Parameters live in a flat ``{name: ndarray}`` dict keyed ``G/W0``, ``G/b0``,
..., ``D/W0``, ... Layers compute ``h @ W + b`` on row-batched inputs, so a
batch of N latents is an ``(N, latent_dim)`` matrix.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Expr


class ModelError(ValueError):
    pass


class LossKind(str, enum.Enum):
    WASSERSTEIN = "wasserstein"
    HINGE = "hinge"


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths from input to output, leaky-ReLU between layers.

    ``bias=False`` drops every bias (used for the multilinear toy models).
    Two widths means a single linear layer with no hidden units.
    ``activation="tanh"`` gives a smooth network for derivative checks
    where the piecewise-linear leaky-ReLU would hide curvature in z.
    """

    widths: tuple[int, ...]
    slope: float = 0.2
    bias: bool = True
    activation: str = "leaky_relu"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ModelError("an MLP needs at least input and output widths")
        if any(w <= 0 for w in self.widths):
            raise ModelError(f"layer widths must be positive, got {self.widths}")
        if not 0.0 < self.slope < 1.0:
            raise ModelError(f"leaky-ReLU slope must lie in (0, 1), got {self.slope}")
        if self.activation not in ("leaky_relu", "tanh"):
            raise ModelError(f"unknown activation {self.activation!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "slope": self.slope, "bias": self.bias,
                "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> MlpSpec:
        return cls(tuple(d["widths"]), float(d.get("slope", 0.2)), bool(d.get("bias", True)),
                   str(d.get("activation", "leaky_relu")))


def _layer_names(prefix: str, spec: MlpSpec, final_bias: bool):
    names = []
    for i in range(spec.n_layers):
        last = i == spec.n_layers - 1
        has_bias = spec.bias and (final_bias or not last)
        names.append((f"{prefix}/W{i}", f"{prefix}/b{i}" if has_bias else None,
                      spec.widths[i], spec.widths[i + 1]))
    return names


@dataclass(frozen=True)
class GanModel:
    gen: MlpSpec
    disc: MlpSpec
    params: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        if self.gen.widths[-1] != self.disc.widths[0]:
            raise ModelError(
                f"generator output width {self.gen.widths[-1]} != "
                f"discriminator input width {self.disc.widths[0]}")
        if self.disc.widths[-1] != 1:
            raise ModelError("discriminator must have a single output")
        expected = {n: (i, o) for n, _, i, o in self._layers()}
        expected.update({b: (1, o) for _, b, _, o in self._layers() if b})
        if set(expected) != set(self.params):
            raise ModelError(f"parameter names {sorted(self.params)} do not match the architecture")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ModelError(f"{name} has shape {self.params[name].shape}, expected {shape}")

    def _layers(self):
        return _layer_names("G", self.gen, final_bias=False) + _layer_names("D", self.disc, final_bias=True)

    @property
    def latent_dim(self) -> int:
        return self.gen.widths[0]

    @property
    def data_dim(self) -> int:
        return self.gen.widths[-1]

    @property
    def g_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("G/")]

    @property
    def d_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("D/")]

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def with_params(self, params: dict[str, np.ndarray]) -> GanModel:
        return GanModel(self.gen, self.disc, {k: np.asarray(params[k], dtype=np.float64) for k in self.params})

    def env(self, **inputs) -> dict[str, np.ndarray]:
        out = dict(self.params)
        out.update(inputs)
        return out


def init_model(gen: MlpSpec, disc: MlpSpec, latent_dim: int, data_dim: int, seed: int) -> GanModel:
    """Fan-in scaled uniform weights, zero biases; no bias on G's last layer."""
    if gen.widths[0] != latent_dim:
        raise ModelError(f"generator input width {gen.widths[0]} != latent dim {latent_dim}")
    if gen.widths[-1] != data_dim or disc.widths[0] != data_dim:
        raise ModelError(
            f"data dim {data_dim} must equal generator output ({gen.widths[-1]}) "
            f"and discriminator input ({disc.widths[0]})")
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for prefix, spec, final_bias in (("G", gen, False), ("D", disc, True)):
        for w, b, fan_in, fan_out in _layer_names(prefix, spec, final_bias):
            bound = 1.0 / np.sqrt(fan_in)
            params[w] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            if b:
                params[b] = np.zeros((1, fan_out))
    return GanModel(gen, disc, params)


def _param_expr(name: str, shape, stop: bool) -> Expr:
    p = ad.param(name, shape)
    return ad.stop_gradient(p) if stop else p


def _mlp(model: GanModel, prefix: str, spec: MlpSpec, x: Expr, stop: bool) -> Expr:
    final_bias = prefix == "D"
    h = x
    layers = _layer_names(prefix, spec, final_bias)
    for i, (w, b, fan_in, fan_out) in enumerate(layers):
        h = h @ _param_expr(w, (fan_in, fan_out), stop)
        if b:
            h = h + ad.expand(_param_expr(b, (1, fan_out), stop), (h.shape[0], fan_out))
        if i < len(layers) - 1:
            h = ad.tanh(h) if spec.activation == "tanh" else ad.leaky_relu(h, spec.slope)
    return h


def _as_input(x, width: int, what: str) -> Expr:
    x = x if isinstance(x, Expr) else ad.const(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    if len(x.shape) != 2 or x.shape[1] != width:
        raise ModelError(f"{what} must have shape (N, {width}), got {x.shape}")
    return x


def generate(model: GanModel, z, stop_g: bool = False) -> Expr:
    """x = G(z; theta_G) for a batch of latents ``z`` of shape (N, latent_dim)."""
    return _mlp(model, "G", model.gen, _as_input(z, model.latent_dim, "z"), stop_g)


def discriminate(model: GanModel, x, stop_d: bool = False) -> Expr:
    """D(x; theta_D), shape (N, 1)."""
    return _mlp(model, "D", model.disc, _as_input(x, model.data_dim, "x"), stop_d)


def critic_value(model: GanModel, z, stop_d: bool = False, stop_g: bool = False) -> Expr:
    """f(z; theta_D, theta_G) = D(G(z)), one value per row of ``z``.

    ``stop_d``/``stop_g`` wrap the respective parameters in stop-gradient.
    """
    return discriminate(model, generate(model, z, stop_g), stop_d)


def _relu(t):
    return ad.relu(t) if isinstance(t, Expr) else max(0.0, float(t))


def losses(kind: LossKind | str, d_real, d_fake):
    """(L_D, L_G) for scalar critic outputs; works on floats or expressions."""
    kind = LossKind(kind)
    if kind is LossKind.WASSERSTEIN:
        return d_fake - d_real, -d_fake
    # -min(0, -1 + t) == relu(1 - t)
    return _relu(1.0 - d_real) + _relu(1.0 + d_fake), -d_fake
