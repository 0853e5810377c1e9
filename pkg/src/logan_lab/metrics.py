"""Sample-quality metrics on low-dimensional data and the evaluation sweeps.

The proxy-FID is the Frechet distance between Gaussians fitted to raw
samples. There is no feature network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .latent import LatentOptConfig, LatentRefiner
from .models import GanModel, generate

PSD_TOL = 1e-10


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise MetricError(f"covariance shape {cov.shape} does not match mean of size {mean.size}")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12):
            raise MetricError("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        if np.linalg.eigvalsh(cov).min() < -PSD_TOL:
            raise MetricError("covariance is not positive semi-definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def fit(cls, samples) -> GaussianSummary:
        x = np.asarray(samples, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 2:
            raise MetricError("need at least two samples of shape (n, dim)")
        return cls(x.mean(axis=0), np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1]), x.shape[0])


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    if w.min() < -PSD_TOL * max(1.0, abs(w).max()):
        raise MetricError("matrix is not positive semi-definite within tolerance")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def gaussian_frechet(p: GaussianSummary, q: GaussianSummary) -> float:
    """|mu_p - mu_q|^2 + tr(S_p + S_q - 2 (S_p S_q)^(1/2)).

    tr((S_p S_q)^(1/2)) equals the sum of singular values of S_p^(1/2) S_q^(1/2).
    Singular values stay well conditioned when a covariance is singular,
    where an eigen-square-root of the product would lose half the digits.
    """
    if p.mean.shape != q.mean.shape:
        raise MetricError(f"dimension mismatch: {p.mean.size} vs {q.mean.size}")
    cross = np.linalg.svd(_psd_sqrt(p.cov) @ _psd_sqrt(q.cov), compute_uv=False).sum()
    d = p.mean - q.mean
    return max(0.0, float(d @ d + np.trace(p.cov) + np.trace(q.cov) - 2.0 * cross))


def proxy_fid(samples, reference) -> float:
    return gaussian_frechet(GaussianSummary.fit(samples), GaussianSummary.fit(reference))


def mode_coverage(samples, centers, radius: float) -> tuple[int, float]:
    """(number of modes with a sample inside ``radius``, share of samples near any mode)."""
    if not radius > 0:
        raise MetricError("radius must be positive")
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    c = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if x.shape[0] == 0 or x.size == 0:
        raise MetricError("empty sample set")
    dist = np.sqrt(((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=-1))
    near = dist <= radius
    return int(near.any(axis=0).sum()), float(near.any(axis=1).mean())


@dataclass(frozen=True)
class TruncationCurvePoint:
    s: float
    proxy_fid: float
    mode_coverage: int
    hq_fraction: float


@dataclass(frozen=True)
class EvalSettings:
    """Everything the sweeps need besides the model."""

    centers: np.ndarray
    reference: np.ndarray
    radius: float
    n_samples: int = 1000
    seed: int = 0


def sample_latents(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(n, dim))


def generate_samples(model: GanModel, z: np.ndarray) -> np.ndarray:
    u = ad.var("z", z.shape)
    return ad.evaluate(generate(model, u), model.env(z=z))


def _point_metrics(samples, settings: EvalSettings):
    hit, hq = mode_coverage(samples, settings.centers, settings.radius)
    return proxy_fid(samples, settings.reference), hit, hq


def truncated_latents(settings: EvalSettings, dim: int, s: float) -> np.ndarray:
    """The latent draw of a truncation sweep scaled by ``s`` (s = 1 is untouched)."""
    z = sample_latents(np.random.default_rng(settings.seed), settings.n_samples, dim)
    return z if s == 1.0 else s * z


def truncation_sweep(model: GanModel, s_values, settings: EvalSettings,
                     latent: LatentOptConfig | None = None, eval_steps: int = 0) -> list[TruncationCurvePoint]:
    """Metrics of G(s z) for each s; each point reuses the same latent draw."""
    s_values = [float(s) for s in s_values]
    if any(not 0.0 < s <= 1.0 for s in s_values):
        raise MetricError("truncation scales must lie in (0, 1]")
    refiner = None
    if eval_steps > 0:
        refiner = LatentRefiner(model, settings.n_samples, latent or LatentOptConfig())
    out = []
    for s in s_values:
        zs = truncated_latents(settings, model.latent_dim, s)
        if refiner is not None:
            zs = refiner.refine(zs, eval_steps)
        out.append(TruncationCurvePoint(s, *_point_metrics(generate_samples(model, zs), settings)))
    return out


@dataclass(frozen=True)
class EvalStepPoint:
    steps: int
    proxy_fid: float
    mode_coverage: int
    hq_fraction: float
    mean_critic_gain: float
    ascent_violations: int


def eval_latent_steps_sweep(model: GanModel, step_counts, settings: EvalSettings,
                            latent: LatentOptConfig) -> list[EvalStepPoint]:
    """Refine a fixed latent draw with k steps for each k and score the samples.

    ``ascent_violations`` counts samples whose critic value went down; it
    is expected to be 0 for small GD step sizes.
    """
    step_counts = [int(k) for k in step_counts]
    if any(k < 0 for k in step_counts):
        raise MetricError("step counts must be non-negative")
    z0 = sample_latents(np.random.default_rng(settings.seed), settings.n_samples, model.latent_dim)
    refiner = LatentRefiner(model, settings.n_samples, latent)
    f0 = refiner.critic(z0)
    out = []
    for k in step_counts:
        z = refiner.refine(z0, k) if k else z0
        gain = refiner.critic(z) - f0
        metrics = _point_metrics(generate_samples(model, z), settings)
        out.append(EvalStepPoint(k, *metrics, float(gain.mean()), int((gain < 0).sum())))
    return out


@dataclass(frozen=True)
class NormalisedSeries:
    values: np.ndarray
    zero_sigma: np.ndarray

    @property
    def ok(self) -> bool:
        return not self.zero_sigma.any()


def moving_normalise(series, window: int = 20) -> NormalisedSeries:
    """x_t / sigma_t where sigma_t is the sample std of x over [t, t + N - 1].

    Windows with zero spread are flagged and their entries set to NaN.
    """
    x = np.asarray(series, dtype=np.float64).ravel()
    if window < 2:
        raise MetricError("window must be at least 2")
    if x.size < window:
        raise MetricError(f"window {window} is longer than the series ({x.size})")
    windows = np.lib.stride_tricks.sliding_window_view(x, window)
    mu = windows.mean(axis=1)
    sigma = np.sqrt(((windows - mu[:, None]) ** 2).sum(axis=1) / (window - 1))
    head = x[: sigma.size]
    zero = sigma == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.where(zero, np.nan, head / np.where(zero, 1.0, sigma))
    return NormalisedSeries(values, zero)
