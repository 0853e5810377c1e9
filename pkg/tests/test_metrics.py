import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from logan_lab.checks import frechet_bruteforce, random_tiny_model
from logan_lab.latent import LatentOptConfig
from logan_lab.metrics import (EvalSettings, GaussianSummary, MetricError, eval_latent_steps_sweep, gaussian_frechet,
                               generate_samples, mode_coverage, moving_normalise, proxy_fid, sample_latents,
                               truncation_sweep)
from logan_lab.models import MlpSpec, init_model
from logan_lab.trainer import DataDistribution


def gs(mean, cov):
    return GaussianSummary(np.asarray(mean, float), np.asarray(cov, float), 10)


def test_frechet_examples():
    p = gs([0, 0], np.eye(2))
    assert gaussian_frechet(p, p) == pytest.approx(0.0, abs=1e-12)
    assert gaussian_frechet(p, gs([1, 0], np.eye(2))) == pytest.approx(1.0, abs=1e-12)
    assert gaussian_frechet(gs([0, 0], 4 * np.eye(2)), p) == pytest.approx(2.0, abs=1e-12)


def test_frechet_errors():
    with pytest.raises(MetricError):
        gaussian_frechet(gs([0, 0], np.eye(2)), gs([0], [[1.0]]))
    with pytest.raises(MetricError):
        gs([0, 0], [[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(MetricError):
        gs([0, 0], [[1.0, 0.5], [0.0, 1.0]])


def random_spd(rng, n, rank=None):
    a = rng.normal(size=(n, rank or n))
    return a @ a.T


@pytest.mark.parametrize("dim", [2, 8])
def test_frechet_matches_scipy_sqrtm(dim, rng):
    for _ in range(10):
        p = gs(rng.normal(size=dim), random_spd(rng, dim))
        q = gs(rng.normal(size=dim), random_spd(rng, dim))
        root = scipy.linalg.sqrtm(p.cov @ q.cov).real
        ref = np.sum((p.mean - q.mean) ** 2) + np.trace(p.cov + q.cov - 2 * root)
        assert gaussian_frechet(p, q) == pytest.approx(ref, rel=1e-8, abs=1e-8)
        assert gaussian_frechet(p, q) == pytest.approx(frechet_bruteforce(p, q), rel=1e-8, abs=1e-8)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 6))
def test_frechet_symmetric_nonnegative(seed, dim):
    rng = np.random.default_rng(seed)
    p = gs(rng.normal(size=dim), random_spd(rng, dim, max(1, dim - 1)))
    q = gs(rng.normal(size=dim), random_spd(rng, dim))
    d_pq, d_qp = gaussian_frechet(p, q), gaussian_frechet(q, p)
    assert d_pq >= 0
    assert d_pq == pytest.approx(d_qp, rel=1e-8, abs=1e-10)


def test_degenerate_covariance_is_clamped():
    p = gs([0, 0], [[1.0, 1.0], [1.0, 1.0]])  # rank one
    assert gaussian_frechet(p, p) == pytest.approx(0.0, abs=1e-7)


def test_mode_coverage_examples():
    ring = DataDistribution.ring().center_array
    assert mode_coverage(np.repeat(ring[:1], 5, axis=0), ring, 0.1) == (1, 1.0)
    assert mode_coverage(ring, ring, 0.1) == (8, 1.0)
    far = np.zeros((4, 2))  # distance 2 from every center on the radius-2 ring
    assert mode_coverage(far, ring, 1.0) == (0, 0.0)
    with pytest.raises(MetricError):
        mode_coverage(np.zeros((0, 2)), ring, 0.1)
    with pytest.raises(MetricError):
        mode_coverage(ring, ring, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.01, 1.0), st.floats(0.0, 1.0))
def test_mode_coverage_properties(seed, radius, extra):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=2, size=(30, 2))
    c = rng.normal(scale=2, size=(6, 2))
    base = mode_coverage(x, c, radius)
    assert mode_coverage(x[rng.permutation(30)], c[rng.permutation(6)], radius) == base
    wider = mode_coverage(x, c, radius + extra)
    assert wider[0] >= base[0] and wider[1] >= base[1]


def test_moving_normalise_examples():
    alt = np.array([1.0, -1.0] * 6)
    out = moving_normalise(alt, 2)
    assert out.ok and out.values.size == alt.size - 1
    assert np.max(np.abs(out.values - alt[:-1] / math.sqrt(2))) <= 1e-12
    flat = moving_normalise(np.ones(10), 3)
    assert not flat.ok and flat.zero_sigma.all() and np.isnan(flat.values).all()
    with pytest.raises(MetricError):
        moving_normalise(np.ones(3), 5)
    with pytest.raises(MetricError):
        moving_normalise(np.ones(3), 1)


def test_moving_normalise_uses_n_minus_one(rng):
    x = rng.normal(size=30)
    out = moving_normalise(x, 7).values
    assert out[4] == pytest.approx(x[4] / np.std(x[4:11], ddof=1), rel=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.integers(-20, 20))
def test_moving_normalise_power_of_two_scaling_is_bit_exact(seed, exponent):
    x = np.random.default_rng(seed).normal(size=40)
    assert np.array_equal(moving_normalise(x * 2.0**exponent, 5).values, moving_normalise(x, 5).values)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-6, 1e6))
def test_moving_normalise_any_positive_scaling(seed, k):
    x = np.random.default_rng(seed).normal(size=40)
    a, b = moving_normalise(k * x, 5).values, moving_normalise(x, 5).values
    assert np.max(np.abs(a - b)) <= 1e-12 * np.max(np.abs(b))


@pytest.fixture
def small_setup(rng):
    m = init_model(MlpSpec((4, 8, 2)), MlpSpec((2, 8, 1)), 4, 2, 1)
    data = DataDistribution.ring()
    settings_ = EvalSettings(data.center_array, data.sample(rng, 300), 0.5, n_samples=300, seed=5)
    return m, settings_


def test_truncation_identity_at_one(small_setup):
    m, s = small_setup
    z = sample_latents(np.random.default_rng(s.seed), s.n_samples, m.latent_dim)
    plain = generate_samples(m, z)
    pt = truncation_sweep(m, [1.0], s)[0]
    assert pt.proxy_fid == proxy_fid(plain, s.reference)
    assert (pt.mode_coverage, pt.hq_fraction) == mode_coverage(plain, s.centers, s.radius)
    with pytest.raises(MetricError):
        truncation_sweep(m, [0.0], s)


def test_truncation_variance_law(rng):
    z = sample_latents(rng, 200_000, 1)[:, 0]
    for s in (0.5, 0.1, 0.02):
        assert np.var(s * z) == pytest.approx(s * s * np.var(z), rel=1e-12)


def test_eval_steps_zero_is_plain_sampling(small_setup):
    m, s = small_setup
    pts = eval_latent_steps_sweep(m, [0, 1, 5], s, LatentOptConfig("gd", alpha=1e-3, c=1.0))
    z = sample_latents(np.random.default_rng(s.seed), s.n_samples, m.latent_dim)
    assert pts[0].proxy_fid == proxy_fid(generate_samples(m, z), s.reference)
    assert pts[0].mean_critic_gain == 0.0
    assert [p.steps for p in pts] == [0, 1, 5]
    assert all(p.ascent_violations == 0 for p in pts)  # small GD steps ascend f
