import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from logan_lab import autodiff as ad
from logan_lab.checks import toy_model
from logan_lab.models import (GanModel, LossKind, MlpSpec, ModelError, critic_value, discriminate, generate,
                              init_model, losses)

G = MlpSpec((3, 8, 2))
D = MlpSpec((2, 8, 1))


def test_init_is_deterministic_per_seed():
    a, b, c = init_model(G, D, 3, 2, 0), init_model(G, D, 3, 2, 0), init_model(G, D, 3, 2, 1)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert any(not np.array_equal(a.params[k], c.params[k]) for k in a.params)


def test_init_layout():
    m = init_model(G, D, 3, 2, 0)
    assert "G/b1" not in m.params and "D/b1" in m.params
    assert all(np.all(m.params[k] == 0) for k in m.params if "/b" in k)
    bound = 1 / np.sqrt(3)
    assert np.all(np.abs(m.params["G/W0"]) <= bound)


def test_width_mismatch_rejected():
    with pytest.raises(ModelError):
        init_model(MlpSpec((3, 8, 2)), MlpSpec((3, 8, 1)), 3, 2, 0)
    with pytest.raises(ModelError):
        MlpSpec((2, 4, 1), slope=1.5)
    with pytest.raises(ModelError):
        GanModel(G, MlpSpec((2, 4, 3)), {})


def test_zero_weights_give_zero_output():
    m = init_model(G, D, 3, 2, 0)
    m = m.with_params({k: np.zeros_like(v) for k, v in m.params.items()})
    out = ad.evaluate(generate(m, np.array([[0.3, -0.9, 0.5]])), m.env())
    assert np.all(out == 0.0)


def test_identity_generator():
    spec = MlpSpec((1, 1), bias=False)
    m = GanModel(spec, spec, {"G/W0": np.array([[1.0]]), "D/W0": np.array([[1.0]])})
    assert ad.evaluate(generate(m, [[0.5]]), m.env())[0, 0] == 0.5


def test_toy_critic_value():
    assert ad.evaluate(critic_value(toy_model(2.0, 3.0), [[0.5]]), {"G/W0": [[3.0]], "D/W0": [[2.0]]})[0, 0] == 3.0


def test_stop_gradient_on_theta_d():
    m = toy_model(2.0, 3.0)
    f = ad.total(critic_value(m, [[0.5]], stop_d=True))
    assert ad.gradient(f, ["D/W0"], m.env())[0][0, 0] == 0.0
    assert ad.gradient(f, ["G/W0"], m.env())[0][0, 0] == 1.0


def test_bad_latent_shape():
    m = init_model(G, D, 3, 2, 0)
    with pytest.raises(ModelError):
        generate(m, np.zeros((1, 4)))


@pytest.mark.parametrize("activation", ["leaky_relu", "tanh"])
def test_critic_gradients_match_fd(activation, rng):
    g = MlpSpec((3, 6, 5, 2), activation=activation)
    d = MlpSpec((2, 5, 4, 1), activation=activation)
    m = init_model(g, d, 3, 2, 7)
    m = m.with_params({k: v + (rng.normal(scale=0.2, size=v.shape) if "/b" in k else 0) for k, v in m.params.items()})
    z0 = rng.uniform(-1, 1, size=(1, 3))
    u = ad.var("u", (1, 3))
    f = ad.total(critic_value(m, u))
    names = ["u", *m.params]
    exact = ad.gradient(f, names, m.env(u=z0))
    for name, grad in zip(names, exact):
        base = m.env(u=z0)

        def fn(v, name=name):
            return float(ad.evaluate(f, {**base, name: v}))

        fd = ad.finite_difference(fn, base[name], 1e-5)
        assert np.max(np.abs(grad - fd)) <= 1e-5 * max(1.0, np.max(np.abs(fd))), name


def test_loss_examples():
    l_d, l_g = losses("wasserstein", 0.7, 0.2)
    assert l_d == pytest.approx(-0.5) and l_g == -0.2
    assert losses(LossKind.HINGE, 1.0, -1.0) == (0.0, 1.0)
    assert losses(LossKind.HINGE, 0.0, 0.0) == (2.0, -0.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5))
def test_wasserstein_zero_sum_fake_term(d_real, d_fake):
    l_d, l_g = losses("wasserstein", d_real, d_fake)
    assert l_d + d_real == -l_g or abs((l_d + d_real) + l_g) <= 1e-12 * max(1.0, abs(d_fake))


@settings(max_examples=100, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5))
def test_hinge_is_non_negative(d_real, d_fake):
    assert losses("hinge", d_real, d_fake)[0] >= 0.0


def test_hinge_dead_zone():
    t = ad.param("t")
    l_d, _ = losses("hinge", ad.const(0.5), t)
    assert ad.gradient(l_d, ["t"], {"t": -1.5})[0] == 0.0
    fd = ad.finite_difference(lambda v: float(ad.evaluate(l_d, {"t": v})), np.array(-1.5), 1e-5)
    assert fd == 0.0
    assert ad.gradient(l_d, ["t"], {"t": -0.5})[0] == 1.0
