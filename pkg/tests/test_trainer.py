import json

import numpy as np
import pytest

from logan_lab import autodiff as ad
from logan_lab import games
from logan_lab.checks import ablation_gradients, random_tiny_model, toy_model
from logan_lab.latent import SMALL_PROFILE, LatentOptConfig
from logan_lab.models import LossKind
from logan_lab.storage import read_csv
from logan_lab.trainer import (METRIC_COLUMNS, AblationFlags, DataDistribution, TrainConfig, TrainConfigError,
                               TrainingAborted, build_losses, delta_z_diagnostics, initial_state, load_checkpoint,
                               train, train_step, update_norm_diagnostics)


def tiny_config(**kw):
    base = dict(seed=3, batch_size=8, total_steps=6, latent_dim=4, gen_hidden=(8,), disc_hidden=(8,),
                eval_interval=3, eval_samples=50, lr_d=0.05, lr_g=0.05)
    base.update(kw)
    return TrainConfig(**base)


def grads_of(model, n, loss, latent, ablation, env):
    l_d, l_g, *_ = build_losses(model, n, loss, latent, ablation)
    out = [ad.gradient_expr(l_d, k) for k in model.d_names] + [ad.gradient_expr(l_g, k) for k in model.g_names]
    return games.flatten(ad.Program(out).run(env))


def test_data_distributions(rng):
    ring = DataDistribution.ring()
    assert len(ring.centers) == 8 and np.allclose(np.linalg.norm(ring.center_array, axis=1), 2.0)
    grid = DataDistribution.grid()
    assert len(grid.centers) == 25 and grid.dim == 2
    x = ring.sample(rng, 1000)
    d = np.min(np.linalg.norm(x[:, None] - ring.center_array[None], axis=-1), axis=1)
    assert d.max() < 0.15
    with pytest.raises(TrainConfigError):
        DataDistribution("custom", (), 0.1)
    with pytest.raises(TrainConfigError):
        DataDistribution("custom", ((0.0, 0.0),), 0.0)


def test_config_validation():
    with pytest.raises(TrainConfigError):
        tiny_config(batch_size=0)
    with pytest.raises(TrainConfigError):
        tiny_config(lr_d=0.0)
    with pytest.raises(TrainConfigError):
        tiny_config(latent=LatentOptConfig(steps=2))
    with pytest.raises(TrainConfigError):
        tiny_config(seed=-1)
    cfg = tiny_config()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("loss", ["wasserstein", "hinge"])
def test_alpha_zero_blocked_equals_vanilla(loss):
    lat = LatentOptConfig("ngd", alpha=0.0, beta=0.1, w_r=0.1, c=0.5)
    a = train(tiny_config(loss=loss, latent=lat, ablation=AblationFlags(True, True)))
    b = train(tiny_config(loss=loss, latent=None))
    for ra, rb in zip(a.records, b.records):
        assert (ra.L_D, ra.L_G, ra.dtheta_D, ra.dtheta_G, ra.proxy_fid) == (rb.L_D, rb.L_G, rb.dtheta_D,
                                                                           rb.dtheta_G, rb.proxy_fid)
    for k in a.state.model.params:
        assert np.array_equal(a.state.model.params[k], b.state.model.params[k])


def test_blocked_gradients_treat_z_prime_as_constant(rng):
    m = random_tiny_model(rng)
    n = 4
    lat = LatentOptConfig("ngd", alpha=0.9, beta=0.1, w_r=0.1, c=1.0)
    env = m.env(z=rng.uniform(-1, 1, size=(n, m.latent_dim)), x=rng.normal(size=(n, 2)))
    blocked = grads_of(m, n, LossKind.WASSERSTEIN, lat, AblationFlags(True, True), env)
    zp = ad.evaluate(build_losses(m, n, LossKind.WASSERSTEIN, lat)[3], env)
    const_zp = grads_of(m, n, LossKind.WASSERSTEIN, None, AblationFlags(), {**env, "z": zp})
    assert np.max(np.abs(blocked - const_zp)) <= 1e-14 * np.max(np.abs(const_zp))


def test_toy_step_matches_hand_expansion():
    td, tg, z, x, alpha = 0.8, -1.2, 0.1, 0.4, 0.2
    m = toy_model(td, tg)
    lat = LatentOptConfig("gd", alpha=alpha, w_r=0.0, c=1.0)
    env = m.env(z=np.array([[z]]), x=np.array([[x]]))
    got = grads_of(m, 1, LossKind.WASSERSTEIN, lat, AblationFlags(), env)
    zp = z + alpha * td * tg
    want_d = tg * zp + alpha * td * tg**2 - x          # d(f(z') - D(x))/d theta_D
    want_g = -(td * zp + alpha * td**2 * tg)            # d(-f(z'))/d theta_G
    assert abs(got[0] - want_d) < 1e-14 and abs(got[1] - want_g) < 1e-14


def test_end_to_end_gradient_matches_fd(rng):
    for _ in range(3):
        m = random_tiny_model(rng, "tanh")
        n = 3
        lat = LatentOptConfig("ngd", alpha=0.5, beta=0.5, w_r=0.3, c=1.0)
        env = m.env(z=rng.uniform(-0.5, 0.5, size=(n, m.latent_dim)), x=rng.normal(size=(n, 2)))
        l_d, l_g, *_ = build_losses(m, n, LossKind.WASSERSTEIN, lat)
        names = m.d_names + m.g_names
        shapes = {k: m.params[k].shape for k in names}
        flat = games.flatten([m.params[k] for k in names])
        for loss in (l_d, l_g):
            exact = games.flatten(ad.gradient(loss, names, env))
            prog = ad.Program([loss])
            fd = ad.finite_difference(lambda v: float(prog.run({**env, **games.unflatten(v, shapes)})[0]), flat, 1e-5)
            assert np.max(np.abs(exact - fd)) <= 1e-4 * np.max(np.abs(fd))


def test_ablation_decomposition_sums(rng):
    m = random_tiny_model(rng)
    lat = LatentOptConfig("ngd", alpha=0.9, beta=0.1, w_r=0.1, c=1.0)
    env = m.env(z=rng.uniform(-1, 1, size=(4, m.latent_dim)), x=rng.normal(size=(4, 2)))
    g = ablation_gradients(m, 4, lat, env)
    d_term = g[(False, True)] - g[(True, True)]
    g_term = g[(True, False)] - g[(True, True)]
    assert np.max(np.abs(d_term)) > 1e-6 and np.max(np.abs(g_term)) > 1e-6
    full = g[(False, False)]
    assert np.max(np.abs(g[(True, True)] + d_term + g_term - full)) <= 1e-12 * np.max(np.abs(full))


def test_regulariser_enters_both_losses_equally(rng):
    m = random_tiny_model(rng)
    names = m.d_names + m.g_names
    env = m.env(z=rng.uniform(-1, 1, size=(4, m.latent_dim)), x=rng.normal(size=(4, 2)))
    out = {}
    for w_r in (0.0, 0.7):
        lat = LatentOptConfig("ngd", alpha=0.9, beta=0.1, w_r=w_r, c=1.0)
        l_d, l_g, r_z, *_ = build_losses(m, 4, LossKind.HINGE, lat)
        out[w_r] = [games.flatten(ad.gradient(loss, names, env)) for loss in (l_d, l_g)]
        if w_r:
            r_grad = games.flatten(ad.gradient(r_z, names, env))
    diff_d, diff_g = out[0.7][0] - out[0.0][0], out[0.7][1] - out[0.0][1]
    assert np.allclose(diff_d, r_grad, rtol=0, atol=1e-12) and np.allclose(diff_g, r_grad, rtol=0, atol=1e-12)
    assert np.max(np.abs(r_grad)) > 0


def test_update_norm_examples():
    before = {"D/W0": np.zeros(2), "G/W0": np.zeros(1)}
    assert update_norm_diagnostics(before, before) == (0.0, 0.0, 0.0)
    after = {"D/W0": np.array([3.0, 4.0]), "G/W0": np.zeros(1)}
    assert update_norm_diagnostics(before, after) == (5.0, 0.0, 5.0)
    with pytest.raises(ValueError):
        update_norm_diagnostics(before, {"D/W0": np.zeros(3), "G/W0": np.zeros(1)})


def test_delta_z_examples():
    m = toy_model(2.0, 1.0)
    assert delta_z_diagnostics(m, [[0.3]], [[0.3]]) == (0.0, 0.0)
    assert delta_z_diagnostics(m, [[0.0]], [[0.5]]) == (0.5, 1.0)


def test_records_one_per_step(tmp_path):
    res = train(tiny_config(total_steps=7, eval_interval=3, latent=SMALL_PROFILE), tmp_path)
    assert [r.step for r in res.records] == list(range(1, 8))
    assert [r.step for r in res.records if r.proxy_fid is not None] == [3, 6, 7]
    assert all(0 < r.curvature_mean <= 1 / SMALL_PROFILE.beta for r in res.records)
    header, rows = read_csv(tmp_path / "metrics.csv")
    assert tuple(header) == METRIC_COLUMNS and len(rows) == 7
    assert rows[0]["proxy_fid"] is None and rows[2]["proxy_fid"] is not None


def test_zero_steps_writes_initial_checkpoint_only(tmp_path):
    res = train(tiny_config(total_steps=0), tmp_path)
    assert [p.name for p in res.checkpoints] == ["ckpt_0000000.logn"]
    assert (tmp_path / "metrics.csv").read_text() == ",".join(METRIC_COLUMNS) + "\n"


class _Interrupt(Exception):
    pass


def _stop_at(step):
    def hook(rec):
        if rec.step == step:
            raise _Interrupt
    return hook


@pytest.mark.parametrize("opt", ["sgd", "adam"])
@pytest.mark.parametrize("mode", ["simultaneous", "alternating"])
def test_resume_after_interrupt_is_bit_exact(tmp_path, opt, mode):
    cfg = tiny_config(total_steps=8, optimizer=opt, update_mode=mode, lr_d=0.01, lr_g=0.01, checkpoint_interval=5)
    full = train(cfg, tmp_path / "full")
    with pytest.raises(_Interrupt):
        train(cfg, tmp_path / "part", on_record=_stop_at(6))
    resumed = train(cfg, tmp_path / "part", resume_from=tmp_path / "part" / "ckpt_0000005.logn")
    assert resumed.records == full.records[5:]
    assert (tmp_path / "full" / "metrics.csv").read_bytes() == (tmp_path / "part" / "metrics.csv").read_bytes()
    for k, v in full.state.model.params.items():
        assert np.array_equal(v, resumed.state.model.params[k])


def test_extending_a_finished_run_matches_one_long_run(tmp_path):
    cfg = tiny_config(total_steps=8, optimizer="adam")
    full = train(cfg)
    train(cfg.with_(total_steps=5), tmp_path)
    resumed = train(cfg, tmp_path, resume_from=tmp_path / "ckpt_0000005.logn")
    assert [r.L_D for r in resumed.records] == [r.L_D for r in full.records[5:]]
    for k, v in full.state.model.params.items():
        assert np.array_equal(v, resumed.state.model.params[k])


def test_resume_rejects_changed_config(tmp_path):
    cfg = tiny_config(total_steps=2)
    train(cfg, tmp_path)
    with pytest.raises(TrainConfigError):
        train(cfg.with_(lr_d=0.5, total_steps=4), tmp_path, resume_from=tmp_path / "ckpt_0000002.logn")


def test_checkpoint_holds_optimizer_state(tmp_path):
    cfg = tiny_config(total_steps=3, optimizer="adam")
    res = train(cfg, tmp_path)
    state, saved = load_checkpoint(res.checkpoints[-1])
    assert saved == cfg and state.step == 3 and state.opt.t == 3
    for k in res.state.opt.v:
        assert np.array_equal(state.opt.v[k], res.state.opt.v[k])
    assert state.rng_state == res.state.rng_state


def test_alternating_uses_updated_discriminator():
    cfg = tiny_config(update_mode="alternating", total_steps=1)
    sim = train_step(initial_state(cfg.with_(update_mode="simultaneous")), cfg.with_(update_mode="simultaneous"))[1]
    alt = train_step(initial_state(cfg), cfg)[1]
    assert alt.L_D == sim.L_D and alt.dtheta_D == sim.dtheta_D
    assert alt.L_G != sim.L_G


def test_non_finite_aborts_with_dump(tmp_path):
    cfg = tiny_config(lr_d=1e300, lr_g=1e300, total_steps=5, latent=None)
    with pytest.raises(TrainingAborted) as info:
        train(cfg, tmp_path)
    dump = json.loads(info.value.dump.read_text())
    assert dump["step"] == info.value.step and "non-finite" in dump["reason"]


def test_training_is_deterministic():
    a, b = train(tiny_config()), train(tiny_config())
    assert a.records == b.records
