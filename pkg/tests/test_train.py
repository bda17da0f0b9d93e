import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from vaecompress.compress.distill import distill_train
from vaecompress.compress.quantize import qat_eval_model, static_quantize
from vaecompress.nn.layers import Conv2d, Flatten, LatentHead, ReLU
from vaecompress.nn.model import Model
from vaecompress.nn.params import ParamStore, init_params
from vaecompress.nn.spec import build_vae, preset
from vaecompress.tensor import QuantParams
from vaecompress.train import (AdamState, TrainConfig, TrainingDiverged, _step, adam_step, elbo_loss,
                               fake_quant, fake_quant_grad, reparameterize, sample_noise, train_vae,
                               write_history_csv)


@pytest.fixture(scope="module")
def brightness_batch():
    return np.random.default_rng(0).uniform(size=(16, 3, 32, 32)).astype(np.float32)


def test_elbo_examples():
    x = np.ones((2, 3))
    z = np.zeros((2, 1))
    assert elbo_loss(x, x, z, z, 1.4) == (0.0, 0.0, 0.0)
    total, recon, kl = elbo_loss(x[:1], x[:1], np.ones((1, 1)), np.zeros((1, 1)), 1.4)
    assert total == pytest.approx(0.7) and recon == 0 and kl == pytest.approx(0.5)
    assert elbo_loss(x, x + 1, z, z, 123.0)[2] == 0.0
    with pytest.raises(ValueError):
        elbo_loss(x, x * np.nan, z, z, 1.0)


@given(arrays(np.float64, (3, 4), elements=st.floats(-10, 10)), arrays(np.float64, (3, 4), elements=st.floats(-10, 10)))
def test_kl_is_nonnegative(mu, logvar):
    x = np.zeros((3, 2))
    assert elbo_loss(x, x, mu, logvar, 1.0)[2] >= 0


def test_reparameterize_examples():
    mu = np.array([0.3, -1.0])
    assert np.array_equal(reparameterize(mu, np.zeros(2), np.zeros(2)), mu)
    assert reparameterize(np.zeros(1), np.zeros(1), np.ones(1))[0] == 1.0
    assert reparameterize(mu, np.full(2, math.log(4)), np.full(2, 0.5)) == pytest.approx(mu + 1)
    with pytest.raises(ValueError):
        reparameterize(mu, mu, np.zeros(3))


def _store(**arrays):
    return ParamStore({k: np.asarray(v, np.float64) for k, v in arrays.items()})


def test_adam_zero_gradient_keeps_params():
    p = _store(w=[1.0, -2.0])
    state = AdamState()
    for _ in range(5):
        adam_step(p, {"w": np.zeros(2)}, state, 1e-2)
    assert np.array_equal(p["w"], [1.0, -2.0])


@pytest.mark.parametrize("g", [3.0, -0.02, 1e-3])
def test_adam_first_step_is_lr(g):
    p = _store(w=[0.5])
    adam_step(p, {"w": np.array([g])}, AdamState(), 1e-3)
    step = p["w"][0] - 0.5
    assert np.sign(step) == -np.sign(g)
    # bias-corrected first step: lr * |g| / (|g| + eps)
    assert abs(step) == pytest.approx(1e-3 * abs(g) / (abs(g) + 1e-8), rel=1e-9)


def test_adam_keeps_pruned_zero():
    p = _store(w=[0.0, 1.0, 0.0])
    p.masks["w"] = np.array([False, True, False])
    state = AdamState()
    for i in range(20):
        adam_step(p, {"w": np.array([1.0, -1.0, 0.5]) * (i + 1)}, state, 0.1)
    assert p["w"][0] == 0 and p["w"][2] == 0 and p["w"][1] > 1.0


def test_fake_quant_examples():
    qp = QuantParams(0.01, 0)
    assert float(fake_quant([0.234], qp)[0]) == pytest.approx(0.23, abs=1e-7)
    x = np.array([-5.0, -1.0, 0.5, 1.27, 3.0])
    assert np.array_equal(fake_quant_grad(np.ones(5), x, qp), [0, 1, 1, 1, 0])


@given(st.floats(-1.28, 1.27))
def test_fake_quant_in_range_error(x):
    qp = QuantParams(0.01, 0)
    assert abs(float(fake_quant([x], qp)[0]) - x) <= 0.005 + 1e-6


def test_zero_epochs_returns_initial(brightness_batch):
    spec = preset("desk-beta-vae")
    init = init_params(spec, 4)
    params, hist = train_vae(spec, brightness_batch, TrainConfig(epochs=0), params=init)
    assert params is init and hist == []


def test_noise_independent_of_batching():
    a = sample_noise(5, 2, [3, 9], 4)
    b = sample_noise(5, 2, [9], 4)
    assert np.array_equal(a[1], b[0])


def test_repeated_sample_overfits():
    spec = preset("desk-of")
    x = np.repeat(np.random.default_rng(2).normal(0, 0.3, (1, 6, 32, 32)).astype(np.float32), 4, axis=0)
    cfg = TrainConfig(epochs=200, learning_rate=1e-3, batch_size=4, seed=1)
    _, hist = train_vae(spec, x, cfg)
    assert len(hist) == 200
    assert hist[-1][1] < 0.5 * hist[0][1]


def test_training_is_deterministic(brightness_batch, tmp_path):
    spec = preset("desk-beta-vae")
    cfg = TrainConfig(epochs=2, learning_rate=1e-3, batch_size=6, seed=9)
    p1, h1 = train_vae(spec, brightness_batch, cfg)
    p2, h2 = train_vae(spec, brightness_batch, cfg)
    assert h1 == h2 and all(np.isfinite(h1).ravel())
    assert all(np.array_equal(p1[k], p2[k]) for k in p1.tensors)
    write_history_csv(tmp_path / "h.csv", h1)
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "epoch,total,recon,kl"


def test_divergence_reports_last_state(brightness_batch):
    spec = preset("desk-beta-vae")
    bad = brightness_batch.copy()
    bad[3, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        train_vae(spec, bad, TrainConfig(epochs=1, batch_size=4))
    assert isinstance(info.value.params, ParamStore) and info.value.history == []


def test_kd_lambda_zero_matches_plain_training(brightness_batch):
    spec = preset("desk-beta-vae")
    teacher = Model.from_preset("desk-beta-vae", 3)
    cfg = TrainConfig(epochs=2, learning_rate=1e-3, batch_size=8, seed=2)
    plain, h_plain = train_vae(spec, brightness_batch, cfg)
    student = distill_train(teacher, spec, brightness_batch, cfg, kd_lambda=0.0)
    _, h_kd = train_vae(spec, brightness_batch, cfg, teacher=teacher)
    assert h_kd == h_plain
    assert all(np.array_equal(student.params[k], plain[k]) for k in plain.tensors)


def test_kd_term_vanishes_for_identical_student():
    # no BatchNorm, so the student's training-mode forward equals the frozen teacher's
    enc = [Conv2d("enc.c", 6, 4, 5, 3), ReLU("enc.r"), Flatten("enc.f"), LatentHead("enc.head", 4 * 10 * 10, 5)]
    spec = build_vae(enc, (6, 32, 32), beta=1.0)
    teacher = Model(spec, init_params(spec, 3))
    x = np.random.default_rng(0).normal(size=(8, 6, 32, 32)).astype(np.float32)
    noise = sample_noise(0, 0, range(8), 5)
    tmu = teacher.encode(x)[0]
    g_kd, l_kd = _step(teacher.copy(), x, noise, 1.0, TrainConfig(kd_lambda=1.0), tmu)
    g0, l0 = _step(teacher.copy(), x, noise, 1.0, TrainConfig(), None)
    assert l_kd == l0
    assert all(np.array_equal(g_kd[k], g0[k]) for k in g0)


def test_qat_shadow_matches_quantized(brightness_batch):
    m = Model.from_preset("desk-beta-vae", 1)
    cal = [brightness_batch[:8]]
    shadow = qat_eval_model(m, cal)
    q = static_quantize(m, cal)
    a = shadow.encode(brightness_batch[8:], quant="qat")[0]
    b = q.encode(brightness_batch[8:])[0]
    step = q.params.qparams["act:enc.head.mu"].scale
    assert np.max(np.abs(a - b)) <= step * (1 + 1e-5)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(kd_lambda=-1)
