import numpy as np
import pytest
from _gradcheck import gradient_check

from mvreg.cnn import (
    Architecture,
    BatchNorm2D,
    CnnModel,
    MaxPool2D,
    TrainConfig,
    decayed_lr,
    glorot_init,
    load_model,
    save_model,
    sgd_update,
    train,
)
from mvreg.errors import FormatError, ShapeError, TrainingError, ValidationError

SMALL = Architecture(height=24, width=24, conv_channels=4, positionwise=4, hidden=8)


def test_forward_output_shape():
    m = CnnModel(Architecture(height=48, width=48))
    x = np.random.default_rng(0).normal(size=(16, 48, 48))
    assert m.forward(x, train_mode=False).shape == (2,)
    assert m.forward(np.stack([x, x]), train_mode=True).shape == (2, 2)


def test_zero_input_gives_output_bias():
    m = CnnModel(SMALL)
    m.layers[-1].bias[...] = [0.25, -1.5]
    out = m.forward(np.zeros((16, 24, 24)), train_mode=False)
    assert np.allclose(out, [0.25, -1.5])


def test_duplicated_sample_gives_identical_outputs(rng):
    m = CnnModel(SMALL)
    x = rng.normal(size=(16, 24, 24))
    out = m.forward(np.stack([x, x]), train_mode=True)
    assert np.array_equal(out[0], out[1])


def test_wrong_channel_count():
    m = CnnModel(SMALL)
    with pytest.raises(ShapeError):
        m.forward(np.zeros((15, 24, 24)))
    with pytest.raises(ShapeError):
        m.forward(np.zeros((16, 20, 24)))
    with pytest.raises(ShapeError):
        CnnModel(Architecture(height=3, width=3))


def test_output_bias_gradient_closed_form(rng):
    m = CnnModel(SMALL, dtype=np.float64)
    x, y = rng.normal(size=(3, 16, 24, 24)), rng.normal(size=(3, 2))
    pred = m.forward(x, train_mode=True)
    _, grads = m.backward(x, y)
    assert np.allclose(grads[-1], (pred - y).mean(axis=0))


def test_zero_gradients_at_exact_fit(rng):
    m = CnnModel(SMALL, dtype=np.float64)
    x = rng.normal(size=(2, 16, 24, 24))
    y = m.forward(x, train_mode=True)
    loss, grads = m.backward(x, y)
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads)


def test_gradient_check_subset(rng):
    m = CnnModel(SMALL, seed=3, dtype=np.float64)
    x, y = rng.normal(size=(2, 16, 24, 24)), rng.normal(size=(2, 2))
    res = gradient_check(m, x, y, limit=12)
    assert max(res["worst"]) < 1e-3
    assert res["smooth_violations"] == 0


def test_sgd_vanilla_step():
    p, v = np.zeros(1), np.zeros(1)
    sgd_update([p], [np.ones(1)], [v], TrainConfig(learning_rate=0.1, momentum=0.0, lr_decay=0.0), 0)
    assert p[0] == pytest.approx(-0.1)


def test_sgd_momentum_two_steps():
    # oracle: v1 = -0.1, v2 = 0.9 * v1 - 0.1 = -0.19, p = v1 + v2 = -0.29
    cfg = TrainConfig(learning_rate=0.1, momentum=0.9, lr_decay=0.0)
    p, v = np.zeros(1), np.zeros(1)
    for t in range(2):
        sgd_update([p], [np.ones(1)], [v], cfg, t)
    assert v[0] == pytest.approx(-0.19)
    assert p[0] == pytest.approx(-0.29)


def test_decay_formula():
    assert decayed_lr(1e-4, 1e-4, 10000) == pytest.approx(5e-5)
    assert decayed_lr(1e-4, 1e-4, 0) == 1e-4


def test_glorot_bound_and_variance():
    w = glorot_init(3, 3, seed=0, shape=(1000,))
    assert np.abs(w).max() <= 1.0
    big = glorot_init(100, 100, seed=1, shape=(100_000,))
    assert abs(big.var() - 0.01) / 0.01 < 0.05
    assert np.array_equal(glorot_init(5, 7, seed=2), glorot_init(5, 7, seed=2))
    with pytest.raises(ValidationError):
        glorot_init(0, 3, seed=0)


def test_biases_start_at_zero():
    m = CnnModel(SMALL)
    for layer in m.layers:
        if hasattr(layer, "bias"):
            assert np.all(layer.bias == 0)


def test_batchnorm_train_mode_normalizes(rng):
    bn = BatchNorm2D(3, np.float64)
    x = rng.normal(3.0, 5.0, size=(4, 3, 6, 6))
    out = bn.forward(x, True)
    assert np.allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-10)
    assert np.allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-3)


@pytest.mark.parametrize("h,w", [(24, 24), (25, 25), (7, 9)])
def test_maxpool_halves_with_floor(h, w):
    out = MaxPool2D().forward(np.zeros((1, 2, h, w)), False)
    assert out.shape == (1, 2, h // 2, w // 2)


@pytest.mark.parametrize(
    "side,count",
    [
        # conv1 16*20*25+20, bn 40, conv2 20*20*25+20, bn 40, pw 20*20+20, dense 20*s*s*250+250, out 250*2+2
        (25, 8020 + 40 + 10020 + 40 + 420 + (20 * 6 * 6 * 250 + 250) + 502),
        (50, 8020 + 40 + 10020 + 40 + 420 + (20 * 12 * 12 * 250 + 250) + 502),
    ],
)
def test_parameter_count(side, count):
    arch = Architecture(height=side, width=side)
    assert arch.parameter_count() == count
    assert CnnModel(arch).parameter_count() == count


def test_overfit_single_sample(rng):
    m = CnnModel(Architecture(height=24, width=24), seed=0)
    x = rng.normal(size=(1, 16, 24, 24)).astype(np.float32)
    y = np.array([[7.0, -12.0]], dtype=np.float32)
    initial = m.loss(x, y)
    train(m, np.repeat(x, 200, axis=0), np.repeat(y, 200, axis=0), TrainConfig(learning_rate=1e-3, batch_size=1, epochs=1))
    assert m.loss(x, y) < 0.01 * initial


def test_training_history_and_determinism(rng, tmp_path):
    x = rng.normal(size=(20, 16, 24, 24)).astype(np.float32)
    y = rng.uniform(-20, 20, size=(20, 2)).astype(np.float32)
    cfg = TrainConfig(epochs=3, batch_size=8, seed=4)
    m1, m2 = CnnModel(SMALL, seed=1), CnnModel(SMALL, seed=1)
    h1 = train(m1, x, y, cfg, checkpoint_path=tmp_path / "ck.cnn")
    h2 = train(m2, x, y, cfg)
    assert len(h1) == 3
    assert h1 == h2
    assert all(np.array_equal(a, b) for a, b in zip(m1.parameters(), m2.parameters()))
    assert (tmp_path / "ck.cnn").exists()


def test_divergence_raises_and_keeps_last_good(rng):
    x = rng.normal(size=(8, 16, 24, 24)).astype(np.float32)
    y = rng.uniform(-20, 20, size=(8, 2)).astype(np.float32)
    m = CnnModel(SMALL, seed=1)
    with np.errstate(all="ignore"), pytest.raises(TrainingError) as info:
        train(m, x, y, TrainConfig(learning_rate=1e12, epochs=5, batch_size=2))
    assert info.value.batch_index >= 0
    assert all(np.all(np.isfinite(p)) for p in m.parameters())


def test_checkpoint_roundtrip(tmp_path, rng):
    m = CnnModel(SMALL, seed=2)
    m.forward(rng.normal(size=(4, 16, 24, 24)), train_mode=True)  # move running stats
    save_model(m, tmp_path / "m.cnn")
    back = load_model(tmp_path / "m.cnn")
    assert back.arch == m.arch
    assert all(np.array_equal(a, b) for a, b in zip(back.parameters(), m.parameters()))
    assert all(np.array_equal(a, b) for a, b in zip(back.buffers(), m.buffers()))
    x = rng.normal(size=(16, 24, 24))
    assert np.array_equal(back.forward(x), m.forward(x))


def test_checkpoint_shape_mismatch(tmp_path):
    save_model(CnnModel(SMALL), tmp_path / "m.cnn")
    raw = (tmp_path / "m.cnn").read_bytes()
    raw = raw.replace(b'"hidden": 8', b'"hidden": 9', 1)
    (tmp_path / "bad.cnn").write_bytes(raw)
    with pytest.raises(FormatError):
        load_model(tmp_path / "bad.cnn")
