import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deblurprior import classifier, nn, synth
from oracles import fd_input_gradient, random_model

# Summing the layer shapes by hand:
#   CR1      3*3*1*64  + 64 =     640
#   CR2..CR8 4 * (3*3*64*64 + 64) = 147,712
#   C9       3*3*64*1  + 1  =     577
EXPECTED_PARAMS = 640 + 4 * (3 * 3 * 64 * 64 + 64) + 577


@pytest.fixture(scope="module")
def model():
    return classifier.build_model(0)


def test_parameter_count(model):
    assert EXPECTED_PARAMS == 148_929
    assert model.n_parameters() == EXPECTED_PARAMS


def test_layer_shapes(model):
    kinds = [layer.kind for layer in model.layers]
    T = classifier
    assert kinds == [T.CR, T.CR, T.M, T.CR, T.M, T.CR, T.M, T.CR, T.C, T.G, T.S]
    shapes = [layer.params.weights.shape for layer in model.layers if layer.params is not None]
    assert shapes == [(64, 1, 3, 3)] + [(64, 64, 3, 3)] * 4 + [(1, 64, 3, 3)]
    for layer in model.layers:
        if layer.params is not None:
            assert layer.params.stride == 1 and layer.params.padding == 1


def test_same_seed_same_bytes():
    assert classifier.build_model(3).to_bytes() == classifier.build_model(3).to_bytes()
    assert classifier.build_model(3).to_bytes() != classifier.build_model(4).to_bytes()


def test_zero_input_gives_half(model):
    assert classifier.f(model, np.zeros((16, 16))) == 0.5


def test_save_load_round_trip(tmp_path, model):
    path = tmp_path / "m.bin"
    model.save(path)
    back = classifier.Model.load(path)
    assert back.to_bytes() == model.to_bytes()
    x = np.random.default_rng(0).random((20, 20))
    assert classifier.f(back, x) == classifier.f(model, x)


def test_f_deterministic_and_in_range(model):
    x = np.random.default_rng(1).random((33, 27))
    a, b = classifier.f(model, x), classifier.f(model, x)
    assert a == b and 0 < a < 1


def test_too_small_image_names_minimum(model):
    with pytest.raises(classifier.ImageSizeError, match="16"):
        classifier.f(model, np.zeros((15, 40)))


@given(st.integers(16, 512), st.integers(16, 512))
@settings(max_examples=12, deadline=None)
def test_any_size_runs(h, w):
    m = classifier.build_model(0)
    x = np.random.default_rng(h * 1000 + w).random((h, w))
    v = classifier.f(m, x)
    assert np.isfinite(v) and 0 < v < 1


def _zero_weight_model():
    m = classifier.build_model(0)
    for layer in m.layers:
        if layer.params is not None:
            layer.params.weights[...] = 0
    return m


def test_zero_weight_model_zero_gradient():
    g = classifier.input_gradient(_zero_weight_model(), np.random.default_rng(0).random((24, 24)))
    assert not g.any()


def test_dead_relus_zero_gradient():
    m = classifier.build_model(0)
    m.layers[0].params.bias[...] = -1e3  # every CR1 unit is dead for inputs in [0, 1]
    g = classifier.input_gradient(m, np.random.default_rng(0).random((24, 24)))
    assert not g.any()


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-5), (np.float32, 1e-2)])
@pytest.mark.parametrize("shape", [(24, 24), (19, 23)])
def test_input_gradient_finite_differences(dtype, tol, shape):
    # The oracle always differentiates the same weights in 64-bit arithmetic:
    # 32-bit central differences are swamped by rounding (gradients here are
    # ~1e-4 per pixel) and larger steps cross ReLU kinks.
    m = random_model(1, dtype)
    rng = np.random.default_rng(2)
    x = rng.random(shape)
    value, g = classifier.f_and_input_gradient(m, x)
    assert value == pytest.approx(classifier.f(m, x))
    assert g.shape == shape and np.all(np.isfinite(g))
    idx = [tuple(int(v) for v in rng.integers(0, shape)) for _ in range(20)]
    num = fd_input_gradient(m.astype(np.float64), x, idx, 1e-5)
    ana = np.array([g[i, j] for i, j in idx])
    err = np.abs(num - ana) / np.maximum(np.maximum(np.abs(num), np.abs(ana)), 1e-8)
    assert err.max() < tol


def test_weight_gradients_finite_differences():
    m = random_model(3, np.float64)
    rng = np.random.default_rng(4)
    x = rng.random((2, 1, 16, 18))
    y = np.array([0.0, 1.0])

    def loss():
        prob, _ = classifier.forward(m, x, keep_cache=False)
        return nn.bce_loss(prob, y)

    prob, cache = classifier.forward(m, x)
    _, d_prob = nn.bce_loss(prob, y, with_grad=True)
    grads, _ = classifier.backward(m, cache, d_prob)
    params = m.parameters()
    for p, g in list(zip(params, grads))[::3]:
        flat = p.reshape(-1)
        for i in rng.choice(flat.size, size=4, replace=False):
            old = flat[i]
            flat[i] = old + 1e-6
            up = loss()
            flat[i] = old - 1e-6
            down = loss()
            flat[i] = old
            num = (up - down) / 2e-6
            assert g.reshape(-1)[i] == pytest.approx(num, rel=1e-4, abs=1e-9)


def _toy_set(n_pairs, size, seed):
    rng = np.random.default_rng(seed)
    box = np.full((5, 5), 1 / 25)
    out = []
    for _ in range(n_pairs):
        img = synth.procedural_scene(size, rng)
        out += [synth.Sample(img, 0), synth.Sample(synth.blur_image(img, box), 1)]
    return out


def test_initial_loss_near_log2():
    m = classifier.build_model(0)
    res = classifier.train(m, _toy_set(8, 16, 0), classifier.TrainConfig(batch_size=16, patch=16, lr=1e-9), 1, seed=0)
    assert res.losses[0] == pytest.approx(np.log(2), abs=0.01)


def test_training_is_deterministic():
    cfg = classifier.TrainConfig(batch_size=8, patch=24, rescale_range=(0.7, 1.0), lr=1e-2)
    data = _toy_set(8, 32, 1)
    a = classifier.train(classifier.build_model(0), data, cfg, 2, seed=5)
    b = classifier.train(classifier.build_model(0), data, cfg, 2, seed=5)
    assert a.losses == b.losses
    assert a.model.to_bytes() == b.model.to_bytes()
    assert len(a.history) == 2 and set(a.history[0]) == {"epoch", "lr", "mean_loss", "train_acc", "val_acc"}


def test_overfit_toy_set():
    """64 samples, 200 epochs: the network must fit its training set."""
    data = _toy_set(32, 16, 0)
    cfg = classifier.TrainConfig(batch_size=16, patch=16, rescale_range=(1.0, 1.0), lr=1e-2)
    res = classifier.train(classifier.build_model(0), data, cfg, 200, seed=0)
    assert res.history[-1]["train_acc"] >= 0.95
    assert classifier.evaluate_accuracy(res.model, data) >= 0.95


def test_single_class_dataset_rejected():
    data = [s for s in _toy_set(4, 16, 0) if s.label == 1]
    with pytest.raises(ValueError, match="both labels"):
        classifier.train(classifier.build_model(0), data, classifier.TrainConfig(patch=16), 1)


def test_train_config_validation():
    with pytest.raises(ValueError):
        classifier.TrainConfig(rescale_range=(0.0, 1.0))
    with pytest.raises(ValueError):
        classifier.TrainConfig(rescale_range=(0.5, 1.5))
    with pytest.raises(ValueError):
        classifier.TrainConfig(lr=0)
    cfg = classifier.TrainConfig()
    assert (cfg.batch_size, cfg.momentum, cfg.weight_decay, cfg.lr) == (50, 0.9, 1e-4, 1e-3)
    assert (cfg.lr_decay_factor, cfg.lr_decay_every, cfg.patch, cfg.rescale_range) == (5, 50, 200, (0.25, 1.0))
    assert cfg.lr_at(0) == 1e-3 and cfg.lr_at(49) == 1e-3 and cfg.lr_at(50) == pytest.approx(2e-4)


def test_make_batch_shapes_and_scale():
    rng = np.random.default_rng(0)
    data = _toy_set(3, 40, 0)
    cfg = classifier.TrainConfig(patch=32, rescale_range=(0.5, 0.5))
    x, y = classifier.make_batch(data, cfg, rng)
    assert x.shape == (6, 1, 16, 16) and x.dtype == np.float32
    assert y.tolist() == [0, 1, 0, 1, 0, 1]
    small = classifier.random_crop(np.ones((10, 12)), 20, rng)
    assert small.shape == (20, 20)


def test_evaluate_accuracy_bounds_and_errors(model):
    data = _toy_set(4, 32, 2)
    acc = classifier.evaluate_accuracy(model, data, 1.0)
    assert 0 <= acc <= 1
    with pytest.raises(classifier.ImageSizeError):
        classifier.evaluate_accuracy(model, data, 0.25)
    with pytest.raises(ValueError):
        classifier.evaluate_accuracy(model, data, 0.0)
    with pytest.raises(ValueError):
        classifier.evaluate_accuracy(model, [], 1.0)


def test_constant_output_model_is_chance_level():
    m = _zero_weight_model()
    m.layers[8].params.bias[...] = 1.0  # f == sigmoid(1) > 0.5 for every input
    data = _toy_set(6, 32, 3)
    assert classifier.evaluate_accuracy(m, data) == 0.5
