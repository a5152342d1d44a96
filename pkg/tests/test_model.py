import numpy as np
import pytest

from colorshield import autodiff as ad
from colorshield.autodiff import Tensor
from colorshield.colorspace import ColorSpace, Image
from colorshield.model import (
    DenseNetConfig,
    TrainSettings,
    build,
    evaluate,
    forward,
    forward_graph,
    load_model,
    loss,
    parameter_count,
    save_model,
    train,
)

TINY = DenseNetConfig(input_size=8, blocks=2, layers_per_block=2, growth_rate=4,
                      initial_channels=8, num_classes=5)


def _tiny_model(seed=0):
    return build(TINY, ColorSpace.RGB, seed=seed)


def _rand_image(rng, size=8):
    return Image(rng.uniform(0.05, 0.95, (size, size, 3)).astype(np.float32))


def test_default_parameter_count_frozen():
    # closed-form count for the default 32/3/4/12/24 layout
    assert parameter_count(DenseNetConfig()) == 121474
    model = build(DenseNetConfig(), ColorSpace.RGB, seed=0)
    assert sum(t.data.size for t in model.params.values()) == 121474


def test_build_deterministic_given_seed():
    a = _tiny_model(seed=3)
    b = _tiny_model(seed=3)
    for name in a.params:
        assert np.array_equal(a.params[name].data, b.params[name].data)
    c = _tiny_model(seed=4)
    assert any(not np.array_equal(a.params[n].data, c.params[n].data) for n in a.params)


def test_single_block_has_no_transitions():
    cfg = DenseNetConfig(input_size=8, blocks=1, layers_per_block=2, growth_rate=4,
                         initial_channels=8, num_classes=3)
    model = build(cfg, ColorSpace.RGB, seed=0)
    out = forward(model, _rand_image(np.random.default_rng(0)))
    assert out.activation_map.shape[1:] == (8, 8)  # no pooling happened


def test_config_validation():
    with pytest.raises(ValueError, match="positive"):
        DenseNetConfig(blocks=0)
    with pytest.raises(ValueError, match="divisible"):
        DenseNetConfig(input_size=30, blocks=3)


def test_forward_probs_sum_to_one():
    rng = np.random.default_rng(0)
    model = _tiny_model()
    out = forward(model, _rand_image(rng))
    assert out.probs.sum() == pytest.approx(1.0, abs=1e-6)
    assert np.all(out.probs >= 0)


def test_zero_image_zero_head_gives_uniform():
    model = _tiny_model()
    model.params["head/fc_w"].data[:] = 0
    model.params["head/fc_b"].data[:] = 0
    out = forward(model, Image(np.zeros((8, 8, 3), dtype=np.float32)))
    assert np.allclose(out.probs, 1.0 / TINY.num_classes)


def test_forward_deterministic():
    rng = np.random.default_rng(1)
    img = _rand_image(rng)
    model = _tiny_model()
    a = forward(model, img)
    b = forward(model, img)
    assert np.array_equal(a.logits, b.logits)


def test_forward_rejects_wrong_space_and_shape():
    model = _tiny_model()
    rgb = _rand_image(np.random.default_rng(2))
    hsv = Image(rgb.data, ColorSpace.HSV)
    with pytest.raises(ValueError, match="space"):
        forward(model, hsv)
    with pytest.raises(ad.ShapeError):
        forward(model, Image(np.zeros((12, 12, 3), dtype=np.float32)))


def test_activation_map_shape_and_nonnegative():
    model = _tiny_model()
    out = forward(model, _rand_image(np.random.default_rng(3)))
    assert out.activation_map.shape == (TINY.final_channels(), 4, 4)
    assert out.activation_map.min() >= 0.0


def test_loss_uniform_and_onehot():
    probs = np.full(10, 0.1, dtype=np.float32)
    logits = np.zeros(10, dtype=np.float32)
    from colorshield.model import ForwardOutput

    out = ForwardOutput(logits=logits, probs=probs, activation_map=np.zeros((1, 1, 1)))
    assert loss(out, 3) == pytest.approx(np.log(10.0), abs=1e-6)

    hot = np.full(4, -40.0, dtype=np.float32)
    hot[2] = 40.0
    out = ForwardOutput(logits=hot, probs=None, activation_map=None)
    assert loss(out, 2) == pytest.approx(0.0, abs=1e-6)


def test_loss_matches_logsumexp_oracle():
    rng = np.random.default_rng(4)
    z = rng.standard_normal(7).astype(np.float32)
    from colorshield.model import ForwardOutput

    out = ForwardOutput(logits=z, probs=None, activation_map=None)
    z64 = z.astype(np.float64)
    expected = np.log(np.exp(z64).sum()) - z64[5]
    assert loss(out, 5) == pytest.approx(expected, rel=1e-6)
    with pytest.raises(IndexError):
        loss(out, 7)


def test_train_lr_zero_keeps_parameters():
    rng = np.random.default_rng(5)
    model = _tiny_model()
    before = {n: t.data.copy() for n, t in model.params.items()}
    x = rng.uniform(0, 1, (12, 8, 8, 3)).astype(np.float32)
    y = rng.integers(0, 5, 12)
    train(model, x, y, TrainSettings(epochs=2, lr=0.0, batch=4, seed=0))
    for name, t in model.params.items():
        assert np.array_equal(t.data, before[name])


def test_train_is_deterministic_and_loss_decreases():
    rng = np.random.default_rng(6)
    x = rng.uniform(0, 1, (48, 8, 8, 3)).astype(np.float32)
    y = rng.integers(0, 5, 48)
    # learnable signal: shift class means apart
    for i, cls in enumerate(y):
        x[i] += 0.08 * cls
    x = np.clip(x / x.max(), 0, 1).astype(np.float32)

    def run():
        model = _tiny_model(seed=9)
        log = train(model, x, y, TrainSettings(epochs=6, lr=0.1, batch=8, seed=1))
        return log

    log1, log2 = run(), run()
    assert [e.train_loss for e in log1] == [e.train_loss for e in log2]
    assert [e.train_acc for e in log1] == [e.train_acc for e in log2]
    assert log1[-1].train_loss < log1[0].train_loss


def test_train_rejects_empty_dataset():
    with pytest.raises(ValueError, match="empty"):
        train(_tiny_model(), np.zeros((0, 8, 8, 3)), np.zeros(0, dtype=int), TrainSettings(epochs=1))


def test_dense_connectivity_ablation_reaches_later_layers():
    rng = np.random.default_rng(7)
    model = _tiny_model()
    x = Tensor(rng.uniform(0, 1, (1, 3, 8, 8)).astype(np.float32))
    baseline: list = []
    forward_graph(model, x, collect=baseline)
    ablated: list = []
    forward_graph(model, x, collect=ablated, ablate=(0, 0))
    layers_per_block = TINY.layers_per_block
    # inputs after block0/layer0 must all change, inputs up to it must not
    assert np.array_equal(baseline[0], ablated[0])
    for k in range(1, layers_per_block):
        assert not np.array_equal(baseline[k], ablated[k]), f"block0 layer{k} input unchanged"
    for k in range(layers_per_block, len(baseline)):
        assert not np.array_equal(baseline[k], ablated[k]), f"layer index {k} input unchanged"


def test_end_to_end_input_gradient_matches_fd():
    from colorshield.verification import model_gradient_check

    rng = np.random.default_rng(8)
    assert model_gradient_check(rng, trials=2, coords_per_trial=6) <= 1e-2


def test_model_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    model = _tiny_model(seed=12)
    path = tmp_path / "m.ckpt"
    save_model(path, model)
    loaded = load_model(path)
    assert loaded.config == model.config
    assert loaded.space == model.space
    for name in model.params:
        assert np.array_equal(loaded.params[name].data, model.params[name].data)
    img = _rand_image(rng)
    assert np.array_equal(forward(model, img).logits, forward(loaded, img).logits)


def test_evaluate_counts_accuracy():
    rng = np.random.default_rng(10)
    model = _tiny_model()
    x = rng.uniform(0, 1, (20, 8, 8, 3)).astype(np.float32)
    preds = []
    for i in range(20):
        preds.append(int(forward(model, Image(x[i])).probs.argmax()))
    y = np.array(preds)
    assert evaluate(model, x, y) == 1.0
    y_wrong = (y + 1) % 5
    assert evaluate(model, x, y_wrong) == 0.0
