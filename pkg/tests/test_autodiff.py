import numpy as np
import pytest

from colorshield import autodiff as ad
from colorshield.autodiff import Tensor
from colorshield.verification import OP_KINDS, OP_TOLERANCE, op_gradient_sweep


def test_relu_definition():
    out = ad.relu(Tensor([-1.0, 0.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_conv2d_ones_sum():
    x = Tensor(np.ones((1, 1, 3, 3)))
    k = Tensor(np.ones((1, 1, 3, 3)))
    out = ad.conv2d(x, k, stride=1, padding=0)
    assert out.data.shape == (1, 1, 1, 1)
    assert out.data.ravel()[0] == pytest.approx(9.0)


def test_softmax_uniform_row():
    probs = ad.softmax(Tensor(np.zeros((1, 3), dtype=np.float32)))
    assert np.allclose(probs.data, 1.0 / 3.0)


def test_backward_sum_of_squares():
    x = Tensor(np.array([1.0, 2.0, 3.0], dtype=np.float32), requires_grad=True)
    with ad.tape() as tp:
        loss = ad.sum_all(ad.mul(x, x))
    tp.backward(loss)
    assert np.allclose(x.grad, [2.0, 4.0, 6.0])


def test_backward_crossentropy_uniform():
    logits = Tensor(np.zeros((1, 3), dtype=np.float32), requires_grad=True)
    with ad.tape() as tp:
        loss = ad.softmax_crossentropy(logits, np.array([0]))
    tp.backward(loss)
    assert np.allclose(logits.grad, [[-2 / 3, 1 / 3, 1 / 3]], atol=1e-6)


def test_backward_rejects_nonscalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with ad.tape() as tp:
        y = ad.mul(x, x)
        with pytest.raises(ad.ShapeError, match="scalar"):
            tp.backward(y)


def test_backward_identity_chain_grad_one():
    x = Tensor(np.array([3.0], dtype=np.float32), requires_grad=True)
    with ad.tape() as tp:
        y = ad.scale(x, 1.0)
    tp.backward(y)
    assert np.array_equal(x.grad, [1.0])


def test_backward_toy_net_finite_difference():
    # five-layer toy net: conv -> relu -> affine -> maxpool -> matmul head
    rng = np.random.default_rng(0)
    kernel = Tensor(rng.standard_normal((2, 1, 3, 3)), requires_grad=True)
    gamma = Tensor(rng.standard_normal(2) + 2.0, requires_grad=True)
    beta = Tensor(rng.standard_normal(2), requires_grad=True)
    head = Tensor(rng.standard_normal((2, 1)), requires_grad=True)
    x = rng.standard_normal((1, 1, 6, 6)) + 0.3

    def net(inp: Tensor) -> Tensor:
        h = ad.conv2d(inp, kernel, padding=1)
        h = ad.relu(h)
        h = ad.affine_channel(h, gamma, beta)
        h = ad.maxpool2(h)
        pooled = ad.avgpool_global(h)
        return ad.sum_all(ad.matmul(pooled, head))

    # analytic parameter grads
    xt = Tensor(x)
    with ad.tape() as tp:
        loss = net(xt)
    tp.backward(loss)

    h = 1e-3
    for par in (kernel, gamma, beta, head):
        flat = par.data.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(net(Tensor(x)).data)
            flat[i] = orig - h
            lo = float(net(Tensor(x)).data)
            flat[i] = orig
            numeric = (hi - lo) / (2 * h)
            analytic = float(par.grad.ravel()[i])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            assert rel <= 1e-3, (par.data.shape, i, analytic, numeric)


def test_grad_check_sum_is_exact():
    x = Tensor(np.random.default_rng(1).standard_normal((3, 4)))
    assert ad.grad_check(ad.sum_all, x) == pytest.approx(0.0, abs=1e-9)


def test_grad_check_softmax_crossentropy():
    rng = np.random.default_rng(2)
    x = Tensor(rng.standard_normal((2, 5)))
    labels = np.array([1, 3])
    err = ad.grad_check(lambda t: ad.softmax_crossentropy(t, labels), x, h=1e-3)
    assert err <= 1e-4


def test_grad_check_conv_relu_pool_composite():
    rng = np.random.default_rng(3)
    kernel = Tensor(rng.standard_normal((2, 1, 3, 3)))
    x = rng.standard_normal((1, 1, 4, 4))
    x = np.where(np.abs(x) < 0.2, x + 0.5, x)  # nudge away from relu kinks

    def f(t: Tensor) -> Tensor:
        return ad.sum_all(ad.maxpool2(ad.relu(ad.conv2d(t, kernel, padding=1))))

    assert ad.grad_check(f, Tensor(x), h=1e-3) <= 1e-3


def test_all_ops_match_finite_differences():
    rng = np.random.default_rng(42)
    for name, err, tol in op_gradient_sweep(rng, trials_per_op=12):
        assert err <= tol, f"{name}: {err}"


def test_op_list_covers_spec_kinds():
    required = {
        "add", "mul", "matmul", "conv2d", "relu", "maxpool2",
        "avgpool_global", "concat_channels", "affine_channel",
        "softmax_crossentropy", "resize_bilinear",
    }
    assert required <= set(OP_KINDS)
    assert OP_TOLERANCE == 1e-3


def test_forward_op_dispatch_and_unknown():
    out = ad.forward_op("relu", Tensor([-2.0, 5.0]))
    assert np.array_equal(out.data, [0.0, 5.0])
    with pytest.raises(ValueError, match="unknown kind"):
        ad.forward_op("fft", Tensor([1.0]))


def test_shape_errors_name_op_and_extents():
    with pytest.raises(ad.ShapeError, match="matmul.*3.*5"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((5, 2))))
    with pytest.raises(ad.ShapeError, match="conv2d"):
        ad.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ad.ShapeError, match="maxpool2.*5"):
        ad.maxpool2(Tensor(np.ones((1, 1, 5, 4))))


def test_concat_channels_routes_gradients():
    a = Tensor(np.ones((1, 2, 2, 2), dtype=np.float32), requires_grad=True)
    b = Tensor(np.ones((1, 3, 2, 2), dtype=np.float32), requires_grad=True)
    w = np.zeros((1, 5, 2, 2), dtype=np.float32)
    w[:, 2:] = 1.0  # zero out the first branch's slice
    with ad.tape() as tp:
        cat = ad.concat_channels([a, b])
        loss = ad.sum_all(ad.mul(cat, Tensor(w)))
    tp.backward(loss)
    assert np.all(a.grad == 0)
    assert np.all(b.grad == 1)


def test_fanout_accumulates_additively():
    x = Tensor(np.array([2.0], dtype=np.float32), requires_grad=True)
    with ad.tape() as tp:
        y = ad.add(ad.scale(x, 3.0), ad.scale(x, 4.0))
        loss = ad.sum_all(y)
    tp.backward(loss)
    assert np.allclose(x.grad, [7.0])


def test_forward_determinism():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    k = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)

    def run():
        xt = Tensor(x.copy(), requires_grad=True)
        with ad.tape() as tp:
            out = ad.relu(ad.conv2d(xt, Tensor(k.copy()), padding=1))
            loss = ad.sum_all(out)
        tp.backward(loss)
        return out.data.copy(), xt.grad.copy()

    o1, g1 = run()
    o2, g2 = run()
    assert np.array_equal(o1, o2)
    assert np.array_equal(g1, g2)


def test_values_finite_after_forward_ops():
    rng = np.random.default_rng(11)
    x = Tensor(rng.standard_normal((2, 4, 6, 6)).astype(np.float32))
    for out in (
        ad.relu(x),
        ad.maxpool2(x),
        ad.avgpool2(x),
        ad.avgpool_global(x),
        ad.softmax(Tensor(rng.standard_normal((3, 7)))),
        ad.resize_bilinear(x, 9, 5),
    ):
        assert np.all(np.isfinite(out.data))


def test_ops_outside_tape_do_not_record():
    x = Tensor(np.ones(3), requires_grad=True)
    y = ad.scale(x, 2.0)
    assert not y.requires_grad


def test_log_rejects_nonpositive():
    with pytest.raises(ad.NumericError):
        ad.log(Tensor([0.0, 1.0]))


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(5)
    tensors = {
        "stem/w": rng.standard_normal((4, 3, 3, 3)).astype(np.float32),
        "head/bias": rng.standard_normal(10).astype(np.float32),
        "odd-name_0.9": rng.standard_normal((2, 1)).astype(np.float32),
    }
    path = tmp_path / "model.ckpt"
    ad.save_checkpoint(path, tensors)
    loaded = ad.load_checkpoint(path)
    assert list(loaded) == list(tensors)
    for name in tensors:
        assert loaded[name].dtype == np.float32
        assert np.array_equal(loaded[name].view(np.uint32), tensors[name].view(np.uint32))


def test_checkpoint_rejects_bad_names_and_truncation(tmp_path):
    with pytest.raises(ValueError, match="bad tensor name"):
        ad.save_checkpoint(tmp_path / "x.ckpt", {"has space": np.ones(1, dtype=np.float32)})
    path = tmp_path / "t.ckpt"
    ad.save_checkpoint(path, {"a": np.ones(8, dtype=np.float32)})
    blob = path.read_bytes()
    path.write_bytes(blob[:-4])
    with pytest.raises(ValueError, match="truncated"):
        ad.load_checkpoint(path)


def test_resize_bilinear_identity_same_size():
    x = Tensor(np.random.default_rng(9).standard_normal((1, 2, 5, 5)).astype(np.float32))
    out = ad.resize_bilinear(x, 5, 5)
    assert np.array_equal(out.data, x.data)
