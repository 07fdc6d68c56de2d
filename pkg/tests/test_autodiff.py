"""Tensor ops, reverse-mode gradients, Adam, and the checkpoint container."""

import copy

import numpy as np
import pytest

import specdiff.autodiff as ad
from specdiff.autodiff import Adam, Tensor, backward, param
from specdiff.errors import NumericError, ShapeError, UsageError


def numeric_grad(build_loss, tensor, h=1e-5):
    """Central finite differences of a scalar-valued closure w.r.t. a tensor."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    with ad.no_grad():
        for i in range(flat.shape[0]):
            orig = flat[i]
            flat[i] = orig + h
            up = build_loss().item()
            flat[i] = orig - h
            down = build_loss().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def assert_grad_close(analytic, numeric, rtol=1e-4):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    rel = np.abs(analytic - numeric) / denom
    assert rel.max() <= rtol, f"max rel err {rel.max():.2e}"


class TestForward:
    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(Tensor([0.0])).data[0] == pytest.approx(0.5)

    def test_mse_identical_args(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
        assert ad.mse_loss(x, x).item() == 0.0

    def test_matmul_identity(self):
        x = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = ad.matmul(x, Tensor(np.eye(2)))
        assert np.array_equal(out.data, x.data)

    def test_broadcast_add_suffix(self):
        x = Tensor(np.ones((2, 3, 4)))
        b = Tensor(np.arange(4.0))
        out = ad.add(x, b)
        assert out.shape == (2, 3, 4)
        assert np.allclose(out.data[1, 2], 1 + np.arange(4.0))

    def test_broadcast_rejects_middle_axis(self):
        with pytest.raises(ShapeError):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))

    def test_nonfinite_input_fails_fast(self):
        with pytest.raises(NumericError):
            Tensor([np.nan, 1.0])
        with np.errstate(over="ignore"), pytest.raises(NumericError):
            ad.tanh(param([[1e308, 1e308]]) @ param([[1e308], [1e308]]))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
        with pytest.raises(ShapeError):
            ad.mse_loss(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 3))))

    def test_no_op_mutates_inputs(self):
        rng = np.random.default_rng(1)
        x = param(rng.normal(size=(3, 4)))
        y = param(rng.normal(size=(3, 4)))
        w = param(rng.normal(size=(4, 2)))
        snap_x, snap_y, snap_w = (t.data.copy() for t in (x, y, w))
        out = ad.tsum(ad.relu(ad.matmul(ad.mul(x, y), w)))
        backward(out)
        assert np.array_equal(x.data, snap_x)
        assert np.array_equal(y.data, snap_y)
        assert np.array_equal(w.data, snap_w)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = param([1.0, 2.0, 3.0])
        backward(ad.tsum(x))
        assert np.array_equal(x.grad, np.ones(3))

    def test_scalar_mse_closed_form(self):
        # loss = (w*a - y)^2 => dL/dw = 2a(wa - y)
        a, y, w0 = 1.7, 0.3, 0.9
        w = param([[w0]])

        def loss():
            return ad.mse_loss(ad.matmul(Tensor([[a]]), w), Tensor([[y]]))

        backward(loss())
        assert w.grad[0, 0] == pytest.approx(2 * a * (w0 * a - y), rel=1e-12)

    def test_non_scalar_loss_rejected(self):
        x = param(np.ones(3))
        with pytest.raises(UsageError):
            backward(ad.relu(x))

    def test_disconnected_loss_rejected(self):
        with pytest.raises(UsageError):
            backward(Tensor([1.0]))

    def test_gradient_linearity(self):
        rng = np.random.default_rng(5)
        x = param(rng.normal(size=(4, 3)))
        t1 = Tensor(rng.normal(size=(4, 3)))
        t2 = Tensor(rng.normal(size=(4, 3)))

        backward(ad.mse_loss(x, t1))
        g1 = x.grad.copy()
        x.grad = None
        backward(ad.mse_loss(x, t2))
        g2 = x.grad.copy()
        x.grad = None

        backward(ad.mse_loss(x, t1))
        backward(ad.mse_loss(x, t2))  # accumulates
        assert np.array_equal(x.grad, g1 + g2)

    def test_composite_graph_finite_differences(self):
        rng = np.random.default_rng(7)
        x = param(rng.uniform(-2, 2, size=(3, 4)))
        w1 = param(rng.uniform(-2, 2, size=(4, 5)))
        w2 = param(rng.uniform(-2, 2, size=(5, 2)))
        b = param(rng.uniform(-2, 2, size=(2,)))
        target = Tensor(rng.uniform(-2, 2, size=(3, 2)))

        def loss():
            h = ad.tanh(ad.matmul(x, w1))
            h = ad.sigmoid(ad.add(ad.matmul(h, w2), b))
            return ad.mse_loss(h, target)

        backward(loss())
        for t in (x, w1, w2, b):
            analytic = t.grad.copy()
            t.grad = None
            assert_grad_close(analytic, numeric_grad(loss, t))

    @pytest.mark.parametrize("op_name", [
        "add", "sub", "mul", "matmul", "sigmoid", "tanh", "relu",
        "concat", "slice", "row_scale", "scale", "sum", "mean", "mse_sum",
        "broadcast", "reshape",
    ])
    def test_each_op_finite_differences(self, op_name):
        rng = np.random.default_rng(hash(op_name) % 2**32)
        x = param(rng.uniform(-2, 2, size=(3, 4)))
        y = param(rng.uniform(-2, 2, size=(3, 4)))
        w = param(rng.uniform(-2, 2, size=(4, 3)))
        probe = Tensor(rng.uniform(-2, 2, size=(3, 4)))

        def body():
            if op_name == "add":
                return ad.add(x, y)
            if op_name == "sub":
                return ad.sub(x, y)
            if op_name == "mul":
                return ad.mul(x, y)
            if op_name == "matmul":
                return ad.matmul(x, w)
            if op_name == "sigmoid":
                return ad.sigmoid(x)
            if op_name == "tanh":
                return ad.tanh(x)
            if op_name == "relu":
                return ad.relu(ad.add(x, Tensor(np.full((3, 4), 0.1))))
            if op_name == "concat":
                return ad.concat([x, y], axis=-1)
            if op_name == "slice":
                return ad.slice_axis(x, -1, 1, 3)
            if op_name == "row_scale":
                return ad.row_scale(x, np.array([0.5, -1.5, 2.0]))
            if op_name == "scale":
                return ad.scale(x, -2.5)
            if op_name == "sum":
                return ad.tsum(x)
            if op_name == "mean":
                return ad.tmean(x)
            if op_name == "mse_sum":
                return ad.mse_loss(x, y, reduction="sum")
            if op_name == "broadcast":
                return ad.broadcast_to(ad.reshape(x, (3, 1, 4)), (3, 5, 4))
            if op_name == "reshape":
                return ad.reshape(x, (4, 3))
            raise AssertionError(op_name)

        def loss():
            out = body()
            if out.size == 1:
                return out
            # project onto fixed coefficients so every element matters
            coeff = Tensor(np.linspace(0.5, 1.5, out.size).reshape(out.shape))
            return ad.tsum(ad.mul(out, coeff))

        backward(loss())
        for t in (x, y, w):
            if t.grad is None:
                continue
            analytic = t.grad.copy()
            t.grad = None
            assert_grad_close(analytic, numeric_grad(loss, t))


class TestAdam:
    def test_first_step_is_roughly_lr(self):
        p = param([1.0])
        opt = Adam({"p": p})
        p.grad = np.array([1.0])
        opt.step(lr=0.1)
        assert p.data[0] == pytest.approx(0.9, abs=1e-8)
        assert p.grad is None

    def test_zero_gradient_keeps_value(self):
        p = param([2.5])
        opt = Adam({"p": p})
        p.grad = np.array([0.0])
        opt.step(lr=0.1)
        assert p.data[0] == pytest.approx(2.5)

    def test_missing_gradient_raises(self):
        p = param([1.0])
        opt = Adam({"p": p})
        with pytest.raises(UsageError):
            opt.step(lr=0.1)

    def test_two_steps_decrease_quadratic(self):
        # loss = (w - 3)^2, start at 0
        w = param([0.0])
        opt = Adam({"w": w})
        losses = []
        for _ in range(2):
            loss = ad.mse_loss(w, Tensor([3.0]))
            losses.append(loss.item())
            backward(loss)
            opt.step(lr=0.1)
        final = ad.mse_loss(w, Tensor([3.0])).item()
        assert losses[1] < losses[0]
        assert final < losses[1]


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {
            "a.weight": rng.normal(size=(3, 4)),
            "b.index": np.arange(5, dtype=np.int64),
        }
        path = tmp_path / "ck.bin"
        ad.save_tensor_archive(str(path), arrays, meta={"note": "test", "epoch": 3})
        loaded, meta = ad.load_tensor_archive(str(path))
        assert meta == {"note": "test", "epoch": 3}
        assert set(loaded) == set(arrays)
        for k in arrays:
            assert np.array_equal(loaded[k], arrays[k])
            assert loaded[k].dtype == arrays[k].dtype

    def test_byte_deterministic(self, tmp_path):
        arrays = {"x": np.linspace(0, 1, 7)}
        p1, p2 = tmp_path / "1.bin", tmp_path / "2.bin"
        ad.save_tensor_archive(str(p1), arrays, meta={"seed": 1})
        ad.save_tensor_archive(str(p2), arrays, meta={"seed": 1})
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_garbage(self, tmp_path):
        p = tmp_path / "junk.bin"
        p.write_bytes(b"not an archive")
        with pytest.raises(Exception):
            ad.load_tensor_archive(str(p))


class TestFiniteDifferenceHelper:
    def test_passes_on_clean_graph(self):
        rng = np.random.default_rng(3)
        w = param(rng.uniform(-1, 1, size=(4, 4)))
        x = Tensor(rng.uniform(-1, 1, size=(2, 4)))

        def loss():
            return ad.tsum(ad.tanh(ad.matmul(x, w)))

        report = ad.finite_difference_check(loss, [("w", w)], rng)
        assert all(err <= 1e-4 for _, err in report)

    def test_detects_corrupted_rule(self, monkeypatch):
        rng = np.random.default_rng(4)
        w = param(rng.uniform(-1, 1, size=(3, 3)))
        x = Tensor(rng.uniform(-1, 1, size=(2, 3)))

        real_tanh = ad.tanh

        def bad_tanh(t):
            out = np.tanh(t.data)

            def bw(g):
                return (g * (1.0 - 0.5 * out * out),)  # wrong derivative

            return ad._record(out, (t,), bw)

        monkeypatch.setattr(ad, "tanh", bad_tanh)

        def loss():
            return ad.tsum(ad.tanh(ad.matmul(x, w)))

        report = ad.finite_difference_check(loss, [("w", w)], rng)
        monkeypatch.setattr(ad, "tanh", real_tanh)
        assert any(err > 1e-4 for _, err in report)
