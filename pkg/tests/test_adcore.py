import threading

import numpy as np
import pytest
from hypothesis import given, strategies as st

from meshbench import adcore as ad
from meshbench.adcore import Parameter, Tensor
from meshbench.errors import NumericError, ShapeError, UsageError

from gradcheck import RTOL, check

SEEDS = range(10)


def leaf(rng, *shape, positive=False):
    data = rng.standard_normal(shape)
    if positive:
        data = np.abs(data) + 0.5
    return Tensor(data, requires_grad=True)


def away_from_zero(rng, *shape):
    # keeps finite differences off the leaky-relu kink
    data = rng.standard_normal(shape)
    data = np.where(np.abs(data) < 1e-3, 0.1, data)
    return Tensor(data, requires_grad=True)


# each case: rng -> (tensors, build) with build() -> scalar Tensor
def case_add(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 4)
    w = rng.standard_normal((3, 4))
    return [a, b], lambda: ad.sum_all(ad.mul(ad.add(a, b), Tensor(w)))


def case_sub(rng):
    a, b = leaf(rng, 2, 5), leaf(rng, 2, 5)
    w = rng.standard_normal((2, 5))
    return [a, b], lambda: ad.sum_all(ad.mul(ad.sub(a, b), Tensor(w)))


def case_mul(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 3, 4)
    w = rng.standard_normal((2, 3, 4))
    return [a, b], lambda: ad.sum_all(ad.mul(ad.mul(a, b), Tensor(w)))


def case_scale(rng):
    a = leaf(rng, 6)
    w = rng.standard_normal(6)
    return [a], lambda: ad.sum_all(ad.mul(ad.scale(a, -2.5), Tensor(w)))


def case_leaky(rng):
    a = away_from_zero(rng, 4, 5)
    w = rng.standard_normal((4, 5))
    return [a], lambda: ad.sum_all(ad.mul(ad.leaky_relu(a, 0.1), Tensor(w)))


def case_reshape_transpose(rng):
    a = leaf(rng, 2, 3, 4)
    w = rng.standard_normal((4, 6))
    return [a], lambda: ad.sum_all(ad.mul(ad.reshape(ad.transpose(a, (2, 0, 1)), (4, 6)), Tensor(w)))


def case_concat(rng):
    a, b = leaf(rng, 3, 2), leaf(rng, 3, 5)
    w = rng.standard_normal((3, 7))
    return [a, b], lambda: ad.sum_all(ad.mul(ad.concat([a, b], axis=1), Tensor(w)))


def case_matmul_2d(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 4, 5)
    w = rng.standard_normal((3, 5))
    return [a, b], lambda: ad.sum_all(ad.mul(ad.matmul(a, b), Tensor(w)))


def case_matmul_batched(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 2, 4, 3)
    w = rng.standard_normal((2, 3, 3))
    return [a, b], lambda: ad.sum_all(ad.mul(ad.matmul(a, b), Tensor(w)))


def case_matmul_stack(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
    w = rng.standard_normal((2, 3, 5))
    return [a, b], lambda: ad.sum_all(ad.mul(ad.matmul(a, b), Tensor(w)))


def case_linear(rng):
    x, wt, b = leaf(rng, 5, 3), leaf(rng, 3, 4), leaf(rng, 4)
    w = rng.standard_normal((5, 4))
    return [x, wt, b], lambda: ad.sum_all(ad.mul(ad.linear(x, wt, b), Tensor(w)))


def case_conv_same(rng):
    x, wt, b = leaf(rng, 2, 3, 5, 6), leaf(rng, 4, 3, 3, 3), leaf(rng, 4)
    w = rng.standard_normal((2, 4, 5, 6))
    return [x, wt, b], lambda: ad.sum_all(ad.mul(ad.conv2d(x, wt, b, 1, 1), Tensor(w)))


def case_conv_strided(rng):
    x, wt = leaf(rng, 1, 2, 6, 6), leaf(rng, 3, 2, 3, 3)
    w = rng.standard_normal((1, 3, 3, 3))
    return [x, wt], lambda: ad.sum_all(ad.mul(ad.conv2d(x, wt, None, 2, 1), Tensor(w)))


def case_conv_patch(rng):
    x, wt = leaf(rng, 2, 1, 8, 8), leaf(rng, 3, 1, 4, 4)
    w = rng.standard_normal((2, 3, 2, 2))
    return [x, wt], lambda: ad.sum_all(ad.mul(ad.conv2d(x, wt, None, 4, 0), Tensor(w)))


def case_upsample(rng):
    x = leaf(rng, 1, 2, 3, 2)
    w = rng.standard_normal((1, 2, 6, 4))
    return [x], lambda: ad.sum_all(ad.mul(ad.upsample_nearest(x), Tensor(w)))


def case_layer_norm(rng):
    x, g, b = leaf(rng, 4, 6), leaf(rng, 6), leaf(rng, 6)
    w = rng.standard_normal((4, 6))
    return [x, g, b], lambda: ad.sum_all(ad.mul(ad.layer_norm(x, g, b), Tensor(w)))


def case_softmax(rng):
    x = leaf(rng, 3, 5)
    w = rng.standard_normal((3, 5))
    return [x], lambda: ad.sum_all(ad.mul(ad.softmax(x, axis=-1), Tensor(w)))


def case_gather_scatter(rng):
    x, e = leaf(rng, 6, 3), leaf(rng, 10, 3)
    idx = rng.integers(0, 6, 10)
    dst = rng.integers(0, 6, 10)
    w = rng.standard_normal((6, 3))
    return [x, e], lambda: ad.sum_all(ad.mul(ad.scatter_sum(ad.add(ad.gather(x, idx), e), dst, 6), Tensor(w)))


def case_mse(rng):
    p = leaf(rng, 2, 1, 4, 4)
    t = rng.standard_normal((2, 1, 4, 4))
    mask = rng.random((2, 1, 4, 4)) > 0.3
    mask[0, 0, 0, 0] = True
    return [p], lambda: ad.mse_loss(p, t, mask)


CASES = [case_add, case_sub, case_mul, case_scale, case_leaky, case_reshape_transpose, case_concat,
         case_matmul_2d, case_matmul_batched, case_matmul_stack, case_linear, case_conv_same,
         case_conv_strided, case_conv_patch, case_upsample, case_layer_norm, case_softmax,
         case_gather_scatter, case_mse]


@pytest.mark.parametrize("case", CASES, ids=lambda c: c.__name__[5:])
def test_op_gradients(case):
    worst = 0.0
    for seed in SEEDS:
        tensors, build = case(np.random.default_rng(seed))
        worst = max(worst, check(build, tensors))
    assert worst <= RTOL


class TestEngine:
    def test_shared_subexpression_accumulates(self):
        x = Tensor([2.0, 3.0], requires_grad=True)
        y = ad.mul(x, x)
        ad.sum_all(ad.add(y, y)).backward()
        np.testing.assert_array_equal(x.grad, 4 * x.data)

    def test_leaf_grad_accumulates_across_calls(self):
        x = Tensor([1.0], requires_grad=True)
        ad.sum_all(ad.scale(x, 3.0)).backward()
        ad.sum_all(ad.scale(x, 3.0)).backward()
        assert x.grad[0] == 6.0

    def test_backward_without_graph(self):
        with pytest.raises(UsageError):
            Tensor([1.0]).backward()
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(UsageError):
            ad.scale(x, 2.0).backward()

    def test_no_grad_stops_recording(self):
        x = Tensor([1.0], requires_grad=True)
        with ad.no_grad():
            y = ad.scale(x, 2.0)
        assert not y.requires_grad
        assert ad.grad_enabled()

    def test_no_grad_is_per_thread(self):
        seen = []
        with ad.no_grad():
            t = threading.Thread(target=lambda: seen.append(ad.grad_enabled()))
            t.start()
            t.join()
        assert seen == [True]

    def test_shape_errors(self):
        a = Tensor(np.ones((2, 3)))
        with pytest.raises(ShapeError):
            ad.add(a, Tensor(np.ones(2)))
        with pytest.raises(ShapeError):
            ad.matmul(a, Tensor(np.ones((2, 3))))
        with pytest.raises(ShapeError):
            ad.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
        with pytest.raises(ShapeError):
            ad.scatter_sum(a, [0, 5], 3)
        with pytest.raises(ShapeError):
            ad.mse_loss(a, np.ones((2, 3)), np.zeros((2, 3), bool))

    def test_conv_matches_direct_loop(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        out = ad.conv2d(Tensor(x), Tensor(w), None, stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((1, 3, 3, 3))
        for o in range(3):
            for i in range(3):
                for j in range(3):
                    ref[0, o, i, j] = np.sum(xp[0, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o])
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    @given(st.integers(1, 40), st.integers(1, 8), st.integers(0, 1000))
    def test_scatter_matches_add_at(self, e, n, seed):
        rng = np.random.default_rng(seed)
        src = rng.standard_normal((e, 3))
        idx = rng.integers(0, n, e)
        ref = np.zeros((n, 3))
        np.add.at(ref, idx, src)
        np.testing.assert_allclose(ad.scatter_sum(Tensor(src), idx, n).data, ref, atol=1e-12)

    def test_backward_deterministic(self):
        def grads():
            rng = np.random.default_rng(3)
            tensors, build = case_gather_scatter(rng)
            build().backward()
            return [t.grad.tobytes() for t in tensors]
        assert grads() == grads()


class TestAdam:
    def test_first_step_is_sign_times_lr(self):
        p = Parameter(np.zeros(4))
        state = ad.AdamState([p])
        g = np.array([1e-3, -2.0, 5.0, -1e-4])
        ad.adam_step([p], [g], state, lr=0.1, eps=0.0)
        np.testing.assert_allclose(p.data, -0.1 * np.sign(g), rtol=1e-12)

    def test_matches_reference_recursion(self):
        rng = np.random.default_rng(1)
        p = Parameter(rng.standard_normal(5))
        ref = p.data.copy()
        m = v = np.zeros(5)
        state = ad.AdamState([p])
        for t in range(1, 6):
            g = rng.standard_normal(5)
            ad.adam_step([p], [g], state, lr=0.01)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p.data, ref, rtol=1e-12)

    def test_lr_scale_and_frozen(self):
        a = Parameter(np.zeros(3), lr_scale=0.01)
        b = Parameter(np.zeros(3))
        frozen = Parameter(np.zeros(3), trainable=False)
        opt = ad.Adam([a, b, frozen], lr=1.0, eps=0.0)
        assert frozen not in opt.params
        for q in (a, b):
            q.grad = np.ones(3)
        opt.step()
        np.testing.assert_allclose(b.data / a.data, 100.0)
        assert np.all(frozen.data == 0)

    def test_zero_lr_keeps_parameters(self):
        p = Parameter(np.arange(3.0))
        opt = ad.Adam([p], lr=0.0)
        p.grad = np.ones(3)
        opt.step()
        np.testing.assert_array_equal(p.data, np.arange(3.0))

    def test_non_finite_gradient(self):
        p = Parameter(np.zeros(2), name="w")
        with pytest.raises(NumericError):
            ad.adam_step([p], [np.array([np.nan, 0.0])], ad.AdamState([p]), 0.1)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        params = {"a.w": Parameter(rng.standard_normal((3, 4))), "b": Parameter(rng.standard_normal(7)),
                  "scalar": Parameter(np.array(2.5))}
        ad.save_checkpoint(tmp_path / "c.ckpt", params)
        back = ad.load_checkpoint(tmp_path / "c.ckpt")
        assert list(back) == list(params)
        for k, p in params.items():
            assert back[k].tobytes() == p.data.tobytes() and back[k].shape == p.shape

    def test_rejects_corruption(self, tmp_path):
        path = tmp_path / "c.ckpt"
        ad.save_checkpoint(path, {"w": Parameter(np.ones(10))})
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(ValueError):
            ad.load_checkpoint(path)
        path.write_bytes(b"garbage" + raw)
        with pytest.raises(ValueError):
            ad.load_checkpoint(path)
