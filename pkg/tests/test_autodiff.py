import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from randq import autodiff as ad
from randq import rng
from randq.autodiff import Tensor

from conftest import assert_grad_close, finite_diff_grad, well_separated


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(ad.matmul(a, b).data, b.data)

    def test_hand_product(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(ad.matmul(a, b).data, [[19, 22], [43, 50]])

    def test_gradient_is_column_sums(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        store = ad.backward(ad.reduce_sum(ad.matmul(a, b)))
        np.testing.assert_allclose(store.get(a), [[11, 15], [11, 15]])

    def test_shape_mismatch(self):
        with pytest.raises(ad.DimensionError):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestReduceMaxAbs:
    def test_single_row(self):
        out = ad.reduce_max_abs(Tensor([[0.3, -0.9, 0.45]]), "row")
        np.testing.assert_allclose(out.data, [0.9])

    def test_zero_row(self):
        np.testing.assert_array_equal(
            ad.reduce_max_abs(Tensor([[0.0, 0.0, 0.0]]), "row").data, [0.0])

    def test_all_axis(self):
        w = Tensor([[0.3, -0.9, 0.45], [0.1, 0.2, -0.05]])
        assert ad.reduce_max_abs(w, "all").item() == pytest.approx(0.9)

    def test_gradient_single_entry_with_sign(self):
        w = Tensor([[0.3, -0.9, 0.45]], requires_grad=True)
        store = ad.backward(ad.reduce_sum(ad.reduce_max_abs(w, "row")))
        np.testing.assert_array_equal(store.get(w), [[0.0, -1.0, 0.0]])

    def test_tie_breaks_to_first_index(self):
        w = Tensor([[0.5, -0.5]], requires_grad=True)
        store = ad.backward(ad.reduce_sum(ad.reduce_max_abs(w, "row")))
        np.testing.assert_array_equal(store.get(w), [[1.0, 0.0]])


class TestLpNorm:
    def test_euclidean(self):
        assert ad.lp_norm(Tensor([[3.0, 4.0]]), 2, "row").data[0] == pytest.approx(5.0)

    def test_inf_is_max(self):
        assert ad.lp_norm(Tensor([[3.0, 4.0]]), math.inf, "row").data[0] == pytest.approx(4.0)

    def test_p8(self):
        out = ad.lp_norm(Tensor([[4.0, 3.0]]), 8, "row")
        assert out.data[0] == pytest.approx((4**8 + 3**8) ** (1 / 8), rel=1e-5)

    def test_p_below_one_rejected(self):
        with pytest.raises(ValueError):
            ad.lp_norm(Tensor([[1.0]]), 0.5, "row")

    @given(arrays(np.float32, (3, 5), elements=st.floats(-10, 10, width=32)))
    def test_inf_matches_reduce_max_abs(self, w):
        t = Tensor(w)
        np.testing.assert_array_equal(ad.lp_norm(t, math.inf, "row").data,
                                      ad.reduce_max_abs(t, "row").data)


class TestTopkNorm:
    def test_p8_k2(self):
        out = ad.topk_magnitude_lp_norm(Tensor([[3.0, 1.0, -4.0, 2.0]]), 8, 2, "row")
        assert out.data[0] == pytest.approx((4**8 + 3**8) ** (1 / 8), rel=1e-5)

    def test_k1_inf_is_max_abs(self):
        out = ad.topk_magnitude_lp_norm(Tensor([[3.0, 1.0, -4.0, 2.0]]), math.inf, 1, "row")
        assert out.data[0] == pytest.approx(4.0)

    def test_tie_selects_both(self):
        out = ad.topk_magnitude_lp_norm(Tensor([[5.0, 5.0, 0.0]]), 2, 2, "row")
        assert out.data[0] == pytest.approx(math.sqrt(50), rel=1e-5)

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            ad.topk_magnitude_lp_norm(Tensor([[1.0, 2.0]]), 2, 3, "row")

    def test_gradient_only_to_topk(self):
        w = Tensor([[3.0, 1.0, -4.0, 2.0]], requires_grad=True)
        out = ad.topk_magnitude_lp_norm(w, 8, 2, "row")
        store = ad.backward(ad.reduce_sum(out))
        g = store.get(w)
        assert g[0, 1] == 0.0 and g[0, 3] == 0.0
        assert g[0, 0] != 0.0 and g[0, 2] != 0.0

    @given(arrays(np.float32, (2, 4), elements=st.floats(-5, 5, width=32)))
    def test_k_equals_n_matches_lp_norm(self, w):
        t = Tensor(w)
        np.testing.assert_allclose(
            ad.topk_magnitude_lp_norm(t, 3, 4, "row").data,
            ad.lp_norm(t, 3, "row").data, rtol=1e-5, atol=1e-6)


class TestStopGradient:
    def test_forward_identity(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        np.testing.assert_array_equal(ad.stop_gradient(x).data, x.data)

    def test_blocked_gradient(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        store = ad.backward(ad.reduce_sum(ad.stop_gradient(x)))
        np.testing.assert_array_equal(store.get(x), [0.0, 0.0, 0.0])

    def test_product_rule_one_branch(self):
        x = Tensor([2.0], requires_grad=True)
        store = ad.backward(ad.reduce_sum(ad.mul(x, ad.stop_gradient(x))))
        np.testing.assert_array_equal(store.get(x), [2.0])


class TestSampling:
    def test_degenerate_interval(self):
        z = rng.sample_uniform((4, 5), 0.0, 0.0, seed=7)
        np.testing.assert_array_equal(z, np.zeros((4, 5), dtype=np.float32))

    def test_uniform_statistics(self):
        z = rng.sample_uniform((100_000,), -0.5, 0.5, seed=3)
        assert abs(z.mean()) < 0.01
        assert z.min() >= -0.5 and z.max() <= 0.5

    def test_uniform_determinism(self):
        a = rng.sample_uniform((64, 64), -0.5, 0.5, seed=11, tag="w", step=5)
        b = rng.sample_uniform((64, 64), -0.5, 0.5, seed=11, tag="w", step=5)
        np.testing.assert_array_equal(a, b)
        c = rng.sample_uniform((64, 64), -0.5, 0.5, seed=11, tag="w", step=6)
        assert not np.array_equal(a, c)

    def test_uniform_rejects_inverted(self):
        with pytest.raises(ValueError):
            rng.sample_uniform((2,), 1.0, 0.0, seed=0)

    def test_gaussian_zero_std(self):
        np.testing.assert_array_equal(rng.sample_gaussian((3,), 0.0, seed=0),
                                      np.zeros(3, dtype=np.float32))

    def test_gaussian_statistics(self):
        z = rng.sample_gaussian((100_000,), 1.0, seed=5)
        assert abs(z.std() - 1.0) < 0.02

    def test_gaussian_rejects_negative_std(self):
        with pytest.raises(ValueError):
            rng.sample_gaussian((2,), -1.0, seed=0)


class TestBackward:
    def test_sum_gradient(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        store = ad.backward(ad.reduce_sum(x))
        np.testing.assert_array_equal(store.get(x), [1.0, 1.0, 1.0])

    def test_chain_rule(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        store = ad.backward(ad.reduce_sum(ad.mul(x, x)))
        np.testing.assert_array_equal(store.get(x), [2.0, 4.0])

    def test_accumulation(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        store = ad.backward(ad.add(ad.reduce_sum(x), ad.reduce_sum(x)))
        np.testing.assert_array_equal(store.get(x), [2.0, 2.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ad.DimensionError):
            ad.backward(ad.mul(x, 2.0))


def _check_op(gen, shape, build):
    x0 = well_separated(gen, shape)
    x = Tensor(x0, requires_grad=True)
    loss = build(x)
    store = ad.backward(loss)
    numeric = finite_diff_grad(lambda v: build(Tensor(v)).item(), x0)
    assert_grad_close(store.get(x), numeric)


@pytest.mark.parametrize("op_name,build", [
    ("matmul", lambda x: ad.reduce_sum(ad.mul(ad.matmul(x, ad.transpose(x)), 0.5))),
    ("lp2", lambda x: ad.reduce_sum(ad.lp_norm(x, 2, "row"))),
    ("lp8", lambda x: ad.reduce_sum(ad.lp_norm(x, 8, "row"))),
    ("maxabs", lambda x: ad.reduce_sum(ad.reduce_max_abs(x, "row"))),
    ("topk", lambda x: ad.reduce_sum(ad.topk_magnitude_lp_norm(x, 8, 3, "row"))),
    ("softmax", lambda x: ad.reduce_sum(ad.mul(ad.softmax(x, -1), ad.constant(np.arange(x.size, dtype=np.float32).reshape(x.shape))))),
    ("logsoftmax", lambda x: ad.reduce_sum(ad.mul(ad.log_softmax(x, -1), ad.constant(np.arange(x.size, dtype=np.float32).reshape(x.shape))))),
    ("exp", lambda x: ad.reduce_sum(ad.exp(ad.mul(x, 0.1)))),
    ("relu", lambda x: ad.reduce_sum(ad.relu(x))),
])
def test_finite_difference_property(gen, op_name, build):
    for _ in range(5):
        _check_op(gen, (4, 6), build)


def test_layer_norm_finite_difference(gen):
    g0 = gen.random(6).astype(np.float32) + 0.5
    b0 = gen.random(6).astype(np.float32)

    def build(x, gain=None, bias=None):
        gain = gain if gain is not None else Tensor(g0)
        bias = bias if bias is not None else Tensor(b0)
        return ad.reduce_sum(ad.mul(ad.layer_norm(x, gain, bias),
                                    ad.constant(np.arange(24, dtype=np.float32).reshape(4, 6))))

    x0 = well_separated(gen, (4, 6))
    x = Tensor(x0, requires_grad=True)
    store = ad.backward(build(x))
    numeric = finite_diff_grad(lambda v: build(Tensor(v)).item(), x0)
    assert_grad_close(store.get(x), numeric)


def test_embedding_and_cross_entropy_gradients(gen):
    v, d = 7, 5
    ids = np.array([[1, 3], [0, 6]])
    targets = np.array([[2, 4], [1, 0]])
    mask = np.ones((2, 2), dtype=np.float32)
    w0 = well_separated(gen, (v, d)) * 0.1

    def build(w):
        emb = ad.embedding(w, ids)
        logits = ad.matmul(emb, ad.transpose(w))
        return ad.cross_entropy(logits, targets, mask)

    w = Tensor(w0, requires_grad=True)
    store = ad.backward(build(w))
    numeric = finite_diff_grad(lambda v_: build(Tensor(v_)).item(), w0)
    assert_grad_close(store.get(w), numeric)
