"""Tensor core: forward semantics, backward pass, finite-difference checks."""

import math

import numpy as np
import pytest

from mmvseg import autodiff as ad
from mmvseg.autodiff import Tape, Tensor, backward, grad_check
from mmvseg.errors import ContractError, NumericError, ShapeError


def t(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        a = t(rng.normal(size=(3, 4)))
        out = ad.matmul(a, t(np.eye(4)))
        np.testing.assert_array_equal(out.data, a.data)

    def test_hand_expansion(self):
        out = ad.matmul(t([[1.0, 2.0], [3.0, 4.0]]), t([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_zero_matrix(self):
        b = t(np.random.default_rng(1).normal(size=(3, 5)))
        out = ad.matmul(t(np.zeros((2, 3))), b)
        np.testing.assert_array_equal(out.data, np.zeros((2, 5)))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            ad.matmul(t(np.zeros((2, 3))), t(np.zeros((4, 5))))

    def test_batched_broadcast(self):
        rng = np.random.default_rng(2)
        a = t(rng.normal(size=(5, 2, 3)))
        b = t(rng.normal(size=(3, 4)))
        out = ad.matmul(a, b)
        assert out.shape == (5, 2, 4)
        np.testing.assert_allclose(out.data, a.data @ b.data)


class TestSoftmax:
    def test_symmetry(self):
        out = ad.softmax_last(t([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_closed_form(self):
        out = ad.softmax_last(t([0.0, math.log(2.0)]))
        np.testing.assert_allclose(out.data, [1 / 3, 2 / 3], atol=1e-15)

    def test_single_element(self):
        out = ad.softmax_last(t([17.0]))
        np.testing.assert_array_equal(out.data, [1.0])

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            shape = tuple(rng.integers(1, 6, size=rng.integers(1, 4)))
            x = t(rng.normal(scale=50.0, size=shape))
            y = ad.softmax_last(x).data
            assert (y >= 0).all()
            np.testing.assert_allclose(y.sum(axis=-1), np.ones(shape[:-1]), atol=1e-12)

    def test_nonfinite_rejected(self):
        with pytest.raises(NumericError):
            ad.softmax_last(t([0.0, np.inf]))


class TestLayerNorm:
    def test_constant_row_is_zeroed(self):
        out = ad.layer_norm(t([4.0, 4.0, 4.0]), t(np.ones(3)), t(np.zeros(3)))
        np.testing.assert_allclose(out.data, np.zeros(3), atol=1e-12)

    def test_two_point_row(self):
        out = ad.layer_norm(t([1.0, 3.0]), t(np.ones(2)), t(np.zeros(2)))
        np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-4)

    def test_zero_gamma_collapses_to_beta(self):
        rng = np.random.default_rng(4)
        x = t(rng.normal(size=(2, 5, 3)))
        beta = t([1.0, -2.0, 0.5])
        out = ad.layer_norm(x, t(np.zeros(3)), beta)
        np.testing.assert_array_equal(out.data, np.broadcast_to(beta.data, x.shape))

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ad.layer_norm(t(np.zeros((2, 3))), t(np.zeros(4)), t(np.zeros(4)))


class TestConv3d:
    def test_pointwise_kernel_equals_matmul(self):
        rng = np.random.default_rng(5)
        x = t(rng.normal(size=(3, 4, 2, 5)))
        k = t(rng.normal(size=(1, 1, 1, 5, 7)))
        b = t(rng.normal(size=7))
        out = ad.conv3d(x, k, b)
        oracle = x.data.reshape(-1, 5) @ k.data.reshape(5, 7) + b.data
        np.testing.assert_allclose(out.data, oracle.reshape(3, 4, 2, 7), atol=1e-12)

    def test_box_kernel_on_constant(self):
        v = 2.5
        x = t(np.full((4, 4, 4, 1), v))
        k = t(np.ones((2, 2, 2, 1, 1)))
        out = ad.conv3d(x, k, stride=2)
        assert out.shape == (2, 2, 2, 1)
        np.testing.assert_allclose(out.data, np.full((2, 2, 2, 1), 8 * v), atol=1e-12)

    def test_zero_kernel_gives_bias(self):
        x = t(np.random.default_rng(6).normal(size=(3, 3, 3, 2)))
        out = ad.conv3d(x, t(np.zeros((3, 3, 3, 2, 4))), t([1.0, 2.0, 3.0, 4.0]), padding=1)
        np.testing.assert_array_equal(out.data, np.broadcast_to([1.0, 2.0, 3.0, 4.0], (3, 3, 3, 4)))

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(ShapeError):
            ad.conv3d(t(np.zeros((2, 2, 2, 1))), t(np.zeros((3, 3, 3, 1, 1))))

    def test_stride_output_extents(self):
        x = t(np.zeros((8, 6, 4, 1)))
        out = ad.conv3d(x, t(np.zeros((2, 2, 2, 1, 3))), stride=2)
        assert out.shape == (4, 3, 2, 3)


class TestGlobalPool:
    def test_constant_volume(self):
        out = ad.global_pool(t(np.full((2, 3, 4, 5), 1.25)))
        np.testing.assert_allclose(out.data, np.full(5, 1.25))

    def test_single_voxel_identity(self):
        x = t(np.array([0.5, -1.0, 2.0]).reshape(1, 1, 1, 3))
        np.testing.assert_array_equal(ad.global_pool(x).data, [0.5, -1.0, 2.0])

    def test_two_voxel_mean(self):
        x = np.zeros((2, 1, 1, 1))
        x[1, 0, 0, 0] = 4.0
        np.testing.assert_allclose(ad.global_pool(t(x)).data, [2.0])


class TestUpsample:
    def test_times_zero_is_identity(self):
        x = t(np.random.default_rng(7).normal(size=(2, 2, 2, 3)))
        out = ad.upsample2x(x, times=0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_constant_volume(self):
        x = t(np.full((2, 2, 2, 1), 3.5))
        out = ad.upsample2x(x, times=2)
        assert out.shape == (8, 8, 8, 1)
        np.testing.assert_allclose(out.data, np.full((8, 8, 8, 1), 3.5), atol=1e-12)

    def test_1d_ramp(self):
        x = np.zeros((1, 1, 2, 1))
        x[0, 0, 1, 0] = 1.0
        out = ad.upsample2x(t(x), times=1)
        np.testing.assert_allclose(out.data[0, 0, :, 0], [0.0, 0.25, 0.75, 1.0], atol=1e-12)

    def test_envelope_preserved(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            x = rng.normal(size=(rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 4), 2))
            out = ad.upsample2x(t(x), times=rng.integers(1, 3)).data
            assert out.min() >= x.min() - 1e-12
            assert out.max() <= x.max() + 1e-12


class TestBackward:
    def test_sum_gives_ones(self):
        x = t(np.random.default_rng(9).normal(size=(3, 4)), requires_grad=True)
        with Tape() as tape:
            loss = x.sum()
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_square_sum(self):
        x = t(np.random.default_rng(10).normal(size=(5,)), requires_grad=True)
        with Tape() as tape:
            loss = (x * x).sum()
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-12)

    def test_unused_parameter_gets_zero_grad(self):
        x = t(np.ones(3), requires_grad=True)
        unused = t(np.ones(2), requires_grad=True)
        with Tape() as tape:
            loss = x.sum()
        backward(loss, tape, leaves=[x, unused])
        np.testing.assert_array_equal(unused.grad, np.zeros(2))

    def test_non_scalar_loss_rejected(self):
        x = t(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = x * x
        with pytest.raises(ContractError):
            backward(y, tape)

    def test_grads_accumulate_across_uses(self):
        x = t([2.0], requires_grad=True)
        with Tape() as tape:
            loss = (x + x).sum()
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, [2.0])

    def test_grads_accumulate_across_calls(self):
        x = t([1.0, 2.0], requires_grad=True)
        for _ in range(2):
            with Tape() as tape:
                loss = x.sum()
            backward(loss, tape)
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])


class TestGradCheck:
    def test_linear_is_exact(self):
        x = t(np.random.default_rng(11).normal(size=(4,)), requires_grad=True)
        assert grad_check(lambda: x.sum(), [x]) < 1e-10

    def test_softmax_log_loss(self):
        rng = np.random.default_rng(12)
        logits = t(rng.normal(size=(5, 3)), requires_grad=True)
        onehot = t(np.eye(3)[rng.integers(0, 3, size=5)])

        def f():
            p = ad.softmax_last(logits)
            return -(onehot * ad.tlog(p)).sum()

        assert grad_check(f, [logits]) < 1e-6


OP_CASES = [
    ("add", lambda rng: _binary_case(rng, ad.add)),
    ("sub", lambda rng: _binary_case(rng, ad.sub)),
    ("mul", lambda rng: _binary_case(rng, ad.mul)),
    ("div", lambda rng: _binary_case(rng, ad.div, offset=2.0)),
    ("exp", lambda rng: _unary_case(rng, ad.texp)),
    ("log", lambda rng: _unary_case(rng, ad.tlog, positive=True)),
    ("gelu", lambda rng: _unary_case(rng, ad.gelu)),
    ("sigmoid", lambda rng: _unary_case(rng, ad.sigmoid)),
    ("matmul", lambda rng: _matmul_case(rng)),
    ("softmax", lambda rng: _unary_case(rng, ad.softmax_last)),
    ("layer_norm", lambda rng: _layer_norm_case(rng)),
    ("conv3d", lambda rng: _conv_case(rng)),
    ("avg_pool3d", lambda rng: _unary_vol_case(rng, ad.avg_pool3d)),
    ("global_pool", lambda rng: _unary_vol_case(rng, ad.global_pool)),
    ("upsample2x", lambda rng: _unary_vol_case(rng, lambda x: ad.upsample2x(x, times=1))),
    ("sum_axis", lambda rng: _unary_case(rng, lambda x: ad.tsum(x, axis=-1))),
    ("mean_axis", lambda rng: _unary_case(rng, lambda x: ad.tmean(x, axis=0, keepdims=True))),
    ("concat", lambda rng: _concat_case(rng)),
    ("layer_moveaxis", lambda rng: _unary_case(rng, lambda x: ad.moveaxis(x, 0, -1))),
]


def _weighted_sum(out, rng):
    r = Tensor(rng.normal(size=out.shape))
    return (out * r).sum()


def _unary_case(rng, op, positive=False):
    shape = tuple(rng.integers(2, 5, size=rng.integers(1, 4)))
    base = rng.normal(size=shape)
    if positive:
        base = np.abs(base) + 0.5
    x = Tensor(base, requires_grad=True)
    r = rng.normal(size=op(Tensor(base)).shape)
    return lambda: (op(x) * Tensor(r)).sum(), [x]


def _unary_vol_case(rng, op):
    shape = tuple(rng.integers(1, 4, size=3)) + (int(rng.integers(1, 4)),)
    x = Tensor(rng.normal(size=shape), requires_grad=True)
    r = rng.normal(size=op(Tensor(x.data)).shape)
    return lambda: (op(x) * Tensor(r)).sum(), [x]


def _binary_case(rng, op, offset=0.0):
    shape = tuple(rng.integers(2, 5, size=2))
    a = Tensor(rng.normal(size=shape), requires_grad=True)
    b = Tensor(rng.normal(size=shape[-1:]) + offset, requires_grad=True)
    r = rng.normal(size=shape)
    return lambda: (op(a, b) * Tensor(r)).sum(), [a, b]


def _matmul_case(rng):
    m, k, n = rng.integers(2, 5, size=3)
    a = Tensor(rng.normal(size=(int(m), int(k))), requires_grad=True)
    b = Tensor(rng.normal(size=(int(k), int(n))), requires_grad=True)
    r = rng.normal(size=(int(m), int(n)))
    return lambda: (ad.matmul(a, b) * Tensor(r)).sum(), [a, b]


def _layer_norm_case(rng):
    shape = (int(rng.integers(2, 5)), int(rng.integers(2, 6)))
    x = Tensor(rng.normal(size=shape), requires_grad=True)
    gamma = Tensor(rng.normal(size=shape[-1]), requires_grad=True)
    beta = Tensor(rng.normal(size=shape[-1]), requires_grad=True)
    r = rng.normal(size=shape)
    return lambda: (ad.layer_norm(x, gamma, beta) * Tensor(r)).sum(), [x, gamma, beta]


def _conv_case(rng):
    cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    x = Tensor(rng.normal(size=(4, 4, 4, cin)), requires_grad=True)
    k = Tensor(rng.normal(size=(2, 2, 2, cin, cout)), requires_grad=True)
    b = Tensor(rng.normal(size=cout), requires_grad=True)
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    out_shape = ad.conv3d(Tensor(x.data), Tensor(k.data), Tensor(b.data), stride=stride, padding=pad).shape
    r = rng.normal(size=out_shape)
    return (
        lambda: (ad.conv3d(x, k, b, stride=stride, padding=pad) * Tensor(r)).sum(),
        [x, k, b],
    )


def _concat_case(rng):
    c1, c2 = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    a = Tensor(rng.normal(size=(3, c1)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, c2)), requires_grad=True)
    r = rng.normal(size=(3, c1 + c2))
    return lambda: (ad.concat([a, b], axis=-1) * Tensor(r)).sum(), [a, b]


@pytest.mark.parametrize("case", range(len(OP_CASES)), ids=[c[0] for c in OP_CASES])
def test_op_gradients(case):
    # every differentiable op, three random shapes each
    name, factory = OP_CASES[case]
    for seed in (0, 1, 2):
        rng = np.random.default_rng(1000 * case + seed)
        f, params = factory(rng)
        assert grad_check(f, params) < 1e-4, f"{name} seed {seed}"
