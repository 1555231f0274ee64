import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmsr import autodiff as ad
from mmsr.autodiff import Tensor
from mmsr.errors import ArgumentError, ConfigError, NumericError, StateError
from mmsr.gradsuite import CASES, run_suite


def t64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# --- conv2d ---------------------------------------------------------------


def test_conv2d_zero_input_gives_bias():
    x = Tensor(np.zeros((1, 3, 3)))
    w = Tensor(np.random.default_rng(0).standard_normal((2, 1, 3, 3)))
    out = ad.conv2d(x, w, Tensor([0.5, -2.0]))
    assert np.all(out.data[0] == 0.5)
    assert np.all(out.data[1] == -2.0)


def test_conv2d_identity_kernel():
    x = np.random.default_rng(1).standard_normal((1, 5, 4))
    out = ad.conv2d(t64(x), t64(np.ones((1, 1, 1, 1))), t64([0.0]))
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_all_ones_3x3_on_2x2():
    x = t64([[[1, 2], [3, 4]]])
    out = ad.conv2d(x, t64(np.ones((1, 1, 3, 3))), t64([0.0]))
    np.testing.assert_array_equal(out.data, [[[10, 10], [10, 10]]])


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 4, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((3, 4, 5))
    for o in range(3):
        for i in range(4):
            for j in range(5):
                ref[o, i, j] = (xp[:, i:i + 3, j:j + 3] * w[o]).sum() + b[o]
    np.testing.assert_allclose(ad.conv2d(t64(x), t64(w), t64(b)).data, ref, rtol=1e-12, atol=1e-12)


def test_conv2d_channel_mismatch_is_config_error():
    with pytest.raises(ConfigError):
        ad.conv2d(Tensor(np.zeros((2, 3, 3))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv2d_even_kernel_rejected():
    with pytest.raises(ConfigError):
        ad.conv2d(Tensor(np.zeros((1, 3, 3))), Tensor(np.zeros((1, 1, 2, 2))))


# --- relu -----------------------------------------------------------------


def test_relu_values():
    np.testing.assert_array_equal(ad.relu(t64([-1, 0, 2])).data, [0, 0, 2])
    assert not ad.relu(t64(-np.arange(1, 6))).data.any()


def test_relu_subgradient_at_zero_is_zero():
    x = t64([0.0, 1.0], grad=True)
    ad.backward(ad.sum_all(ad.relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


# --- bilinear_upsample -------------------------------------------------------


def test_bilinear_factor_one_is_identity():
    x = np.random.default_rng(3).random((2, 3, 4))
    np.testing.assert_array_equal(ad.bilinear_upsample(t64(x), 1).data, x)


def test_bilinear_constant_stays_constant():
    out = ad.bilinear_upsample(t64(np.full((1, 3, 2), 0.7)), 3)
    assert out.shape == (1, 9, 6)
    np.testing.assert_allclose(out.data, 0.7, rtol=0, atol=1e-15)


def test_bilinear_align_corners_false_row():
    out = ad.bilinear_upsample(t64([[[0, 1], [0, 1]]]), 2)
    for row in out.data[0]:
        np.testing.assert_allclose(row, [0, 0.25, 0.75, 1], atol=1e-15)


def test_bilinear_bad_factor():
    with pytest.raises(ArgumentError):
        ad.bilinear_upsample(t64(np.zeros((1, 2, 2))), 0)


# --- avg_pool_down -----------------------------------------------------------


def test_avg_pool_block_mean():
    assert ad.avg_pool_down(t64([[[1, 2], [3, 4]]]), 2).data.item() == 2.5


def test_avg_pool_identity_and_constant():
    x = np.random.default_rng(4).random((1, 4, 6))
    np.testing.assert_array_equal(ad.avg_pool_down(t64(x), 1).data, x)
    np.testing.assert_allclose(ad.avg_pool_down(t64(np.full((1, 4, 4), 3.0)), 2).data, 3.0)


def test_avg_pool_grad_is_uniform_share():
    x = t64(np.random.default_rng(5).random((1, 4, 4)), grad=True)
    ad.backward(ad.sum_all(ad.avg_pool_down(x, 2)))
    np.testing.assert_allclose(x.grad, 0.25)


def test_avg_pool_non_divisible():
    with pytest.raises(ArgumentError):
        ad.avg_pool_down(t64(np.zeros((1, 5, 4))), 2)


@given(arrays(np.float64, (1, 6, 6), elements=st.floats(-100, 100)))
def test_pool_then_replicate_preserves_block_means(x):
    pooled = ad.avg_pool_down(t64(x), 3).data
    up = np.repeat(np.repeat(pooled, 3, axis=1), 3, axis=2)
    np.testing.assert_array_equal(ad.pool_mean(up, 3), pooled)


# --- softmax ---------------------------------------------------------------


def test_softmax_single_and_equal_logits():
    assert ad.softmax(t64([123.4])).data.tolist() == [1.0]
    np.testing.assert_allclose(ad.softmax(t64([2.0, 2.0, 2.0])).data, [1 / 3] * 3, rtol=1e-15)


def test_softmax_ln3():
    np.testing.assert_allclose(ad.softmax(t64([0.0, math.log(3)])).data, [0.25, 0.75], rtol=1e-15)


def test_softmax_rejects_nan():
    with pytest.raises(NumericError):
        ad.softmax(t64([0.0, np.nan]))


@settings(max_examples=50)
@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-50, 50)), st.randoms())
def test_softmax_sums_to_one_and_is_permutation_equivariant(v, rnd):
    y = ad.softmax(t64(v)).data
    assert (y >= 0).all()
    assert abs(y.sum() - 1) < 1e-6
    perm = list(range(len(v)))
    rnd.shuffle(perm)
    np.testing.assert_allclose(ad.softmax(t64(v[perm])).data, y[perm], rtol=1e-12, atol=1e-300)


# --- l1 loss ----------------------------------------------------------------


def test_l1_values():
    assert ad.l1_loss(t64([1.0, 2.0]), t64([1.0, 2.0])).item() == 0.0
    assert ad.l1_loss(t64(np.zeros(5)), t64(np.ones(5))).item() == 1.0
    assert ad.l1_loss(t64([0.0, 2.0]), t64([1.0, 0.0])).item() == 1.5


def test_l1_shape_mismatch():
    with pytest.raises(ArgumentError):
        ad.l1_loss(t64([1.0]), t64([1.0, 2.0]))


# --- backward ---------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = t64(np.random.default_rng(6).random((2, 3)), grad=True)
    ad.backward(ad.sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_l1_against_zero():
    x = t64(np.random.default_rng(7).random((1, 4, 5)) + 0.1, grad=True)
    ad.backward(ad.l1_loss(x, np.zeros((1, 4, 5))))
    np.testing.assert_allclose(x.grad, 1 / 20)


def test_backward_twice_is_state_error():
    x = t64([1.0, 2.0], grad=True)
    loss = ad.sum_all(ad.relu(x))
    ad.backward(loss)
    with pytest.raises(StateError):
        ad.backward(loss)


def test_backward_non_scalar_and_detached():
    x = t64([1.0, 2.0], grad=True)
    with pytest.raises(ArgumentError):
        ad.backward(ad.relu(x))
    with pytest.raises(StateError):
        ad.backward(ad.sum_all(t64([1.0, 2.0])))


def test_shared_input_accumulates():
    x = t64([3.0], grad=True)
    ad.backward(ad.sum_all(ad.mul(x, x)))
    np.testing.assert_allclose(x.grad, [6.0])


def test_graph_is_topologically_ordered():
    x = t64(np.ones((1, 2, 2)), grad=True)
    y = ad.relu(ad.add(x, x))
    loss = ad.sum_all(ad.concat([y, x]))
    graph = ad.Graph.trace(loss)
    pos = {id(t): i for i, t in enumerate(graph.tensors)}
    for t in graph.tensors:
        if t._node is not None:
            assert all(pos[id(i)] < pos[id(t)] for i in t._node.inputs if i.requires_grad)
    assert [n.op for n in graph] == ["add", "relu", "concat", "sum"]


def test_no_grad_records_nothing():
    x = t64([1.0], grad=True)
    with ad.no_grad():
        y = ad.relu(x)
    assert y._node is None and not y.requires_grad


@pytest.mark.filterwarnings("ignore:invalid value")
def test_non_finite_output_raises_with_op_name():
    with pytest.raises(NumericError, match="add"):
        ad.add(t64([np.inf]), t64([-np.inf]))


@pytest.mark.parametrize("op", sorted(CASES))
def test_gradcheck_every_primitive(op):
    results, _ = run_suite(seed=11, n_configs=5, ops={op})
    assert results[0].passed, results[0]


# --- adam ---------------------------------------------------------------------


def test_adam_zero_gradient_is_noop():
    p = t64([1.0, -2.0], grad=True)
    state = ad.AdamState.for_params([p])
    ad.adam_step([p], [np.zeros(2)], state, lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_is_signed_lr():
    p = t64([0.0, 0.0, 0.0], grad=True)
    state = ad.AdamState.for_params([p], eps=0.0)
    ad.adam_step([p], [np.array([3.0, -0.01, 7.0])], state, lr=0.05)
    np.testing.assert_allclose(p.data, [-0.05, 0.05, -0.05], rtol=1e-12)


def _scalar_adam(x, grad_fn, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    trace = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        x = x - lr * mhat / (math.sqrt(vhat) + eps)
        trace.append(x)
    return trace


def test_adam_three_steps_on_quadratic_match_scalar_oracle():
    # f(x) = (x - 3)^2 / 2 driven through the autodiff engine
    p = t64([0.5], grad=True)
    state = ad.AdamState.for_params([p])
    got = []
    for _ in range(3):
        p.zero_grad()
        d = ad.sub(p, t64([3.0]))
        ad.backward(ad.mul(ad.sum_all(ad.mul(d, d)), Tensor(np.float64(0.5))))
        ad.adam_step([p], [p.grad], state, lr=0.1)
        got.append(p.data[0])
    np.testing.assert_allclose(got, _scalar_adam(0.5, lambda x: x - 3.0, 0.1, 3), rtol=1e-14)


# --- determinism ------------------------------------------------------------------


def test_forward_repeatable_bitwise():
    rng = np.random.default_rng(8)
    x = Tensor(rng.standard_normal((4, 9, 9)).astype(np.float32))
    w = Tensor(rng.standard_normal((4, 4, 3, 3)).astype(np.float32))
    a = ad.conv2d(x, w).data
    b = ad.conv2d(x, w).data
    assert a.tobytes() == b.tobytes()
