import numpy as np
import pytest

from buffertta import ops
from buffertta.autodiff import Graph, NonFiniteError
from buffertta.norm import NormLayer, NormMode

from helpers import finite_diff, rel_err

RNG = np.random.default_rng(1234)


def scalar_loss(node, g):
    # deterministic scalar reduction used by gradient checks
    return ops.mean_all(g, node)


def weighted_loss(node, g):
    # asymmetric reduction; avoids losses that are invariant to the input
    w = np.cos(np.arange(node.value.size)).reshape(node.value.shape)
    val = np.asarray((node.value * w).sum())
    return g.op(val, [(node, lambda dy: float(dy) * w)], "wsum")


# ----------------------------------------------------------------- conv2d

def test_conv2d_identity_kernel():
    g = Graph()
    x = g.constant(np.ones((1, 1, 2, 2)))
    w = g.constant(np.ones((1, 1, 1, 1)))
    out = ops.conv2d(g, x, w, stride=1, padding=0)
    np.testing.assert_array_equal(out.value, np.ones((1, 1, 2, 2)))


def test_conv2d_hand_evaluated_3x3():
    g = Graph()
    x = g.constant(np.eye(3).reshape(1, 1, 3, 3))
    w = g.constant(np.ones((1, 1, 3, 3)))
    out = ops.conv2d(g, x, w, stride=1, padding=1)
    # center window covers the full diagonal
    assert out.value[0, 0, 1, 1] == pytest.approx(3.0)
    # corners see a 2x2 window of the identity
    assert out.value[0, 0, 0, 0] == pytest.approx(2.0)


def test_conv2d_weight_gradient_matches_finite_differences():
    x = RNG.normal(size=(1, 2, 4, 4))
    w0 = RNG.normal(size=(3, 2, 3, 3))
    b0 = RNG.normal(size=3)

    def loss_fn(wv):
        g = Graph()
        out = ops.conv2d(g, g.constant(x), g.constant(wv), g.constant(b0),
                         stride=1, padding=1)
        return float(scalar_loss(out, g).value)

    g = Graph()
    w = g.leaf(w0, trainable=True, name="w")
    out = ops.conv2d(g, g.constant(x), w, g.constant(b0), stride=1, padding=1)
    grads = g.backward(scalar_loss(out, g))
    assert rel_err(grads["w"], finite_diff(loss_fn, w0)) < 1e-6


def test_conv2d_shape_mismatch_raises():
    g = Graph()
    with pytest.raises(ValueError):
        ops.conv2d(g, g.constant(np.ones((1, 2, 4, 4))),
                   g.constant(np.ones((1, 3, 3, 3))), stride=1, padding=1)


def test_conv2d_nonfinite_output_raises():
    g = Graph()
    x = g.constant(np.ones((1, 1, 2, 2)))
    w = Graph().constant(np.full((1, 1, 1, 1), 1.0))
    w.value[0] = np.inf  # bypass leaf check to simulate a bad op result
    with pytest.raises(NonFiniteError):
        ops.conv2d(g, x, g.leaf(w.value), stride=1, padding=0)


# ------------------------------------------------------------- batchnorm2d

def _bn_layer(c, mode):
    layer = NormLayer(c)
    layer.mode = mode
    return layer


def test_batchnorm_standardized_batch_is_identity():
    x = RNG.normal(size=(4, 3, 5, 5))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    g = Graph()
    out = ops.batchnorm2d(g, g.constant(x), _bn_layer(3, NormMode.TARGET_BATCH))
    np.testing.assert_allclose(out.value, x, atol=1e-6)


def test_batchnorm_two_value_batch_oracle():
    # batch {1, 3}: mean 2, biased variance 1 -> outputs {-1, +1}
    x = np.array([1.0, 3.0]).reshape(2, 1, 1, 1)
    g = Graph()
    out = ops.batchnorm2d(g, g.constant(x), _bn_layer(1, NormMode.TARGET_BATCH))
    np.testing.assert_allclose(out.value.ravel(), [-1.0, 1.0], atol=1e-9)


@pytest.mark.parametrize("mode", [NormMode.TARGET_BATCH, NormMode.SOURCE_FROZEN])
def test_batchnorm_input_gradient(mode):
    x0 = RNG.normal(size=(2, 2, 3, 3))

    def loss_fn(xv):
        g = Graph()
        out = ops.batchnorm2d(g, g.constant(xv), _bn_layer(2, mode))
        return float(weighted_loss(out, g).value)

    g = Graph()
    x = g.leaf(x0, trainable=True, name="x")
    out = ops.batchnorm2d(g, x, _bn_layer(2, mode))
    grads = g.backward(weighted_loss(out, g))
    assert rel_err(grads["x"], finite_diff(loss_fn, x0)) < 1e-5


def test_batchnorm_affine_gradients():
    x0 = RNG.normal(size=(2, 2, 3, 3))
    g0, b0 = RNG.normal(size=2), RNG.normal(size=2)

    def loss_fn(gv):
        g = Graph()
        layer = _bn_layer(2, NormMode.TARGET_BATCH)
        out = ops.batchnorm2d(g, g.constant(x0), layer,
                              g.constant(gv), g.constant(b0))
        return float(weighted_loss(out, g).value)

    g = Graph()
    layer = _bn_layer(2, NormMode.TARGET_BATCH)
    gamma = g.leaf(g0, trainable=True, name="gamma")
    out = ops.batchnorm2d(g, g.constant(x0), layer, gamma, g.constant(b0))
    grads = g.backward(weighted_loss(out, g))
    assert rel_err(grads["gamma"], finite_diff(loss_fn, g0)) < 1e-6


def test_batchnorm_channel_mismatch():
    g = Graph()
    with pytest.raises(ValueError):
        ops.batchnorm2d(g, g.constant(np.ones((1, 3, 2, 2))),
                        _bn_layer(2, NormMode.TARGET_BATCH))


# --------------------------------------------------------------- groupnorm

def test_groupnorm_instance_norm_constant_input_gives_beta():
    beta = RNG.normal(size=4)
    x = np.ones((2, 4, 3, 3)) * np.arange(1, 5)[None, :, None, None]
    g = Graph()
    out = ops.groupnorm(g, g.constant(x), groups=4, beta_arr=beta)
    # zero variance per channel -> xhat = 0 -> output = beta
    np.testing.assert_allclose(out.value, np.broadcast_to(
        beta[None, :, None, None], x.shape), atol=1e-12)


def test_groupnorm_single_group_matches_whole_tensor_standardization():
    x = RNG.normal(size=(1, 4, 3, 3))
    g = Graph()
    out = ops.groupnorm(g, g.constant(x), groups=1)
    expect = (x - x.mean()) / np.sqrt(x.var())
    np.testing.assert_allclose(out.value, expect, atol=1e-9)


def test_groupnorm_gradient():
    x0 = RNG.normal(size=(2, 4, 3, 3))

    def loss_fn(xv):
        g = Graph()
        out = ops.groupnorm(g, g.constant(xv), groups=2)
        return float(weighted_loss(out, g).value)

    g = Graph()
    x = g.leaf(x0, trainable=True, name="x")
    grads = g.backward(weighted_loss(ops.groupnorm(g, x, groups=2), g))
    assert rel_err(grads["x"], finite_diff(loss_fn, x0)) < 1e-5


def test_groupnorm_indivisible_raises():
    g = Graph()
    with pytest.raises(ValueError):
        ops.groupnorm(g, g.constant(np.ones((1, 3, 2, 2))), groups=2)


# ---------------------------------------------------- relu / pool / linear

def test_relu_values():
    g = Graph()
    out = ops.relu(g, g.constant(np.array([[-1.0, 2.0]])))
    np.testing.assert_array_equal(out.value, [[0.0, 2.0]])


def test_avgpool_and_gap_gradients():
    x0 = RNG.normal(size=(2, 2, 4, 4))

    def loss_fn(xv):
        g = Graph()
        out = ops.global_avg_pool(g, ops.avgpool2d(g, g.constant(xv), 2))
        return float(scalar_loss(out, g).value)

    g = Graph()
    x = g.leaf(x0, trainable=True, name="x")
    out = ops.global_avg_pool(g, ops.avgpool2d(g, x, 2))
    grads = g.backward(scalar_loss(out, g))
    assert rel_err(grads["x"], finite_diff(loss_fn, x0)) < 1e-6


def test_linear_gradient():
    x0 = RNG.normal(size=(3, 5))
    w0 = RNG.normal(size=(4, 5))
    b0 = RNG.normal(size=4)

    def loss_fn(wv):
        g = Graph()
        out = ops.linear(g, g.constant(x0), g.constant(wv), g.constant(b0))
        return float(scalar_loss(out, g).value)

    g = Graph()
    w = g.leaf(w0, trainable=True, name="w")
    grads = g.backward(scalar_loss(ops.linear(g, g.constant(x0), w, g.constant(b0)), g))
    assert rel_err(grads["w"], finite_diff(loss_fn, w0)) < 1e-6


# ------------------------------------------------ softmax / CE / entropy

def test_softmax_uniform_and_row_sums():
    g = Graph()
    p = ops.softmax(g, g.constant(np.zeros((3, 10))))
    np.testing.assert_allclose(p.value, 0.1, atol=1e-15)
    p2 = ops.softmax(g, g.constant(RNG.normal(size=(5, 7)) * 10))
    np.testing.assert_allclose(p2.value.sum(axis=1), 1.0, atol=1e-12)


def test_cross_entropy_gradient():
    logits0 = RNG.normal(size=(4, 6))
    labels = np.array([0, 3, 5, 2])

    def loss_fn(lv):
        g = Graph()
        return float(ops.cross_entropy(g, g.constant(lv), labels).value)

    g = Graph()
    lg = g.leaf(logits0, trainable=True, name="l")
    grads = g.backward(ops.cross_entropy(g, lg, labels))
    assert rel_err(grads["l"], finite_diff(loss_fn, logits0)) < 1e-6


def test_entropy_values():
    g = Graph()
    onehot = np.zeros((1, 10))
    onehot[0, 4] = 1.0
    assert ops.entropy(g, g.constant(onehot)).value[0] == 0.0
    uniform = np.full((1, 10), 0.1)
    assert ops.entropy(g, g.constant(uniform)).value[0] == pytest.approx(
        np.log(10), abs=1e-12)
    half = np.zeros((1, 10))
    half[0, :2] = 0.5
    assert ops.entropy(g, g.constant(half)).value[0] == pytest.approx(
        np.log(2), abs=1e-12)


def test_entropy_rejects_non_distribution():
    g = Graph()
    with pytest.raises(ValueError):
        ops.entropy(g, g.constant(np.full((1, 4), 0.5)))


def test_entropy_of_softmax_gradient():
    logits0 = RNG.normal(size=(3, 8))

    def loss_fn(lv):
        g = Graph()
        h = ops.entropy(g, ops.softmax(g, g.constant(lv)), validate=False)
        return float(ops.mean_all(g, h).value)

    g = Graph()
    lg = g.leaf(logits0, trainable=True, name="l")
    h = ops.entropy(g, ops.softmax(g, lg), validate=False)
    grads = g.backward(ops.mean_all(g, h))
    assert rel_err(grads["l"], finite_diff(loss_fn, logits0)) < 1e-6


# ----------------------------------------------------------------- backward

def test_backward_linear_in_scale():
    x = RNG.normal(size=(1, 2, 3, 3))
    g = Graph()
    alpha = g.leaf(np.asarray(0.7), trainable=True, name="alpha")
    out = ops.scale(g, g.constant(x), alpha)
    # loss = sum(alpha * x) -> dloss/dalpha = sum(x)
    loss = g.op(np.asarray(out.value.sum()),
                [(out, lambda dy: np.broadcast_to(dy, out.value.shape).copy())], "sum")
    grads = g.backward(loss)
    assert grads["alpha"] == pytest.approx(x.sum(), rel=1e-12)


def test_backward_no_trainable_leaves_is_empty():
    g = Graph()
    out = ops.relu(g, g.constant(RNG.normal(size=(2, 2))))
    assert g.backward(ops.mean_all(g, out)) == {}


def test_backward_rejects_nonscalar_loss():
    g = Graph()
    x = g.leaf(np.ones((2, 2)), trainable=True, name="x")
    with pytest.raises(ValueError):
        g.backward(ops.relu(g, x))


def test_gradient_accumulates_across_consumers():
    x0 = RNG.normal(size=(2, 3))

    def loss_fn(xv):
        g = Graph()
        x = g.constant(xv)
        y = ops.add(g, ops.relu(g, x), x)
        return float(scalar_loss(y, g).value)

    g = Graph()
    x = g.leaf(x0, trainable=True, name="x")
    y = ops.add(g, ops.relu(g, x), x)
    grads = g.backward(scalar_loss(y, g))
    assert rel_err(grads["x"], finite_diff(loss_fn, x0)) < 1e-8


def test_determinism_same_inputs_same_bits():
    x = RNG.normal(size=(2, 3, 8, 8))
    w = RNG.normal(size=(4, 3, 3, 3))

    def run():
        g = Graph()
        out = ops.conv2d(g, g.constant(x), g.constant(w), stride=1, padding=1)
        return out.value

    a, b = run(), run()
    assert a.tobytes() == b.tobytes()
