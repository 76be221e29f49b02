"""Differentiable layer vocabulary for the backbone and buffer modules."""

import numpy as np

from . import backend
from .norm import NormMode

EPS = 1e-5


def add(g, a, b):
    return g.op(a.value + b.value, [(a, lambda dy: dy), (b, lambda dy: dy)], "add")


def scale(g, x, s):
    """x scaled by a scalar node s (buffer coefficient path)."""
    xv, sv = x.value, float(s.value)
    return g.op(
        xv * sv,
        [(x, lambda dy: dy * sv),
         (s, lambda dy: np.asarray(np.sum(dy * xv)))],
        "scale",
    )


def conv2d(g, x, w, b=None, stride=1, padding=0):
    xv, wv = x.value, w.value
    if xv.shape[1] != wv.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input {xv.shape} weight {wv.shape}")
    kh, kw = wv.shape[2], wv.shape[3]
    out = backend.conv2d_forward(xv, wv, stride, padding)
    if b is not None:
        out = out + b.value[None, :, None, None]
    parents = [
        (x, lambda dy: backend.conv2d_backward_input(dy, wv, xv.shape, stride, padding)),
        (w, lambda dy: backend.conv2d_backward_weight(dy, xv, kh, kw, stride, padding)),
    ]
    if b is not None:
        parents.append((b, lambda dy: dy.sum(axis=(0, 2, 3))))
    return g.op(out, parents, "conv2d")


def relu(g, x):
    xv = x.value
    mask = xv > 0
    # np.maximum (not where) so NaN inputs propagate to the loss
    return g.op(np.maximum(xv, 0.0), [(x, lambda dy: dy * mask)], "relu")


def avgpool2d(g, x, k=2):
    n, c, h, w = x.value.shape
    if h % k or w % k:
        raise ValueError(f"avgpool2d: spatial dims {h}x{w} not divisible by {k}")
    out = x.value.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def vjp(dy):
        return np.repeat(np.repeat(dy, k, axis=2), k, axis=3) / (k * k)

    return g.op(out, [(x, vjp)], "avgpool2d")


def global_avg_pool(g, x):
    n, c, h, w = x.value.shape
    out = x.value.mean(axis=(2, 3))

    def vjp(dy):
        return np.broadcast_to(dy[:, :, None, None] / (h * w), (n, c, h, w))

    return g.op(out, [(x, vjp)], "gap")


def linear(g, x, w, b=None):
    xv, wv = x.value, w.value
    out = xv @ wv.T
    if b is not None:
        out = out + b.value
    parents = [
        (x, lambda dy: dy @ wv),
        (w, lambda dy: dy.T @ xv),
    ]
    if b is not None:
        parents.append((b, lambda dy: dy.sum(axis=0)))
    return g.op(out, parents, "linear")


def softmax(g, logits):
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def vjp(dy):
        return p * (dy - (dy * p).sum(axis=1, keepdims=True))

    return g.op(p, [(logits, vjp)], "softmax")


def cross_entropy(g, logits, labels):
    """Mean negative log-likelihood over the batch. labels: int array [N]."""
    lv = logits.value
    n = lv.shape[0]
    z = lv - lv.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(n), labels]
    loss = nll.mean()
    p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)

    def vjp(dy):
        grad = p.copy()
        grad[np.arange(n), labels] -= 1.0
        return grad * (float(dy) / n)

    return g.op(np.asarray(loss), [(logits, vjp)], "cross_entropy")


def entropy(g, probs, validate=True):
    """Row-wise Shannon entropy, 0*ln(0) taken as 0. probs: [N,K]."""
    pv = probs.value
    if validate:
        if np.any(pv < -1e-12) or np.any(np.abs(pv.sum(axis=1) - 1.0) > 1e-6):
            raise ValueError("entropy expects rows that are probability distributions")
    with np.errstate(divide="ignore", invalid="ignore"):
        # pv * 0.0 in the masked branch keeps NaN entries NaN (0*ln0 -> 0)
        plogp = np.where(pv > 0, pv * np.log(np.maximum(pv, 1e-300)), pv * 0.0)
        dlog = np.where(pv > 0, -(np.log(np.maximum(pv, 1e-300)) + 1.0), 0.0)
    h = -plogp.sum(axis=1)

    def vjp(dy):
        return dy[:, None] * dlog

    return g.op(h, [(probs, vjp)], "entropy")


def mean_all(g, x):
    n = x.value.size
    return g.op(np.asarray(x.value.mean()),
                [(x, lambda dy: np.broadcast_to(np.asarray(dy) / n, x.value.shape).copy())],
                "mean")


def weighted_row_mean(g, rows, weights, denom):
    """sum(weights * rows) / denom with constant weights (EATA sample weighting)."""
    wv = np.asarray(weights, dtype=np.float64)
    val = np.asarray((wv * rows.value).sum() / denom)
    return g.op(val, [(rows, lambda dy: float(dy) * wv / denom)], "wmean")


def _bn_normalize_batch(xv):
    mu = xv.mean(axis=(0, 2, 3))
    var = xv.var(axis=(0, 2, 3))  # biased
    return mu, var


def batchnorm2d(g, x, layer, gamma=None, beta=None):
    """Channel normalization driven by a NormLayer's mode.

    gamma/beta may be passed as graph nodes (trainable affine); otherwise the
    layer's stored affine arrays are used as constants.
    """
    xv = x.value
    c = xv.shape[1]
    if c != layer.mu_s.shape[0]:
        raise ValueError(f"batchnorm2d channel mismatch: {c} vs {layer.mu_s.shape[0]}")
    gv = gamma.value if gamma is not None else layer.gamma
    bv = beta.value if beta is not None else layer.beta

    mode = layer.mode
    batch_stats = mode in (NormMode.TARGET_BATCH, NormMode.TRAIN)
    if batch_stats:
        mu, var = _bn_normalize_batch(xv)
        if mode == NormMode.TRAIN:
            m = layer.momentum
            layer.mu_s = (1 - m) * layer.mu_s + m * mu
            layer.var_s = (1 - m) * layer.var_s + m * var
    elif mode == NormMode.MOVING_UPDATE:
        bmu, bvar = _bn_normalize_batch(xv)
        m = layer.momentum
        layer.mu_run = (1 - m) * layer.mu_run + m * bmu
        layer.var_run = (1 - m) * layer.var_run + m * bvar
        mu, var = layer.mu_run, layer.var_run
    else:  # SOURCE_FROZEN
        mu, var = layer.mu_s, layer.var_s

    # eps as a variance floor (not additive) so a unit-variance batch maps
    # exactly to unit variance; gradient through var vanishes when floored
    active = var > EPS
    inv_std = 1.0 / np.sqrt(np.where(active, var, EPS))
    xhat = (xv - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = gv[None, :, None, None] * xhat + bv[None, :, None, None]

    if batch_stats:
        def vjp_x(dy):
            dxhat = dy * gv[None, :, None, None]
            mean_d = dxhat.mean(axis=(0, 2, 3))
            mean_dx = (dxhat * xhat).mean(axis=(0, 2, 3)) * active
            return inv_std[None, :, None, None] * (
                dxhat - mean_d[None, :, None, None] - xhat * mean_dx[None, :, None, None])
    else:
        def vjp_x(dy):
            return dy * (gv * inv_std)[None, :, None, None]

    parents = [(x, vjp_x)]
    if gamma is not None:
        parents.append((gamma, lambda dy: (dy * xhat).sum(axis=(0, 2, 3))))
    if beta is not None:
        parents.append((beta, lambda dy: dy.sum(axis=(0, 2, 3))))
    return g.op(out, parents, "batchnorm2d")


def groupnorm(g, x, groups, gamma=None, beta=None, gamma_arr=None, beta_arr=None):
    xv = x.value
    n, c, h, w = xv.shape
    if c % groups:
        raise ValueError(f"groupnorm: {c} channels not divisible by {groups} groups")
    gv = gamma.value if gamma is not None else gamma_arr
    bv = beta.value if beta is not None else beta_arr
    if gv is None:
        gv = np.ones(c)
    if bv is None:
        bv = np.zeros(c)
    xg = xv.reshape(n, groups, c // groups, h, w)
    mu = xg.mean(axis=(2, 3, 4), keepdims=True)
    var = xg.var(axis=(2, 3, 4), keepdims=True)
    active = var > EPS
    inv_std = 1.0 / np.sqrt(np.where(active, var, EPS))
    xhat = ((xg - mu) * inv_std).reshape(n, c, h, w)
    out = gv[None, :, None, None] * xhat + bv[None, :, None, None]

    def vjp_x(dy):
        dxhat = (dy * gv[None, :, None, None]).reshape(n, groups, c // groups, h, w)
        xh = xhat.reshape(n, groups, c // groups, h, w)
        mean_d = dxhat.mean(axis=(2, 3, 4), keepdims=True)
        mean_dx = (dxhat * xh).mean(axis=(2, 3, 4), keepdims=True) * active
        return (inv_std * (dxhat - mean_d - xh * mean_dx)).reshape(n, c, h, w)

    parents = [(x, vjp_x)]
    if gamma is not None:
        parents.append((gamma, lambda dy: (dy * xhat).sum(axis=(0, 2, 3))))
    if beta is not None:
        parents.append((beta, lambda dy: dy.sum(axis=(0, 2, 3))))
    return g.op(out, parents, "groupnorm")
