"""Convolution kernels: numba-jitted loops with a pure-numpy fallback.

The active backend is chosen once at import time from the BTTA_BACKEND
environment variable ("numba" or "numpy"). Default is numba when it
imports cleanly. Both paths compute the same cross-correlation; they are
individually deterministic but not bit-identical to each other (different
summation order), so tests and reproducibility contracts pin one backend.
"""

import os

import numpy as np

_requested = os.environ.get("BTTA_BACKEND", "numba").lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"BTTA_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

_HAVE_NUMBA = False
if _requested == "numba":
    try:
        from numba import njit
        _HAVE_NUMBA = True
    except ImportError:
        _HAVE_NUMBA = False

BACKEND = "numba" if _HAVE_NUMBA else "numpy"


def _out_size(h, k, stride, padding):
    return (h + 2 * padding - k) // stride + 1


def _pad_input(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


# ---------------------------------------------------------------- numpy path

def _conv2d_forward_numpy(x, w, stride, padding):
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    ho = _out_size(h, kh, stride, padding)
    wo = _out_size(wd, kw, stride, padding)
    xp = _pad_input(x, padding)
    out = np.zeros((n, k, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            sl = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            # (n,c,ho,wo) x (k,c) contracted over c
            out += np.tensordot(sl, w[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
    return out


def _conv2d_backward_input_numpy(dout, w, x_shape, stride, padding):
    n, c, h, wd = x_shape
    k, _, kh, kw = w.shape
    ho, wo = dout.shape[2], dout.shape[3]
    dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            # (n,k,ho,wo) x (k,c) contracted over k
            contrib = np.tensordot(dout, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib
    if padding:
        return dxp[:, :, padding:-padding, padding:-padding]
    return dxp


def _conv2d_backward_weight_numpy(dout, x, kh, kw, stride, padding):
    ho, wo = dout.shape[2], dout.shape[3]
    k = dout.shape[1]
    c = x.shape[1]
    xp = _pad_input(x, padding)
    dw = np.zeros((k, c, kh, kw), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            sl = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            dw[:, :, i, j] = np.tensordot(dout, sl, axes=([0, 2, 3], [0, 2, 3]))
    return dw


# ---------------------------------------------------------------- numba path

if _HAVE_NUMBA:
    # reassoc/contract let the reductions vectorize while keeping NaN/inf
    # propagation intact (full fastmath would break non-finite detection);
    # the instruction order is fixed at compile time, so results stay
    # deterministic run to run

    @njit(cache=True, fastmath={"reassoc", "contract"})
    def _conv2d_forward_nb(xp, w, stride, ho, wo):  # pragma: no cover - jitted
        n, c, _, _ = xp.shape
        k, _, kh, kw = w.shape
        out = np.zeros((n, k, ho, wo), dtype=xp.dtype)
        if stride == 1:
            # unit-stride inner index so the loop vectorizes
            for nn in range(n):
                for cc in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            for kk in range(k):
                                wv = w[kk, cc, i, j]
                                for oi in range(ho):
                                    xi = oi + i
                                    for oj in range(wo):
                                        out[nn, kk, oi, oj] += wv * xp[nn, cc, xi, oj + j]
        else:
            for nn in range(n):
                for cc in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            for kk in range(k):
                                wv = w[kk, cc, i, j]
                                for oi in range(ho):
                                    xi = oi * stride + i
                                    for oj in range(wo):
                                        out[nn, kk, oi, oj] += wv * xp[nn, cc, xi, oj * stride + j]
        return out

    @njit(cache=True, fastmath={"reassoc", "contract"})
    def _conv2d_backward_input_nb(dout, w, hp, wp, stride):  # pragma: no cover
        n, k, ho, wo = dout.shape
        _, c, kh, kw = w.shape
        dxp = np.zeros((n, c, hp, wp), dtype=dout.dtype)
        if stride == 1:
            for nn in range(n):
                for cc in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            for kk in range(k):
                                wv = w[kk, cc, i, j]
                                for oi in range(ho):
                                    xi = oi + i
                                    for oj in range(wo):
                                        dxp[nn, cc, xi, oj + j] += wv * dout[nn, kk, oi, oj]
        else:
            for nn in range(n):
                for cc in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            for kk in range(k):
                                wv = w[kk, cc, i, j]
                                for oi in range(ho):
                                    xi = oi * stride + i
                                    for oj in range(wo):
                                        dxp[nn, cc, xi, oj * stride + j] += wv * dout[nn, kk, oi, oj]
        return dxp

    @njit(cache=True, fastmath={"reassoc", "contract"})
    def _conv2d_backward_weight_nb(dout, xp, kh, kw, stride):  # pragma: no cover
        n, k, ho, wo = dout.shape
        c = xp.shape[1]
        dw = np.zeros((k, c, kh, kw), dtype=dout.dtype)
        if stride == 1:
            for nn in range(n):
                for cc in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            for kk in range(k):
                                acc = 0.0
                                for oi in range(ho):
                                    xi = oi + i
                                    for oj in range(wo):
                                        acc += dout[nn, kk, oi, oj] * xp[nn, cc, xi, oj + j]
                                dw[kk, cc, i, j] += acc
        else:
            for nn in range(n):
                for cc in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            for kk in range(k):
                                acc = 0.0
                                for oi in range(ho):
                                    xi = oi * stride + i
                                    for oj in range(wo):
                                        acc += dout[nn, kk, oi, oj] * xp[nn, cc, xi, oj * stride + j]
                                dw[kk, cc, i, j] += acc
        return dw


# ---------------------------------------------------------------- dispatch

def conv2d_forward(x, w, stride, padding):
    """Cross-correlation of NCHW input with KCkhkw weights (no bias)."""
    if BACKEND == "numba":
        kh = w.shape[2]
        ho = _out_size(x.shape[2], kh, stride, padding)
        wo = _out_size(x.shape[3], w.shape[3], stride, padding)
        return _conv2d_forward_nb(_pad_input(x, padding), w, stride, ho, wo)
    return _conv2d_forward_numpy(x, w, stride, padding)


def conv2d_backward_input(dout, w, x_shape, stride, padding):
    if BACKEND == "numba":
        hp = x_shape[2] + 2 * padding
        wp = x_shape[3] + 2 * padding
        dxp = _conv2d_backward_input_nb(dout, w, hp, wp, stride)
        if padding:
            return dxp[:, :, padding:-padding, padding:-padding]
        return dxp
    return _conv2d_backward_input_numpy(dout, w, x_shape, stride, padding)


def conv2d_backward_weight(dout, x, kh, kw, stride, padding):
    if BACKEND == "numba":
        return _conv2d_backward_weight_nb(dout, _pad_input(x, padding), kh, kw, stride)
    return _conv2d_backward_weight_numpy(dout, x, kh, kw, stride, padding)
