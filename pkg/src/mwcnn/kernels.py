"""Hot loops of the network: valid convolution and max pooling.

Every public function dispatches to a numba-compiled kernel or to an
equivalent numpy implementation depending on :func:`mwcnn._accel.get_backend`.
All kernels work on batched arrays ``[N, F, H, W]`` and keep the input dtype.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from mwcnn._accel import njit, use_numba


def pool_out_width(width, kernel, stride, ceil_mode=True):
    """Output length of 1-D pooling; ceil mode keeps a partial last window."""
    if ceil_mode:
        out = -(-(width - kernel) // stride) + 1
        # a last window must start inside the input
        if (out - 1) * stride >= width:
            out -= 1
        return out
    return (width - kernel) // stride + 1


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@njit(cache=True)
def _conv_forward_nb(x, w, b, out):
    n_batch, n_in, _, _ = x.shape
    n_out, _, kh, kw = w.shape
    ho, wo = out.shape[2], out.shape[3]
    for n in range(n_batch):
        for o in range(n_out):
            for h in range(ho):
                for j in range(wo):
                    out[n, o, h, j] = b[o]
            for i in range(n_in):
                for a in range(kh):
                    for c in range(kw):
                        wv = w[o, i, a, c]
                        for h in range(ho):
                            for j in range(wo):
                                out[n, o, h, j] += wv * x[n, i, h + a, j + c]


@njit(cache=True)
def _conv_grad_input_nb(gy, w, gx):
    n_batch, n_out, ho, wo = gy.shape
    _, n_in, kh, kw = w.shape
    gx[:] = 0
    for n in range(n_batch):
        for o in range(n_out):
            for i in range(n_in):
                for a in range(kh):
                    for c in range(kw):
                        wv = w[o, i, a, c]
                        for h in range(ho):
                            for j in range(wo):
                                gx[n, i, h + a, j + c] += wv * gy[n, o, h, j]


@njit(cache=True)
def _conv_grad_weight_nb(x, gy, gw, gb):
    n_batch, n_out, ho, wo = gy.shape
    _, n_in, kh, kw = gw.shape
    for o in range(n_out):
        acc = 0.0
        for n in range(n_batch):
            for h in range(ho):
                for j in range(wo):
                    acc += gy[n, o, h, j]
        gb[o] = acc
        for i in range(n_in):
            for a in range(kh):
                for c in range(kw):
                    acc = 0.0
                    for n in range(n_batch):
                        for h in range(ho):
                            for j in range(wo):
                                acc += gy[n, o, h, j] * x[n, i, h + a, j + c]
                    gw[o, i, a, c] = acc


@njit(cache=True)
def _maxpool_nb(x, kernel, stride, out, argmax):
    n_batch, n_maps, height, width = x.shape
    wo = out.shape[3]
    for n in range(n_batch):
        for f in range(n_maps):
            for h in range(height):
                base = ((n * n_maps + f) * height + h) * width
                for j in range(wo):
                    start = j * stride
                    stop = min(start + kernel, width)
                    best = start
                    best_val = x[n, f, h, start]
                    for t in range(start + 1, stop):
                        if x[n, f, h, t] > best_val:
                            best_val = x[n, f, h, t]
                            best = t
                    out[n, f, h, j] = best_val
                    argmax[n, f, h, j] = base + best


@njit(cache=True)
def _scatter_add_nb(index, values, grad):
    for t in range(index.size):
        grad[index[t]] += values[t]


# ---------------------------------------------------------------------------
# numpy kernels
# ---------------------------------------------------------------------------


def _conv_forward_np(x, w, b, out):
    ho, wo = out.shape[2], out.shape[3]
    out[:] = b[None, :, None, None]
    for a in range(w.shape[2]):
        for c in range(w.shape[3]):
            xs = x[:, :, a : a + ho, c : c + wo]
            out += np.moveaxis(np.tensordot(w[:, :, a, c], xs, axes=([1], [1])), 0, 1)


def _conv_grad_input_np(gy, w, gx):
    ho, wo = gy.shape[2], gy.shape[3]
    gx[:] = 0
    for a in range(w.shape[2]):
        for c in range(w.shape[3]):
            contrib = np.tensordot(gy, w[:, :, a, c], axes=([1], [0]))
            gx[:, :, a : a + ho, c : c + wo] += np.moveaxis(contrib, 3, 1)


def _conv_grad_weight_np(x, gy, gw, gb):
    ho, wo = gy.shape[2], gy.shape[3]
    gb[:] = gy.sum(axis=(0, 2, 3))
    for a in range(gw.shape[2]):
        for c in range(gw.shape[3]):
            xs = x[:, :, a : a + ho, c : c + wo]
            gw[:, :, a, c] = np.tensordot(gy, xs, axes=([0, 2, 3], [0, 2, 3]))


def _maxpool_np(x, kernel, stride, out, argmax):
    n_batch, n_maps, height, width = x.shape
    wo = out.shape[3]
    span = (wo - 1) * stride + kernel
    if span > width:
        pad = np.full(x.shape[:3] + (span - width,), -np.inf, dtype=x.dtype)
        xp = np.concatenate([x, pad], axis=3)
    else:
        xp = x[..., :span]
    windows = sliding_window_view(xp, kernel, axis=3)[:, :, :, ::stride, :]
    local = np.argmax(windows, axis=4)
    out[:] = np.take_along_axis(windows, local[..., None], axis=4)[..., 0]
    col = local + (np.arange(wo) * stride)
    base = np.arange(n_batch * n_maps * height).reshape(n_batch, n_maps, height, 1) * width
    argmax[:] = base + col


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def conv_forward(x, w, b):
    ho = x.shape[2] - w.shape[2] + 1
    wo = x.shape[3] - w.shape[3] + 1
    out = np.empty((x.shape[0], w.shape[0], ho, wo), dtype=x.dtype)
    if use_numba():
        _conv_forward_nb(np.ascontiguousarray(x), np.ascontiguousarray(w, dtype=x.dtype),
                         np.ascontiguousarray(b, dtype=x.dtype), out)
    else:
        _conv_forward_np(x, w.astype(x.dtype, copy=False), b.astype(x.dtype, copy=False), out)
    return out


def conv_backward(x, w, gy):
    """Return ``(grad_x, grad_w, grad_b)`` for a stride-1 valid convolution."""
    dtype = np.result_type(x.dtype, gy.dtype)
    x = np.ascontiguousarray(x, dtype=dtype)
    gy = np.ascontiguousarray(gy, dtype=dtype)
    w = np.ascontiguousarray(w, dtype=dtype)
    gx = np.empty(x.shape, dtype=dtype)
    gw = np.empty(w.shape, dtype=dtype)
    gb = np.empty(w.shape[0], dtype=dtype)
    if use_numba():
        _conv_grad_input_nb(gy, w, gx)
        _conv_grad_weight_nb(x, gy, gw, gb)
    else:
        _conv_grad_input_np(gy, w, gx)
        _conv_grad_weight_np(x, gy, gw, gb)
    return gx, gw, gb


def maxpool_forward(x, kernel, stride, ceil_mode=True):
    """Pool along the last axis; returns values and flat argmax indices into ``x``."""
    wo = pool_out_width(x.shape[3], kernel, stride, ceil_mode)
    out = np.empty(x.shape[:3] + (wo,), dtype=x.dtype)
    argmax = np.empty(out.shape, dtype=np.int64)
    if use_numba():
        _maxpool_nb(np.ascontiguousarray(x), kernel, stride, out, argmax)
    else:
        _maxpool_np(x, kernel, stride, out, argmax)
    return out, argmax


def scatter_add(index, values, size, dtype):
    """Sum ``values`` into a zero vector of length ``size`` at ``index`` (repeats accumulate)."""
    index = np.ascontiguousarray(index, dtype=np.int64).ravel()
    values = np.ascontiguousarray(values, dtype=dtype).ravel()
    if use_numba():
        grad = np.zeros(size, dtype=dtype)
        _scatter_add_nb(index, values, grad)
        return grad
    return np.bincount(index, weights=values, minlength=size).astype(dtype, copy=False)
