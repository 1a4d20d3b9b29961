"""Layer primitives: forward and gradient computations for every layer kind.

A tensor here is a plain ``numpy.ndarray``.  Convolution and pooling accept a
single sample ``[F, H, W]`` or a batch ``[N, F, H, W]``; dense layers accept
``[in]`` or ``[N, in]``.  Gradients come back with the same leading layout.
"""

from dataclasses import dataclass

import numpy as np

from mwcnn import kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


@dataclass
class ConvLayerParams:
    weights: np.ndarray  # [out_maps, in_maps, kernel_h, kernel_w]
    bias: np.ndarray  # [out_maps]

    def __post_init__(self):
        if self.weights.ndim != 4 or min(self.weights.shape) < 1:
            raise ShapeError(f"conv weights must be 4-D and nonempty, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"conv bias shape {self.bias.shape} does not match out_maps={self.weights.shape[0]}"
            )


@dataclass
class DenseLayerParams:
    weights: np.ndarray  # [out_features, in_features]
    bias: np.ndarray  # [out_features]

    def __post_init__(self):
        if self.weights.ndim != 2:
            raise ShapeError(f"dense weights must be 2-D, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError(
                f"dense bias shape {self.bias.shape} does not match out_features={self.weights.shape[0]}"
            )


@dataclass(frozen=True)
class PoolSpec:
    kernel_w: int
    stride_w: int
    ceil_mode: bool = True

    def __post_init__(self):
        if self.kernel_w < 1 or self.stride_w < 1:
            raise ValueError(f"pool kernel and stride must be >= 1, got {self.kernel_w}/{self.stride_w}")

    def out_width(self, width):
        return kernels.pool_out_width(width, self.kernel_w, self.stride_w, self.ceil_mode)


def _as_batch(x, rank):
    x = np.asarray(x)
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeError(f"expected a {rank}-D sample or {rank + 1}-D batch, got shape {x.shape}")


# -- convolution -------------------------------------------------------------


def conv2d_valid(x, params, stride=1):
    """Valid cross-correlation summed over input maps, plus bias."""
    if stride != 1:
        raise ValueError("only stride 1 convolutions are supported")
    xb, single = _as_batch(x, 3)
    n_out, n_in, kh, kw = params.weights.shape
    if xb.shape[1] != n_in:
        raise ShapeError(f"conv expects {n_in} input maps, got {xb.shape[1]} (input shape {x.shape})")
    if kh > xb.shape[2] or kw > xb.shape[3]:
        raise ShapeError(f"conv kernel {kh}x{kw} larger than input {xb.shape[2]}x{xb.shape[3]}")
    out = kernels.conv_forward(xb, params.weights, params.bias)
    return out[0] if single else out


def conv2d_grads(x, params, upstream):
    """Gradients of :func:`conv2d_valid` w.r.t. input, weights and bias."""
    xb, single = _as_batch(x, 3)
    gyb, _ = _as_batch(upstream, 3)
    n_out, _, kh, kw = params.weights.shape
    expected = (xb.shape[0], n_out, xb.shape[2] - kh + 1, xb.shape[3] - kw + 1)
    if gyb.shape != expected:
        raise ShapeError(f"upstream gradient shape {gyb.shape} != conv output shape {expected}")
    gx, gw, gb = kernels.conv_backward(xb, params.weights, gyb)
    return (gx[0] if single else gx), gw, gb


# -- pooling -----------------------------------------------------------------


def maxpool(x, spec):
    """Max pooling along time.  Returns ``(output, argmax)``.

    ``argmax`` holds, per output cell, the flat index into ``x`` of the chosen
    element.  Ties go to the lowest index; a partial last window (ceil mode)
    is pooled over the elements it covers.
    """
    xb, single = _as_batch(x, 3)
    if spec.kernel_w > xb.shape[3]:
        raise ShapeError(f"pool kernel {spec.kernel_w} exceeds input width {xb.shape[3]}")
    if spec.out_width(xb.shape[3]) < 1:
        raise ShapeError(f"pooling of width {xb.shape[3]} yields no output")
    out, argmax = kernels.maxpool_forward(xb, spec.kernel_w, spec.stride_w, spec.ceil_mode)
    if single:
        return out[0], argmax[0]
    return out, argmax


def maxpool_grads(argmax, upstream, input_shape):
    """Route each upstream value to the input position recorded in ``argmax``."""
    argmax = np.asarray(argmax)
    upstream = np.asarray(upstream)
    if argmax.shape != upstream.shape:
        raise ShapeError(f"argmax shape {argmax.shape} != upstream shape {upstream.shape}")
    size = int(np.prod(input_shape))
    if argmax.size and (argmax.min() < 0 or argmax.max() >= size):
        raise IndexError(f"argmax index out of bounds for input shape {tuple(input_shape)}")
    dtype = upstream.dtype if np.issubdtype(upstream.dtype, np.floating) else np.float64
    return kernels.scatter_add(argmax, upstream, size, dtype).reshape(input_shape)


# -- elementwise -------------------------------------------------------------


def relu(x):
    return np.maximum(x, 0)


def relu_grad(x, upstream):
    return np.where(x > 0, upstream, 0).astype(np.result_type(upstream), copy=False)


def dropout(x, rate, rng, training=True):
    """Inverted dropout.  Returns ``(output, mask)``; ``mask`` already carries the 1/(1-rate) scale."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = np.asarray(x)
    if not training or rate == 0:
        mask = np.ones_like(x)
        return x.copy(), mask
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) / x.dtype.type(1 - rate)
    return x * mask, mask


def dropout_grad(mask, upstream):
    return upstream * mask


# -- dense -------------------------------------------------------------------


def dense(x, params):
    xb, single = _as_batch(x, 1)
    n_out, n_in = params.weights.shape
    if xb.shape[1] != n_in:
        raise ShapeError(f"dense layer expects {n_in} inputs, got {xb.shape[1]}")
    out = xb @ params.weights.T + params.bias
    return out[0] if single else out


def dense_grads(x, params, upstream):
    """Return ``(grad_input, grad_weights, grad_bias)``; parameter grads are summed over the batch."""
    xb, single = _as_batch(x, 1)
    gyb, _ = _as_batch(upstream, 1)
    if gyb.shape != (xb.shape[0], params.weights.shape[0]):
        raise ShapeError(f"upstream shape {gyb.shape} does not match dense output")
    gx = gyb @ params.weights
    gw = gyb.T @ xb
    gb = gyb.sum(axis=0)
    return (gx[0] if single else gx), gw, gb


# -- output ------------------------------------------------------------------


def softmax(logits):
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, label):
    """Softmax probabilities, cross-entropy loss and its gradient w.r.t. the logits.

    With a batch of logits ``[N, K]`` and labels ``[N]`` the loss is returned
    per sample.
    """
    logits = np.asarray(logits)
    z = logits - np.max(logits, axis=-1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    log_probs = z - log_norm
    probs = np.exp(log_probs)
    label = np.asarray(label)
    if np.any((label < 0) | (label >= logits.shape[-1])):
        raise ValueError(f"label out of range for {logits.shape[-1]} classes")
    onehot = np.zeros_like(probs)
    if logits.ndim == 1:
        onehot[int(label)] = 1
        loss = -log_probs[int(label)]
    else:
        rows = np.arange(logits.shape[0])
        onehot[rows, label] = 1
        loss = -log_probs[rows, label]
    return probs, loss, probs - onehot
