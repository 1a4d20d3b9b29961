"""Architecture description, parameters, forward/backward pass and weight files."""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from mwcnn import tensor as T
from mwcnn.kernels import pool_out_width

# pooling (kernel, stride) per block, by window length in seconds
POOLING = {
    8: ((2, 2), (4, 4), (4, 4), (3, 3)),
    5: ((2, 2), (2, 2), (3, 3), (4, 4)),
    2: ((2, 2), (2, 2), (3, 3), (2, 2)),
}
TEMPORAL_KERNELS = (11, 10, 10, 11)
DENSE_SIZES = (100, 50, 2)

# expected output of each numbered layer for the 8 s, 1024 Hz, 64 channel model, as (maps, H, W)
REFERENCE_8S_SHAPES = [
    (20, 64, 8182), (20, 1, 8182), (20, 1, 4091), (20, 1, 4082), (20, 1, 1021), (20, 1, 1012),
    (20, 1, 253), (20, 1, 243), (20, 1, 81), (100,), (50,), (2,),
]

FS, MW = 0, 1
LABEL_NAMES = ("FS", "MW")


class ArchError(ValueError):
    pass


class FingerprintError(ValueError):
    """Weights were saved for a different architecture."""


class WeightsFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Conv:
    out_maps: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    kind: str = field(default="conv", init=False)


@dataclass(frozen=True)
class Pool:
    kernel_w: int
    stride_w: int
    ceil_mode: bool = True
    kind: str = field(default="pool", init=False)

    @property
    def spec(self):
        return T.PoolSpec(self.kernel_w, self.stride_w, self.ceil_mode)


@dataclass(frozen=True)
class Dropout:
    rate: float
    kind: str = field(default="dropout", init=False)


@dataclass(frozen=True)
class Dense:
    out_features: int
    kind: str = field(default="dense", init=False)


@dataclass(frozen=True)
class Softmax:
    kind: str = field(default="softmax", init=False)


@dataclass(frozen=True)
class InputSpec:
    n_channels: int
    n_timesteps: int
    n_maps: int = 20


@dataclass(frozen=True)
class ArchSpec:
    input: InputSpec
    layers: tuple

    def canonical(self):
        return json.dumps(
            {"input": asdict(self.input), "layers": [asdict(layer) for layer in self.layers]},
            sort_keys=True,
            separators=(",", ":"),
        )

    @property
    def fingerprint(self):
        return hashlib.sha256(self.canonical().encode()).digest()

    @property
    def numbered(self):
        """Indices of the layers that count as numbered rows (dropout and softmax excluded)."""
        return [i for i, layer in enumerate(self.layers) if layer.kind in ("conv", "pool", "dense")]


def build_arch(window_seconds, fs=1024, n_channels=64, n_maps=20, pooling=None,
               dropout_rate=0.2, ceil_mode=True):
    """Layer list for the given window length.

    ``pooling`` overrides the per-block (kernel, stride) pairs; without it the
    window length must be 2, 5 or 8 seconds.
    """
    if pooling is None:
        if window_seconds not in POOLING:
            raise ArchError(
                f"no pooling preset for {window_seconds} s windows; supply pooling explicitly"
            )
        pooling = POOLING[window_seconds]
    if len(pooling) != 4:
        raise ArchError(f"pooling needs 4 (kernel, stride) pairs, got {len(pooling)}")
    n_timesteps = int(round(window_seconds * fs))
    pools = [Pool(int(k), int(s), ceil_mode) for k, s in pooling]
    layers = [
        Conv(n_maps, 1, TEMPORAL_KERNELS[0]),
        Conv(n_maps, n_channels, 1),
        pools[0],
        Conv(n_maps, 1, TEMPORAL_KERNELS[1]),
        pools[1],
        Conv(n_maps, 1, TEMPORAL_KERNELS[2]),
        pools[2],
        Conv(n_maps, 1, TEMPORAL_KERNELS[3]),
        pools[3],
        Dropout(dropout_rate),
        Dense(DENSE_SIZES[0]),
        Dense(DENSE_SIZES[1]),
        Dense(DENSE_SIZES[2]),
        Softmax(),
    ]
    return ArchSpec(InputSpec(n_channels, n_timesteps, n_maps), tuple(layers))


def with_floor_pooling(arch):
    """Same architecture with floor-mode pooling (diagnostic only)."""
    layers = tuple(replace(l, ceil_mode=False) if l.kind == "pool" else l for l in arch.layers)
    return replace(arch, layers=layers)


def shape_trace(arch):
    """Output shape of every numbered layer, computed symbolically.

    Conv and pool shapes are ``(maps, H, W)``; dense shapes are ``(features,)``.
    """
    shape = (1, arch.input.n_channels, arch.input.n_timesteps)
    trace = []
    for layer in arch.layers:
        number = len(trace) + 1
        if layer.kind == "conv":
            if len(shape) != 3:
                raise ArchError(f"layer {number} (conv) follows a flattened layer")
            shape = (layer.out_maps, shape[1] - layer.kernel_h + 1, shape[2] - layer.kernel_w + 1)
        elif layer.kind == "pool":
            if layer.kernel_w > shape[2]:
                raise ArchError(f"layer {number} (pool): kernel {layer.kernel_w} exceeds width {shape[2]}")
            shape = (shape[0], shape[1], pool_out_width(shape[2], layer.kernel_w, layer.stride_w,
                                                        layer.ceil_mode))
        elif layer.kind == "dense":
            shape = (layer.out_features,)
        else:
            continue
        if min(shape) < 1:
            raise ArchError(f"layer {number} ({layer.kind}) produces nonpositive shape {shape}")
        trace.append(shape)
    return trace


def format_shape(shape):
    """Render ``(maps, H, W)`` as ``'H × W × maps'``."""
    if len(shape) == 1:
        return str(shape[0])
    maps, h, w = shape
    return f"{h} × {w} × {maps}"


# -- parameters ----------------------------------------------------------------


@dataclass
class ModelParams:
    arch: ArchSpec
    layers: list  # one entry per arch layer; None for parameterless layers

    @property
    def fingerprint(self):
        return self.arch.fingerprint

    def tensors(self):
        """Flat list of parameter arrays (weights, bias per layer), in layer order."""
        out = []
        for p in self.layers:
            if p is not None:
                out.extend([p.weights, p.bias])
        return out

    def astype(self, dtype):
        layers = [None if p is None else type(p)(p.weights.astype(dtype), p.bias.astype(dtype))
                  for p in self.layers]
        return ModelParams(self.arch, layers)

    def copy(self):
        return self.astype(self.tensors()[0].dtype)

    @property
    def dtype(self):
        return self.tensors()[0].dtype


def _param_shapes(arch):
    shapes = []
    in_maps = 1
    flat = None
    trace = shape_trace(arch)
    k = 0
    for layer in arch.layers:
        if layer.kind == "conv":
            shapes.append(((layer.out_maps, in_maps, layer.kernel_h, layer.kernel_w), (layer.out_maps,)))
            in_maps = layer.out_maps
        elif layer.kind == "dense":
            n_in = flat if flat is not None else int(np.prod(trace[k - 1]))
            shapes.append(((layer.out_features, n_in), (layer.out_features,)))
            flat = layer.out_features
        else:
            shapes.append(None)
        if layer.kind in ("conv", "pool", "dense"):
            k += 1
    return shapes


def init_params(arch, seed=0, dtype=np.float32):
    """Glorot-uniform weights and zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for layer, shapes in zip(arch.layers, _param_shapes(arch)):
        if shapes is None:
            layers.append(None)
            continue
        wshape, bshape = shapes
        if layer.kind == "conv":
            receptive = wshape[2] * wshape[3]
            fan_in, fan_out = wshape[1] * receptive, wshape[0] * receptive
        else:
            fan_out, fan_in = wshape
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=wshape).astype(dtype)
        b = np.zeros(bshape, dtype=dtype)
        cls = T.ConvLayerParams if layer.kind == "conv" else T.DenseLayerParams
        layers.append(cls(w, b))
    return ModelParams(arch, layers)


def glorot_bound(weight_shape, kind):
    if kind == "conv":
        receptive = weight_shape[2] * weight_shape[3]
        return np.sqrt(6.0 / ((weight_shape[0] + weight_shape[1]) * receptive))
    return np.sqrt(6.0 / (weight_shape[0] + weight_shape[1]))


# -- forward / backward ----------------------------------------------------------


def forward(params, x, mode="eval", rng=None):
    """Run the network on one window ``[C, T]`` or a batch ``[N, C, T]``.

    Returns ``(probs, cache)``; ``cache`` holds what :func:`backward` needs and
    records the output shape of every layer.
    """
    arch = params.arch
    x = np.asarray(x)
    single = x.ndim == 2
    xb = x[None] if single else x
    expected = (arch.input.n_channels, arch.input.n_timesteps)
    if xb.ndim != 3 or xb.shape[1:] != expected:
        raise T.ShapeError(f"input window shape {x.shape} does not match architecture {expected}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if mode == "train" and rng is None:
        raise ValueError("train mode needs an rng for dropout")
    h = xb[:, None].astype(params.dtype, copy=False)
    cache = []
    n_layers = len(arch.layers)
    for i, (layer, p) in enumerate(zip(arch.layers, params.layers)):
        entry = {"kind": layer.kind}
        if layer.kind == "conv":
            entry["input"] = h
            a = T.conv2d_valid(h, p)
            entry["pre"] = a
            h = T.relu(a)
        elif layer.kind == "pool":
            entry["input_shape"] = h.shape
            h, entry["argmax"] = T.maxpool(h, layer.spec)
        elif layer.kind == "dropout":
            h, entry["mask"] = T.dropout(h, layer.rate, rng, training=(mode == "train"))
        elif layer.kind == "dense":
            entry["input_shape"] = h.shape
            h = h.reshape(h.shape[0], -1)
            entry["input"] = h
            a = T.dense(h, p)
            entry["pre"] = a
            entry["relu"] = not (i + 1 < n_layers and arch.layers[i + 1].kind == "softmax")
            h = T.relu(a) if entry["relu"] else a
        elif layer.kind == "softmax":
            entry["logits"] = h
            h = T.softmax(h.astype(np.float64))
        entry["out_shape"] = h.shape[1:]
        cache.append(entry)
    return (h[0] if single else h), cache


def backward(params, cache, labels):
    """Gradients of the summed cross-entropy over the batch.

    Returns ``(grads, loss_sum)`` with ``grads`` aligned to ``params.tensors()``.
    """
    labels = np.atleast_1d(np.asarray(labels))
    logits = cache[-1]["logits"]
    _, losses, g = T.softmax_xent(logits.astype(np.float64), labels)
    g = g.astype(params.dtype)
    grads = []
    for layer, p, entry in zip(reversed(params.arch.layers), reversed(params.layers), reversed(cache)):
        kind = layer.kind
        if kind == "softmax":
            continue
        if kind == "dense":
            if entry["relu"]:
                g = T.relu_grad(entry["pre"], g)
            g, gw, gb = T.dense_grads(entry["input"], p, g)
            g = g.reshape(entry["input_shape"])
            grads.append((gw, gb))
        elif kind == "dropout":
            g = T.dropout_grad(entry["mask"], g)
        elif kind == "pool":
            g = T.maxpool_grads(entry["argmax"], g, entry["input_shape"])
        elif kind == "conv":
            g = T.relu_grad(entry["pre"], g)
            g, gw, gb = T.conv2d_grads(entry["input"], p, g)
            grads.append((gw, gb))
    flat = []
    for gw, gb in reversed(grads):
        flat.extend([gw, gb])
    return flat, float(np.sum(losses))


def predict(params, window):
    """Eval-mode label and probabilities; ties go to FS (index 0)."""
    probs, _ = forward(params, window, mode="eval")
    return label_from_probs(probs), probs


def label_from_probs(probs):
    probs = np.asarray(probs)
    labels = (probs[..., MW] > probs[..., FS]).astype(np.int64)
    return int(labels) if labels.ndim == 0 else labels


# -- weights file ------------------------------------------------------------------

_WEIGHTS_MAGIC = b"MWNW"
_WEIGHTS_VERSION = 1


def save_params(params, path):
    with open(path, "wb") as fh:
        fh.write(_WEIGHTS_MAGIC)
        fh.write(struct.pack("<I", _WEIGHTS_VERSION))
        fh.write(params.fingerprint)
        for index, p in enumerate(params.layers):
            if p is None:
                continue
            fh.write(struct.pack("<HB", index, 2))
            for arr in (p.weights, p.bias):
                fh.write(struct.pack("<B", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise WeightsFormatError(f"truncated weights file while reading {what}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    @property
    def done(self):
        return self.pos >= len(self.buf)


def load_params(path, arch):
    """Load weights saved by :func:`save_params`, refusing a different architecture."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4, "magic") != _WEIGHTS_MAGIC:
        raise WeightsFormatError("not a weights file (bad magic)")
    (version,) = r.unpack("<I", "version")
    if version != _WEIGHTS_VERSION:
        raise WeightsFormatError(f"unsupported weights version {version}")
    fingerprint = r.take(32, "fingerprint")
    if fingerprint != arch.fingerprint:
        raise FingerprintError("weights were saved for a different architecture (fingerprint mismatch)")
    expected = _param_shapes(arch)
    layers = [None] * len(arch.layers)
    while not r.done:
        index, count = r.unpack("<HB", "layer header")
        if index >= len(arch.layers) or expected[index] is None or count != 2:
            raise WeightsFormatError(f"unexpected tensor block for layer {index}")
        arrays = []
        for shape in expected[index]:
            (rank,) = r.unpack("<B", "tensor rank")
            dims = r.unpack(f"<{rank}I", "tensor dims")
            if tuple(dims) != shape:
                raise WeightsFormatError(f"layer {index}: tensor shape {dims} != expected {shape}")
            n = int(np.prod(dims)) * 4
            arrays.append(np.frombuffer(r.take(n, f"layer {index} payload"), dtype="<f4")
                          .reshape(dims).astype(np.float32))
        cls = T.ConvLayerParams if arch.layers[index].kind == "conv" else T.DenseLayerParams
        layers[index] = cls(*arrays)
    missing = [i for i, s in enumerate(expected) if s is not None and layers[i] is None]
    if missing:
        raise WeightsFormatError(f"truncated weights file: layers {missing} missing")
    return ModelParams(arch, layers)
