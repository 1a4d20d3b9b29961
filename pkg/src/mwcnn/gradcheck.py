"""Central-difference gradient checks for the layer primitives.

Each check builds a small random float64 instance, reduces the layer output
to a scalar with fixed random weights, and compares the analytic gradient of
every input and parameter against central differences.
"""

from dataclasses import dataclass

import numpy as np

from mwcnn import tensor as T

LAYERS = ("conv", "dense", "maxpool", "relu", "dropout", "softmax_xent", "network")


@dataclass
class GradCheck:
    layer: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self):
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error <= self.tolerance)


def numerical_grad(f, x, h=1e-6):
    """Central differences of scalar ``f()`` w.r.t. every element of ``x`` (perturbed in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric):
    """Max elementwise relative error, with a floor of 1e-3 of the largest magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    floor = max(1e-3 * scale, 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom, initial=0.0))


def _compare(pairs, f, h):
    worst = 0.0
    for arr, analytic in pairs:
        worst = max(worst, relative_error(analytic, numerical_grad(f, arr, h)))
    return worst


def _micro_network(rng):
    conv1 = T.ConvLayerParams(rng.normal(size=(3, 1, 1, 3)), rng.normal(size=3) * 0.1)
    conv2 = T.ConvLayerParams(rng.normal(size=(3, 3, 2, 1)), rng.normal(size=3) * 0.1)
    pool = T.PoolSpec(2, 2)
    fc = T.DenseLayerParams(rng.normal(size=(2, 3 * 1 * 7)), rng.normal(size=2) * 0.1)
    return conv1, conv2, pool, fc


def _network_loss_and_grads(x, label, conv1, conv2, pool, fc, conv_perturb=0.0):
    a1 = T.conv2d_valid(x, conv1)
    r1 = T.relu(a1)
    a2 = T.conv2d_valid(r1, conv2)
    r2 = T.relu(a2)
    p, arg = T.maxpool(r2, pool)
    logits = T.dense(p.ravel(), fc)
    _, loss, g = T.softmax_xent(logits, label)
    gp, gw_fc, gb_fc = T.dense_grads(p.ravel(), fc, g)
    gr2 = T.maxpool_grads(arg, gp.reshape(p.shape), r2.shape)
    ga2 = T.relu_grad(a2, gr2)
    gr1, gw2, gb2 = T.conv2d_grads(r1, conv2, ga2)
    ga1 = T.relu_grad(a1, gr1)
    gx, gw1, gb1 = T.conv2d_grads(x, conv1, ga1)
    gw1 = gw1 + conv_perturb
    return float(loss), {"x": gx, "w1": gw1, "b1": gb1, "w2": gw2, "b2": gb2, "wfc": gw_fc, "bfc": gb_fc}


def finite_diff_check(layer, tolerance=1e-4, seed=0, h=1e-6, conv_perturb=0.0):
    """Return a :class:`GradCheck` for one layer kind.

    ``conv_perturb`` adds a constant to the analytic conv weight gradient; it
    exists so the self-verification can be shown to catch a broken backward.
    """
    rng = np.random.default_rng(seed)
    if layer == "conv":
        x = rng.normal(size=(2, 3, 5))
        params = T.ConvLayerParams(rng.normal(size=(2, 2, 1, 3)), rng.normal(size=2))
        r = rng.normal(size=(2, 3, 3))
        f = lambda: float(np.sum(T.conv2d_valid(x, params) * r))
        gx, gw, gb = T.conv2d_grads(x, params, r)
        gw = gw + conv_perturb
        err = _compare([(x, gx), (params.weights, gw), (params.bias, gb)], f, h)
    elif layer == "dense":
        x = rng.normal(size=5)
        params = T.DenseLayerParams(rng.normal(size=(3, 5)), rng.normal(size=3))
        r = rng.normal(size=3)
        f = lambda: float(np.sum(T.dense(x, params) * r))
        gx, gw, gb = T.dense_grads(x, params, r)
        err = _compare([(x, gx), (params.weights, gw), (params.bias, gb)], f, h)
    elif layer == "maxpool":
        x = rng.normal(size=(2, 2, 9))
        spec = T.PoolSpec(4, 4)
        out, arg = T.maxpool(x, spec)
        r = rng.normal(size=out.shape)
        f = lambda: float(np.sum(T.maxpool(x, spec)[0] * r))
        err = _compare([(x, T.maxpool_grads(arg, r, x.shape))], f, h)
    elif layer == "relu":
        x = rng.normal(size=(3, 7))
        x[np.abs(x) < 1e-3] = 0.5
        r = rng.normal(size=x.shape)
        f = lambda: float(np.sum(T.relu(x) * r))
        err = _compare([(x, T.relu_grad(x, r))], f, h)
    elif layer == "dropout":
        x = rng.normal(size=(4, 6))
        _, mask = T.dropout(x, 0.2, np.random.default_rng(seed + 1))
        r = rng.normal(size=x.shape)
        f = lambda: float(np.sum(T.dropout(x, 0.2, np.random.default_rng(seed + 1))[0] * r))
        err = _compare([(x, T.dropout_grad(mask, r))], f, h)
    elif layer == "softmax_xent":
        z = rng.normal(size=2) * 3
        label = int(rng.integers(2))
        f = lambda: float(T.softmax_xent(z, label)[1])
        err = _compare([(z, T.softmax_xent(z, label)[2])], f, h)
    elif layer == "network":
        x = rng.normal(size=(1, 2, 16))
        conv1, conv2, pool, fc = _micro_network(rng)
        label = int(rng.integers(2))
        f = lambda: _network_loss_and_grads(x, label, conv1, conv2, pool, fc)[0]
        _, g = _network_loss_and_grads(x, label, conv1, conv2, pool, fc, conv_perturb)
        pairs = [
            (x, g["x"]), (conv1.weights, g["w1"]), (conv1.bias, g["b1"]),
            (conv2.weights, g["w2"]), (conv2.bias, g["b2"]), (fc.weights, g["wfc"]), (fc.bias, g["bfc"]),
        ]
        err = _compare(pairs, f, h)
    else:
        raise ValueError(f"unknown layer {layer!r}; choose from {LAYERS}")
    return GradCheck(layer, err, tolerance)
