"""Pure-numpy MLP kernels; the reference backend and the import fallback.

Every function takes the flat parameter vector, the layer widths
``dims = (d, h1, ..., C)`` and an activation code (0 relu, 1 tanh).
Weights of layer l are stored row-major with shape ``(fan_in, fan_out)``,
followed by the bias, so ``z = a @ W + b``.

Batch sums accumulate per-example contributions in ascending row order.
"""
from __future__ import annotations

import numpy as np

RELU = 0
TANH = 1


def _layers(theta, dims):
    out = []
    off = 0
    for fi, fo in zip(dims[:-1], dims[1:]):
        w = theta[off : off + fi * fo].reshape(fi, fo)
        off += fi * fo
        b = theta[off : off + fo]
        off += fo
        out.append((w, b))
    return out


def _act(z, act):
    if act == RELU:
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _d1(z, a, act):
    if act == RELU:
        return (z > 0.0).astype(np.float64)
    return 1.0 - a * a


def _d2(z, a, act):
    if act == RELU:
        return np.zeros_like(z)
    return -2.0 * a * (1.0 - a * a)


def _forward(layers, x, act):
    zs, acts = [], [x]
    for l, (w, b) in enumerate(layers):
        z = acts[-1] @ w + b
        zs.append(z)
        acts.append(z if l == len(layers) - 1 else _act(z, act))
    return zs, acts


def _softmax(z):
    m = z.max(axis=1, keepdims=True)
    e = np.exp(z - m)
    s = e.sum(axis=1, keepdims=True)
    return e / s, (m + np.log(s))[:, 0]


def _ordered_sum(rows):
    out = rows[0].copy()
    for r in rows[1:]:
        out += r
    return out


def logits(theta, dims, act, x):
    _, acts = _forward(_layers(theta, dims), x, act)
    return acts[-1]


def losses(theta, dims, act, x, y):
    z = logits(theta, dims, act, x)
    _, lse = _softmax(z)
    return lse - z[np.arange(len(y)), y]


def per_example_grads(theta, dims, act, x, y):
    layers = _layers(theta, dims)
    zs, acts = _forward(layers, x, act)
    p, _ = _softmax(acts[-1])
    n = len(y)
    delta = p.copy()
    delta[np.arange(n), y] -= 1.0
    blocks = []
    for l in range(len(layers) - 1, -1, -1):
        w, _ = layers[l]
        gw = (acts[l][:, :, None] * delta[:, None, :]).reshape(n, -1)
        blocks.append(delta)
        blocks.append(gw)
        if l > 0:
            delta = (delta @ w.T) * _d1(zs[l - 1], acts[l], act)
    return np.ascontiguousarray(np.concatenate(blocks[::-1], axis=1))


def grad_sum(theta, dims, act, x, y):
    """Return ``(sum of losses, sum of per-example gradients)``."""
    g = per_example_grads(theta, dims, act, x, y)
    return float(np.sum(losses(theta, dims, act, x, y))), _ordered_sum(g)


def hvp_sum(theta, dims, act, x, y, v):
    """Sum over rows of ``hess(loss_i) @ v`` by forward-over-reverse R-propagation."""
    layers = _layers(theta, dims)
    vlayers = _layers(v, dims)
    zs, acts = _forward(layers, x, act)
    n = len(y)
    rzs, racts = [], [np.zeros_like(x)]
    for l, ((w, _), (vw, vb)) in enumerate(zip(layers, vlayers)):
        rz = racts[-1] @ w + acts[l] @ vw + vb
        rzs.append(rz)
        if l < len(layers) - 1:
            racts.append(_d1(zs[l], acts[l + 1], act) * rz)
    p, _ = _softmax(acts[-1])
    delta = p.copy()
    delta[np.arange(n), y] -= 1.0
    rz = rzs[-1]
    rdelta = p * rz - p * np.sum(p * rz, axis=1, keepdims=True)
    blocks = []
    for l in range(len(layers) - 1, -1, -1):
        w, _ = layers[l]
        vw, _ = vlayers[l]
        rgw = racts[l][:, :, None] * delta[:, None, :] + acts[l][:, :, None] * rdelta[:, None, :]
        blocks.append(rdelta)
        blocks.append(rgw.reshape(n, -1))
        if l > 0:
            s = delta @ w.T
            rs = rdelta @ w.T + delta @ vw.T
            z, a = zs[l - 1], acts[l]
            d1 = _d1(z, a, act)
            rdelta = d1 * rs + _d2(z, a, act) * rzs[l - 1] * s
            delta = d1 * s
    return _ordered_sum(np.concatenate(blocks[::-1], axis=1))
