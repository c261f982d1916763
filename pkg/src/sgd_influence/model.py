"""Softmax classifiers (linear or MLP) and the derivative primitives used by
training and influence estimation.

Parameters live in one flat float64 vector. Layer l contributes a
``(fan_in, fan_out)`` weight block stored row-major, then its bias.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

from ._backend import kernels
from .dataset import Dataset, Instance

_ACTIVATIONS = {"relu": 0, "tanh": 1}

Batch = Union[Dataset, Sequence[Instance], tuple]


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden: tuple[int, ...] = ()
    output_dim: int = 2
    activation: str = "relu"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 2:
            raise ModelError("input_dim must be >= 1 and output_dim >= 2")
        if any(h < 1 for h in self.hidden):
            raise ModelError(f"hidden widths must be >= 1, got {self.hidden}")
        if self.activation not in _ACTIVATIONS:
            raise ModelError(f"activation must be one of {sorted(_ACTIVATIONS)}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)

    @property
    def n_params(self) -> int:
        d = self.dims
        return sum((fi + 1) * fo for fi, fo in zip(d[:-1], d[1:]))

    @property
    def act_code(self) -> int:
        return _ACTIVATIONS[self.activation]

    def describe(self) -> str:
        widths = ",".join(str(h) for h in self.hidden)
        return f"mlp(d={self.input_dim}, hidden=[{widths}], C={self.output_dim}, act={self.activation})"


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng([seed, 0])
    blocks = []
    d = spec.dims
    for fi, fo in zip(d[:-1], d[1:]):
        lim = np.sqrt(6.0 / (fi + fo))
        blocks.append(rng.uniform(-lim, lim, size=fi * fo))
        blocks.append(np.zeros(fo))
    return np.concatenate(blocks)


def unflatten(spec: ModelSpec, theta: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into ``[(W, b), ...]`` views."""
    out, off = [], 0
    d = spec.dims
    for fi, fo in zip(d[:-1], d[1:]):
        out.append((theta[off : off + fi * fo].reshape(fi, fo), theta[off + fi * fo : off + fi * fo + fo]))
        off += (fi + 1) * fo
    return out


def _check_theta(spec: ModelSpec, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (spec.n_params,):
        raise ModelError(f"parameter vector has shape {theta.shape}, model needs ({spec.n_params},)")
    if not np.all(np.isfinite(theta)):
        raise ModelError("non-finite parameters")
    return theta


def as_arrays(spec: ModelSpec, batch: Batch | Instance) -> tuple[np.ndarray, np.ndarray]:
    """Normalize an Instance, a Dataset, a list of Instances or an ``(X, y)`` pair."""
    if isinstance(batch, Instance):
        x, y = np.asarray(batch.features, dtype=np.float64)[None, :], np.array([batch.label])
    elif isinstance(batch, Dataset):
        x, y = batch.features, batch.labels
    elif isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray):
        x, y = batch
    else:
        items = list(batch)
        if not items:
            raise ModelError("empty batch")
        x = np.stack([np.asarray(z.features, dtype=np.float64) for z in items])
        y = np.array([z.label for z in items])
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ModelError(f"features of shape {x.shape} do not match input_dim={spec.input_dim}")
    if len(y) == 0:
        raise ModelError("empty batch")
    if np.any(y < 0) or np.any(y >= spec.output_dim):
        raise ModelError(f"labels outside [0, {spec.output_dim})")
    return x, y


def loss(spec: ModelSpec, theta, z: Instance) -> float:
    x, y = as_arrays(spec, z)
    return float(kernels.losses(_check_theta(spec, theta), spec.dims, spec.act_code, x, y)[0])


def mean_loss(spec: ModelSpec, theta, batch: Batch) -> float:
    x, y = as_arrays(spec, batch)
    return float(np.mean(kernels.losses(_check_theta(spec, theta), spec.dims, spec.act_code, x, y)))


def grad(spec: ModelSpec, theta, z: Instance) -> np.ndarray:
    x, y = as_arrays(spec, z)
    return kernels.grad_sum(_check_theta(spec, theta), spec.dims, spec.act_code, x, y)[1]


def batch_grad(spec: ModelSpec, theta, batch: Batch) -> np.ndarray:
    """Mean of per-example gradients, accumulated in batch order."""
    x, y = as_arrays(spec, batch)
    return kernels.grad_sum(_check_theta(spec, theta), spec.dims, spec.act_code, x, y)[1] / len(y)


def per_example_grads(spec: ModelSpec, theta, batch: Batch) -> np.ndarray:
    x, y = as_arrays(spec, batch)
    return kernels.per_example_grads(_check_theta(spec, theta), spec.dims, spec.act_code, x, y)


def hvp(spec: ModelSpec, theta, batch: Batch, v) -> np.ndarray:
    """Mean minibatch Hessian-vector product ``(1/|B|) sum_i H_i v``."""
    x, y = as_arrays(spec, batch)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (spec.n_params,):
        raise ModelError(f"direction has shape {v.shape}, model needs ({spec.n_params},)")
    return kernels.hvp_sum(_check_theta(spec, theta), spec.dims, spec.act_code, x, y, v) / len(y)


def hvp_fd(spec: ModelSpec, theta, batch: Batch, v, eps: float) -> np.ndarray:
    """Central difference of ``batch_grad`` along ``v``; O(eps^2) accurate."""
    if eps == 0:
        raise ModelError("zero step")
    theta = _check_theta(spec, theta)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != theta.shape:
        raise ModelError(f"direction has shape {v.shape}, model needs ({spec.n_params},)")
    if not np.any(v):
        return np.zeros_like(theta)
    return (batch_grad(spec, theta + eps * v, batch) - batch_grad(spec, theta - eps * v, batch)) / (2.0 * eps)


def predict(spec: ModelSpec, theta, x: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to the smaller class.
    return np.argmax(kernels.logits(_check_theta(spec, theta), spec.dims, spec.act_code, x), axis=1)


def predict_accuracy(spec: ModelSpec, theta, ds: Dataset | Iterable[Instance]) -> float:
    x, y = as_arrays(spec, ds)
    return float(np.mean(predict(spec, theta, x) == y))
