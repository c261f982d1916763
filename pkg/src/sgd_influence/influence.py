"""Backward linear influence estimation over the logged SGD steps.

For each training instance j the estimate approximates
``<u, theta_T(without j) - theta_T>`` with ``u`` the mean validation-loss
gradient at the final parameters, i.e. the first-order change in validation
loss if j had been left out. Negative values flag harmful instances.

Two parameter sources are supported when retracing a step: the checkpoint
stored for that step, or the final parameters for every step. The latter
only needs one stored vector.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._backend import kernels
from .cache import CheckpointPolicy, InfluenceCache
from .dataset import Dataset
from .model import ModelSpec, as_arrays


class InfluenceError(RuntimeError):
    pass


class InfluenceMode(str, enum.Enum):
    STORED_PARAMS = "stored"
    FINAL_PARAMS_ONLY = "final_only"


@dataclass(frozen=True)
class QueryVector:
    u: np.ndarray
    origin: str = "validation-mean-gradient"


@dataclass(frozen=True)
class InfluenceScores:
    ids: np.ndarray
    values: np.ndarray
    mode: InfluenceMode
    steps_traced: int

    def as_dict(self) -> dict[int, float]:
        return {int(i): float(v) for i, v in zip(self.ids, self.values)}

    def __len__(self) -> int:
        return len(self.ids)

    def to_csv(self, path: str | Path) -> None:
        ranked = rank_instances(self)
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "score", "rank", "mode"])
            for rank, (i, s) in enumerate(ranked):
                w.writerow([i, repr(s), rank, self.mode.value])


def query_from_validation(spec: ModelSpec, theta_T: np.ndarray, val: Dataset) -> QueryVector:
    """Mean validation-loss gradient at the final parameters."""
    if val is None or len(val) == 0:
        raise InfluenceError("empty validation set")
    x, y = as_arrays(spec, val)
    _, g = kernels.grad_sum(np.asarray(theta_T, dtype=np.float64), spec.dims, spec.act_code, x, y)
    return QueryVector(g / len(y))


def lie_backward(spec: ModelSpec, cache: InfluenceCache, ds: Dataset, query: QueryVector | np.ndarray,
                 mode: InfluenceMode | str, window: str = "last_epoch") -> InfluenceScores:
    """Retrace logged steps from last to first, accumulating per-instance scores.

    At each step, before propagating ``u`` through the step, every batch
    member j gets ``(lr/|S|) <u, g_j>``; then
    ``u <- u - (lr/|S|) sum_i H_i u``. Gradients and Hessians are evaluated at
    the step's stored checkpoint, or at the final parameters in
    ``final_only`` mode.
    """
    mode = InfluenceMode(mode)
    h = cache.header
    if mode is InfluenceMode.STORED_PARAMS and h.policy is CheckpointPolicy.FINAL_ONLY:
        raise InfluenceError("cache lacks per-step checkpoints (policy final_only); use mode final_only")
    if h.p != spec.n_params or h.d != spec.input_dim:
        raise InfluenceError(f"cache was written for p={h.p}, d={h.d}; model has p={spec.n_params}, d={spec.input_dim}")
    if len(ds) != h.n:
        raise InfluenceError(f"cache was written for N={h.n} training instances, dataset has {len(ds)}")
    if window == "last_epoch":
        records = cache.last_epoch_records()
    elif window == "full":
        if h.policy is not CheckpointPolicy.ALL and mode is InfluenceMode.STORED_PARAMS:
            raise InfluenceError("full-window stored-params trace needs an ALL-policy cache")
        records = cache.records
    else:
        raise InfluenceError(f"unknown window {window!r}")

    u = np.array(query.u if isinstance(query, QueryVector) else query, dtype=np.float64)
    if u.shape != (h.p,):
        raise InfluenceError(f"query has shape {u.shape}, expected ({h.p},)")
    final = cache.final_params() if mode is InfluenceMode.FINAL_PARAMS_ONLY else None
    scores = np.zeros(len(ds))
    x_all, y_all = ds.features, ds.labels
    dims, act = spec.dims, spec.act_code

    for rec in reversed(records):
        theta = final if final is not None else cache.checkpoint(rec.t)
        pos = ds.positions(rec.indices)
        x, y = x_all[pos], y_all[pos]
        scale = rec.lr / len(pos)
        g = kernels.per_example_grads(theta, dims, act, x, y)
        scores[pos] += scale * (g @ u)
        u = u - scale * kernels.hvp_sum(theta, dims, act, x, y, u)
        if not np.all(np.isfinite(u)):
            raise InfluenceError(f"non-finite query propagation at step {rec.t}")
    return InfluenceScores(ds.ids.copy(), scores, mode, len(records))


def rank_instances(scores: InfluenceScores) -> list[tuple[int, float]]:
    """Most negative first; ties by ascending id."""
    order = np.lexsort((scores.ids, scores.values))
    return [(int(scores.ids[k]), float(scores.values[k])) for k in order]
