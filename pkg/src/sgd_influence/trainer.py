"""Deterministic minibatch SGD with step logging and counterfactual replay."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._backend import kernels
from .cache import CacheHeader, CheckpointPolicy, InfluenceCache, SGDStepRecord, write_cache
from .dataset import Dataset
from .model import ModelSpec, init_params, predict_accuracy

DIVERGENCE_LOSS = 1e6


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    policy: CheckpointPolicy = CheckpointPolicy.FINAL_ONLY
    width: int = 4

    def __post_init__(self):
        object.__setattr__(self, "policy", CheckpointPolicy(self.policy))
        if not self.lr >= 0 or not math.isfinite(self.lr):
            raise ValueError(f"learning rate must be finite and non-negative, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.width not in (4, 8):
            raise ValueError("checkpoint width must be 4 or 8 bytes")

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


@dataclass(frozen=True)
class Schedule:
    records: list[SGDStepRecord]
    steps_per_epoch: int
    n: int

    @property
    def epochs(self) -> int:
        return len(self.records) // self.steps_per_epoch

    def epoch(self, e: int) -> list[SGDStepRecord]:
        T = self.steps_per_epoch
        return self.records[e * T : (e + 1) * T]


@dataclass
class TrainLog:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "train_acc", "val_acc"])
            for row in zip(self.epoch, self.train_loss, self.train_acc, self.val_acc):
                w.writerow([row[0], repr(row[1]), repr(row[2]), "" if math.isnan(row[3]) else repr(row[3])])


@dataclass
class TrainResult:
    theta: np.ndarray
    log: TrainLog
    cache: InfluenceCache
    schedule: Schedule


def steps_per_epoch(n: int, batch: int) -> int:
    if n < 1 or batch < 1:
        raise ValueError("N and batch size must be positive")
    return -(-n // batch)


def make_schedule(ds_or_n: Dataset | int, cfg: TrainConfig) -> Schedule:
    """Independent per-epoch shuffles without replacement; the last batch may be short."""
    ids = ds_or_n.ids if isinstance(ds_or_n, Dataset) else np.arange(ds_or_n)
    n = len(ids)
    if cfg.batch_size > n:
        raise ValueError(f"batch_size {cfg.batch_size} exceeds dataset size {n}")
    T = steps_per_epoch(n, cfg.batch_size)
    rng = np.random.default_rng([cfg.seed, 1])
    records = []
    for e in range(cfg.epochs):
        perm = ids[rng.permutation(n)]
        for s in range(T):
            chunk = perm[s * cfg.batch_size : (s + 1) * cfg.batch_size]
            records.append(SGDStepRecord(e * T + s, tuple(int(i) for i in chunk), float(cfg.lr)))
    return Schedule(records, T, n)


def _positions(ds: Dataset, schedule: Schedule) -> list[np.ndarray]:
    return [ds.positions(r.indices) for r in schedule.records]


def sgd_step(spec: ModelSpec, theta: np.ndarray, x: np.ndarray, y: np.ndarray,
             lr: float, divisor: int) -> tuple[np.ndarray, float]:
    """One update ``theta - (lr/divisor) * sum_i g_i``; returns (theta, summed loss)."""
    if len(y) == 0:
        return theta, 0.0
    loss_sum, g = kernels.grad_sum(theta, spec.dims, spec.act_code, x, y)
    return theta - (lr / divisor) * g, loss_sum


def train(spec: ModelSpec, ds: Dataset, cfg: TrainConfig, cache_path: str | Path | None = None,
          val: Dataset | None = None, init: np.ndarray | None = None,
          schedule: Schedule | None = None) -> TrainResult:
    """Run SGD over the schedule, checkpointing per ``cfg.policy``.

    The returned cache is in memory; it is also written to ``cache_path``
    when given.
    """
    if ds.d != spec.input_dim:
        raise ValueError(f"dataset dimension {ds.d} does not match model input_dim {spec.input_dim}")
    schedule = schedule or make_schedule(ds, cfg)
    T = schedule.steps_per_epoch
    header = CacheHeader(spec.n_params, len(ds), ds.d, ds.n_classes, cfg.epochs, T,
                         cfg.batch_size, cfg.policy, cfg.width)
    keep = set(header.policy_steps())
    theta = init_params(spec, cfg.seed) if init is None else np.array(init, dtype=np.float64)
    ckpts: dict[int, np.ndarray] = {}
    log = TrainLog()
    positions = _positions(ds, schedule)
    x_all, y_all = ds.features, ds.labels

    for rec, pos in zip(schedule.records, positions):
        if rec.t in keep:
            ckpts[rec.t] = theta.copy()
        theta, loss_sum = sgd_step(spec, theta, x_all[pos], y_all[pos], rec.lr, len(pos))
        if not math.isfinite(loss_sum) or loss_sum / len(pos) > DIVERGENCE_LOSS:
            raise TrainingError(f"training diverged at step {rec.t}: batch loss {loss_sum / len(pos)!r}")
        if not np.all(np.isfinite(theta)):
            raise TrainingError(f"non-finite parameters after step {rec.t}")
        if (rec.t + 1) % T == 0:
            losses = kernels.losses(theta, spec.dims, spec.act_code, x_all, y_all)
            log.epoch.append((rec.t + 1) // T)
            log.train_loss.append(float(np.mean(losses)))
            log.train_acc.append(predict_accuracy(spec, theta, ds))
            log.val_acc.append(predict_accuracy(spec, theta, val) if val is not None else float("nan"))
    ckpts[header.total_steps] = theta.copy()

    cache = InfluenceCache(header, schedule.records, ckpts)
    if cache_path is not None:
        write_cache(cache_path, header, schedule.records, ckpts)
        cache.path = Path(cache_path)
    return TrainResult(theta, log, cache, schedule)


def counterfactual_train(spec: ModelSpec, ds: Dataset, cfg: TrainConfig, schedule: Schedule,
                         exclude_id: int | None = None, start_params: np.ndarray | None = None,
                         window: str = "full") -> np.ndarray:
    """Replay ``schedule`` with instance ``exclude_id`` dropped from every batch.

    The step divisor stays the original batch size. ``window="full"`` starts
    from the seeded initialization (or ``start_params``); ``"last_epoch"``
    replays only the final epoch starting from ``start_params``.
    """
    if exclude_id is not None and int(exclude_id) not in ds._lookup:
        raise KeyError(f"instance id {exclude_id} not in dataset")
    if window == "full":
        records = schedule.records
        theta = init_params(spec, cfg.seed) if start_params is None else np.array(start_params, dtype=np.float64)
    elif window == "last_epoch":
        if start_params is None:
            raise ValueError("last_epoch replay needs the epoch-start parameters")
        records = schedule.epoch(schedule.epochs - 1)
        theta = np.array(start_params, dtype=np.float64)
    else:
        raise ValueError(f"unknown window {window!r}")

    x_all, y_all = ds.features, ds.labels
    for rec in records:
        pos = ds.positions(rec.indices)
        divisor = len(pos)
        if exclude_id is not None and exclude_id in rec.indices:
            pos = pos[np.asarray(rec.indices) != exclude_id]
        theta, _ = sgd_step(spec, theta, x_all[pos], y_all[pos], rec.lr, divisor)
    return theta
