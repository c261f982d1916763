"""Exact leave-one-out replays and rank-agreement metrics for small problems."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .cache import InfluenceCache
from .dataset import Dataset
from .influence import InfluenceScores, QueryVector
from .model import ModelSpec, mean_loss
from .trainer import Schedule, TrainConfig, counterfactual_train


class OracleError(RuntimeError):
    pass


@dataclass(frozen=True)
class LOOResult:
    id: int
    true_influence: float
    param_diff_norm: float
    val_loss_delta: float


@dataclass(frozen=True)
class RankAgreement:
    kendall_tau: float
    pearson: float
    sign_match: float


def _window_start(spec, cfg, schedule, window, cache):
    if window == "full":
        return None
    if window != "last_epoch":
        raise OracleError(f"unknown window {window!r}")
    start_step = (schedule.epochs - 1) * schedule.steps_per_epoch
    if cache is None or not cache.has_checkpoint(start_step):
        raise OracleError("last_epoch window requires the epoch-start checkpoint, which is not cached")
    return cache.checkpoint(start_step)


def loo_true_influence(spec: ModelSpec, ds: Dataset, val: Dataset, cfg: TrainConfig, schedule: Schedule,
                       j: int, u: QueryVector | np.ndarray, window: str = "last_epoch",
                       cache: InfluenceCache | None = None,
                       factual: np.ndarray | None = None) -> LOOResult:
    """Replay with and without instance ``j`` and measure the exact difference.

    ``factual`` may carry the no-exclusion replay over the same window to
    avoid recomputing it across many ``j``.
    """
    if int(j) not in ds._lookup:
        raise OracleError(f"instance id {j} not in dataset")
    start = _window_start(spec, cfg, schedule, window, cache)
    if factual is None:
        factual = counterfactual_train(spec, ds, cfg, schedule, None, start, window)
    cf = counterfactual_train(spec, ds, cfg, schedule, int(j), start, window)
    uu = u.u if isinstance(u, QueryVector) else np.asarray(u)
    diff = cf - factual
    return LOOResult(
        int(j),
        float(uu @ diff),
        float(np.linalg.norm(diff)),
        mean_loss(spec, cf, val) - mean_loss(spec, factual, val),
    )


def exhaustive_loo(spec: ModelSpec, ds: Dataset, val: Dataset, cfg: TrainConfig, schedule: Schedule,
                   u: QueryVector | np.ndarray, window: str = "last_epoch",
                   cache: InfluenceCache | None = None) -> list[LOOResult]:
    start = _window_start(spec, cfg, schedule, window, cache)
    factual = counterfactual_train(spec, ds, cfg, schedule, None, start, window)
    return [loo_true_influence(spec, ds, val, cfg, schedule, int(j), u, window, cache, factual)
            for j in ds.ids]


def rank_agreement(est: InfluenceScores, truth: Sequence[LOOResult]) -> RankAgreement:
    """Kendall tau-b, Pearson correlation and sign agreement, matched by id."""
    est_map = est.as_dict()
    true_map = {r.id: r.true_influence for r in truth}
    if set(est_map) != set(true_map):
        raise OracleError("estimated and true influence cover different ids")
    ids = sorted(true_map)
    a = np.array([est_map[i] for i in ids])
    b = np.array([true_map[i] for i in ids])
    tau = stats.kendalltau(a, b, variant="b").statistic
    pearson = float(np.corrcoef(a, b)[0, 1])
    return RankAgreement(float(tau), pearson, float(np.mean(np.sign(a) == np.sign(b))))


def write_oracle_csv(path: str | Path, truth: Sequence[LOOResult], stored: InfluenceScores,
                     final_only: InfluenceScores) -> None:
    s, f = stored.as_dict(), final_only.as_dict()
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "true_influence", "est_stored", "est_final_only", "val_loss_delta"])
        for r in sorted(truth, key=lambda r: r.id):
            w.writerow([r.id, repr(r.true_influence), repr(s[r.id]), repr(f[r.id]), repr(r.val_loss_delta)])
