"""Data-cleansing experiments: score, remove the top-n negative instances,
retrain from scratch, evaluate; swept over strategies, batch sizes, removal
counts and seeds.
"""
from __future__ import annotations

import csv
import enum
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from .cache import CheckpointPolicy
from .dataset import Dataset, NoiseReport, gen_blobs, inject_label_noise, split
from .influence import InfluenceMode, InfluenceScores, lie_backward, query_from_validation, rank_instances
from .model import ModelSpec, predict_accuracy
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)

RETRAIN_SEED_OFFSET = 1_000_003
THREADS_ENV = "INFLUENCE_CLEANSE_THREADS"

CURVE_HEADER = ["strategy", "batch", "n", "seed", "accuracy"]
AGGREGATE_HEADER = ["strategy", "batch", "n", "mean", "std"]
RECALL_HEADER = ["strategy", "batch", "n", "seed", "recall"]


class Strategy(str, enum.Enum):
    INFLUENCE_STORED = "influence_stored"
    INFLUENCE_FINAL_ONLY = "influence_final_only"
    RANDOM = "random"
    NONE = "none"


@dataclass(frozen=True)
class TrialData:
    train: Dataset
    val: Dataset
    test: Dataset
    noise: NoiseReport | None = None


DataSource = Union[TrialData, Callable[[int], TrialData]]


@dataclass(frozen=True)
class CleanseConfig:
    removal_counts: tuple[int, ...] = (0,)
    n_seeds: int = 10
    strategies: tuple[Strategy, ...] = tuple(Strategy)
    train: TrainConfig = TrainConfig()
    batch_sizes: tuple[int, ...] = (32,)
    base_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "removal_counts", tuple(sorted(int(n) for n in self.removal_counts)))
        object.__setattr__(self, "strategies", tuple(Strategy(s) for s in self.strategies))
        object.__setattr__(self, "batch_sizes", tuple(int(b) for b in self.batch_sizes))
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")
        if any(n < 0 for n in self.removal_counts):
            raise ValueError("removal counts must be non-negative")


@dataclass(frozen=True)
class CleanseResult:
    accuracy: float
    removed_ids: tuple[int, ...]


def retrain_seed(seed: int) -> int:
    return seed + RETRAIN_SEED_OFFSET


def removal_scores(spec: ModelSpec, train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig,
                   strategy: Strategy | str, seed: int) -> InfluenceScores | None:
    """Per-instance scores used for ranking; ``None`` for the no-removal strategy."""
    strategy = Strategy(strategy)
    if strategy is Strategy.NONE:
        return None
    if strategy is Strategy.RANDOM:
        values = np.random.default_rng([seed, 2]).random(len(train_ds))
        return InfluenceScores(train_ds.ids.copy(), values, InfluenceMode.STORED_PARAMS, 0)
    stored = strategy is Strategy.INFLUENCE_STORED
    policy = CheckpointPolicy.LAST_EPOCH if stored else CheckpointPolicy.FINAL_ONLY
    res = train(spec, train_ds, cfg.with_(seed=seed, policy=policy))
    query = query_from_validation(spec, res.cache.final_params(), val_ds)
    mode = InfluenceMode.STORED_PARAMS if stored else InfluenceMode.FINAL_PARAMS_ONLY
    return lie_backward(spec, res.cache, train_ds, query, mode)


def top_negative(scores: InfluenceScores | None, n: int) -> tuple[int, ...]:
    if scores is None or n == 0:
        return ()
    return tuple(i for i, _ in rank_instances(scores)[:n])


def _retrain_accuracy(spec, train_ds, test_ds, cfg, removed, seed) -> float:
    kept = train_ds.without(removed) if removed else train_ds
    res = train(spec, kept, cfg.with_(seed=retrain_seed(seed), policy=CheckpointPolicy.FINAL_ONLY))
    return predict_accuracy(spec, res.theta, test_ds)


def cleanse_once(spec: ModelSpec, train_ds: Dataset, val_ds: Dataset, test_ds: Dataset, cfg: TrainConfig,
                 strategy: Strategy | str, n: int, seed: int) -> CleanseResult:
    if not 0 <= n < len(train_ds):
        raise ValueError(f"removal count {n} must be in [0, {len(train_ds)})")
    scores = removal_scores(spec, train_ds, val_ds, cfg, strategy, seed) if n > 0 else None
    removed = top_negative(scores, n)
    return CleanseResult(_retrain_accuracy(spec, train_ds, test_ds, cfg, removed, seed), removed)


def recall(removed: Sequence[int], noise: NoiseReport) -> float:
    if not removed:
        return 0.0
    return len(set(removed) & noise.flipped_ids) / len(noise.flipped_ids) if noise.flipped_ids else 0.0


@dataclass
class CurveRow:
    strategy: str
    batch: int
    n: int
    seed: int
    accuracy: float
    recall: float = float("nan")


@dataclass
class CleanseCurve:
    rows: list[CurveRow] = field(default_factory=list)
    failures: list[tuple[str, int, int, str]] = field(default_factory=list)

    def aggregate(self) -> list[tuple[str, int, int, float, float]]:
        """(strategy, batch, n, mean, std) with population std over seeds."""
        groups: dict[tuple[str, int, int], list[float]] = {}
        for r in self.rows:
            groups.setdefault((r.strategy, r.batch, r.n), []).append(r.accuracy)
        out = []
        for (s, b, n), accs in groups.items():
            a = np.asarray(accs)
            out.append((s, b, n, float(a.mean()), float(a.std())))
        return sorted(out, key=lambda t: (_strategy_order(t[0]), t[1], t[2]))

    def cell(self, strategy: str, batch: int, n: int) -> list[CurveRow]:
        return [r for r in self.rows if r.strategy == strategy and r.batch == batch and r.n == n]

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        rows = sorted(self.rows, key=lambda r: (_strategy_order(r.strategy), r.batch, r.n, r.seed))
        paths = {
            "curve": out_dir / "curve.csv",
            "aggregate": out_dir / "aggregate.csv",
            "recall": out_dir / "recall.csv",
        }
        _write_csv(paths["curve"], CURVE_HEADER, [(r.strategy, r.batch, r.n, r.seed, repr(r.accuracy)) for r in rows])
        _write_csv(paths["aggregate"], AGGREGATE_HEADER,
                   [(s, b, n, repr(m), repr(sd)) for s, b, n, m, sd in self.aggregate()])
        _write_csv(paths["recall"], RECALL_HEADER,
                   [(r.strategy, r.batch, r.n, r.seed, repr(r.recall)) for r in rows])
        if self.failures:
            paths["failures"] = out_dir / "failures.csv"
            _write_csv(paths["failures"], ["strategy", "batch", "seed", "error"], self.failures)
        return paths


def _strategy_order(name: str) -> int:
    return [s.value for s in Strategy].index(name)


def _write_csv(path: Path, header, rows) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    tmp.replace(path)


def read_curve_csv(path: str | Path) -> list[CurveRow]:
    with Path(path).open(newline="") as fh:
        return [CurveRow(r["strategy"], int(r["batch"]), int(r["n"]), int(r["seed"]), float(r["accuracy"]))
                for r in csv.DictReader(fh)]


def format_pm(mean: float, std: float, digits: int = 4) -> str:
    """``mean ± std`` with a shared number of decimals."""
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


def cleanse_sweep(spec: ModelSpec, cfg: CleanseConfig, datasets: DataSource,
                  workers: int | None = None) -> CleanseCurve:
    """Full factorial over strategies x batch sizes x removal counts x seeds.

    Trial ``k`` uses seed ``base_seed + k``. Each (strategy, batch, seed) job
    scores once and retrains for every removal count. Retrainings with the same
    removed set are shared, so n=0 is computed once per (batch, seed).
    """
    seeds = [cfg.base_seed + k for k in range(cfg.n_seeds)]
    trial_cache: dict[int, TrialData] = {}
    memo: dict[tuple, float] = {}
    lock = threading.Lock()

    def trial(seed: int) -> TrialData:
        with lock:
            if seed not in trial_cache:
                trial_cache[seed] = datasets(seed) if callable(datasets) else datasets
            return trial_cache[seed]

    def job(strategy: Strategy, batch: int, seed: int) -> list[CurveRow]:
        data = trial(seed)
        tcfg = cfg.train.with_(batch_size=batch)
        n_max = max(cfg.removal_counts)
        if n_max >= len(data.train):
            raise ValueError(f"removal count {n_max} must be below N={len(data.train)}")
        scores = removal_scores(spec, data.train, data.val, tcfg, strategy, seed) if n_max > 0 else None
        rows = []
        for n in cfg.removal_counts:
            removed = top_negative(scores, n)
            key = (batch, seed, tuple(sorted(removed)))
            with lock:
                acc = memo.get(key)
            if acc is None:
                acc = _retrain_accuracy(spec, data.train, data.test, tcfg, removed, seed)
                with lock:
                    memo[key] = acc
            rec = recall(removed, data.noise) if data.noise is not None else float("nan")
            rows.append(CurveRow(strategy.value, batch, n, seed, acc, rec))
        return rows

    cells = [(s, b, sd) for b in cfg.batch_sizes for sd in seeds for s in cfg.strategies]
    curve = CleanseCurve()
    n_workers = workers or worker_count()
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        futures = {pool.submit(job, *c): c for c in cells}
        for fut, (s, b, sd) in futures.items():
            try:
                curve.rows.extend(fut.result())
            except Exception as exc:  # noqa: BLE001 - reported per cell
                log.warning("cell %s batch=%d seed=%d failed: %s", s.value, b, sd, exc)
                curve.failures.append((s.value, b, sd, repr(exc)))
    curve.rows.sort(key=lambda r: (_strategy_order(r.strategy), r.batch, r.n, r.seed))
    return curve


@dataclass(frozen=True)
class BlobsProtocol:
    """Desk-scale stand-in for the image benchmarks: noisy Gaussian blobs.

    A fixed pool is generated once; each trial seed draws a new
    train/validation split and a new set of flipped training labels. The test
    set is a separate clean draw.
    """
    n_train: int = 2000
    n_val: int = 1000
    n_test: int = 2000
    n_classes: int = 10
    dim: int = 64
    separation: float = 5.0
    noise_rate: float = 0.1
    data_seed: int = 0

    def pool(self) -> tuple[Dataset, Dataset]:
        total = self.n_train + self.n_val
        per = -(-total // self.n_classes)
        pool = gen_blobs(per, self.n_classes, self.dim, self.separation, self.data_seed)
        if len(pool) > total:
            pool = pool.take(np.sort(np.random.default_rng([self.data_seed, 9]).permutation(len(pool))[:total]))
        per_test = -(-self.n_test // self.n_classes)
        test = gen_blobs(per_test, self.n_classes, self.dim, self.separation, self.data_seed + 7_777_777)
        if len(test) > self.n_test:
            test = test.take(np.sort(np.random.default_rng([self.data_seed, 10]).permutation(len(test))[:self.n_test]))
        return pool, test

    def __call__(self, seed: int) -> TrialData:
        pool, test = self._cached_pool()
        train_ds, val_ds = split(pool, self.n_val, seed)
        noisy, report = inject_label_noise(train_ds, self.noise_rate, seed)
        return TrialData(noisy, val_ds, test, report)

    def _cached_pool(self):
        cached = self.__dict__.get("_pool")
        if cached is None:
            cached = self.pool()
            object.__setattr__(self, "_pool", cached)
        return cached
