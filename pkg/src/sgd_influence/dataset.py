"""Labeled datasets: CSV loading, Gaussian blob generation, label noise, splits.

A :class:`Dataset` keeps features as a dense ``(N, d)`` float64 array and
carries a stable integer id per row, so attribution results can be traced back
to the parent dataset after any number of splits and removals.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

DATASET_MAGIC = b"ICDS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sHQII")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Instance:
    id: int
    features: np.ndarray
    label: int


@dataclass(frozen=True, eq=False)
class Dataset:
    ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    provenance: str = ""

    def __post_init__(self):
        ids = np.ascontiguousarray(self.ids, dtype=np.int64)
        x = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        if x.ndim != 2:
            raise DatasetError("features must be a 2-d array")
        if len(ids) == 0 or x.shape[0] == 0:
            raise DatasetError("empty dataset")
        if not (len(ids) == x.shape[0] == len(y)):
            raise DatasetError("ids, features and labels disagree in length")
        if np.any(ids < 0) or len(np.unique(ids)) != len(ids):
            raise DatasetError("instance ids must be unique and non-negative")
        if np.any(y < 0) or np.any(y >= self.n_classes):
            raise DatasetError(f"labels must lie in [0, {self.n_classes})")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def __iter__(self) -> Iterator[Instance]:
        for i in range(len(self)):
            yield self.instance(i)

    def instance(self, pos: int) -> Instance:
        return Instance(int(self.ids[pos]), self.features[pos], int(self.labels[pos]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.n_classes == other.n_classes
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    def positions(self, ids: Sequence[int] | np.ndarray) -> np.ndarray:
        """Row positions of the given ids; raises ``KeyError`` for unknown ids."""
        lookup = self._lookup
        try:
            return np.fromiter((lookup[int(i)] for i in ids), dtype=np.int64, count=len(ids))
        except KeyError as exc:
            raise KeyError(f"instance id {exc.args[0]} not in dataset") from None

    @property
    def _lookup(self) -> dict[int, int]:
        cached = self.__dict__.get("_lookup_cache")
        if cached is None:
            cached = {int(i): p for p, i in enumerate(self.ids)}
            object.__setattr__(self, "_lookup_cache", cached)
        return cached

    def take(self, positions: np.ndarray, provenance: str | None = None) -> "Dataset":
        positions = np.asarray(positions, dtype=np.int64)
        return Dataset(
            self.ids[positions],
            self.features[positions],
            self.labels[positions],
            self.n_classes,
            self.provenance if provenance is None else provenance,
        )

    def without(self, ids: Sequence[int] | np.ndarray) -> "Dataset":
        drop = set(int(i) for i in ids)
        keep = np.array([p for p, i in enumerate(self.ids) if int(i) not in drop], dtype=np.int64)
        return self.take(keep, provenance=f"{self.provenance} minus {len(drop)} ids")

    # -- serialization -------------------------------------------------------

    def to_bytes(self) -> bytes:
        n, d = self.features.shape
        prov = self.provenance.encode("utf-8")
        parts = [
            _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, d, self.n_classes),
            self.features.astype("<f8").tobytes(),
            self.labels.astype("<u4").tobytes(),
            self.ids.astype("<u8").tobytes(),
            struct.pack("<I", len(prov)),
            prov,
        ]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Dataset":
        if len(buf) < _HEADER.size:
            raise DatasetError("truncated dataset header")
        magic, version, n, d, c = _HEADER.unpack_from(buf, 0)
        if magic != DATASET_MAGIC:
            raise DatasetError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}")
        if version != DATASET_VERSION:
            raise DatasetError(f"unsupported dataset version {version}")
        off = _HEADER.size
        need = off + n * d * 8 + n * 4 + n * 8 + 4
        if len(buf) < need:
            raise DatasetError("truncated dataset payload")
        x = np.frombuffer(buf, dtype="<f8", count=n * d, offset=off).reshape(n, d)
        off += n * d * 8
        y = np.frombuffer(buf, dtype="<u4", count=n, offset=off)
        off += n * 4
        ids = np.frombuffer(buf, dtype="<u8", count=n, offset=off)
        off += n * 8
        (plen,) = struct.unpack_from("<I", buf, off)
        off += 4
        prov = bytes(buf[off : off + plen]).decode("utf-8")
        return cls(ids.astype(np.int64), x.astype(np.float64), y.astype(np.int64), c, prov)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        if path.suffix == ".csv":
            save_csv(self, path)
        else:
            path.write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path, **csv_kwargs) -> "Dataset":
        path = Path(path)
        if path.suffix == ".csv":
            return load_csv(path, **csv_kwargs)
        if not path.exists():
            raise DatasetError(f"no such dataset file: {path}")
        return cls.from_bytes(path.read_bytes())


@dataclass(frozen=True)
class NoiseReport:
    flipped_ids: frozenset = field(default_factory=frozenset)
    rate: float = 0.0
    seed: int = 0


def _parse_float(text: str, row: int, col: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise DatasetError(f"non-numeric value {text!r} at row {row}, column {col}") from None


def load_csv(
    path: str | Path,
    label_column: int | str = -1,
    header: bool | None = None,
) -> Dataset:
    """Read a comma-separated file, one instance per row.

    ``header=None`` sniffs: the first row is a header if any of its cells fails
    to parse as a number. A string ``label_column`` requires a header.
    """
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"no such file: {path}")
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise DatasetError("empty dataset")

    if header is None:
        header = any(not _is_number(c) for c in rows[0])
    names = [c.strip() for c in rows[0]] if header else None
    body = rows[1:] if header else rows
    if not body:
        raise DatasetError("empty dataset")

    arity = len(body[0])
    if names is not None and len(names) != arity:
        raise DatasetError(f"header has {len(names)} columns but rows have {arity}")
    for k, r in enumerate(body):
        if len(r) != arity:
            raise DatasetError(f"ragged row {k}: {len(r)} fields, expected {arity}")
    if arity < 2:
        raise DatasetError("need at least one feature column and a label column")

    if isinstance(label_column, str):
        if names is None:
            raise DatasetError(f"label column {label_column!r} named but file has no header")
        if label_column not in names:
            raise DatasetError(f"label column {label_column!r} absent from header {names}")
        lc = names.index(label_column)
    else:
        lc = label_column if label_column >= 0 else arity + label_column
        if not 0 <= lc < arity:
            raise DatasetError(f"label column index {label_column} absent (arity {arity})")

    feat_cols = [c for c in range(arity) if c != lc]
    x = np.empty((len(body), arity - 1), dtype=np.float64)
    y = np.empty(len(body), dtype=np.int64)
    for k, r in enumerate(body):
        for j, c in enumerate(feat_cols):
            x[k, j] = _parse_float(r[c], k, c)
        lab = _parse_float(r[lc], k, lc)
        if lab != int(lab) or lab < 0:
            raise DatasetError(f"label {r[lc]!r} at row {k} is not a class index")
        y[k] = int(lab)
    return Dataset(np.arange(len(body)), x, y, int(y.max()) + 1, str(path))


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def save_csv(ds: Dataset, path: str | Path, header: bool = True) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        if header:
            w.writerow([f"x{j}" for j in range(ds.d)] + ["y"])
        for x, y in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def _simplex_centers(n_classes: int, d: int, separation: float) -> np.ndarray:
    # Regular simplex: vertices pairwise `separation` apart in n_classes-1 dims.
    e = np.eye(n_classes) - 1.0 / n_classes
    q, _ = np.linalg.qr(e.T)
    coords = e @ q[:, : n_classes - 1]
    coords *= separation / np.sqrt(2.0)
    out = np.zeros((n_classes, d))
    out[:, : n_classes - 1] = coords
    return out


def gen_blobs(n_per_class: int, n_classes: int, d: int, separation: float, seed: int) -> Dataset:
    """Unit-variance isotropic Gaussian clusters with equidistant centers."""
    if n_per_class < 1 or n_classes < 2 or d < 1:
        raise DatasetError("need n_per_class >= 1, n_classes >= 2, d >= 1")
    if not separation > 0:
        raise DatasetError("separation must be positive")
    if d < n_classes - 1:
        raise DatasetError(f"{n_classes} equidistant centers need d >= {n_classes - 1}")
    rng = np.random.default_rng(seed)
    centers = _simplex_centers(n_classes, d, separation)
    x = np.concatenate([c + rng.standard_normal((n_per_class, d)) for c in centers])
    y = np.repeat(np.arange(n_classes), n_per_class)
    prov = f"blobs(n_per_class={n_per_class}, C={n_classes}, d={d}, separation={separation}, seed={seed})"
    return Dataset(np.arange(len(y)), x, y, n_classes, prov)


def inject_label_noise(ds: Dataset, rate: float, seed: int) -> tuple[Dataset, NoiseReport]:
    """Flip ``round(rate * N)`` labels to a uniformly chosen different class."""
    if not 0.0 <= rate < 1.0:
        raise DatasetError(f"noise rate {rate} outside [0, 1)")
    if ds.n_classes < 2:
        raise DatasetError("label noise needs at least two classes")
    n_flip = int(np.floor(rate * len(ds) + 0.5))
    rng = np.random.default_rng(seed)
    pos = np.sort(rng.choice(len(ds), size=n_flip, replace=False))
    labels = ds.labels.copy()
    shift = rng.integers(1, ds.n_classes, size=n_flip)
    labels[pos] = (labels[pos] + shift) % ds.n_classes
    noisy = Dataset(ds.ids, ds.features, labels, ds.n_classes, f"{ds.provenance} noise(rate={rate}, seed={seed})")
    report = NoiseReport(frozenset(int(i) for i in ds.ids[pos]), rate, seed)
    return noisy, report


def split(ds: Dataset, val_count: int, seed: int) -> tuple[Dataset, Dataset]:
    """Random disjoint train/validation split; each part keeps parent order."""
    if not 0 < val_count < len(ds):
        raise DatasetError(f"val_count must be in (0, {len(ds)}), got {val_count}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    val_pos = np.sort(perm[:val_count])
    train_pos = np.sort(perm[val_count:])
    return (
        ds.take(train_pos, provenance=f"{ds.provenance} train(seed={seed})"),
        ds.take(val_pos, provenance=f"{ds.provenance} val(seed={seed})"),
    )
