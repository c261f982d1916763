"""Single-file container for SGD step records and parameter checkpoints.

Layout (little-endian)::

    header      fixed struct, see ``_HEADER``
    records     n_records x (t u64, lr f64, id_start u64, id_count u64)
    ids         u64 instance ids referenced by the record table
    payload     n_checkpoints x p floats of ``width`` bytes
    manifest    n_checkpoints x (global step u64, byte offset u64)

Checkpoint ``t`` is the parameter vector *entering* global step ``t``; the
final parameters are checkpoint ``epochs * steps_per_epoch``.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

CACHE_MAGIC = b"ICCH"
CACHE_VERSION = 1

_HEADER = struct.Struct("<4sHBBQQIIIIIQQQQQQ")
_RECORD = struct.Struct("<QdQQ")
_MANIFEST = struct.Struct("<QQ")


class CacheError(IOError):
    pass


class CheckpointPolicy(str, enum.Enum):
    ALL = "all"
    LAST_EPOCH = "last_epoch"
    FINAL_ONLY = "final_only"


_POLICY_CODES = {CheckpointPolicy.ALL: 0, CheckpointPolicy.LAST_EPOCH: 1, CheckpointPolicy.FINAL_ONLY: 2}
_POLICY_FROM_CODE = {v: k for k, v in _POLICY_CODES.items()}


@dataclass(frozen=True)
class SGDStepRecord:
    t: int
    indices: tuple[int, ...]
    lr: float


@dataclass(frozen=True)
class CacheHeader:
    p: int
    n: int
    d: int
    n_classes: int
    epochs: int
    steps_per_epoch: int
    batch_size: int
    policy: CheckpointPolicy
    width: int = 4

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    @property
    def dtype(self) -> np.dtype:
        return np.dtype("<f4") if self.width == 4 else np.dtype("<f8")

    def policy_steps(self) -> list[int]:
        """Global steps whose entering parameters are stored under the policy."""
        end = self.total_steps
        if self.policy is CheckpointPolicy.ALL:
            return list(range(0, end + 1))
        if self.policy is CheckpointPolicy.LAST_EPOCH:
            return list(range(end - self.steps_per_epoch, end + 1))
        return [end]


class InfluenceCache:
    """Step records plus checkpoints, held in memory or read lazily from a file."""

    def __init__(self, header: CacheHeader, records: Sequence[SGDStepRecord],
                 checkpoints: Mapping[int, np.ndarray] | None = None, *,
                 path: Path | None = None, offsets: Mapping[int, int] | None = None):
        self.header = header
        self.records = list(records)
        self.path = path
        if checkpoints is not None:
            self._mem = {int(t): np.asarray(v).astype(header.dtype) for t, v in checkpoints.items()}
            self._offsets = None
        else:
            self._mem = None
            self._offsets = dict(offsets or {})

    @property
    def stored_steps(self) -> list[int]:
        keys = self._mem if self._mem is not None else self._offsets
        return sorted(keys)

    @property
    def final_step(self) -> int:
        return self.header.total_steps

    def has_checkpoint(self, step: int) -> bool:
        return step in (self._mem if self._mem is not None else self._offsets)

    def checkpoint(self, step: int) -> np.ndarray:
        """Parameters entering global ``step``, upcast to float64."""
        if not self.has_checkpoint(step):
            raise CacheError(
                f"checkpoint not stored under policy {self.header.policy.value}: step {step}"
            )
        if self._mem is not None:
            return self._mem[step].astype(np.float64)
        raw = np.fromfile(self.path, dtype=self.header.dtype, count=self.header.p, offset=self._offsets[step])
        return raw.astype(np.float64)

    def final_params(self) -> np.ndarray:
        return self.checkpoint(self.final_step)

    def epoch_records(self, epoch: int) -> list[SGDStepRecord]:
        T = self.header.steps_per_epoch
        return self.records[epoch * T : (epoch + 1) * T]

    def last_epoch_records(self) -> list[SGDStepRecord]:
        return self.epoch_records(self.header.epochs - 1)

    @property
    def checkpoint_payload_bytes(self) -> int:
        return len(self.stored_steps) * self.header.p * self.header.width

    @property
    def step_record_bytes(self) -> int:
        return len(self.records) * _RECORD.size + sum(len(r.indices) for r in self.records) * 8

    def payload_bytes(self) -> bytes:
        """Concatenated checkpoint payload in step order (for checksums)."""
        return b"".join(self.checkpoint(t).astype(self.header.dtype).tobytes() for t in self.stored_steps)

    def save(self, path: str | Path) -> Path:
        ckpts = {t: self.checkpoint(t) for t in self.stored_steps}
        return write_cache(path, self.header, self.records, ckpts)


def write_cache(path: str | Path, header: CacheHeader, records: Sequence[SGDStepRecord],
                checkpoints: Mapping[int, np.ndarray]) -> Path:
    path = Path(path)
    if header.width not in (4, 8):
        raise CacheError(f"float width must be 4 or 8 bytes, got {header.width}")
    steps = sorted(int(t) for t in checkpoints)
    for t in steps:
        if np.shape(checkpoints[t]) != (header.p,):
            raise CacheError(f"checkpoint {t} has shape {np.shape(checkpoints[t])}, expected ({header.p},)")

    table = bytearray()
    ids = []
    start = 0
    for r in records:
        table += _RECORD.pack(r.t, r.lr, start, len(r.indices))
        ids.extend(r.indices)
        start += len(r.indices)
    id_bytes = np.asarray(ids, dtype="<u8").tobytes()
    payload = b"".join(np.asarray(checkpoints[t]).astype(header.dtype).tobytes() for t in steps)

    rec_off = _HEADER.size
    ids_off = rec_off + len(table)
    pay_off = ids_off + len(id_bytes)
    man_off = pay_off + len(payload)
    stride = header.p * header.width
    manifest = b"".join(_MANIFEST.pack(t, pay_off + k * stride) for k, t in enumerate(steps))

    head = _HEADER.pack(
        CACHE_MAGIC, CACHE_VERSION, _POLICY_CODES[CheckpointPolicy(header.policy)], header.width,
        header.p, header.n, header.d, header.n_classes, header.epochs, header.steps_per_epoch,
        header.batch_size, len(records), len(steps), rec_off, ids_off, pay_off, man_off,
    )
    tmp = path.with_name(path.name + ".tmp")
    try:
        with tmp.open("wb") as fh:
            fh.write(head)
            fh.write(table)
            fh.write(id_bytes)
            fh.write(payload)
            fh.write(manifest)
        tmp.replace(path)
    except OSError as exc:
        raise CacheError(f"cannot write cache {path}: {exc}") from exc
    return path


def read_cache(path: str | Path) -> InfluenceCache:
    path = Path(path)
    if not path.exists():
        raise CacheError(f"no such cache file: {path}")
    size = path.stat().st_size
    with path.open("rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise CacheError("truncated cache header")
        (magic, version, pcode, width, p, n, d, c, k, T, batch,
         n_rec, n_ckpt, rec_off, ids_off, pay_off, man_off) = _HEADER.unpack(head)
        if magic != CACHE_MAGIC:
            raise CacheError(f"bad magic {magic!r}, expected {CACHE_MAGIC!r}")
        if version != CACHE_VERSION:
            raise CacheError(f"unsupported cache version {version}")
        if pcode not in _POLICY_FROM_CODE or width not in (4, 8):
            raise CacheError("corrupt cache header")
        if man_off + n_ckpt * _MANIFEST.size > size:
            raise CacheError("manifest overruns file")
        if not (rec_off <= ids_off <= pay_off <= man_off):
            raise CacheError("corrupt section offsets")
        header = CacheHeader(p, n, d, c, k, T, batch, _POLICY_FROM_CODE[pcode], width)

        fh.seek(rec_off)
        table = fh.read(n_rec * _RECORD.size)
        fh.seek(man_off)
        man = fh.read(n_ckpt * _MANIFEST.size)
    id_count = (pay_off - ids_off) // 8
    all_ids = np.fromfile(path, dtype="<u8", count=id_count, offset=ids_off).astype(np.int64)
    records = []
    for i in range(n_rec):
        t, lr, start, cnt = _RECORD.unpack_from(table, i * _RECORD.size)
        if start + cnt > id_count:
            raise CacheError(f"step record {i} overruns id section")
        records.append(SGDStepRecord(int(t), tuple(int(v) for v in all_ids[start : start + cnt]), lr))
    offsets = {}
    for i in range(n_ckpt):
        step, off = _MANIFEST.unpack_from(man, i * _MANIFEST.size)
        if off < pay_off or off + p * width > man_off:
            raise CacheError(f"checkpoint {step} offset outside payload section")
        offsets[int(step)] = int(off)
    return InfluenceCache(header, records, path=path, offsets=offsets)


@dataclass(frozen=True)
class CacheStats:
    policy: CheckpointPolicy
    n_checkpoints: int
    step_record_bytes: int
    checkpoint_payload_bytes: int
    total_bytes: int
    reduction_ratio_vs_last_epoch: float


def cache_stats(p: int, T: int, k: int, width: int, policy: CheckpointPolicy | str,
                n: int | None = None) -> CacheStats:
    """Idealized checkpoint payload: ``p*T*k``, ``p*T`` or ``p`` floats.

    Step-record bytes are included only when the training-set size ``n`` is
    given (each epoch stores T records and N ids).
    """
    policy = CheckpointPolicy(policy)
    if min(p, T, k, width) <= 0:
        raise ValueError("p, T, k and width must be positive")
    count = {CheckpointPolicy.ALL: T * k, CheckpointPolicy.LAST_EPOCH: T, CheckpointPolicy.FINAL_ONLY: 1}[policy]
    payload = count * p * width
    records = 0 if n is None else k * (T * _RECORD.size + n * 8)
    return CacheStats(policy, count, records, payload, payload + records, payload / (T * p * width))


def measured_stats(cache: InfluenceCache) -> CacheStats:
    """Stats of an actual cache; the ratio is against a LAST_EPOCH cache (T+1 vectors)."""
    h = cache.header
    payload = cache.checkpoint_payload_bytes
    total = cache.path.stat().st_size if cache.path is not None else _HEADER.size + cache.step_record_bytes + payload + len(cache.stored_steps) * _MANIFEST.size
    last_epoch_payload = (h.steps_per_epoch + 1) * h.p * h.width
    return CacheStats(h.policy, len(cache.stored_steps), cache.step_record_bytes, payload, total,
                      payload / last_epoch_payload)


def human_bytes(n: float) -> str:
    """Decimal (SI) units, as used for storage sizes."""
    for unit in ("B", "KB", "MB", "GB", "TB"):
        if abs(n) < 1000 or unit == "TB":
            return f"{n:.4g} {unit}" if unit != "B" else f"{int(n)} B"
        n /= 1000.0
    raise AssertionError
