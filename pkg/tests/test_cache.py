from fractions import Fraction

import numpy as np
import pytest

from sgd_influence.cache import (
    CacheError,
    CacheHeader,
    CheckpointPolicy,
    SGDStepRecord,
    cache_stats,
    human_bytes,
    measured_stats,
    read_cache,
    write_cache,
)
from sgd_influence.dataset import gen_blobs
from sgd_influence.model import ModelSpec
from sgd_influence.trainer import TrainConfig, train


def _random_cache(rng, policy=CheckpointPolicy.LAST_EPOCH, width=4):
    p, T, k = 5, 3, 2
    header = CacheHeader(p, 7, 2, 3, k, T, 3, policy, width)
    records = [SGDStepRecord(t, tuple(int(i) for i in rng.permutation(7)[:3]), 0.05 * (t + 1)) for t in range(k * T)]
    ckpts = {t: rng.normal(size=p) for t in header.policy_steps()}
    return header, records, ckpts


@pytest.mark.parametrize("width", [4, 8])
@pytest.mark.parametrize("policy", list(CheckpointPolicy))
def test_round_trip(tmp_path, width, policy):
    rng = np.random.default_rng(0)
    header, records, ckpts = _random_cache(rng, policy, width)
    write_cache(tmp_path / "c.icch", header, records, ckpts)
    c = read_cache(tmp_path / "c.icch")
    assert c.header == header
    assert c.records == records
    assert c.stored_steps == sorted(ckpts)
    dt = np.float32 if width == 4 else np.float64
    for t, v in ckpts.items():
        np.testing.assert_array_equal(c.checkpoint(t), v.astype(dt).astype(np.float64))
    c.save(tmp_path / "d.icch")
    assert (tmp_path / "c.icch").read_bytes() == (tmp_path / "d.icch").read_bytes()


def test_final_only_payload_bytes(tmp_path):
    header = CacheHeader(3, 1, 1, 2, 1, 1, 1, CheckpointPolicy.FINAL_ONLY, 4)
    write_cache(tmp_path / "c.icch", header, [SGDStepRecord(0, (0,), 0.1)], {1: np.ones(3)})
    c = read_cache(tmp_path / "c.icch")
    assert c.checkpoint_payload_bytes == 12
    assert measured_stats(c).checkpoint_payload_bytes == 12


def test_truncated_file(tmp_path):
    rng = np.random.default_rng(1)
    write_cache(tmp_path / "c.icch", *_random_cache(rng))
    raw = (tmp_path / "c.icch").read_bytes()
    (tmp_path / "t.icch").write_bytes(raw[:-10])
    with pytest.raises(CacheError, match="manifest overruns file"):
        read_cache(tmp_path / "t.icch")


def test_bad_magic_and_version(tmp_path):
    rng = np.random.default_rng(1)
    write_cache(tmp_path / "c.icch", *_random_cache(rng))
    raw = bytearray((tmp_path / "c.icch").read_bytes())
    (tmp_path / "m.icch").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CacheError, match="magic"):
        read_cache(tmp_path / "m.icch")
    raw[4] = 9
    (tmp_path / "v.icch").write_bytes(bytes(raw))
    with pytest.raises(CacheError, match="version"):
        read_cache(tmp_path / "v.icch")


def test_absent_checkpoint(tmp_path):
    rng = np.random.default_rng(2)
    write_cache(tmp_path / "c.icch", *_random_cache(rng, CheckpointPolicy.FINAL_ONLY))
    c = read_cache(tmp_path / "c.icch")
    with pytest.raises(CacheError, match="checkpoint not stored under policy"):
        c.checkpoint(0)


def test_inconsistent_lengths(tmp_path):
    header = CacheHeader(3, 1, 1, 2, 1, 1, 1, CheckpointPolicy.FINAL_ONLY, 4)
    with pytest.raises(CacheError):
        write_cache(tmp_path / "c.icch", header, [], {1: np.ones(4)})


def test_table_one_arithmetic():
    gb = 1e9
    assert cache_stats(309000, 1563, 20, 4, "all").checkpoint_payload_bytes / gb == pytest.approx(38.64, rel=5e-3)
    assert cache_stats(309000, 1563, 20, 4, "last_epoch").checkpoint_payload_bytes / gb == pytest.approx(1.932, rel=5e-3)
    assert cache_stats(309000, 1563, 20, 4, "final_only").checkpoint_payload_bytes / 1e6 == pytest.approx(1.236, rel=5e-3)
    assert cache_stats(309000, 1250, 20, 4, "last_epoch").checkpoint_payload_bytes / gb == pytest.approx(1.545, rel=5e-3)
    assert cache_stats(309000, 1250, 20, 4, "all").checkpoint_payload_bytes / gb == pytest.approx(30.90, rel=5e-3)


@pytest.mark.parametrize("p, T, k, w", [(309000, 1563, 20, 4), (17, 5, 3, 8), (1, 1, 1, 4)])
def test_idealized_ratios(p, T, k, w):
    last = cache_stats(p, T, k, w, "last_epoch")
    final = cache_stats(p, T, k, w, "final_only")
    allp = cache_stats(p, T, k, w, "all")
    assert Fraction(final.checkpoint_payload_bytes, last.checkpoint_payload_bytes) == Fraction(1, T)
    assert allp.checkpoint_payload_bytes == k * last.checkpoint_payload_bytes
    assert final.reduction_ratio_vs_last_epoch == 1 / T


def test_measured_ratio_is_one_over_t_plus_one(tmp_path):
    ds = gen_blobs(20, 2, 2, 2.0, 0)
    spec = ModelSpec(2, (3,), 2)
    cfg = TrainConfig(epochs=2, batch_size=8, seed=0)
    a = train(spec, ds, cfg.with_(policy="last_epoch"), cache_path=tmp_path / "a.icch").cache
    b = train(spec, ds, cfg.with_(policy="final_only"), cache_path=tmp_path / "b.icch").cache
    T = a.header.steps_per_epoch
    assert Fraction(b.checkpoint_payload_bytes, a.checkpoint_payload_bytes) == Fraction(1, T + 1)
    assert measured_stats(read_cache(tmp_path / "b.icch")).total_bytes == (tmp_path / "b.icch").stat().st_size


def test_human_bytes():
    assert human_bytes(1931868000) == "1.932 GB"
    assert human_bytes(1236000) == "1.236 MB"
    assert human_bytes(12) == "12 B"
