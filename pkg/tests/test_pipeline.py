import csv
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgd_influence.dataset import NoiseReport
from sgd_influence.model import ModelSpec
from sgd_influence.pipeline import (
    AGGREGATE_HEADER,
    CURVE_HEADER,
    BlobsProtocol,
    CleanseConfig,
    CleanseCurve,
    CurveRow,
    Strategy,
    cleanse_once,
    cleanse_sweep,
    format_pm,
    read_curve_csv,
    recall,
    removal_scores,
    top_negative,
    worker_count,
)
from sgd_influence.trainer import TrainConfig

PROTO = BlobsProtocol(n_train=120, n_val=60, n_test=120, n_classes=4, dim=8, separation=4.0, noise_rate=0.1)
SPEC = ModelSpec(8, (8,), 4)
TCFG = TrainConfig(lr=0.1, epochs=4, batch_size=16)


@pytest.fixture(scope="module")
def trial():
    return PROTO(0)


def test_protocol_shapes_and_determinism(trial):
    assert (len(trial.train), len(trial.val), len(trial.test)) == (120, 60, 120)
    assert len(trial.noise.flipped_ids) == 12
    again = PROTO(0)
    assert again.train == trial.train and again.val == trial.val and again.noise == trial.noise
    other = PROTO(1)
    assert other.train != trial.train
    assert other.test == trial.test
    assert not set(trial.train.ids.tolist()) & set(trial.val.ids.tolist())


def test_none_is_constant_in_n(trial):
    accs = {cleanse_once(SPEC, trial.train, trial.val, trial.test, TCFG, "none", n, 3).accuracy for n in (0, 5, 30)}
    assert len(accs) == 1


def test_zero_removal_equal_across_strategies(trial):
    res = [cleanse_once(SPEC, trial.train, trial.val, trial.test, TCFG, s, 0, 3) for s in Strategy]
    assert len({r.accuracy for r in res}) == 1
    assert all(r.removed_ids == () for r in res)


def test_removed_ids_are_most_negative(trial):
    scores = removal_scores(SPEC, trial.train, trial.val, TCFG, "influence_final_only", 0)
    res = cleanse_once(SPEC, trial.train, trial.val, trial.test, TCFG, "influence_final_only", 10, 0)
    assert len(res.removed_ids) == 10
    d = scores.as_dict()
    worst_kept = min(v for i, v in d.items() if i not in res.removed_ids)
    assert max(d[i] for i in res.removed_ids) <= worst_kept


def test_cleanse_once_rejects_bad_n(trial):
    with pytest.raises(ValueError):
        cleanse_once(SPEC, trial.train, trial.val, trial.test, TCFG, "random", len(trial.train), 0)
    with pytest.raises(ValueError):
        cleanse_once(SPEC, trial.train, trial.val, trial.test, TCFG, "random", -1, 0)


def test_random_scores_depend_on_seed_only(trial):
    a = removal_scores(SPEC, trial.train, trial.val, TCFG, "random", 4)
    b = removal_scores(SPEC, trial.train, trial.val, TCFG.with_(lr=1.0), "random", 4)
    c = removal_scores(SPEC, trial.train, trial.val, TCFG, "random", 5)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)
    assert top_negative(None, 3) == () and top_negative(a, 0) == ()


def test_single_cell_sweep_matches_cleanse_once(trial):
    cfg = CleanseConfig((0, 7), 1, ("influence_stored",), TCFG, (16,), base_seed=0)
    curve = cleanse_sweep(SPEC, cfg, PROTO, workers=2)
    assert not curve.failures
    for n in (0, 7):
        row, = curve.cell("influence_stored", 16, n)
        want = cleanse_once(SPEC, trial.train, trial.val, trial.test, TCFG, "influence_stored", n, 0)
        assert row.accuracy == want.accuracy
        assert row.recall == (recall(want.removed_ids, trial.noise) if n else 0.0)


def test_sweep_independent_of_thread_count():
    cfg = CleanseConfig((0, 5), 2, ("random", "influence_final_only"), TCFG, (16, 32), base_seed=5)
    a = cleanse_sweep(SPEC, cfg, PROTO, workers=1)
    b = cleanse_sweep(SPEC, cfg, PROTO, workers=4)
    assert a.rows == b.rows
    assert len(a.rows) == 2 * 2 * 2 * 2
    assert sorted({r.seed for r in a.rows}) == [5, 6]


def test_sweep_reports_failing_cells(trial):
    def source(seed):
        if seed == 1:
            raise RuntimeError("broken trial")
        return trial

    cfg = CleanseConfig((0,), 2, ("none",), TCFG, (16,))
    curve = cleanse_sweep(SPEC, cfg, source, workers=2)
    assert [r.seed for r in curve.rows] == [0]
    assert curve.failures and curve.failures[0][:3] == ("none", 16, 1)
    assert "broken trial" in curve.failures[0][3]


def test_sweep_rejects_oversized_removal(trial):
    cfg = CleanseConfig((0, len(trial.train)), 1, ("random",), TCFG, (16,))
    curve = cleanse_sweep(SPEC, cfg, trial, workers=1)
    assert not curve.rows and len(curve.failures) == 1


def _curve_from(accs):
    rows = [CurveRow(s, b, n, seed, a) for (s, b, n), vals in accs.items() for seed, a in enumerate(vals)]
    return CleanseCurve(rows)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=12), st.lists(st.floats(0, 1), min_size=1, max_size=12))
def test_aggregate_matches_naive(a, b):
    curve = _curve_from({("random", 32, 0): a, ("none", 32, 5): b})
    agg = {(s, bb, n): (m, sd) for s, bb, n, m, sd in curve.aggregate()}
    for key, vals in (((("random", 32, 0)), a), (("none", 32, 5), b)):
        mean = sum(vals) / len(vals)
        std = (sum((v - mean) ** 2 for v in vals) / len(vals)) ** 0.5
        assert abs(agg[key][0] - mean) <= 1e-12 and abs(agg[key][1] - std) <= 1e-12


def test_single_seed_std_is_zero():
    (_, _, _, m, sd), = _curve_from({("random", 8, 1): [0.75]}).aggregate()
    assert (m, sd) == (0.75, 0.0)


def test_csv_outputs(tmp_path):
    curve = _curve_from({("random", 32, 0): [0.5, 0.7], ("influence_stored", 32, 0): [0.6, 0.6]})
    paths = curve.write(tmp_path)
    with paths["curve"].open() as fh:
        assert next(csv.reader(fh)) == CURVE_HEADER
    with paths["aggregate"].open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == AGGREGATE_HEADER
    assert [r[0] for r in rows[1:]] == ["influence_stored", "random"]
    assert float(rows[2][3]) == 0.6 and float(rows[2][4]) == pytest.approx(0.1, abs=1e-15)
    back = read_curve_csv(paths["curve"])
    assert sorted((r.strategy, r.seed, r.accuracy) for r in back) == sorted(
        (r.strategy, r.seed, r.accuracy) for r in curve.rows)
    assert "failures" not in paths


def test_format_pm():
    assert format_pm(0.91234, 0.01) == "0.9123 ± 0.0100"
    assert format_pm(1.0, 0.0, 2) == "1.00 ± 0.00"
    assert re.fullmatch(r"\d\.\d{4} ± \d\.\d{4}", format_pm(0.5, 0.25))


def test_recall_examples():
    noise = NoiseReport(frozenset({1, 2, 3, 4}), 0.1, 0)
    assert recall((1, 2, 9), noise) == 0.5
    assert recall((), noise) == 0.0
    assert recall((1, 2, 3, 4), noise) == 1.0
    assert recall((7,), NoiseReport(frozenset(), 0.0, 0)) == 0.0


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("INFLUENCE_CLEANSE_THREADS", "3")
    assert worker_count() == 3
    monkeypatch.setenv("INFLUENCE_CLEANSE_THREADS", "zero")
    with pytest.raises(ValueError):
        worker_count()
    monkeypatch.delenv("INFLUENCE_CLEANSE_THREADS")
    assert worker_count() >= 1


def test_config_validation():
    with pytest.raises(ValueError):
        CleanseConfig((0,), 0)
    with pytest.raises(ValueError):
        CleanseConfig((-1,))
    with pytest.raises(ValueError):
        CleanseConfig((0,), strategies=("bogus",))
    assert CleanseConfig((5, 0)).removal_counts == (0, 5)
