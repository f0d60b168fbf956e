"""Counting-error metrics and report plumbing."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evocount import metrics as MET
from evocount import model as M
from evocount import scenegen as G
from evocount.metrics import CountPair


def pairs(*zz):
    return [CountPair(z, zh) for z, zh in zz]


def test_mae_pinned():
    assert MET.mae(pairs((10, 12), (20, 19))) == pytest.approx(1.5, abs=1e-15)


def test_mse_pinned():
    got = MET.mse(pairs((10, 12), (20, 19)))
    assert got == pytest.approx(math.sqrt(5.0 / 2.0), abs=1e-15)


def test_perfect_predictions():
    ps = pairs((3, 3), (7, 7), (0, 0))
    assert MET.mae(ps) == 0.0
    assert MET.mse(ps) == 0.0


def test_single_pair():
    ps = pairs((4, 6.5))
    assert MET.mae(ps) == pytest.approx(2.5)
    assert MET.mse(ps) == pytest.approx(2.5)


def test_empty_pairs_rejected():
    with pytest.raises(ValueError):
        MET.mae([])
    with pytest.raises(ValueError):
        MET.mse([])


@given(st.lists(st.tuples(st.floats(0, 50), st.floats(0, 50)),
                min_size=1, max_size=30))
@settings(deadline=None)
def test_mse_dominates_mae(raw):
    ps = pairs(*raw)
    assert MET.mse(ps) >= MET.mae(ps) - 1e-12


def _bench():
    sizes = G.SplitSizes(train=3, val=2, test=3)
    return G.make_benchmark(G.default_class_specs(2), sizes,
                            base_seed=41, H=32, W=32)


def test_zero_model_mae_equals_mean_count():
    bench = _bench()
    m = M.build_initial(M.ArchConfig(), seed=0)
    for p in m.params.values():
        p.data[:] = 0.0
    rep = MET.evaluate_stage(m, bench, 1)
    for cr in rep.per_class:
        if cr.class_id == 0:
            continue
        true_mean = np.mean([p.z for p in cr.pairs])
        assert cr.mae == pytest.approx(true_mean, abs=1e-12)
        assert all(p.zhat == 0.0 for p in cr.pairs)


def test_report_covers_stage_classes():
    bench = _bench()
    m = M.build_initial(M.ArchConfig(), seed=3)
    rep = MET.evaluate_stage(m, bench, 1)
    assert rep.stage == 1
    assert sorted(cr.class_id for cr in rep.per_class) == [0, 1]
    for cr in rep.per_class:
        assert cr.n == len(cr.pairs) > 0


def test_aggregate_pools_counting_classes_only():
    bench = _bench()
    m = M.build_initial(M.ArchConfig(), seed=3)
    rep = MET.evaluate_stage(m, bench, 1)
    pooled = [p for cr in rep.per_class if cr.class_id > 0 for p in cr.pairs]
    assert rep.agg_mae == pytest.approx(MET.mae(pooled), abs=1e-12)
    assert rep.agg_mse == pytest.approx(MET.mse(pooled), abs=1e-12)


def _fake_reports():
    def rep(stage, rows):
        per = [MET.ClassResult(cid, 1, v, v, 1.0, pairs((1, 1 + v)))
               for cid, v in rows]
        pooled = [p for cr in per for p in cr.pairs]
        return MET.StageReport(stage, per, MET.mae(pooled), MET.mse(pooled),
                               1.0)
    return [rep(1, [(0, 0.1), (1, 0.2)]),
            rep(2, [(0, 0.15), (1, 0.5), (2, 0.3)])]


def test_forgetting_curve_starts_at_intro_stage():
    reps = _fake_reports()
    assert MET.forgetting_curve(reps, 1) == [(1, 0.2), (2, 0.5)]
    assert MET.forgetting_curve(reps, 2) == [(2, 0.3)]


def test_forgetting_curve_unknown_class():
    with pytest.raises(ValueError):
        MET.forgetting_curve(_fake_reports(), 9)


def test_report_csv_roundtrip(tmp_path):
    reps = _fake_reports()
    path = tmp_path / "report.csv"
    MET.write_report_csv(reps, path)
    text = path.read_text().splitlines()
    assert text[0] == ",".join(MET.REPORT_COLUMNS)
    assert len(text) == 1 + sum(len(r.per_class) for r in reps)


def test_pairs_csv_roundtrip(tmp_path):
    bench = _bench()
    m = M.build_initial(M.ArchConfig(), seed=5)
    rep = MET.evaluate_stage(m, bench, 1)
    path = tmp_path / "pairs.csv"
    MET.write_pairs_csv([rep], path)
    back = MET.read_pairs_csv(path)
    flat = [(cr.class_id, p) for cr in rep.per_class for p in cr.pairs]
    assert len(back) == len(flat)
    for (stage, cid, q), (cid0, p) in zip(back, flat):
        assert stage == 1 and cid == cid0
        assert q.z == pytest.approx(p.z, rel=1e-12, abs=1e-12)
        assert q.zhat == pytest.approx(p.zhat, rel=1e-12, abs=1e-12)


def test_summary_grid_shape():
    reps = _fake_reports()
    grid = MET.summary_grid({"full": reps})
    assert set(grid) == {"full"}
    assert set(grid["full"]) == {"1", "2"}
    assert grid["full"]["2"]["MAE"] == reps[-1].agg_mae
