"""Training-loop tests: loss arithmetic, the bank, baselines, determinism."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evocount import model as M
from evocount import scenegen as G
from evocount import tensor as T
from evocount import trainer as TR
from evocount.tensor import Tensor


def tiny_benchmark(n_classes=2, base_seed=900):
    sizes = G.SplitSizes(train=4, val=2, test=2)
    return G.make_benchmark(G.default_class_specs(n_classes), sizes,
                            base_seed=base_seed, H=32, W=32)


def tiny_config(**kw):
    base = dict(epochs=2, batch_size=4, lr=3e-4, weight_decay=5e-5,
                lam=0.15, k_total=6, seed=0, lr_decay_every=100)
    base.update(kw)
    return TR.TrainConfig(**base)


# ---------------------------------------------------------------------------
# loss terms

def test_classifier_loss_confident():
    logits = Tensor(np.array([[25.0, 0.0], [0.0, 25.0]]))
    assert float(TR.loss_classifier(logits, [0, 1]).data) < 1e-6


def test_classifier_loss_uniform():
    logits = Tensor(np.zeros((2, 3)))
    got = float(TR.loss_classifier(logits, [1, 2]).data)
    assert got == pytest.approx(math.log(3.0), abs=1e-12)


def test_classifier_loss_is_batch_mean():
    rng = np.random.default_rng(0)
    la = rng.standard_normal(4)
    lb = rng.standard_normal(4)
    single_a = float(TR.loss_classifier(Tensor(la), 1).data)
    single_b = float(TR.loss_classifier(Tensor(lb), 3).data)
    both = float(TR.loss_classifier(Tensor(np.stack([la, lb])), [1, 3]).data)
    assert both == pytest.approx((single_a + single_b) / 2.0, abs=1e-12)


def test_density_loss_zero_on_match():
    gt = np.random.default_rng(1).random((1, 3, 4, 4))
    pred = Tensor(gt.copy())
    assert float(TR.loss_density(pred, gt, [2]).data) == 0.0


def test_density_loss_half_error_over_16_pixels():
    pred = Tensor(np.zeros((1, 2, 4, 4)))
    gt = np.zeros((1, 2, 4, 4))
    gt[0, 1] = 0.5
    got = float(TR.loss_density(pred, gt, [1]).data)
    assert got == 2.0  # (1/2) * 16 * 0.25, exactly representable


def test_density_loss_ignores_ungated_channels():
    pred = Tensor(np.random.default_rng(2).random((1, 3, 4, 4)))
    gt = np.zeros((1, 3, 4, 4))
    gt[0, 0] = pred.data[0, 0]
    # channels 1,2 disagree wildly but only channel 0 is gated
    assert float(TR.loss_density(pred, gt, [0]).data) == 0.0


def test_density_loss_gate_bounds():
    pred = Tensor(np.zeros((2, 2, 4, 4)))
    with pytest.raises(ValueError):
        TR.loss_density(pred, np.zeros((2, 2, 4, 4)), [0, 2])


def test_mask_loss_half():
    prob = Tensor(np.full((2, 1, 4, 4), 0.5))
    gt = np.random.default_rng(3).integers(0, 2, (2, 1, 4, 4)).astype(float)
    assert float(TR.loss_mask(prob, gt).data) == pytest.approx(math.log(2.0),
                                                               abs=1e-12)


def test_mask_loss_perfect():
    gt = np.random.default_rng(4).integers(0, 2, (1, 1, 4, 4)).astype(float)
    assert float(TR.loss_mask(Tensor(gt.copy()), gt).data) < 1e-10


def test_mask_loss_background_case():
    q = np.full((1, 1, 2, 2), 0.25)
    gt = np.zeros((1, 1, 2, 2))
    got = float(TR.loss_mask(Tensor(q.copy()), gt).data)
    assert got == pytest.approx(-math.log(0.75), abs=1e-12)


def test_mask_density_regression_scale():
    prob = Tensor(np.zeros((2, 1, 4, 4)))
    gt = np.full((2, 1, 4, 4), 0.5)
    got = float(TR.loss_mask_density(prob, gt).data)
    assert got == pytest.approx((1 / 4.0) * 32 * 0.25, abs=1e-12)


def test_distill_offset_oracle():
    teacher = np.zeros((1, 4, 4))
    student = Tensor(np.zeros((2, 4, 4)))
    student.data[0] = 0.1
    got = float(TR._distill_on_arrays(student, teacher).data)
    assert got == pytest.approx(0.08, abs=1e-15)  # (1/2) * 16 * 0.01


def test_distill_channel_count_checked():
    m = M.build_initial(M.ArchConfig(), seed=0)
    x = Tensor(np.random.default_rng(0).random((1, 32, 32)))
    out = M.forward(m, x)
    with pytest.raises(ValueError):
        TR.loss_distill(out, out)  # same width, not teacher-sized


# ---------------------------------------------------------------------------
# bank selection

def test_exemplar_order_pinned_example():
    feats = np.array([[0.0], [1.0], [2.0], [10.0], [11.0]])
    order, dist, center = TR.select_exemplar_order(feats)
    assert center[0] == pytest.approx(4.8, abs=1e-12)
    assert list(order[:3]) == [2, 1, 0]
    assert [feats[i, 0] for i in order[:3]] == [2.0, 1.0, 0.0]
    assert np.all(np.diff(dist[order]) >= 0)


def test_allotment_even_split():
    assert TR.allotment_sizes(150, [0, 1, 2]) == {0: 50, 1: 50, 2: 50}


def test_allotment_remainder_to_lowest_ids():
    assert TR.allotment_sizes(10, [0, 1, 2]) == {0: 4, 1: 3, 2: 3}
    assert TR.allotment_sizes(7, [3, 1, 5]) == {1: 3, 3: 2, 5: 2}


@given(st.integers(50, 200), st.integers(2, 9))
@settings(deadline=None)
def test_allotment_floor_plus_remainder(k_total, n_classes):
    ids = list(range(n_classes))
    sizes = TR.allotment_sizes(k_total, ids)
    assert sum(sizes.values()) == min(k_total, sum(sizes.values()))
    base, rem = divmod(k_total, n_classes)
    for i, cid in enumerate(ids):
        assert sizes[cid] == base + (1 if i < rem else 0)


@given(st.integers(0, 2 ** 31 - 1), st.integers(1, 40), st.integers(1, 8))
@settings(deadline=None, max_examples=40)
def test_exemplar_order_matches_bruteforce(seed, n, dim):
    feats = np.random.default_rng(seed).standard_normal((n, dim))
    order, dist, center = TR.select_exemplar_order(feats)
    ref_center = feats.mean(axis=0)
    ref_d = np.sqrt(((feats - ref_center) ** 2).sum(axis=1))
    ref_order = sorted(range(n), key=lambda i: (ref_d[i], i))
    assert list(order) == ref_order
    np.testing.assert_allclose(dist, ref_d, rtol=1e-12, atol=1e-12)


def _bank_fixture(k_total=6):
    bench = tiny_benchmark()
    m = M.build_initial(M.ArchConfig(), seed=1)
    bank = TR.SupportSampleBank(k_total)
    TR.update_bank(bank, m, bench[0], 0)
    TR.update_bank(bank, m, bench[0], 1)
    return bank, m, bench


def test_bank_rejects_duplicate_class():
    bank, m, bench = _bank_fixture()
    with pytest.raises(ValueError):
        TR.update_bank(bank, m, bench[0], 1)


def test_bank_capacity_and_ordering():
    bank, m, bench = _bank_fixture(k_total=5)
    assert bank.total_stored() <= 5
    sizes = TR.allotment_sizes(5, bank.seen_class_ids())
    for cid, entries in bank.classes.items():
        assert len(entries) <= sizes[cid]
        dists = [e.distance for e in entries]
        assert dists == sorted(dists)


def test_bank_rebalance_truncates_tails():
    bench = tiny_benchmark()
    m = M.build_initial(M.ArchConfig(), seed=2)
    bank = TR.SupportSampleBank(4)
    TR.update_bank(bank, m, bench[0], 0)
    assert len(bank.classes[0]) == 4
    kept_before = [e.sample.seed for e in bank.classes[0]]
    TR.update_bank(bank, m, bench[0], 1)
    # class 0 drops to its new allotment, keeping the closest prefix
    assert [e.sample.seed for e in bank.classes[0]] == kept_before[:2]
    assert bank.total_stored() <= 4


def test_bank_all_samples_in_class_order():
    bank, _, _ = _bank_fixture()
    ids = [s.class_id for s in bank.all_samples()]
    assert ids == sorted(ids)


def test_bank_snapshot_shape():
    bank, _, _ = _bank_fixture()
    snap = bank.snapshot()
    assert set(snap) == {"0", "1"}
    for rows in snap.values():
        for seed, dist in rows:
            assert isinstance(seed, int) and dist >= 0.0


# ---------------------------------------------------------------------------
# stage training mechanics

def test_history_covers_every_epoch():
    bench = tiny_benchmark()
    m = M.build_initial(M.ArchConfig(), seed=0)
    m2, hist = TR.train_stage(m, bench[0], None, None, tiny_config(epochs=3),
                              seen_val=bench[0].val)
    assert len(hist.epochs) == 3
    assert all(r.stage == 1 for r in hist.epochs)


def test_empty_training_set_rejected():
    ds = G.StageDataset(class_id=1)
    m = M.build_initial(M.ArchConfig(), seed=0)
    with pytest.raises(ValueError):
        TR.train_stage(m, ds, None, None, tiny_config())


def test_loss_breakdown_identity_every_batch():
    cfg = tiny_config()
    res = TR.run_full_method(tiny_benchmark(), cfg)
    checked = 0
    for hist in res.histories:
        for b in hist.batches:
            recomposed = b.la + b.lc + (1 - b.lam) * b.ld + b.lam * b.lkd
            assert abs(b.total - recomposed) <= 1e-12
            checked += 1
    assert checked > 0


def test_first_distill_batch_after_expand_is_zero():
    res = TR.run_full_method(tiny_benchmark(), tiny_config())
    stage2 = res.histories[1]
    assert stage2.batches[0].lkd == 0.0
    assert any(b.lkd != 0.0 for b in stage2.batches[1:])


def test_stage_one_has_no_distill_term():
    res = TR.run_full_method(tiny_benchmark(), tiny_config())
    assert all(b.lkd == 0.0 for b in res.histories[0].batches)


def test_lambda_zero_degenerates():
    res = TR.run_full_method(tiny_benchmark(), tiny_config(lam=0.0))
    for b in res.histories[1].batches:
        assert abs(b.total - (b.la + b.lc + b.ld)) <= 1e-12


def test_lambda_validated():
    with pytest.raises(ValueError):
        tiny_config(lam=1.5)


def test_stage1_identical_between_full_and_ft():
    bench = tiny_benchmark()
    cfg = tiny_config()
    full = TR.run_full_method(bench, cfg)
    ft = TR.run_baseline_ft(bench, cfg)
    for k, v in full.models[0].params.items():
        assert np.array_equal(v.data, ft.models[0].params[k].data), k


def test_ft_keeps_no_bank():
    res = TR.run_baseline_ft(tiny_benchmark(), tiny_config())
    assert res.bank is None
    assert res.bank_snapshots == []


def test_joint_trains_on_union():
    bench = tiny_benchmark()
    res = TR.run_baseline_joint(bench, tiny_config())
    assert len(res.models) == 1
    assert res.models[0].t == len(bench)
    assert all(b.lkd == 0.0 for b in res.histories[0].batches)
    assert len(res.reports) == 1


def test_rerun_reproduces_weights_bitwise():
    bench = tiny_benchmark()
    cfg = tiny_config()
    a = TR.run_full_method(bench, cfg)
    b = TR.run_full_method(bench, cfg)
    for k, v in a.models[-1].params.items():
        assert np.array_equal(v.data, b.models[-1].params[k].data), k


def test_unsupervised_mask_drops_mask_loss():
    res = TR.run_ablation_mask(tiny_benchmark(), tiny_config(),
                               "unsupervised-mask")
    for hist in res.histories:
        assert all(b.la == 0.0 for b in hist.batches)


def test_density_supervised_mask_has_loss():
    res = TR.run_ablation_mask(tiny_benchmark(), tiny_config(),
                               "density-supervised")
    assert any(b.la != 0.0 for b in res.histories[0].batches)


def test_unknown_variant_rejected():
    with pytest.raises(ValueError):
        TR.run_ablation_mask(tiny_benchmark(), tiny_config(), "nope")


def test_gate_with_truth_changes_gating_only_when_asked():
    bench = tiny_benchmark()
    a = TR.run_full_method(bench, tiny_config())
    b = TR.run_full_method(bench, tiny_config(gate_with_truth=True))
    diff = any(
        not np.array_equal(a.models[-1].params[k].data,
                           b.models[-1].params[k].data)
        for k in a.models[-1].params)
    assert diff


def test_lr_decay_applies_only_at_incremental_stages():
    cfg = tiny_config(epochs=2, lr=1e-3, lr_decay_every=1, lr_decay_factor=10)
    res = TR.run_full_method(tiny_benchmark(), cfg)
    stage1_lrs = [r.lr for r in res.histories[0].epochs]
    stage2_lrs = [r.lr for r in res.histories[1].epochs]
    assert stage1_lrs == [1e-3, 1e-3]
    assert stage2_lrs == [1e-3, 1e-4]
