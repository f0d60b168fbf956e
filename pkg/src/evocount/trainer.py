"""Stage-wise incremental training with rehearsal, gating, and distillation.

The per-batch objective is

    L_total = L_a + L_c + (1 - lambda) * L_d + lambda * L_kd

where L_a supervises the class-agnostic mask (BCE against the thresholded
ground-truth density at output resolution), L_c is the classifier
cross-entropy, L_d is the density regression restricted to the classifier's
argmax channel per sample, and L_kd distills the old-channel density maps of
the frozen previous-stage model.  The distillation term exists only at
incremental stages; stage 1 logs it as zero.

The support sample bank keeps a fixed total budget of exemplars split as
evenly as possible across seen classes (remainder to the lowest class ids),
each class list sorted by ascending distance to its feature center.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import metrics as MET
from . import model as M
from . import scenegen as G
from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 8
    lr: float = 1e-5
    weight_decay: float = 5e-5
    lam: float = 0.15
    delta: float = 1e-3
    k_total: int = 150
    seed: int = 0
    gate_with_truth: bool = False
    lr_decay_every: int = 100
    lr_decay_factor: float = 10.0

    def __post_init__(self):
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError("lambda must lie in [0,1]")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


PROFILES = {
    # paper-scale schedule: 300 epochs, lr decade every 100, lr 1e-5 assumes a
    # pretrained backbone
    "paper": {"epochs": 300, "lr_decay_every": 100, "lr": 1e-5},
    # desk-scale schedule: trains the small CNN from scratch, so the learning
    # rate is raised; 1e-3 and above collapse to the all-zero density output
    "desk": {"epochs": 60, "lr_decay_every": 20, "lr": 3e-4},
}


def config_for_profile(profile: str, **overrides) -> TrainConfig:
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}")
    kw = dict(PROFILES[profile])
    kw.update(overrides)
    return TrainConfig(**kw)


# ---------------------------------------------------------------------------
# loss terms


def loss_classifier(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over the batch."""
    return T.softmax_cross_entropy(logits, labels)


def loss_density(density: Tensor, gt_channelized, gating_classes) -> Tensor:
    """Per-sample squared error on the single gated channel, scaled 1/(2n).

    gt_channelized holds each sample's density in its true-class channel and
    zeros elsewhere; gating selects which channel is penalized.
    """
    n, heads = density.data.shape[:2]
    gates = np.asarray(gating_classes)
    if gates.shape != (n,):
        raise ValueError(f"need one gating class per sample, got {gates.shape}")
    if (gates < 0).any() or (gates >= heads).any():
        raise ValueError("gating class out of head range")
    w = np.zeros((n, heads, 1, 1), dtype=np.float64)
    w[np.arange(n), gates] = 1.0
    return T.mse_loss(density, gt_channelized, 1.0 / (2.0 * n), weights=w)


def loss_mask(mask_prob: Tensor, gt_masks) -> Tensor:
    """Mean BCE over every pixel of the batch."""
    return T.bce_loss(mask_prob, gt_masks)


def loss_mask_density(mask_prob: Tensor, gt_density) -> Tensor:
    """Ablation variant: regress the mask head onto the density map."""
    n = mask_prob.data.shape[0]
    return T.mse_loss(mask_prob, gt_density, 1.0 / (2.0 * n))


def loss_distill(student_out: M.ForwardOutput, teacher_out: M.ForwardOutput) -> Tensor:
    """Squared error between old-channel density maps, scaled 1/(2n)."""
    s = student_out.density_channels
    t = teacher_out.density_channels
    s_heads = s.data.shape[-3]
    t_heads = t.data.shape[-3]
    if t_heads != s_heads - 1:
        raise ValueError(f"teacher has {t_heads} channels, expected {s_heads - 1}")
    return _distill_on_arrays(s, t.data)


def _distill_on_arrays(student_density: Tensor, teacher_arr: np.ndarray) -> Tensor:
    old = teacher_arr.shape[-3]
    n = student_density.data.shape[0] if student_density.ndim == 4 else 1
    sliced = T.slice_channels(student_density, 0, old)
    return T.mse_loss(sliced, teacher_arr, 1.0 / (2.0 * n))


@dataclass(frozen=True)
class StageLossBreakdown:
    la: float
    lc: float
    ld: float
    lkd: float
    total: float
    lam: float


@dataclass
class EpochRecord:
    epoch: int
    stage: int
    la: float
    lc: float
    ld: float
    lkd: float
    total: float
    val_mae: float
    val_mse: float
    lr: float


@dataclass
class StageHistory:
    stage: int
    epochs: list[EpochRecord] = field(default_factory=list)
    batches: list[StageLossBreakdown] = field(default_factory=list)


HISTORY_COLUMNS = ("epoch", "stage", "L_a", "L_c", "L_d", "L_kd", "L_total",
                   "val_MAE", "val_MSE", "lr")


def write_history_csv(histories, path):
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for h in histories:
            for r in h.epochs:
                w.writerow([r.epoch, r.stage] +
                           [f"{v:.17g}" for v in (r.la, r.lc, r.ld, r.lkd,
                                                  r.total, r.val_mae, r.val_mse, r.lr)])


# ---------------------------------------------------------------------------
# support sample bank


def allotment_sizes(k_total: int, class_ids) -> dict[int, int]:
    """Evenly split budget; the remainder goes one-per-class to the lowest ids."""
    ids = sorted(class_ids)
    if not ids:
        return {}
    base, rem = divmod(k_total, len(ids))
    return {cid: base + (1 if i < rem else 0) for i, cid in enumerate(ids)}


def select_exemplar_order(features: np.ndarray):
    """Ascending distance-to-center ranking (stable on ties).

    Returns (order, distances, center); the first k of order are the k chosen
    exemplars.
    """
    if features.ndim != 2 or len(features) == 0:
        raise ValueError("need a non-empty (n, d) feature matrix")
    center = features.mean(axis=0)
    dist = np.sqrt(((features - center) ** 2).sum(axis=1))
    order = np.argsort(dist, kind="stable")
    return order, dist, center


@dataclass
class BankEntry:
    sample: G.Sample
    feature: np.ndarray
    distance: float


class SupportSampleBank:
    """Fixed-capacity exemplar store, evenly divided across seen classes."""

    def __init__(self, k_total: int = 150):
        if k_total < 1:
            raise ValueError("bank capacity must be positive")
        self.k_total = k_total
        self.classes: dict[int, list[BankEntry]] = {}

    def seen_class_ids(self):
        return sorted(self.classes)

    def total_stored(self):
        return sum(len(v) for v in self.classes.values())

    def all_samples(self):
        out = []
        for cid in self.seen_class_ids():
            out.extend(e.sample for e in self.classes[cid])
        return out

    def snapshot(self):
        """Sample seeds and distances per class, for on-disk bank records."""
        return {str(cid): [[e.sample.seed, e.distance] for e in self.classes[cid]]
                for cid in self.seen_class_ids()}


def _features_batched(m, samples, batch=64):
    feats = np.empty((len(samples), m.arch.trunk_width), dtype=np.float64)
    with T.no_grad():
        for i in range(0, len(samples), batch):
            chunk = samples[i:i + batch]
            imgs = Tensor(np.stack([s.image.data for s in chunk]))
            out = M.forward_batch(m, imgs)
            feats[i:i + len(chunk)] = out.feature_vec.data
    return feats


def update_bank(bank: SupportSampleBank, m: M.ModelState, stage_data: G.StageDataset,
                class_id: int) -> SupportSampleBank:
    """Add class_id's exemplars and re-balance every class to the new allotment."""
    if class_id in bank.classes:
        raise ValueError(f"class {class_id} already banked")
    samples = [s for s in stage_data.train if s.class_id == class_id]
    if not samples:
        raise ValueError(f"stage data holds no training samples of class {class_id}")
    feats = _features_batched(m, samples)
    order, dist, _ = select_exemplar_order(feats)
    bank.classes[class_id] = [BankEntry(samples[i], feats[i].copy(), float(dist[i]))
                              for i in order]
    sizes = allotment_sizes(bank.k_total, bank.seen_class_ids())
    for cid, entries in bank.classes.items():
        del entries[sizes[cid]:]
    return bank


# ---------------------------------------------------------------------------
# stage training


def _epoch_seed(cfg_seed, stage, epoch):
    return (int(cfg_seed) * 1_000_003 + stage * 10_007 + epoch) & (2**63 - 1)


def _stage_lr(cfg: TrainConfig, stage: int, epoch: int) -> float:
    if stage < 2:
        return cfg.lr
    return cfg.lr / (cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every))


def _gt_arrays(samples, heads, delta):
    """Stack per-sample supervision at output resolution.

    Returns (images, labels, channelized density (n,heads,h,w), masks (n,1,h,w)).
    """
    n = len(samples)
    imgs = np.stack([s.image.data for s in samples])
    labels = np.array([s.class_id for s in samples], dtype=np.int64)
    ds = [G.downsample_density(s.density, 4).data for s in samples]
    h, w = ds[0].shape[-2:]
    chan = np.zeros((n, heads, h, w), dtype=np.float64)
    masks = np.empty((n, 1, h, w), dtype=np.float64)
    for i, (s, d) in enumerate(zip(samples, ds)):
        chan[i, s.class_id] = d[0]
        masks[i, 0] = d[0] > delta
    return imgs, labels, chan, masks


class _TeacherCache:
    """Frozen-teacher density maps per (sample seed, flipped) pair."""

    def __init__(self, teacher):
        self.teacher = teacher
        self.maps = {}

    def get(self, samples, flipped):
        missing = [(s, f) for s, f in zip(samples, flipped)
                   if (s.seed, f) not in self.maps]
        if missing:
            imgs = Tensor(np.stack([s.image.data for s, _ in missing]))
            with T.no_grad():
                out = M.forward_batch(self.teacher, imgs)
            for (s, f), dmap in zip(missing, out.density_channels.data):
                self.maps[(s.seed, f)] = dmap.copy()
        return np.stack([self.maps[(s.seed, f)] for s, f in zip(samples, flipped)])


def _val_counts(m, samples):
    pairs = []
    for i in range(0, len(samples), 64):
        chunk = samples[i:i + 64]
        imgs = Tensor(np.stack([s.image.data for s in chunk]))
        _, cnt = M.predict_counts_batch(m, imgs)
        pairs.extend(MET.CountPair(float(s.n_dots), float(z))
                     for s, z in zip(chunk, cnt) if s.class_id > 0)
    return pairs


def train_stage(m: M.ModelState, stage_data: G.StageDataset, bank: SupportSampleBank | None,
                teacher: M.ModelState | None, cfg: TrainConfig,
                seen_val=None, mask_supervision: str = "bce") -> tuple[M.ModelState, StageHistory]:
    """Run one stage of training in place; returns (m, history).

    mask_supervision: "bce" (default), "mse" (density-supervised ablation),
    or "none" (mask branch present but unsupervised, or absent entirely).
    """
    stage = m.t
    if teacher is not None and teacher.t != stage - 1:
        raise ValueError(f"teacher at stage {teacher.t} cannot distill into stage {stage}")
    if mask_supervision not in ("bce", "mse", "none"):
        raise ValueError(f"unknown mask_supervision {mask_supervision!r}")
    train = list(stage_data.train)
    if bank is not None:
        train += bank.all_samples()
    if not train:
        raise ValueError("empty training set")
    if seen_val is None:
        seen_val = list(stage_data.val)

    heads = stage + 1
    params = m.trainable()
    state = T.AdamState()
    history = StageHistory(stage=stage)
    cache = _TeacherCache(teacher) if teacher is not None else None
    zero = Tensor(0.0)

    for epoch in range(cfg.epochs):
        lr = _stage_lr(cfg, stage, epoch)
        eseed = _epoch_seed(cfg.seed, stage, epoch)
        rng = np.random.default_rng([eseed, 0xBA7C])
        order = rng.permutation(len(train))
        sums = np.zeros(5)
        nb = 0
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            raw = [train[i] for i in idx]
            batch = [G.augment_flip(s, eseed) for s in raw]
            flipped = [b is not r for b, r in zip(batch, raw)]
            imgs_np, labels, chan, masks = _gt_arrays(batch, heads, cfg.delta)
            n = len(batch)

            out = M.forward_batch(m, Tensor(imgs_np))
            lc = loss_classifier(out.class_logits, labels)
            gates = labels if cfg.gate_with_truth else np.argmax(out.class_logits.data, axis=1)
            ld = loss_density(out.density_channels, chan, gates)
            if mask_supervision == "bce" and out.mask_prob is not None:
                la = loss_mask(out.mask_prob, masks)
            elif mask_supervision == "mse" and out.mask_prob is not None:
                la = loss_mask_density(out.mask_prob, chan.sum(axis=1, keepdims=True))
            else:
                la = zero
            if cache is not None:
                tmaps = cache.get(batch, flipped)
                lkd = _distill_on_arrays(out.density_channels, tmaps)
            else:
                lkd = zero

            total = T.add(T.add(T.add(la, lc), T.affine(ld, 1.0 - cfg.lam, 0.0)),
                          T.affine(lkd, cfg.lam, 0.0))
            for p in params:
                p.zero_grad()
            T.backward(total)
            T.adam_step(params, [p.grad for p in params], state, lr,
                        weight_decay=cfg.weight_decay)

            bd = StageLossBreakdown(la=float(la.data), lc=float(lc.data),
                                    ld=float(ld.data), lkd=float(lkd.data),
                                    total=float(total.data), lam=cfg.lam)
            history.batches.append(bd)
            sums += (bd.la, bd.lc, bd.ld, bd.lkd, bd.total)
            nb += 1

        vp = _val_counts(m, seen_val) if seen_val else []
        vmae = MET.mae(vp) if vp else 0.0
        vmse = MET.mse(vp) if vp else 0.0
        avg = sums / nb
        history.epochs.append(EpochRecord(epoch=epoch + 1, stage=stage,
                                          la=avg[0], lc=avg[1], ld=avg[2],
                                          lkd=avg[3], total=avg[4],
                                          val_mae=vmae, val_mse=vmse, lr=lr))
    return m, history


# ---------------------------------------------------------------------------
# protocol runners


@dataclass
class RunResult:
    method: str
    models: list
    reports: list
    histories: list
    bank: SupportSampleBank | None
    # bank contents frozen after each stage; empty for bankless baselines
    bank_snapshots: list = field(default_factory=list)


def _seen_val(benchmark, t):
    out = []
    for ds in benchmark[:t]:
        out.extend(ds.val)
    return out


def _mask_supervision_for(variant: str) -> str:
    if variant in ("full", "no-feedback"):
        return "bce"
    if variant == "density-supervised":
        return "mse"
    return "none"


def run_full_method(benchmark, cfg: TrainConfig, variant: str = "full") -> RunResult:
    """The complete incremental protocol: bank rehearsal + distillation."""
    if variant not in M.VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    arch = M.ArchConfig.for_variant(variant)
    sup = _mask_supervision_for(variant)
    bank = SupportSampleBank(cfg.k_total)
    models, reports, histories, snapshots = [], [], [], []
    m = None
    for t, stage_data in enumerate(benchmark, start=1):
        if t == 1:
            m = M.build_initial(arch, seed=cfg.seed)
            teacher = None
        else:
            teacher = M.clone_frozen(m)
            m = M.expand(m, seed=cfg.seed)
        m, hist = train_stage(m, stage_data, bank, teacher, cfg,
                              seen_val=_seen_val(benchmark, t), mask_supervision=sup)
        if t == 1:
            update_bank(bank, m, stage_data, 0)
        update_bank(bank, m, stage_data, t)
        models.append(M.clone_frozen(m))
        reports.append(MET.evaluate_stage(m, benchmark, t))
        histories.append(hist)
        snapshots.append(bank.snapshot())
    return RunResult(method=f"full:{variant}" if variant != "full" else "full",
                     models=models, reports=reports, histories=histories,
                     bank=bank, bank_snapshots=snapshots)


def run_baseline_ft(benchmark, cfg: TrainConfig) -> RunResult:
    """Fine-tuning baseline: same expansion, no bank, no distillation."""
    arch = M.ArchConfig()
    models, reports, histories = [], [], []
    m = None
    for t, stage_data in enumerate(benchmark, start=1):
        m = M.build_initial(arch, seed=cfg.seed) if t == 1 else M.expand(m, seed=cfg.seed)
        m, hist = train_stage(m, stage_data, None, None, cfg,
                              seen_val=_seen_val(benchmark, t))
        models.append(M.clone_frozen(m))
        reports.append(MET.evaluate_stage(m, benchmark, t))
        histories.append(hist)
    return RunResult(method="ft", models=models, reports=reports,
                     histories=histories, bank=None)


def run_baseline_joint(benchmark, cfg: TrainConfig) -> RunResult:
    """Upper-bound baseline: all channels up front, one pass over all data."""
    arch = M.ArchConfig()
    k = len(benchmark)
    union = G.StageDataset(class_id=k)
    for ds in benchmark:
        union.train += ds.train
        union.val += ds.val
    m = M.build_initial(arch, seed=cfg.seed, n_classes=k)
    m, hist = train_stage(m, union, None, None, cfg, seen_val=union.val)
    report = MET.evaluate_stage(m, benchmark, k)
    return RunResult(method="joint", models=[M.clone_frozen(m)], reports=[report],
                     histories=[hist], bank=None)


def run_ablation_mask(benchmark, cfg: TrainConfig, variant: str) -> RunResult:
    """Mask-module ablations; 'full' is accepted for series completeness."""
    if variant not in M.VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    return run_full_method(benchmark, cfg, variant=variant)
