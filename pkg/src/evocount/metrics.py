"""Counting metrics and per-stage evaluation reports.

MAE is the mean absolute count error; MSE keeps the counting literature's name
but is the root mean squared count error.  Aggregates pool all counted test
samples rather than averaging per-class means.  Background samples take part
in classifier accuracy but are excluded from pooled count aggregates, where
their identically-zero truth would deflate the error; their per-class row is
still reported.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from . import model as M
from . import tensor as T


@dataclass(frozen=True)
class CountPair:
    z: float
    zhat: float

    def __post_init__(self):
        if self.z < 0:
            raise ValueError("true count must be >= 0")


def mae(pairs) -> float:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("mae of an empty pair list")
    return sum(abs(p.z - p.zhat) for p in pairs) / len(pairs)


def mse(pairs) -> float:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("mse of an empty pair list")
    return math.sqrt(sum((p.z - p.zhat) ** 2 for p in pairs) / len(pairs))


@dataclass
class ClassResult:
    class_id: int
    n: int
    mae: float
    mse: float
    acc: float
    pairs: list[CountPair]


@dataclass
class StageReport:
    stage: int
    per_class: list[ClassResult]
    agg_mae: float
    agg_mse: float
    agg_acc: float

    def class_row(self, class_id: int) -> ClassResult | None:
        for r in self.per_class:
            if r.class_id == class_id:
                return r
        return None


def _test_samples_for_class(benchmark, c):
    stage_ds = benchmark[0] if c == 0 else benchmark[c - 1]
    return [s for s in stage_ds.test if s.class_id == c]


def _predict_batched(m, samples, batch=64):
    classes = np.empty(len(samples), dtype=np.int64)
    counts = np.empty(len(samples), dtype=np.float64)
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        imgs = T.Tensor(np.stack([s.image.data for s in chunk]))
        cls, cnt = M.predict_counts_batch(m, imgs)
        classes[i:i + len(chunk)] = cls
        counts[i:i + len(chunk)] = cnt
    return classes, counts


def evaluate_stage(m: M.ModelState, benchmark, t: int) -> StageReport:
    """Evaluate a stage-t model on the test splits of classes 0..t."""
    if m.t != t:
        raise ValueError(f"model is at stage {m.t}, asked to evaluate stage {t}")
    per_class = []
    pooled: list[CountPair] = []
    hits = 0
    total = 0
    for c in range(t + 1):
        samples = _test_samples_for_class(benchmark, c)
        if not samples:
            raise ValueError(f"no test samples for class {c}")
        pred_cls, pred_cnt = _predict_batched(m, samples)
        pairs = [CountPair(float(s.n_dots), float(z)) for s, z in zip(samples, pred_cnt)]
        correct = int((pred_cls == c).sum())
        per_class.append(ClassResult(class_id=c, n=len(samples), mae=mae(pairs),
                                     mse=mse(pairs), acc=correct / len(samples),
                                     pairs=pairs))
        hits += correct
        total += len(samples)
        if c > 0:
            pooled.extend(pairs)
    return StageReport(stage=t, per_class=per_class, agg_mae=mae(pooled),
                       agg_mse=mse(pooled), agg_acc=hits / total)


def forgetting_curve(reports, c: int):
    """(stage, MAE) of class c across every report that evaluated it."""
    curve = []
    for r in reports:
        row = r.class_row(c)
        if row is not None:
            curve.append((r.stage, row.mae))
    if not curve:
        raise ValueError(f"class {c} never evaluated")
    return curve


# ---------------------------------------------------------------------------
# persistence

REPORT_COLUMNS = ("stage", "class_id", "N", "MAE", "MSE", "cls_acc")


def write_report_csv(reports, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            for row in r.per_class:
                w.writerow([r.stage, row.class_id, row.n,
                            f"{row.mae:.17g}", f"{row.mse:.17g}", f"{row.acc:.17g}"])


def write_pairs_csv(reports, path):
    """Persist every (Z, Zhat) pair so all table values can be re-derived."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("stage", "class_id", "Z", "Zhat"))
        for r in reports:
            for row in r.per_class:
                for p in row.pairs:
                    w.writerow([r.stage, row.class_id, f"{p.z:.17g}", f"{p.zhat:.17g}"])


def read_pairs_csv(path):
    out = []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if tuple(header) != ("stage", "class_id", "Z", "Zhat"):
            raise ValueError(f"unexpected pairs header {header}")
        for stage, cid, z, zhat in rd:
            out.append((int(stage), int(cid), CountPair(float(z), float(zhat))))
    return out


def summary_grid(method_reports: dict[str, list[StageReport]]) -> dict:
    """method -> stage -> {MAE, MSE, acc} pooled over counting classes."""
    grid = {}
    for method, reports in method_reports.items():
        grid[method] = {str(r.stage): {"MAE": r.agg_mae, "MSE": r.agg_mse,
                                       "acc": r.agg_acc} for r in reports}
    return grid


def write_summary_json(method_reports, path):
    with open(path, "w") as fh:
        json.dump(summary_grid(method_reports), fh, indent=2, sort_keys=True)
