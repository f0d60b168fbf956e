"""Benchmark comparison grid: methods x seeds with a JSON result cache.

The forgetting and ablation comparisons need hours of single-core training,
so every (method, seed) cell is cached on disk under a directory named by a
hash of all parameters that feed the result. Anything that reads the grid
(the driver script, the test gate) resolves the same hash and sees the same
rows.
"""

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

from . import metrics as MET
from . import scenegen as G
from . import trainer as TR


@dataclass(frozen=True)
class GridSpec:
    """Everything that determines a cell's numbers, benchmark and schedule."""

    n_counting: int = 4
    train: int = 200
    val: int = 20
    test: int = 50
    image: int = 64
    bench_seed: int = 1234
    profile: str = "desk"
    epochs: int = 60
    batch_size: int = 8
    lr: float = 3e-4
    weight_decay: float = 5e-5
    lam: float = 0.15
    delta: float = 1e-3
    k_total: int = 150
    lr_decay_every: int = 20
    lr_decay_factor: float = 10.0

    @classmethod
    def benchmark_default(cls, profile: str = "desk", **overrides) -> "GridSpec":
        kw = dict(TR.PROFILES[profile])
        kw["profile"] = profile
        kw.update(overrides)
        return cls(**kw)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def grid_hash(spec: GridSpec) -> str:
    blob = json.dumps(spec.as_dict(), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def build_benchmark(spec: GridSpec):
    sizes = G.SplitSizes(train=spec.train, val=spec.val, test=spec.test)
    return G.make_benchmark(G.default_class_specs(spec.n_counting), sizes,
                            base_seed=spec.bench_seed,
                            H=spec.image, W=spec.image)


def train_config(spec: GridSpec, seed: int) -> TR.TrainConfig:
    return TR.TrainConfig(
        epochs=spec.epochs, batch_size=spec.batch_size, lr=spec.lr,
        weight_decay=spec.weight_decay, lam=spec.lam, delta=spec.delta,
        k_total=spec.k_total, seed=seed,
        lr_decay_every=spec.lr_decay_every,
        lr_decay_factor=spec.lr_decay_factor)


def cell_path(root: Path, method: str, seed: int) -> Path:
    return Path(root) / f"{method}_seed{seed}.json"


def _report_row(rep: MET.StageReport) -> dict:
    return {
        "stage": rep.stage,
        "agg_mae": rep.agg_mae,
        "agg_mse": rep.agg_mse,
        "agg_acc": rep.agg_acc,
        "per_class": [
            {"class_id": r.class_id, "n": r.n, "mae": r.mae,
             "mse": r.mse, "acc": r.acc}
            for r in rep.per_class
        ],
    }


def run_cell(spec: GridSpec, root: Path, method: str, seed: int) -> dict:
    """Train one method at one seed and persist its per-stage reports."""
    bench = build_benchmark(spec)
    cfg = train_config(spec, seed)
    t0 = time.time()
    if method == "full":
        res = TR.run_full_method(bench, cfg)
    elif method == "ft":
        res = TR.run_baseline_ft(bench, cfg)
    elif method == "joint":
        res = TR.run_baseline_joint(bench, cfg)
    elif method == "no-mask":
        res = TR.run_ablation_mask(bench, cfg, "no-mask")
    else:
        raise ValueError(f"unknown method {method!r}")
    row = {
        "method": method,
        "seed": seed,
        "wall_seconds": time.time() - t0,
        "stages": [_report_row(r) for r in res.reports],
    }
    out = cell_path(root, method, seed)
    tmp = out.with_suffix(".tmp")
    tmp.write_text(json.dumps(row, indent=2) + "\n")
    tmp.replace(out)
    return row


def load_cell(root: Path, method: str, seed: int) -> dict:
    return json.loads(cell_path(root, method, seed).read_text())


def _mean(xs):
    return sum(xs) / len(xs)


def summarize(root: Path, methods, seeds) -> dict:
    """Aggregate the grid into seed-averaged curves and the gate comparisons."""
    rows = {(m, s): load_cell(root, m, s) for m in methods for s in seeds}
    final_mae = {m: _mean([rows[m, s]["stages"][-1]["agg_mae"] for s in seeds])
                 for m in methods}
    curves = {}
    for m in methods:
        n_stages = len(rows[m, seeds[0]]["stages"])
        curves[m] = [_mean([rows[m, s]["stages"][t]["agg_mae"] for s in seeds])
                     for t in range(n_stages)]

    criteria = {}
    if "full" in final_mae and "ft" in final_mae:
        gap = (final_mae["ft"] - final_mae["full"]) / final_mae["ft"]
        criteria["forgetting_gap"] = {
            "full_mae": final_mae["full"], "ft_mae": final_mae["ft"],
            "relative_improvement": gap, "pass": bool(gap >= 0.20)}
    if "joint" in final_mae and "full" in final_mae:
        criteria["joint_bound"] = {
            "joint_mae": final_mae["joint"],
            "limit": 1.15 * final_mae["full"],
            "pass": bool(final_mae["joint"] <= 1.15 * final_mae["full"])}
    if "full" in methods:
        acc = _mean([rows["full", s]["stages"][-1]["agg_acc"] for s in seeds])
        criteria["classifier_acc"] = {"acc": acc, "pass": bool(acc > 0.90)}
    if "full" in final_mae and "no-mask" in final_mae:
        criteria["mask_ablation"] = {
            "full_mae": final_mae["full"],
            "no_mask_mae": final_mae["no-mask"],
            "pass": bool(final_mae["full"] <= 1.10 * final_mae["no-mask"])}

    return {
        "spec": json.loads((Path(root) / "grid.json").read_text())
        if (Path(root) / "grid.json").exists() else None,
        "seeds": list(seeds),
        "final_mae": final_mae,
        "mae_curve_by_stage": curves,
        "criteria": criteria,
    }
