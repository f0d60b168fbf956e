"""Command-line surface: dataset generation, training, evaluation, export.

Config files are flat ``key=value`` text with dotted namespaces, for example
``train.lr=3e-4``. Every key is validated before any work starts; unknown or
malformed keys abort with exit code 2. Data-level problems (bad checkpoint,
missing sample id, failed gradient table) exit with code 3. Each command
writes a manifest.json under --out listing every artifact it produced plus a
hash of its fully resolved inputs, and reruns with identical inputs are
bitwise reproducible.
"""

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

from . import eocd
from . import gradcheck as GC
from . import metrics as MET
from . import model as M
from . import scenegen as G
from . import tensor as T
from . import trainer as TR


class ConfigError(Exception):
    """Usage or configuration problem; maps to exit code 2."""


class DataError(Exception):
    """Inconsistent or missing data; maps to exit code 3."""


# ---------------------------------------------------------------------------
# config schema

def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


_TOP_KEYS = {"method": str, "profile": str, "seed": int, "out": str}
_BENCH_KEYS = {
    "bench.classes": int,
    "bench.train": int,
    "bench.val": int,
    "bench.test": int,
    "bench.image": int,
    "bench.seed": int,
}
_TRAIN_KEYS = {
    "train.epochs": int,
    "train.batch_size": int,
    "train.lr": float,
    "train.weight_decay": float,
    "train.lam": float,
    "train.delta": float,
    "train.k_total": int,
    "train.lr_decay_every": int,
    "train.lr_decay_factor": float,
    "train.gate_with_truth": _bool,
}
_ALL_KEYS = {**_TOP_KEYS, **_BENCH_KEYS, **_TRAIN_KEYS}

_METHODS = ("full", "ft", "joint")


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved run description: benchmark, schedule, method, output."""

    classes: int
    train_n: int
    val_n: int
    test_n: int
    image: int
    bench_seed: int
    method: str
    profile: str
    train: TR.TrainConfig
    out: Path | None

    def benchmark(self):
        sizes = G.SplitSizes(train=self.train_n, val=self.val_n, test=self.test_n)
        return G.make_benchmark(G.default_class_specs(self.classes), sizes,
                                base_seed=self.bench_seed,
                                H=self.image, W=self.image)

    def as_dict(self) -> dict:
        d = {
            "method": self.method,
            "profile": self.profile,
            "seed": self.train.seed,
            "bench.classes": self.classes,
            "bench.train": self.train_n,
            "bench.val": self.val_n,
            "bench.test": self.test_n,
            "bench.image": self.image,
            "bench.seed": self.bench_seed,
        }
        for f in dataclasses.fields(self.train):
            if f.name != "seed":
                d[f"train.{f.name}"] = getattr(self.train, f.name)
        return d


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {ln}: expected key=value, got {line!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ConfigError(f"config line {ln}: duplicate key {key!r}")
        out[key] = val
    return out


def _coerce(key: str, raw: str):
    try:
        return _ALL_KEYS[key](raw)
    except ValueError as e:
        raise ConfigError(f"config key {key}: {e}") from None


def resolve_config(file_map: dict[str, str], seed=None, out=None,
                   profile=None) -> ExperimentConfig:
    """Merge file keys over profile defaults, then command-line overrides."""
    unknown = sorted(set(file_map) - set(_ALL_KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    prof = profile or file_map.get("profile", "desk")
    if prof not in TR.PROFILES:
        raise ConfigError(f"unknown profile {prof!r} (choose from "
                          f"{sorted(TR.PROFILES)})")

    method = file_map.get("method", "full")
    if method not in _METHODS:
        variant = method.removeprefix("ablation:")
        if method == variant or variant not in M.VARIANTS:
            raise ConfigError(
                f"unknown method {method!r}; expected one of {_METHODS} "
                f"or ablation:<{'|'.join(M.VARIANTS)}>")

    if seed is None:
        seed = _coerce("seed", file_map["seed"]) if "seed" in file_map else 0
    if not (0 <= seed < 2 ** 64):
        raise ConfigError(f"seed {seed} outside the unsigned 64-bit range")

    kw = dict(TR.PROFILES[prof])
    for key in _TRAIN_KEYS:
        if key in file_map:
            kw[key.split(".", 1)[1]] = _coerce(key, file_map[key])
    kw["seed"] = seed
    try:
        train_cfg = TR.TrainConfig(**kw)
    except ValueError as e:
        raise ConfigError(str(e)) from None

    bench = {key.split(".", 1)[1]: _coerce(key, file_map[key])
             for key in _BENCH_KEYS if key in file_map}
    classes = bench.get("classes", 4)
    image = bench.get("image", 64)
    if not (1 <= classes <= 5):
        raise ConfigError(f"bench.classes must be in 1..5, got {classes}")
    if image < 32 or image % 4 != 0:
        raise ConfigError(f"bench.image must be >= 32 and divisible by 4, "
                          f"got {image}")
    for name in ("train", "val", "test"):
        if bench.get(name, 1) < 1:
            raise ConfigError(f"bench.{name} must be positive")

    out_path = out if out is not None else file_map.get("out")
    return ExperimentConfig(
        classes=classes,
        train_n=bench.get("train", 200),
        val_n=bench.get("val", 20),
        test_n=bench.get("test", 50),
        image=image,
        bench_seed=bench.get("seed", 1234),
        method=method,
        profile=prof,
        train=train_cfg,
        out=Path(out_path) if out_path is not None else None,
    )


def load_config(args) -> ExperimentConfig:
    file_map: dict[str, str] = {}
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        file_map = parse_config_text(path.read_text())
    return resolve_config(file_map, seed=args.seed, out=args.out,
                          profile=args.profile)


def config_hash(params: dict) -> str:
    blob = json.dumps(params, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# output plumbing

def _prepare_out(out: Path | None) -> Path:
    if out is None:
        raise ConfigError("--out is required for this command")
    out = Path(out)
    if not out.parent.exists():
        raise ConfigError(f"parent of output directory does not exist: "
                          f"{out.parent}")
    out.mkdir(exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, params: dict,
                    artifacts: list[str]) -> None:
    doc = {
        "command": command,
        "config_hash": config_hash(params),
        "config": params,
        "artifacts": sorted(artifacts),
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=2,
                                                  sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    cfg = load_config(args)
    out = _prepare_out(cfg.out)
    written = eocd.export_benchmark(cfg.benchmark(), out)
    _write_manifest(out, "gen-data", cfg.as_dict(), written)
    print(f"wrote {len(written)} files under {out}")
    return 0


def _dispatch_method(cfg: ExperimentConfig) -> TR.RunResult:
    bench = cfg.benchmark()
    if cfg.method == "full":
        return TR.run_full_method(bench, cfg.train)
    if cfg.method == "ft":
        return TR.run_baseline_ft(bench, cfg.train)
    if cfg.method == "joint":
        return TR.run_baseline_joint(bench, cfg.train)
    return TR.run_ablation_mask(bench, cfg.train,
                                cfg.method.removeprefix("ablation:"))


def cmd_train(args) -> int:
    cfg = load_config(args)
    out = _prepare_out(cfg.out)
    res = _dispatch_method(cfg)
    artifacts = []
    for i, m in enumerate(res.models):
        t = m.t
        ck = f"checkpoint_stage{t}.eocm1"
        eocd.write_checkpoint(out / ck, t,
                              {k: v.data for k, v in m.params.items()})
        artifacts.append(ck)
        hist = f"history_stage{t}.csv"
        TR.write_history_csv([res.histories[i]], out / hist)
        artifacts.append(hist)
        if res.bank_snapshots:
            bank = f"bank_stage{t}.json"
            (out / bank).write_text(
                json.dumps(res.bank_snapshots[i], indent=2,
                           sort_keys=True) + "\n")
            artifacts.append(bank)
    _write_manifest(out, "train", cfg.as_dict(), artifacts)
    final = res.reports[-1]
    print(f"method={res.method} stages={len(res.models)} "
          f"final MAE={final.agg_mae:.4f} acc={final.agg_acc:.3f}")
    return 0


def _load_model(ckpt_path: str) -> M.ModelState:
    path = Path(ckpt_path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    try:
        stage, arrays = eocd.read_checkpoint(path)
        return M.state_from_arrays(stage, arrays)
    except ValueError as e:
        raise DataError(str(e)) from None


def _load_benchmark_dir(root: str):
    try:
        return eocd.import_benchmark(root)
    except (ValueError, OSError) as e:
        raise DataError(str(e)) from None


def cmd_eval(args) -> int:
    m = _load_model(args.ckpt)
    bench = _load_benchmark_dir(args.data)
    if m.t > len(bench):
        raise DataError(f"checkpoint stage {m.t} exceeds the {len(bench)} "
                        f"classes in {args.data}")
    out = _prepare_out(Path(args.out) if args.out else None)
    try:
        report = MET.evaluate_stage(m, bench, m.t)
    except ValueError as e:
        raise DataError(str(e)) from None
    MET.write_report_csv([report], out / "report.csv")
    MET.write_pairs_csv([report], out / "pairs.csv")
    doc = {
        "stage": report.stage,
        "agg": {"mae": report.agg_mae, "mse": report.agg_mse,
                "acc": report.agg_acc},
        "per_class": [
            {"class_id": r.class_id, "n": r.n, "mae": r.mae, "mse": r.mse,
             "acc": r.acc} for r in report.per_class
        ],
    }
    (out / "report.json").write_text(json.dumps(doc, indent=2) + "\n")
    params = {"checkpoint": str(args.ckpt), "dataset": str(args.data)}
    _write_manifest(out, "eval", params,
                    ["report.csv", "report.json", "pairs.csv"])
    print(f"stage {report.stage}: MAE={report.agg_mae:.4f} "
          f"MSE={report.agg_mse:.4f} acc={report.agg_acc:.3f}")
    return 0


def cmd_export_maps(args) -> int:
    m = _load_model(args.ckpt)
    out = _prepare_out(Path(args.out) if args.out else None)
    artifacts = []
    lines = []
    for sid in args.ids:
        try:
            sample = eocd.load_sample(args.data, sid)
        except (ValueError, OSError) as e:
            raise DataError(str(e)) from None
        with T.no_grad():
            fwd = M.forward(m, sample.image)
            c, dens = M.select_density(fwd)
        count = float(dens.data.sum())
        tag = sid.replace("/", "_")
        den_name = f"density_{tag}.eocd1"
        eocd.write_tensor(out / den_name, dens.data[0])
        artifacts.append(den_name)
        if fwd.mask_prob is not None:
            mask_name = f"mask_{tag}.eocd1"
            eocd.write_tensor(out / mask_name, fwd.mask_prob.data[0])
            artifacts.append(mask_name)
        lines.append(f"{sid},{c},{count:.17g}")
    (out / "predictions.txt").write_text("\n".join(lines) + "\n")
    artifacts.append("predictions.txt")
    params = {"checkpoint": str(args.ckpt), "dataset": str(args.data),
              "ids": list(args.ids)}
    _write_manifest(out, "export-maps", params, artifacts)
    print(f"exported {len(args.ids)} samples to {out}")
    return 0


def cmd_grad_check(args) -> int:
    rows = GC.run_suite()
    width = max(len(r.name) for r in rows)
    for r in rows:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:<{width}s}  {r.max_err:11.3e}  {status}")
    if all(r.passed for r in rows):
        print("all gradients verified")
        return 0
    print("gradient check FAILED", file=sys.stderr)
    return 3


def cmd_memory_sweep(args) -> int:
    cfg = load_config(args)
    try:
        sizes = [int(s) for s in str(args.sizes).split(",") if s != ""]
    except ValueError:
        raise ConfigError(f"bad --sizes value {args.sizes!r}") from None
    if not sizes:
        raise ConfigError("--sizes must name at least one bank capacity")
    if any(k < 1 for k in sizes):
        raise ConfigError("bank capacities must be positive")
    out = _prepare_out(cfg.out)
    bench = cfg.benchmark()
    rows = []
    for k in sizes:
        cfg_k = dataclasses.replace(cfg.train, k_total=k)
        res = TR.run_full_method(bench, cfg_k)
        final = res.reports[-1]
        rows.append((k, cfg_k.seed, final.agg_mae, final.agg_mse))
        print(f"k_total={k}: final MAE={final.agg_mae:.4f} "
              f"MSE={final.agg_mse:.4f}")
    with open(out / "memory_sweep.csv", "w") as fh:
        fh.write("k_total,seed,final_mae,final_mse\n")
        for k, seed, mae, mse in rows:
            fh.write(f"{k},{seed},{mae:.17g},{mse:.17g}\n")
    params = cfg.as_dict()
    params["sizes"] = sizes
    _write_manifest(out, "memory-sweep", params, ["memory_sweep.csv"])
    return 0


# ---------------------------------------------------------------------------
# argument wiring

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH",
                        help="flat key=value config file")
    common.add_argument("--seed", type=int, default=None, metavar="U64",
                        help="training seed override")
    common.add_argument("--out", default=None, metavar="DIR",
                        help="output directory")
    common.add_argument("--profile", choices=sorted(TR.PROFILES), default=None,
                        help="schedule profile override")

    ap = argparse.ArgumentParser(
        prog="evocount",
        description="incremental multi-class counting experiments")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common],
                       help="materialize the benchmark to disk")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", parents=[common],
                       help="run the configured method end to end")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", parents=[common],
                       help="evaluate a checkpoint on an exported dataset")
    p.add_argument("--ckpt", required=True, metavar="PATH")
    p.add_argument("--data", required=True, metavar="DIR")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("export-maps", parents=[common],
                       help="dump predicted density/mask maps for sample ids")
    p.add_argument("--ckpt", required=True, metavar="PATH")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("ids", nargs="+", metavar="s<stage>/<split>/<idx>")
    p.set_defaults(fn=cmd_export_maps)

    p = sub.add_parser("grad-check", parents=[common],
                       help="verify every op and the composite model")
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("memory-sweep", parents=[common],
                       help="final-stage error as a function of bank capacity")
    p.add_argument("--sizes", default="50,100,150,200",
                   help="comma-separated bank capacities")
    p.set_defaults(fn=cmd_memory_sweep)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
