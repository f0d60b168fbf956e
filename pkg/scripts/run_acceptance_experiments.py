#!/usr/bin/env python3
"""Train the benchmark comparison grid used by the acceptance gate.

Each (method, seed) cell runs end to end on the shared synthetic benchmark
and drops a JSON row under a cache directory keyed by a hash of every
parameter feeding the result. Finished cells are skipped on rerun, so the
grid resumes cleanly and can be split across invocations or worker
processes. A summary.json with the aggregate comparisons is rewritten
whenever all requested cells are present.
"""

import argparse
import concurrent.futures
import json
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from evocount import metrics as MET  # noqa: E402
from evocount import scenegen as G  # noqa: E402
from evocount import trainer as TR  # noqa: E402
from evocount.experiments import (  # noqa: E402
    GridSpec,
    cell_path,
    grid_hash,
    run_cell,
    summarize,
)

METHODS = ("full", "ft", "joint", "no-mask")


def parse_args(argv):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "runs" / "acceptance"))
    ap.add_argument("--seeds", default="0,1,2", help="comma-separated training seeds")
    ap.add_argument("--methods", default=",".join(METHODS))
    ap.add_argument("--epochs", type=int, default=None,
                    help="override the profile epoch count (smoke runs)")
    ap.add_argument("--profile", default="desk", choices=sorted(TR.PROFILES))
    ap.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    return ap.parse_args(argv)


def main(argv=None):
    args = parse_args(argv)
    seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    methods = [m for m in args.methods.split(",") if m != ""]
    for m in methods:
        if m not in METHODS:
            raise SystemExit(f"unknown method {m!r}; choose from {METHODS}")

    overrides = {} if args.epochs is None else {"epochs": args.epochs}
    spec = GridSpec.benchmark_default(profile=args.profile, **overrides)
    root = Path(args.out) / grid_hash(spec)
    root.mkdir(parents=True, exist_ok=True)
    (root / "grid.json").write_text(json.dumps(spec.as_dict(), indent=2) + "\n")

    todo = [(m, s) for m in methods for s in seeds
            if not cell_path(root, m, s).exists()]
    done = len(methods) * len(seeds) - len(todo)
    print(f"grid {grid_hash(spec)}: {done} cached, {len(todo)} to run", flush=True)

    if args.jobs > 1 and len(todo) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as ex:
            futs = {ex.submit(run_cell, spec, root, m, s): (m, s) for m, s in todo}
            for fut in concurrent.futures.as_completed(futs):
                m, s = futs[fut]
                row = fut.result()
                print(f"done {m} seed={s} in {row['wall_seconds']:.0f}s "
                      f"final MAE {row['stages'][-1]['agg_mae']:.3f}", flush=True)
    else:
        for m, s in todo:
            t0 = time.time()
            print(f"running {m} seed={s} ...", flush=True)
            row = run_cell(spec, root, m, s)
            print(f"done {m} seed={s} in {time.time() - t0:.0f}s "
                  f"final MAE {row['stages'][-1]['agg_mae']:.3f}", flush=True)

    if all(cell_path(root, m, s).exists() for m in methods for s in seeds):
        summary = summarize(root, methods, seeds)
        (root / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        print("summary:", json.dumps(summary["criteria"], indent=2), flush=True)
    else:
        print("grid incomplete; summary not written", flush=True)


if __name__ == "__main__":
    main()
