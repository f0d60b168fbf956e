#!/usr/bin/env python3
"""Two-stage learning-rate probe on one training seed of the gate benchmark.

Measures how the stage-2 classifier transition behaves at candidate desk
learning rates without paying for the full four-stage grid.
"""

import dataclasses
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from evocount import experiments as EXP  # noqa: E402
from evocount import trainer as TR  # noqa: E402


def main():
    seed = int(sys.argv[1]) if len(sys.argv) > 1 else 2
    lrs = [float(v) for v in sys.argv[2].split(",")] if len(sys.argv) > 2 \
        else [2e-4, 1e-4]
    spec = EXP.GridSpec.benchmark_default(profile="desk")
    bench = EXP.build_benchmark(spec)[:2]
    for lr in lrs:
        cfg = dataclasses.replace(EXP.train_config(spec, seed), lr=lr)
        t0 = time.time()
        res = TR.run_full_method(bench, cfg)
        for rep in res.reports:
            per = {c.class_id: round(c.acc, 2) for c in rep.per_class}
            print(f"seed={seed} lr={lr:g} stage {rep.stage}: "
                  f"mae {rep.agg_mae:.2f} acc {rep.agg_acc:.2f} {per}",
                  flush=True)
        print(f"seed={seed} lr={lr:g} took {time.time() - t0:.0f}s",
              flush=True)


if __name__ == "__main__":
    main()
