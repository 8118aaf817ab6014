"""Run the full desk benchmark and print the summary table.

    python scripts/run_desk.py --config configs/desk.json --out runs/desk
"""

import argparse
import time
from dataclasses import replace
from pathlib import Path

from steerkit.config import RunConfig
from steerkit.pipeline import STAGES, run_stages


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=None)
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    cfg = RunConfig.load(args.config, seed=args.seed, out=args.out) if args.config else RunConfig(out=args.out)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    for stage in STAGES:
        t0 = time.perf_counter()
        run_stages(cfg, [stage], args.jobs)
        print(f"{stage:>8s}  {time.perf_counter() - t0:6.1f}s")
    print()
    print((Path(cfg.out) / "report" / "summary.md").read_text())


if __name__ == "__main__":
    main()
