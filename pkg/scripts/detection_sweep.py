"""Mean detection AUROC per method as the planting rate varies.

Each rate gets its own run directory; only gen..detect are executed.

    python scripts/detection_sweep.py --rates 0.1 0.2 0.3 0.5 --out runs/sweep
"""

import argparse
import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from steerkit.config import RunConfig
from steerkit.pipeline import run_stages


@dataclass
class SweepConfig:
    rates: list[float] = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.5])
    methods: list[str] = field(default_factory=lambda: ["diffmean", "pca", "lat", "probe", "reft_r1", "sae_a", "bow"])
    seeds: list[int] = field(default_factory=lambda: [0])
    n_concepts: int = 8
    out: str = "runs/sweep"


def mean_auroc(run_dir: Path) -> dict[str, float]:
    per: dict[str, list[float]] = {}
    with open(run_dir / "detect" / "detection.csv", newline="") as f:
        for row in csv.DictReader(f):
            per.setdefault(row["method"], []).append(float(row["auroc"]))
    return {m: float(np.mean(v)) for m, v in per.items()}


def sweep(sc: SweepConfig) -> list[dict]:
    rows = []
    for rate in sc.rates:
        for seed in sc.seeds:
            run_dir = Path(sc.out) / f"rate{rate:g}_seed{seed}"
            cfg = replace(
                RunConfig(), seed=seed, out=str(run_dir), plant_rate=rate, n_concepts=sc.n_concepts,
                methods=list(sc.methods), steer_methods=[],
            )
            run_stages(cfg, ["gen", "collect", "train", "detect"])
            for m, a in sorted(mean_auroc(run_dir).items()):
                rows.append({"plant_rate": rate, "seed": seed, "method": m, "mean_auroc": a})
                print(f"rate={rate:<5g} seed={seed} {m:>9s} {a:.3f}")
    return rows


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rates", type=float, nargs="+", default=SweepConfig().rates)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--methods", nargs="+", default=None)
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args()
    sc = SweepConfig(rates=args.rates, seeds=args.seeds, out=args.out)
    if args.methods:
        sc.methods = args.methods
    rows = sweep(sc)
    path = Path(sc.out) / "detection_sweep.csv"
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["plant_rate", "seed", "method", "mean_auroc"])
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
