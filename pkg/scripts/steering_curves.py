"""Per-factor mean judge subscores for every steered method in a finished run.

    python scripts/steering_curves.py runs/desk
"""

import argparse
import csv
import json
from pathlib import Path

import numpy as np


def curves(run_dir: Path, split: str | None = None) -> list[dict]:
    groups: dict[tuple[str, float], list[dict]] = {}
    with open(run_dir / "steer" / "generations.jsonl") as f:
        for line in f:
            r = json.loads(line)
            if r["error"] or (split and r["split"] != split):
                continue
            groups.setdefault((r["method"], r["factor"]), []).append(r)
    out = []
    for (method, factor), rs in sorted(groups.items()):
        out.append({
            "method": method,
            "factor": factor,
            **{k: float(np.mean([r[k] for r in rs])) for k in ("concept", "instruct", "fluency", "overall")},
            "n": len(rs),
        })
    return out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("run_dir", type=Path)
    ap.add_argument("--split", choices=["selection", "holdout"], default=None)
    args = ap.parse_args()
    rows = curves(args.run_dir, args.split)
    path = args.run_dir / "report" / "steering_curves.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(f"{'method':>9s} {'factor':>6s} {'concept':>7s} {'instr':>6s} {'fluency':>7s} {'overall':>7s}")
    for r in rows:
        print(f"{r['method']:>9s} {r['factor']:6.2f} {r['concept']:7.2f} {r['instruct']:6.2f} {r['fluency']:7.2f} {r['overall']:7.2f}")
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
