"""Print how the learned augmentation hyper-parameters move during pretraining.

    python scripts/summarize_trajectories.py runs/desk/trajectories.csv --every 20
"""

import argparse
import csv


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("path")
    ap.add_argument("--every", type=int, default=20, help="print one row per this many steps")
    args = ap.parse_args()

    with open(args.path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise SystemExit("no rows")
    cols = [c for c in rows[0] if c != "step"]
    print("step    " + "  ".join(f"{c:>9s}" for c in cols))
    for i, row in enumerate(rows):
        if i % args.every == 0 or i == len(rows) - 1:
            print(f"{int(row['step']):<6d}  " + "  ".join(f"{float(row[c]):9.4f}" for c in cols))


if __name__ == "__main__":
    main()
