#!/usr/bin/env python3
"""Convert the UCI Parkinsons Telemonitoring file into the CSV layout `momogp train` expects.

Keeps the 16 voice measures as covariates and appends motor_UPDRS and
total_UPDRS as the two targets.

    python3 scripts/parkinsons_to_csv.py parkinsons_updrs.data parkinsons.csv
"""

import csv
import sys

INPUTS = [
    "Jitter(%)", "Jitter(Abs)", "Jitter:RAP", "Jitter:PPQ5", "Jitter:DDP",
    "Shimmer", "Shimmer(dB)", "Shimmer:APQ3", "Shimmer:APQ5", "Shimmer:APQ11",
    "Shimmer:DDA", "NHR", "HNR", "RPDE", "DFA", "PPE",
]
TARGETS = ["motor_UPDRS", "total_UPDRS"]


def main(src, dst):
    with open(src, newline="") as f:
        rows = list(csv.DictReader(f))
    with open(dst, "w", newline="") as f:
        out = csv.writer(f)
        out.writerow(INPUTS + TARGETS)
        for row in rows:
            out.writerow([row[c].strip() for c in INPUTS + TARGETS])
    print(f"wrote {len(rows)} rows to {dst}")


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    main(sys.argv[1], sys.argv[2])
