"""Audit precomputed scores for group sufficiency, demographic parity and equalized odds.

No model is trained: the script reads a CSV with score, label and group
columns and prints each metric plus per-group calibration.

    python demos/audit_scores.py [scores.csv]
"""
import sys
from pathlib import Path

import numpy as np

from fams.data import read_scores_csv
from fams.fairness_metrics import ScoredDataset, accuracy, calibration_curve, dp_gap, eo_gap, sufficiency_gap

path = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parents[1] / "configs" / "example_scores.csv"
scores, labels, groups = read_scores_csv(path)
data = ScoredDataset(scores, labels, groups)

report = sufficiency_gap(data, bins=10)
print(f"{len(scores)} rows, groups {list(data.group_ids)}")
print(f"accuracy          {accuracy(scores, labels):.4f}")
print(f"sufficiency gap   {report.overall_gap:.4f}")
for g, v in report.per_group_gap.items():
    print(f"  group {g}: {v:.4f}")
print(f"DP gap            {dp_gap(data):.4f}")
print(f"EO gap            {eo_gap(data):.4f}")

# reliability table: mean score p against observed positive rate q per bin
print("\nbin        p      q      n   (all groups)")
table = calibration_curve(data, bins=10)
for row in table.rows():
    if row["n"]:
        print(f"[{row['bin_lo']:.1f},{row['bin_hi']:.1f})  {row['p']:.3f}  {row['q']:.3f}  {row['n']:4d}")
print(f"max |p - q| over occupied bins: {np.nanmax(np.abs(table.p - table.q)):.3f}")
