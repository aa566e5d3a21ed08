"""Group fairness metrics on scored data: sufficiency gap, DP, EO, calibration.

Binning uses equal-width intervals on [0, 1]; a score equal to 1 falls in the
last bin. Subgroups are weighted uniformly in every aggregate.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

__all__ = [
    "BinTable",
    "ScoredDataset",
    "SufficiencyReport",
    "accuracy",
    "bin_edges",
    "calibration_curve",
    "dp_gap",
    "eo_gap",
    "sufficiency_gap",
    "tables_to_csv",
]

WEIGHTINGS = ("group", "global", "unweighted")


@dataclass
class ScoredDataset:
    scores: np.ndarray
    labels: np.ndarray
    groups: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.groups = np.asarray(self.groups)
        n = self.scores.shape[0]
        if self.scores.ndim != 1 or self.labels.shape != (n,) or self.groups.shape != (n,):
            raise DataError("scores, labels and groups must be 1-D of equal length")
        if n == 0:
            raise DataError("empty scored dataset")
        if np.any(~np.isfinite(self.scores)) or np.any((self.scores < 0) | (self.scores > 1)):
            raise DataError("scores must lie in [0, 1]")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise DataError("labels must be 0/1")

    def __len__(self) -> int:
        return self.scores.shape[0]

    @property
    def group_ids(self) -> list:
        return np.unique(self.groups).tolist()


@dataclass
class BinTable:
    """Per-bin mean score ``p``, label mean ``q`` and count ``n`` (NaN when empty)."""

    edges: np.ndarray
    p: np.ndarray
    q: np.ndarray
    n: np.ndarray
    group: object = None

    def rows(self):
        for i in range(len(self.n)):
            yield {
                "bin_lo": float(self.edges[i]),
                "bin_hi": float(self.edges[i + 1]),
                "p": None if self.n[i] == 0 else float(self.p[i]),
                "q": None if self.n[i] == 0 else float(self.q[i]),
                "n": int(self.n[i]),
                "group": "" if self.group is None else str(self.group),
            }


@dataclass
class SufficiencyReport:
    per_group_gap: dict
    overall_gap: float
    bin_count: int
    weighting: str = "group"
    empty_bin_policy: str = "nearest"
    tables: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {
            "overall_gap": self.overall_gap,
            "per_group_gap": {str(k): v for k, v in self.per_group_gap.items()},
            "bin_count": self.bin_count,
            "weighting": self.weighting,
            "empty_bin_policy": self.empty_bin_policy,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def bin_edges(bins: int) -> np.ndarray:
    if bins < 2:
        raise ValueError("bins must be >= 2")
    return np.linspace(0.0, 1.0, bins + 1)


def _bin_index(scores, bins):
    return np.minimum((scores * bins).astype(np.int64), bins - 1)


def _table(scores, labels, bins, group=None) -> BinTable:
    idx = _bin_index(scores, bins)
    n = np.bincount(idx, minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.bincount(idx, weights=scores, minlength=bins) / n
        q = np.bincount(idx, weights=labels, minlength=bins) / n
    return BinTable(bin_edges(bins), p, q, n, group)


def calibration_curve(data: ScoredDataset, bins: int = 10, group=None) -> BinTable:
    """Reliability table ``(p_i, q_i)`` globally or for a single subgroup."""
    bin_edges(bins)
    if group is None:
        return _table(data.scores, data.labels, bins)
    mask = data.groups == group
    if not np.any(mask):
        raise DataError(f"no rows for group {group!r}")
    return _table(data.scores[mask], data.labels[mask], bins, group)


def _nearest_nonempty(nonempty: np.ndarray, i: int) -> int:
    cand = np.flatnonzero(nonempty)
    return int(cand[np.argmin(np.abs(cand - i))])


def _group_value(glob: BinTable, grp: BinTable, i: int) -> float:
    """Group-level label mean evaluated at the global bin's mean score."""
    nonempty = grp.n > 0
    if not nonempty[i]:
        return float(grp.q[_nearest_nonempty(nonempty, i)])
    pa, qa = grp.p[i], grp.q[i]
    target = glob.p[i]
    if target == pa:
        return float(qa)
    # interpolate towards the adjacent group bin on the side of the target
    order = (i + 1, i - 1) if target > pa else (i - 1, i + 1)
    for j in order:
        if 0 <= j < len(grp.n) and nonempty[j] and grp.p[j] != pa:
            v = qa + (target - pa) / (grp.p[j] - pa) * (grp.q[j] - qa)
            return float(np.clip(v, 0.0, 1.0))
    return float(qa)


def sufficiency_gap(data: ScoredDataset, bins: int = 10, weighting: str = "group") -> SufficiencyReport:
    """Binned estimate of E_{A,X} |E[Y | f(X)] - E[Y | f(X), A]|.

    Per subgroup, the conditional label mean of each bin is linearly
    interpolated (between adjacent bins of that subgroup) to the global bin's
    mean score before taking the absolute difference. ``weighting`` selects the
    per-bin weights: ``"group"`` uses the subgroup's own bin mass (consistent
    for the expectation over X given A), ``"global"`` the pooled bin mass and
    ``"unweighted"`` a plain sum over bins.
    """
    if weighting not in WEIGHTINGS:
        raise ValueError(f"weighting must be one of {WEIGHTINGS}")
    bin_edges(bins)
    groups = data.group_ids
    if len(groups) < 2:
        raise DataError("sufficiency gap needs at least two subgroups")
    glob = _table(data.scores, data.labels, bins)
    occupied = np.flatnonzero(glob.n > 0)
    per = {}
    tables = {None: glob}
    for g in groups:
        grp = calibration_curve(data, bins, g)
        tables[g] = grp
        if weighting == "group":
            w = grp.n / grp.n.sum()
        elif weighting == "global":
            w = glob.n / glob.n.sum()
        else:
            w = np.ones(bins)
        gap = 0.0
        for i in occupied:
            if w[i] == 0:
                continue
            gap += w[i] * abs(glob.q[i] - _group_value(glob, grp, i))
        per[g] = float(gap)
    overall = float(np.mean(list(per.values())))
    return SufficiencyReport(per, overall, bins, weighting, "nearest", tables)


def dp_gap(data: ScoredDataset) -> float:
    """Mean over subgroups of |E[f] - E[f | A=a]|."""
    groups = data.group_ids
    if len(groups) < 2:
        raise DataError("demographic parity needs at least two subgroups")
    overall = data.scores.mean()
    return float(np.mean([abs(overall - data.scores[data.groups == g].mean()) for g in groups]))


def eo_gap(data: ScoredDataset) -> float:
    """Mean over y in {0, 1} of the subgroup-averaged |E[f | Y=y] - E[f | Y=y, A=a]|.

    A subgroup with no rows of class y is left out of that class's average.
    """
    groups = data.group_ids
    if len(groups) < 2:
        raise DataError("equalized odds needs at least two subgroups")
    per_class = []
    for y in (0.0, 1.0):
        cls = data.labels == y
        if not np.any(cls):
            raise DataError(f"label class {int(y)} is absent")
        ref = data.scores[cls].mean()
        diffs = [abs(ref - data.scores[cls & (data.groups == g)].mean())
                 for g in groups if np.any(cls & (data.groups == g))]
        per_class.append(np.mean(diffs))
    return float(np.mean(per_class))


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    return float(np.mean((np.asarray(scores) >= threshold) == (np.asarray(labels) == 1)))


def tables_to_csv(tables) -> str:
    """CSV text with header ``bin_lo,bin_hi,p,q,n,group`` for one or more tables."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["bin_lo", "bin_hi", "p", "q", "n", "group"], lineterminator="\n")
    w.writeheader()
    for t in tables:
        for r in t.rows():
            w.writerow({k: ("" if v is None else (repr(v) if isinstance(v, float) else v))
                        for k, v in r.items()})
    return buf.getvalue()
