"""Per-subgroup datasets: synthetic generators, CSV ingestion and round sampling."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import DataError
from .numerics import SeededRng

__all__ = [
    "ADULT_COLUMNS",
    "LogisticBayes",
    "SubgroupDataset",
    "SyntheticSpec",
    "TabularSchema",
    "adult_schema",
    "draw_with_replacement",
    "generate_synthetic",
    "load_tabular",
    "load_tabular_splits",
    "pool",
    "read_rows",
    "read_scores_csv",
    "round_indices",
    "sample_round",
]

log = logging.getLogger(__name__)


@dataclass
class SubgroupDataset:
    group_id: object
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.features.ndim != 2:
            raise DataError(f"group {self.group_id!r}: features must be 2-D")
        if self.labels.shape != (self.features.shape[0],):
            raise DataError(f"group {self.group_id!r}: {self.labels.shape[0]} labels for "
                            f"{self.features.shape[0]} rows")
        if not np.all(np.isfinite(self.features)):
            raise DataError(f"group {self.group_id!r}: non-finite features")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise DataError(f"group {self.group_id!r}: labels must be 0/1")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, idx) -> "SubgroupDataset":
        return SubgroupDataset(self.group_id, self.features[idx], self.labels[idx])


def pool(datasets: Sequence[SubgroupDataset]):
    """Stack datasets into ``(X, y, group_index)``; group index is list position."""
    if not datasets:
        raise DataError("no datasets to pool")
    X = np.concatenate([d.features for d in datasets])
    y = np.concatenate([d.labels for d in datasets])
    g = np.concatenate([np.full(len(d), i) for i, d in enumerate(datasets)])
    return X, y, g


# ---------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SyntheticSpec:
    """Logistic-linear subgroups with exactly known E[Y | X, A].

    ``samples_per_group`` is the training size m of every subgroup; validation
    and test splits default to m/3 each (a 60/20/20 split).
    """

    n_groups: int = 50
    input_dim: int = 10
    samples_per_group: int = 100
    group_similarity: float = 0.8
    weight_scale: float = 2.5
    bias_scale: float = 0.5
    valid_per_group: int | None = None
    test_per_group: int | None = None

    def __post_init__(self):
        if self.n_groups < 1 or self.input_dim < 1 or self.samples_per_group < 1:
            raise ValueError("n_groups, input_dim and samples_per_group must be positive")
        if not 0.0 <= self.group_similarity <= 1.0:
            raise ValueError("group_similarity must lie in [0, 1]")

    @property
    def split_sizes(self) -> tuple[int, int, int]:
        m = self.samples_per_group
        holdout = max(1, round(m / 3))
        v = self.valid_per_group if self.valid_per_group is not None else holdout
        t = self.test_per_group if self.test_per_group is not None else holdout
        return m, v, t


@dataclass
class LogisticBayes:
    """Ground-truth subgroup Bayes predictor ``sigmoid(x . beta_a + b_a)``."""

    betas: np.ndarray
    biases: np.ndarray
    group_ids: list = field(default_factory=list)

    def __post_init__(self):
        if not self.group_ids:
            self.group_ids = list(range(len(self.biases)))
        self._index = {g: i for i, g in enumerate(self.group_ids)}

    def __call__(self, x, a) -> np.ndarray:
        i = self._index[a]
        return expit(np.asarray(x, dtype=np.float64) @ self.betas[i] + self.biases[i])

    def sample(self, n_per_group: int, rng: SeededRng) -> list[SubgroupDataset]:
        """Fresh i.i.d. data from every subgroup."""
        out = []
        for i, g in enumerate(self.group_ids):
            r = rng.child(i)
            x = r.normal((n_per_group, self.betas.shape[1]))
            y = (r.uniform(n_per_group) < self(x, g)).astype(np.float64)
            out.append(SubgroupDataset(g, x, y))
        return out


def generate_synthetic(spec: SyntheticSpec, rng: SeededRng):
    """Return ``(train, valid, test, bayes)`` for a logistic-linear population."""
    s = spec.group_similarity
    prm = rng.child(0)
    d, G = spec.input_dim, spec.n_groups
    beta_shared = prm.normal(d) * spec.weight_scale / np.sqrt(d)
    b_shared = 0.0
    beta_rand = prm.normal((G, d)) * spec.weight_scale / np.sqrt(d)
    b_rand = prm.normal(G) * spec.bias_scale
    betas = s * beta_shared + (1.0 - s) * beta_rand
    biases = s * b_shared + (1.0 - s) * b_rand
    if s == 1.0:
        betas = np.tile(beta_shared, (G, 1))
        biases = np.full(G, b_shared)
    bayes = LogisticBayes(betas, biases)

    m, v, t = spec.split_sizes
    pooled = bayes.sample(m + v + t, rng.child(1))
    train = [ds.subset(slice(0, m)) for ds in pooled]
    valid = [ds.subset(slice(m, m + v)) for ds in pooled]
    test = [ds.subset(slice(m + v, m + v + t)) for ds in pooled]
    return train, valid, test, bayes


# ------------------------------------------------------------------ sampling

def round_indices(n_groups: int, k_groups: int, rng: SeededRng) -> np.ndarray:
    """``k_groups`` distinct subgroup positions, sorted."""
    if not 1 <= k_groups <= n_groups:
        raise ValueError(f"cannot sample {k_groups} of {n_groups} groups")
    return np.sort(rng.choice(n_groups, k_groups, replace=False))


def draw_with_replacement(ds: SubgroupDataset, m: int, rng: SeededRng) -> SubgroupDataset:
    if len(ds) == 0:
        raise DataError(f"group {ds.group_id!r} is empty")
    return ds.subset(rng.integers(0, len(ds), size=m))


def sample_round(datasets: Sequence[SubgroupDataset], k_groups: int, m_per_group: int,
                 rng: SeededRng) -> list[SubgroupDataset]:
    """Pick ``k_groups`` subgroups without replacement, then ``m_per_group``
    rows from each with replacement. Groups come back in ascending list order.

    The subgroup choice uses ``rng.child(0)`` and subgroup ``a`` draws its rows
    from ``rng.child(1, a, 0)``, so one group's batch does not depend on which
    other groups were picked.
    """
    if m_per_group < 1:
        raise ValueError("m_per_group must be >= 1")
    picked = round_indices(len(datasets), k_groups, rng.child(0))
    return [draw_with_replacement(datasets[a], m_per_group, rng.child(1, int(a), 0)) for a in picked]


# ------------------------------------------------------------------- tabular

ADULT_COLUMNS = (
    "age", "workclass", "fnlwgt", "education", "education-num", "marital-status",
    "occupation", "relationship", "race", "sex", "capital-gain", "capital-loss",
    "hours-per-week", "native-country", "income",
)


@dataclass(frozen=True)
class TabularSchema:
    """Column roles plus the encoding state fitted on a training split.

    ``adult_format`` reads the raw UCI files: no header, ``", "`` separators,
    ``?`` for missing values, ``|`` comment lines and a trailing ``.`` on test
    labels. Rows with missing values are dropped.
    """

    numeric: tuple[str, ...]
    categorical: tuple[str, ...]
    label: str
    positive_label: str
    sensitive: str
    columns: tuple[str, ...] | None = None
    adult_format: bool = False
    levels: dict | None = None
    means: dict | None = None
    stds: dict | None = None

    @property
    def fitted(self) -> bool:
        return self.levels is not None

    @property
    def feature_names(self) -> list[str]:
        if not self.fitted:
            raise DataError("schema has not been fitted")
        names = list(self.numeric)
        for c in self.categorical:
            names += [f"{c}={lvl}" for lvl in self.levels[c]]
        return names

    def fit(self, rows: list[dict]) -> "TabularSchema":
        if not rows:
            raise DataError("cannot fit a schema on zero rows")
        levels = {c: sorted({r[c] for r in rows}) for c in self.categorical}
        means, stds = {}, {}
        for c in self.numeric:
            v = np.array([float(r[c]) for r in rows])
            means[c] = float(v.mean())
            sd = float(v.std())
            stds[c] = sd if sd > 0 else 1.0
        return replace(self, levels=levels, means=means, stds=stds)

    def encode(self, rows: list[dict]) -> tuple[np.ndarray, np.ndarray, list]:
        if not self.fitted:
            raise DataError("schema has not been fitted")
        n = len(rows)
        cols = []
        for c in self.numeric:
            v = np.array([float(r[c]) for r in rows]) if n else np.zeros(0)
            cols.append(((v - self.means[c]) / self.stds[c])[:, None])
        for c in self.categorical:
            lv = self.levels[c]
            pos = {l: i for i, l in enumerate(lv)}
            block = np.zeros((n, len(lv)))
            unseen = 0
            for j, r in enumerate(rows):
                i = pos.get(r[c])
                if i is None:
                    unseen += 1
                else:
                    block[j, i] = 1.0
            if unseen:
                log.warning("column %s: %d rows with unseen levels encoded as all-zeros", c, unseen)
            cols.append(block)
        X = np.hstack(cols) if cols else np.zeros((n, 0))
        y = np.array([1.0 if r[self.label] == self.positive_label else 0.0 for r in rows])
        a = [r[self.sensitive] for r in rows]
        return X, y, a


def adult_schema() -> TabularSchema:
    return TabularSchema(
        numeric=("age", "fnlwgt", "education-num", "capital-gain", "capital-loss", "hours-per-week"),
        categorical=("workclass", "education", "marital-status", "occupation", "relationship",
                     "race", "native-country"),
        label="income",
        positive_label=">50K",
        sensitive="sex",
        columns=ADULT_COLUMNS,
        adult_format=True,
    )


def read_rows(path, schema: TabularSchema) -> list[dict]:
    """Parse a CSV into dicts of raw strings, validating every row."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    needed = set(schema.numeric) | set(schema.categorical) | {schema.label, schema.sensitive}
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, skipinitialspace=schema.adult_format)
        header = schema.columns
        if header is None:
            try:
                header = tuple(h.strip() for h in next(reader))
            except StopIteration:
                raise DataError(f"{path}: empty file") from None
        missing = needed - set(header)
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
        for rec in reader:
            line = reader.line_num
            if not rec or all(not f.strip() for f in rec):
                continue
            if schema.adult_format and rec[0].startswith("|"):
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}:{line}: expected {len(header)} fields, got {len(rec)}")
            row = {h: f.strip() for h, f in zip(header, rec)}
            if schema.adult_format:
                if any(row[c] == "?" for c in needed):
                    continue
                row[schema.label] = row[schema.label].rstrip(".")
            for c in schema.numeric:
                try:
                    v = float(row[c])
                except ValueError:
                    raise DataError(f"{path}:{line}: column {c!r} is not numeric: {row[c]!r}") from None
                if not np.isfinite(v):
                    raise DataError(f"{path}:{line}: column {c!r} is not finite")
            rows.append(row)
    return rows


def _by_group(rows, schema):
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[schema.sensitive], []).append(r)
    return dict(sorted(groups.items()))


def _subsample(grouped: dict, k: int | None, rng: SeededRng) -> dict:
    if k is None:
        return grouped
    out = {}
    for i, (g, rows) in enumerate(grouped.items()):
        if len(rows) < k:
            raise DataError(f"group {g!r} has {len(rows)} rows, fewer than the requested {k}")
        idx = np.sort(rng.child(i).choice(len(rows), k, replace=False))
        out[g] = [rows[j] for j in idx]
    return out


def _to_datasets(grouped: dict, schema: TabularSchema) -> list[SubgroupDataset]:
    out = []
    for g, rows in grouped.items():
        X, y, _ = schema.encode(rows)
        out.append(SubgroupDataset(g, X, y))
    return out


def load_tabular(path, schema: TabularSchema, subsample_per_group: int | None = None,
                 rng: SeededRng | None = None) -> tuple[list[SubgroupDataset], TabularSchema]:
    """Read ``path`` into one dataset per sensitive-attribute value.

    An unfitted schema is fitted on the (subsampled) rows read here; pass the
    returned schema back in to encode evaluation files with training stats.
    """
    grouped = _by_group(read_rows(path, schema), schema)
    if subsample_per_group is not None:
        grouped = _subsample(grouped, subsample_per_group, rng or SeededRng(0))
    if not schema.fitted:
        schema = schema.fit([r for rows in grouped.values() for r in rows])
    return _to_datasets(grouped, schema), schema


def load_tabular_splits(train_path, schema: TabularSchema, *, test_path=None,
                        train_per_group: int | None = None, valid_per_group: int | None = None,
                        test_per_group: int | None = None, rng: SeededRng | None = None):
    """Disjoint train/valid/test datasets with schema statistics from train only.

    Validation rows are drawn from ``train_path`` rows not used for training.
    Without ``test_path`` the test split is drawn from the remainder as well.
    """
    rng = rng or SeededRng(0)
    grouped = _by_group(read_rows(train_path, schema), schema)
    train_g, valid_g, rest_g = {}, {}, {}
    for i, (g, rows) in enumerate(grouped.items()):
        perm = rng.child(0, i).choice(len(rows), len(rows), replace=False)
        k_tr = train_per_group if train_per_group is not None else int(0.6 * len(rows))
        k_va = valid_per_group if valid_per_group is not None else int(0.2 * len(rows))
        if k_tr + k_va > len(rows):
            raise DataError(f"group {g!r}: {len(rows)} rows cannot fill train={k_tr} valid={k_va}")
        train_g[g] = [rows[j] for j in np.sort(perm[:k_tr])]
        valid_g[g] = [rows[j] for j in np.sort(perm[k_tr:k_tr + k_va])]
        rest_g[g] = [rows[j] for j in np.sort(perm[k_tr + k_va:])]
    schema = schema if schema.fitted else schema.fit([r for rows in train_g.values() for r in rows])
    if test_path is not None:
        test_g = _by_group(read_rows(test_path, schema), schema)
    else:
        test_g = rest_g
    if test_per_group is not None:
        test_g = _subsample(test_g, test_per_group, rng.child(1))
    return (_to_datasets(train_g, schema), _to_datasets(valid_g, schema),
            _to_datasets(test_g, schema), schema)


def read_scores_csv(path, score_column: str = "score", label_column: str = "label",
                    group_column: str = "group"):
    """Read precomputed ``(scores, labels, groups)`` from a headed CSV.

    Group values stay strings; scores must be numbers in [0, 1] and labels 0/1.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    scores, labels, groups = [], [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {score_column, label_column, group_column} - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: missing columns {sorted(missing)}")
        for rec in reader:
            line = reader.line_num
            try:
                s = float(rec[score_column])
                y = float(rec[label_column])
            except (TypeError, ValueError):
                raise DataError(f"{path}:{line}: score and label must be numeric") from None
            if not 0.0 <= s <= 1.0:
                raise DataError(f"{path}:{line}: score {s!r} outside [0, 1]")
            if y not in (0.0, 1.0):
                raise DataError(f"{path}:{line}: label must be 0 or 1")
            scores.append(s)
            labels.append(y)
            groups.append(rec[group_column])
    if not scores:
        raise DataError(f"{path}: no rows")
    return np.array(scores), np.array(labels), np.array(groups)
