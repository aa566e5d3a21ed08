"""Numeric checks of the sufficiency-gap and generalization bounds, and the lambda sweep."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .data import LogisticBayes, SubgroupDataset, pool
from .errors import DataError, FamsError
from .fairness_metrics import ScoredDataset, accuracy, sufficiency_gap
from .numerics import SeededRng
from .stochastic_net import (
    BCE_CLAMP,
    GaussianWeightDist,
    _check_same_topology,
    bce_per_draw,
    kl_divergence,
    predict_mc,
    sample,
)

__all__ = [
    "BCE_BOUND",
    "BoundReport",
    "MissingOracleError",
    "SweepRow",
    "check_theorem1",
    "corollary1_optimization_term",
    "lambda_sweep",
    "sweep_to_csv",
    "theorem2_bound",
    "theorem2_terms",
]

# largest value the clamped BCE can take
BCE_BOUND = -math.log(BCE_CLAMP)


class MissingOracleError(FamsError, ValueError):
    """A bound needs the ground-truth subgroup Bayes predictor, which real data lacks."""


@dataclass
class BoundReport:
    """All bound quantities; fields left as ``None`` were not computed."""

    theorem1_lhs: float | None = None
    theorem1_rhs: float | None = None
    theorem1_tolerance: float | None = None
    theorem1_holds: bool | None = None
    corollary1_opt_term: float | None = None
    t2_empirical: float | None = None
    t2_kl_term: float | None = None
    t2_conf_term: float | None = None
    t2_bound: float | None = None
    t2_test_loss: float | None = None
    t2_holds: bool | None = None
    L: float | None = None
    L_consistent: bool | None = None
    delta: float | None = None
    m: int | None = None
    n_groups: int | None = None

    def merge(self, other: "BoundReport") -> "BoundReport":
        """Fields of ``other`` that were computed override this report's."""
        return replace(self, **{k: v for k, v in asdict(other).items() if v is not None})

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# --------------------------------------------------------- sufficiency-gap bound

def _scores(predictor, datasets: Sequence[SubgroupDataset], n_samples, rng) -> np.ndarray:
    """One fixed scoring function applied to every row.

    Stochastic predictors draw their weights once, so the same function is
    used on both sides of the bound.
    """
    if isinstance(predictor, GaussianWeightDist):
        X, _, _ = pool(datasets)
        return np.atleast_1d(predict_mc(predictor, X, n_samples or 5, rng or SeededRng(0)))
    if hasattr(predictor, "predict"):
        X, _, _ = pool(datasets)
        return np.atleast_1d(predictor.predict(X, n_samples, rng))
    if callable(predictor):
        return np.concatenate([np.asarray(predictor(d.features, d.group_id), dtype=np.float64)
                               for d in datasets])
    raise TypeError("predictor must be a GaussianWeightDist, have .predict(x), or be callable(x, group)")


def check_theorem1(predictor, test_sets: Sequence[SubgroupDataset],
                   bayes: LogisticBayes | Callable | None, bins: int = 10,
                   tolerance: float = 0.03, n_samples: int | None = None,
                   rng: SeededRng | None = None) -> BoundReport:
    """Compare the estimated sufficiency gap with 4 x mean_a E|f - bayes_a|.

    ``predictor`` may be a weight distribution, a trained predictor or any
    ``callable(x, group_id)``; ``bayes`` is called the same way.
    """
    if bayes is None:
        raise MissingOracleError("the sufficiency-gap bound needs a Bayes oracle (synthetic data only)")
    if len(test_sets) < 2:
        raise DataError("the sufficiency-gap bound needs at least two subgroups")
    scores = _scores(predictor, test_sets, n_samples, rng)
    _, y, _ = pool(test_sets)
    groups = np.concatenate([np.full(len(d), i) for i, d in enumerate(test_sets)])
    lhs = sufficiency_gap(ScoredDataset(scores, y, groups), bins).overall_gap
    per_group = []
    start = 0
    for d in test_sets:
        f = scores[start:start + len(d)]
        start += len(d)
        per_group.append(np.mean(np.abs(f - bayes(d.features, d.group_id))))
    rhs = 4.0 * float(np.mean(per_group))
    return BoundReport(theorem1_lhs=lhs, theorem1_rhs=rhs, theorem1_tolerance=tolerance,
                       theorem1_holds=bool(lhs <= rhs + tolerance), n_groups=len(test_sets))


# ----------------------------------------------------------- optimization term

def corollary1_optimization_term(q: GaussianWeightDist, subgroup_dists) -> float:
    """``(2 sqrt 2 / |A|) * sum_a sqrt(KL(Q_a || Q))`` with fitted subgroup distributions."""
    dists = list(subgroup_dists.values()) if isinstance(subgroup_dists, dict) else list(subgroup_dists)
    if not dists:
        raise ValueError("need at least one subgroup distribution")
    for d in dists:
        _check_same_topology(d, q)
    root_kl = sum(math.sqrt(max(kl_divergence(d, q), 0.0)) for d in dists)
    return 2.0 * math.sqrt(2.0) / len(dists) * root_kl


# -------------------------------------------------------- generalization bound

def theorem2_terms(empirical: float, kls: Sequence[float], m: int, L: float, delta: float):
    """The three right-hand terms ``(empirical, kl_term, conf_term)`` from raw inputs."""
    if L <= 0:
        raise ValueError("L must be > 0")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    if m < 1 or not kls:
        raise ValueError("need m >= 1 and at least one subgroup")
    n = len(kls)
    scale = math.sqrt(n * m)
    kl_term = L / scale * sum(math.sqrt(max(k, 0.0)) for k in kls)
    conf_term = L * math.sqrt(math.log(1.0 / delta) / (n * m))
    return float(empirical), kl_term, conf_term


def _mc_bce(dist: GaussianWeightDist, ds: SubgroupDataset, n_samples: int, rng: SeededRng) -> float:
    net = sample(dist, rng, n_draws=n_samples)
    return float(bce_per_draw(net, ds.features, ds.labels).mean())


def theorem2_bound(q: GaussianWeightDist, subgroup_dists: Sequence[GaussianWeightDist],
                   train_sets: Sequence[SubgroupDataset], test_sets: Sequence[SubgroupDataset] | None,
                   L: float | None = None, delta: float = 0.05, mc_samples: int = 5,
                   rng: SeededRng | None = None, truncate: bool = True) -> BoundReport:
    """Evaluate the generalization bound for fitted subgroup distributions.

    Groups of unequal size are truncated to the smallest size when
    ``truncate`` is set. ``L`` defaults to the largest clamped BCE; a smaller
    ``L`` is accepted but flagged through ``L_consistent``. The held-out side
    is the mean over groups of the MC expected BCE on ``test_sets``, clamped
    to at most ``L``.
    """
    if len(subgroup_dists) != len(train_sets):
        raise ValueError("one subgroup distribution per training set is required")
    if test_sets is not None and len(test_sets) != len(train_sets):
        raise ValueError("one test set per training set is required")
    L = BCE_BOUND if L is None else float(L)
    rng = rng or SeededRng(0)
    sizes = {len(d) for d in train_sets}
    if len(sizes) > 1 and not truncate:
        raise DataError(f"subgroups have unequal sizes {sorted(sizes)} and truncation is disabled")
    m = min(sizes)
    if m < 1:
        raise DataError("empty training subgroup")
    for d in subgroup_dists:
        _check_same_topology(d, q)

    emp, kls = [], []
    for i, (dist, ds) in enumerate(zip(subgroup_dists, train_sets)):
        emp.append(_mc_bce(dist, ds.subset(slice(0, m)), mc_samples, rng.child(0, i)))
        kls.append(kl_divergence(dist, q))
    empirical, kl_term, conf_term = theorem2_terms(float(np.mean(emp)), kls, m, L, delta)
    bound = empirical + kl_term + conf_term

    test_loss = holds = None
    if test_sets is not None:
        held = [min(_mc_bce(dist, ds, mc_samples, rng.child(1, i)), L)
                for i, (dist, ds) in enumerate(zip(subgroup_dists, test_sets))]
        test_loss = float(np.mean(held))
        holds = bool(test_loss <= bound)
    return BoundReport(t2_empirical=empirical, t2_kl_term=kl_term, t2_conf_term=conf_term,
                       t2_bound=bound, t2_test_loss=test_loss, t2_holds=holds, L=L,
                       L_consistent=bool(L >= BCE_BOUND - 1e-12), delta=delta, m=m,
                       n_groups=len(train_sets))


# ------------------------------------------------------------------- sweep

@dataclass(frozen=True)
class SweepRow:
    lam: float
    acc_mean: float
    acc_std: float
    gap_mean: float
    gap_std: float
    seeds: tuple


def lambda_sweep(template, lambdas: Sequence[float], train: Sequence[SubgroupDataset],
                 valid: Sequence[SubgroupDataset] | None, test: Sequence[SubgroupDataset],
                 seeds: Sequence[int] | None = None) -> list[SweepRow]:
    """Train FAMS once per (lambda, seed) with shared seeds across lambdas.

    Reports mean and population std of test accuracy and sufficiency gap.
    """
    from .trainers import train_fams

    if len(lambdas) < 3:
        raise ValueError("a lambda sweep needs at least three values")
    seeds = tuple(seeds) if seeds is not None else (template.seed,)
    rows = []
    for lam in lambdas:
        accs, gaps = [], []
        for s in seeds:
            pred = train_fams(replace(template, lam=float(lam), seed=int(s)), train, valid)
            scored = pred.score(test)
            accs.append(accuracy(scored.scores, scored.labels))
            gaps.append(sufficiency_gap(scored, template.bins).overall_gap)
        rows.append(SweepRow(float(lam), float(np.mean(accs)), float(np.std(accs)),
                             float(np.mean(gaps)), float(np.std(gaps)), seeds))
    return rows


def sweep_to_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lambda", "acc_mean", "acc_std", "gap_mean", "gap_std", "seeds"])
    for r in rows:
        w.writerow([repr(r.lam), repr(r.acc_mean), repr(r.acc_std), repr(r.gap_mean),
                    repr(r.gap_std), " ".join(map(str, r.seeds))])
    return buf.getvalue()
