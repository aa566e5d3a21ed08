"""Losses of the bilevel program and their gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import SubgroupDataset
from .errors import DataError
from .numerics import SeededRng
from .stochastic_net import (
    GaussianWeightDist,
    GradPair,
    SampledNetwork,
    backward_bce,
    bce_per_draw,
    kl_divergence,
    kl_gradients,
    sample,
    softplus_inv,
    _check_same_topology,
)

__all__ = [
    "LowerLevelLoss",
    "UpperLevelLoss",
    "closed_form_upper_solution",
    "empirical_bce",
    "lower_level_grad",
    "lower_level_loss",
    "upper_level_grad",
    "upper_level_loss",
]


@dataclass(frozen=True)
class LowerLevelLoss:
    data_term: float
    kl_term: float
    lam: float

    @property
    def total(self) -> float:
        return self.data_term + self.lam * self.kl_term


@dataclass(frozen=True)
class UpperLevelLoss:
    per_group_kl: dict
    mean_kl: float


def empirical_bce(net: SampledNetwork, batch: SubgroupDataset) -> float:
    """Mean clamped BCE of ``net`` on ``batch``; averaged over draws if stacked."""
    if len(batch) == 0:
        raise DataError(f"empty batch for group {batch.group_id!r}")
    return float(bce_per_draw(net, batch.features, batch.labels).mean())


def _check_lambda(lam, mc_samples):
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")


def lower_level_loss(q_a: GaussianWeightDist, q: GaussianWeightDist, batch: SubgroupDataset,
                     lam: float, mc_samples: int, rng: SeededRng) -> LowerLevelLoss:
    _check_lambda(lam, mc_samples)
    net = sample(q_a, rng, n_draws=mc_samples)
    return LowerLevelLoss(empirical_bce(net, batch), kl_divergence(q_a, q), lam)


def lower_level_grad(q_a: GaussianWeightDist, q: GaussianWeightDist, batch: SubgroupDataset,
                     lam: float, mc_samples: int, rng: SeededRng) -> tuple[LowerLevelLoss, GradPair]:
    """Loss and its stochastic gradient w.r.t. ``q_a``, from one set of draws."""
    _check_lambda(lam, mc_samples)
    if len(batch) == 0:
        raise DataError(f"empty batch for group {batch.group_id!r}")
    net = sample(q_a, rng, n_draws=mc_samples)
    data = float(bce_per_draw(net, batch.features, batch.labels).mean())
    g = backward_bce(net, batch.features, batch.labels)
    kl = kl_divergence(q_a, q)
    if lam > 0:
        g = g + kl_gradients(q_a, q)[0].scale(lam)
    return LowerLevelLoss(data, kl, lam), g


def _keyed(dists) -> dict:
    if isinstance(dists, Mapping):
        return dict(dists)
    return dict(enumerate(dists))


def upper_level_loss(dists: Sequence[GaussianWeightDist] | Mapping, q: GaussianWeightDist) -> UpperLevelLoss:
    """Average KL from each subgroup distribution to ``q``."""
    keyed = _keyed(dists)
    if not keyed:
        raise ValueError("need at least one subgroup distribution")
    per = {k: kl_divergence(d, q) for k, d in keyed.items()}
    return UpperLevelLoss(per, float(np.mean(list(per.values()))))


def upper_level_grad(dists, q: GaussianWeightDist) -> GradPair:
    keyed = _keyed(dists)
    if not keyed:
        raise ValueError("need at least one subgroup distribution")
    total = None
    for d in keyed.values():
        g = kl_gradients(d, q)[1]
        total = g if total is None else total + g
    return total.scale(1.0 / len(keyed))


def closed_form_upper_solution(dists) -> GaussianWeightDist:
    """Exact minimiser of the average KL over factorised Gaussians.

    Per coordinate the optimum matches the first two moments of the equal
    mixture of the inputs.
    """
    keyed = list(_keyed(dists).values())
    if not keyed:
        raise ValueError("need at least one subgroup distribution")
    for d in keyed[1:]:
        _check_same_topology(keyed[0], d)
    thetas = np.stack([d.theta for d in keyed])
    sig2 = np.stack([d.sigma ** 2 for d in keyed])
    theta = thetas.mean(axis=0)
    var = (sig2 + (thetas - theta) ** 2).mean(axis=0)
    return GaussianWeightDist(keyed[0].topology, theta, softplus_inv(np.sqrt(var)))
