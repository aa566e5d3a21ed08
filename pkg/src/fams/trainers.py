"""FAMS bilevel training and the ERM / SNN / GroupDRO baselines.

Random streams are keyed by ``(epoch, subgroup index, step)`` so that the
lower-level solves of one round are independent of the order in which they
run; with ``workers > 1`` they are executed on a thread pool and produce the
same result as the sequential schedule.
"""
from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .data import SubgroupDataset, draw_with_replacement, pool, round_indices
from .errors import ConfigError, DataError, TrainingError
from .fairness_metrics import ScoredDataset, accuracy, sufficiency_gap
from .numerics import SeededRng
from .objectives import LowerLevelLoss, lower_level_grad, upper_level_grad, upper_level_loss
from .stochastic_net import (
    BCE_CLAMP,
    GaussianWeightDist,
    MlpTopology,
    backward_bce,
    bce_per_draw,
    forward,
    init_dist,
    point_dist,
    predict_mc,
    sample,
    softplus,
    weight_grad,
)

__all__ = [
    "Adam",
    "BilevelConfig",
    "PriorPreconditioned",
    "Sgd",
    "TrainedPredictor",
    "group_dro_update",
    "fit_posteriors",
    "history_to_csv",
    "make_optimizer",
    "solve_lower",
    "solve_lower_batch",
    "train",
    "train_erm",
    "train_fams",
    "train_group_dro",
    "train_snn",
    "update_upper",
]

log = logging.getLogger(__name__)

# stream tags under the trainer seed
_INIT, _ROUND, _EVAL, _PREDICT, _POSTERIOR = 0, 1, 2, 3, 4
METHODS = ("fams", "erm", "snn", "group_dro")


@dataclass
class BilevelConfig:
    lam: float = 0.4
    epochs: int = 100
    subgroups_per_round: int = 20
    samples_per_subgroup: int = 50
    lower_steps: int = 20
    lower_lr: float = 0.1
    upper_steps: int = 20
    upper_lr: float = 0.5
    mc_samples: int = 5
    seed: int = 0
    topology: MlpTopology = field(default_factory=lambda: MlpTopology((10, 16, 16, 16, 16, 1)))
    early_stop_patience: int = 0
    init_scale: float = 0.2
    momentum: float = 0.0
    lower_optimizer: str = "precond"
    upper_optimizer: str = "natural"
    batch_size: int = 64
    dro_eta: float = 0.1
    eval_mc_samples: int = 5
    bins: int = 10
    workers: int = 1

    def validate(self, n_groups: int | None = None) -> "BilevelConfig":
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        for name in ("lower_lr", "upper_lr", "init_scale"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("epochs", "samples_per_subgroup", "mc_samples", "batch_size", "eval_mc_samples"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lower_steps < 0 or self.upper_steps < 0 or self.early_stop_patience < 0:
            raise ConfigError("step counts and patience must be >= 0")
        if self.lower_optimizer not in ("sgd", "adam", "precond"):
            raise ConfigError("lower_optimizer must be 'sgd', 'adam' or 'precond'")
        if self.upper_optimizer not in ("sgd", "adam", "natural"):
            raise ConfigError("upper_optimizer must be 'sgd', 'adam' or 'natural'")
        if self.subgroups_per_round < 1:
            raise ConfigError("subgroups_per_round must be >= 1")
        if n_groups is not None and self.subgroups_per_round > n_groups:
            raise ConfigError(f"subgroups_per_round={self.subgroups_per_round} exceeds the "
                              f"{n_groups} available subgroups")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["topology"] = self.topology.to_dict()
        return d


# ---------------------------------------------------------------- optimisers

class Sgd:
    """Plain SGD with optional heavy-ball momentum, updating arrays in place."""

    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr, self.momentum = lr, momentum
        self._vel = None

    def step(self, params, grads):
        if self.momentum == 0.0:
            for p, g in zip(params, grads):
                p -= self.lr * g
            return
        if self._vel is None:
            self._vel = [np.zeros_like(p) for p in params]
        for p, g, v in zip(params, grads, self._vel):
            v *= self.momentum
            v += g
            p -= self.lr * v


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self._m = self._v = None
        self._t = 0

    def step(self, params, grads):
        b1, b2 = self.betas
        if self._m is None:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        self._t += 1
        c1, c2 = 1 - b1 ** self._t, 1 - b2 ** self._t
        for p, g, m, v in zip(params, grads, self._m, self._v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class PriorPreconditioned:
    """SGD for the lower level, scaled per coordinate by the inverse of
    ``lam * curvature(KL) + 1 / lr``.

    Coordinates dominated by the prior term take a Newton-like step on it and
    cannot overshoot however large ``lam`` is; with ``lam = 0`` this is plain
    SGD with step ``lr``.
    """

    def __init__(self, lr: float, lam: float, prior_sigma: np.ndarray):
        self.lr, self.lam = lr, lam
        self.inv_s2 = 1.0 / prior_sigma ** 2

    def step(self, params, grads):
        theta, rho = params
        g_theta, g_rho = grads
        base = 1.0 / self.lr
        theta -= g_theta / (self.lam * self.inv_s2 + base)
        sig = softplus(rho)
        curv_rho = self.lam * (self.inv_s2 + 1.0 / sig ** 2) * expit(rho) ** 2
        rho -= g_rho / (curv_rho + base)


def make_optimizer(kind: str, lr: float, momentum: float = 0.0, lam: float = 0.0,
                   prior_sigma: np.ndarray | None = None):
    if kind == "precond" and lam > 0 and prior_sigma is not None:
        return PriorPreconditioned(lr, lam, prior_sigma)
    if kind == "precond":
        # no prior term to precondition (baselines, or lam = 0)
        return Sgd(lr, momentum)
    if kind in ("sgd", "natural"):
        return Sgd(lr, momentum)
    if kind == "adam":
        return Adam(lr)
    raise ConfigError(f"unknown optimizer {kind!r}")


# ----------------------------------------------------------------- predictor

@dataclass
class TrainedPredictor:
    kind: str
    dist: GaussianWeightDist
    history: list = field(default_factory=list)
    config: BilevelConfig | None = None
    # FAMS only: subgroup posteriors of the last round (by subgroup index)
    # and the prior right after that round's upper update
    posteriors: dict = field(default_factory=dict)
    final_prior: GaussianWeightDist | None = None

    @property
    def deterministic(self) -> bool:
        return self.kind in ("erm", "group_dro")

    def predict(self, x, n_samples: int | None = None, rng: SeededRng | None = None) -> np.ndarray:
        """Scores for ``x``; stochastic predictors average ``n_samples`` draws."""
        if self.deterministic:
            return forward(sample(self.dist, None, noise=np.zeros(self.dist.n_params)), x)
        cfg = self.config or BilevelConfig()
        n = n_samples or cfg.eval_mc_samples
        return predict_mc(self.dist, x, n, rng or SeededRng(cfg.seed).child(_PREDICT))

    def score(self, datasets: Sequence[SubgroupDataset], n_samples: int | None = None,
              rng: SeededRng | None = None) -> ScoredDataset:
        X, y, _ = pool(datasets)
        groups = np.concatenate([np.full(len(d), d.group_id, dtype=object) for d in datasets])
        s = np.atleast_1d(self.predict(X, n_samples, rng))
        return ScoredDataset(s, y, _homogeneous(groups))


def _homogeneous(groups: np.ndarray) -> np.ndarray:
    try:
        return np.array(groups.tolist())
    except (TypeError, ValueError):
        return groups.astype(str)


def history_to_csv(history: list[dict], extra: dict | None = None) -> str:
    if not history:
        return ""
    keys = list((extra or {}).keys()) + list(history[0].keys())
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    for rec in history:
        row = dict(extra or {})
        row.update({k: (repr(v) if isinstance(v, float) else v) for k, v in rec.items()})
        w.writerow(row)
    return buf.getvalue()


# ------------------------------------------------------------------- helpers

def _check_data(train: Sequence[SubgroupDataset]):
    if not train:
        raise DataError("need at least one subgroup")
    for d in train:
        if len(d) == 0:
            raise DataError(f"subgroup {d.group_id!r} is empty")


def _finite(value: float, what: str, **ctx):
    if not np.isfinite(value):
        where = ", ".join(f"{k}={v}" for k, v in ctx.items())
        raise TrainingError(f"non-finite {what} ({where})")


def _params(dist: GaussianWeightDist):
    return [dist.theta, dist.rho]


class _Validator:
    """Pooled validation BCE / accuracy / sufficiency gap with early stopping."""

    def __init__(self, valid, cfg: BilevelConfig, rng: SeededRng):
        self.valid = [d for d in (valid or []) if len(d) > 0]
        self.cfg = cfg
        self.rng = rng
        self.best = np.inf
        self.best_state = None
        self.best_epoch = -1
        self.stale = 0

    def evaluate(self, dist: GaussianWeightDist, deterministic: bool) -> dict:
        if not self.valid:
            return {}
        X, y, g = pool(self.valid)
        if deterministic:
            s = forward(sample(dist, None, noise=np.zeros(dist.n_params)), X)
        else:
            s = predict_mc(dist, X, self.cfg.eval_mc_samples, self.rng)
        s = np.atleast_1d(s)
        sc = np.clip(s, BCE_CLAMP, 1 - BCE_CLAMP)
        out = {
            "valid_bce": float(-np.mean(y * np.log(sc) + (1 - y) * np.log(1 - sc))),
            "valid_acc": accuracy(s, y),
        }
        if len(self.valid) >= 2:
            out["valid_gap"] = sufficiency_gap(ScoredDataset(s, y, g), self.cfg.bins).overall_gap
        return out

    def update(self, epoch: int, metrics: dict, dist: GaussianWeightDist) -> bool:
        """Track the best state; return True when training should stop."""
        if not metrics:
            self.best_state, self.best_epoch = dist.copy(), epoch
            return False
        if metrics["valid_bce"] < self.best:
            self.best = metrics["valid_bce"]
            self.best_state, self.best_epoch = dist.copy(), epoch
            self.stale = 0
        else:
            self.stale += 1
        patience = self.cfg.early_stop_patience
        return patience > 0 and self.stale >= patience


# ---------------------------------------------------------------------- FAMS

def solve_lower(q: GaussianWeightDist, batch: SubgroupDataset, cfg: BilevelConfig,
                rng: SeededRng, context: dict | None = None):
    """Warm-start ``Q_a`` at ``q`` and run ``lower_steps`` stochastic steps.

    Returns the fitted distribution and the loss record of the last step.
    """
    q_a = q.copy()
    opt = make_optimizer(cfg.lower_optimizer, cfg.lower_lr, cfg.momentum, cfg.lam, q.sigma)
    loss = None
    for step in range(cfg.lower_steps):
        loss, g = lower_level_grad(q_a, q, batch, cfg.lam, cfg.mc_samples, rng.child(step))
        _finite(loss.total, "lower-level loss", step=step, **(context or {}))
        opt.step(_params(q_a), [g.d_theta, g.d_rho])
    if not (np.all(np.isfinite(q_a.theta)) and np.all(np.isfinite(q_a.rho))):
        raise TrainingError(f"non-finite lower-level parameters ({context})")
    return q_a, loss


def solve_lower_batch(q: GaussianWeightDist, batches: Sequence[SubgroupDataset],
                      cfg: BilevelConfig, rngs: Sequence[SeededRng], context: dict | None = None):
    """``solve_lower`` for several equally sized batches at once.

    Every subgroup keeps its own noise stream and optimiser state (all
    optimisers act elementwise), so the result matches independent calls.
    """
    G = len(batches)
    d = q.n_params
    S = cfg.mc_samples
    theta = np.tile(q.theta, (G, 1))
    rho = np.tile(q.rho, (G, 1))
    X = np.stack([b.features for b in batches])
    Y = np.stack([b.labels for b in batches])
    m = X.shape[1]
    xs = np.broadcast_to(X[:, None], (G, S) + X.shape[1:]).reshape(G * S, m, -1)
    ys = np.broadcast_to(Y[:, None], (G, S, m)).reshape(G * S, m)
    s_prior = q.sigma
    s2 = s_prior ** 2
    opt = make_optimizer(cfg.lower_optimizer, cfg.lower_lr, cfg.momentum, cfg.lam, s_prior)
    data = kl = np.zeros(G)
    for step in range(cfg.lower_steps):
        eps = np.stack([r.child(step).normal((S, d)) for r in rngs])
        sig = softplus(rho)
        w = (theta[:, None, :] + sig[:, None, :] * eps).reshape(G * S, d)
        gw, loss = weight_grad(q.topology, w, xs, ys)
        gw = gw.reshape(G, S, d)
        g_theta = gw.mean(axis=1)
        g_rho = (gw * eps).mean(axis=1) * expit(rho)
        data = loss.reshape(G, S).mean(axis=1)
        diff = theta - q.theta
        ratio = (sig / s_prior) ** 2
        kl = 0.5 * np.sum(ratio + diff * diff / s2 - 1.0 - np.log(ratio), axis=1)
        if cfg.lam > 0:
            g_theta = g_theta + cfg.lam * diff / s2
            g_rho = g_rho + cfg.lam * (sig / s2 - 1.0 / sig) * expit(rho)
        total = data + cfg.lam * kl
        if not np.all(np.isfinite(total)):
            bad = int(np.flatnonzero(~np.isfinite(total))[0])
            raise TrainingError(f"non-finite lower-level loss (step={step}, batch={bad}, {context})")
        opt.step([theta, rho], [g_theta, g_rho])
    if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(rho))):
        raise TrainingError(f"non-finite lower-level parameters ({context})")
    dists = [GaussianWeightDist(q.topology, theta[i], rho[i]) for i in range(G)]
    losses = [LowerLevelLoss(float(data[i]), float(kl[i]), cfg.lam) for i in range(G)]
    if cfg.lower_steps == 0:
        losses = [None] * G
    return dists, losses


def fit_posteriors(q: GaussianWeightDist, datasets: Sequence[SubgroupDataset],
                   cfg: BilevelConfig) -> list[GaussianWeightDist]:
    """Fit one lower-level distribution per subgroup on its full data, prior ``q``.

    Streams are keyed by subgroup position under a dedicated tag, so the
    result does not depend on the training history.
    """
    root = SeededRng(cfg.seed).child(_POSTERIOR)
    rngs = [root.child(i) for i in range(len(datasets))]
    if len({len(d) for d in datasets}) == 1:
        return solve_lower_batch(q, datasets, cfg, rngs, {"stage": "posterior"})[0]
    return [solve_lower(q, d, cfg, r, {"stage": "posterior", "group": i})[0]
            for i, (d, r) in enumerate(zip(datasets, rngs))]


def update_upper(q: GaussianWeightDist, posteriors, cfg: BilevelConfig) -> GaussianWeightDist:
    """Run ``upper_steps`` gradient steps on the average KL, posteriors fixed.

    ``upper_optimizer="natural"`` is SGD preconditioned by the inverse Fisher
    information of the Gaussian (``sigma^2`` for the mean, ``sigma^2 / 2`` for
    the scale, mapped through softplus), which makes the step size independent
    of the current scale.
    """
    q = q.copy()
    opt = make_optimizer(cfg.upper_optimizer, cfg.upper_lr, cfg.momentum)
    for _ in range(cfg.upper_steps):
        g = upper_level_grad(posteriors, q)
        if cfg.upper_optimizer == "natural":
            s2 = q.sigma ** 2
            opt.step(_params(q), [g.d_theta * s2, g.d_rho * s2 / (2.0 * expit(q.rho) ** 2)])
        else:
            opt.step(_params(q), [g.d_theta, g.d_rho])
    return q


def train_fams(config: BilevelConfig, train: Sequence[SubgroupDataset],
               valid: Sequence[SubgroupDataset] | None = None,
               init: GaussianWeightDist | None = None) -> TrainedPredictor:
    """Alternate per-subgroup lower-level fits and the upper-level KL update."""
    _check_data(train)
    cfg = config.validate(len(train))
    root = SeededRng(cfg.seed)
    q = init.copy() if init is not None else init_dist(cfg.topology, root.child(_INIT), cfg.init_scale)
    validator = _Validator(valid, cfg, root.child(_EVAL))
    history = []
    posteriors: dict = {}
    pool_exec = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    chunk = -(-cfg.subgroups_per_round // max(1, cfg.workers))

    try:
        for epoch in range(cfg.epochs):
            r = root.child(_ROUND, epoch)
            idx = round_indices(len(train), cfg.subgroups_per_round, r.child(0))

            rngs = [r.child(1, int(a)) for a in idx]
            batches = [draw_with_replacement(train[a], cfg.samples_per_subgroup, ra.child(0))
                       for a, ra in zip(idx, rngs)]
            fits = [(idx[i:i + chunk], batches[i:i + chunk], [ra.child(1) for ra in rngs[i:i + chunk]])
                    for i in range(0, len(idx), chunk)]

            def fit(job, q=q, epoch=epoch):
                ids, bs, rs = job
                return solve_lower_batch(q, bs, cfg, rs, {"epoch": epoch, "groups": list(map(int, ids))})

            parts = list(pool_exec.map(fit, fits)) if pool_exec else [fit(j) for j in fits]
            dists = [dd for part in parts for dd in part[0]]
            results = list(zip(dists, [ll for part in parts for ll in part[1]]))
            posteriors = {int(a): res[0] for a, res in zip(idx, results)}
            losses = [res[1] for res in results if res[1] is not None]

            before = upper_level_loss(posteriors, q).mean_kl
            q = update_upper(q, posteriors, cfg)
            after = upper_level_loss(posteriors, q).mean_kl
            _finite(after, "upper-level loss", epoch=epoch)

            rec = {
                "epoch": epoch,
                "lower_data": float(np.mean([l.data_term for l in losses])) if losses else float("nan"),
                "lower_kl": float(np.mean([l.kl_term for l in losses])) if losses else float("nan"),
                "lower_total": float(np.mean([l.total for l in losses])) if losses else float("nan"),
                "upper_before": before,
                "upper_after": after,
            }
            metrics = validator.evaluate(q, deterministic=False)
            rec.update(metrics)
            history.append(rec)
            if validator.update(epoch, metrics, q):
                log.info("early stop at epoch %d (best %d)", epoch, validator.best_epoch)
                break
    finally:
        if pool_exec:
            pool_exec.shutdown()

    final_prior = q
    best = validator.best_state if validator.best_state is not None else q
    return TrainedPredictor("fams", best, history, cfg, posteriors, final_prior)


# ----------------------------------------------------------------- baselines

def train_erm(config: BilevelConfig, pooled_train: Sequence[SubgroupDataset],
              pooled_valid: Sequence[SubgroupDataset] | None = None) -> TrainedPredictor:
    """Deterministic MLP fit by minibatch SGD on the pooled BCE, ignoring groups."""
    _check_data(pooled_train)
    cfg = config.validate()
    root = SeededRng(cfg.seed)
    q = point_dist(cfg.topology, init_dist(cfg.topology, root.child(_INIT), cfg.init_scale).theta)
    zero = np.zeros(q.n_params)
    X, y, _ = pool(pooled_train)
    opt = make_optimizer(cfg.lower_optimizer, cfg.lower_lr, cfg.momentum)
    validator = _Validator(pooled_valid, cfg, root.child(_EVAL))
    history = []
    for epoch in range(cfg.epochs):
        perm = root.child(_ROUND, epoch).choice(len(y), len(y), replace=False)
        losses = []
        for start in range(0, len(y), cfg.batch_size):
            b = perm[start:start + cfg.batch_size]
            net = sample(q, None, noise=zero)
            losses.append(float(bce_per_draw(net, X[b], y[b])[0]) * len(b))
            g = backward_bce(net, X[b], y[b])
            opt.step([q.theta], [g.d_theta])
        rec = {"epoch": epoch, "train_bce": sum(losses) / len(y)}
        _finite(rec["train_bce"], "training loss", epoch=epoch)
        metrics = validator.evaluate(q, deterministic=True)
        rec.update(metrics)
        history.append(rec)
        if validator.update(epoch, metrics, q):
            break
    best = validator.best_state if validator.best_state is not None else q
    return TrainedPredictor("erm", best, history, cfg)


def train_snn(config: BilevelConfig, train: Sequence[SubgroupDataset],
              valid: Sequence[SubgroupDataset] | None = None,
              freeze_sigma: bool = False) -> TrainedPredictor:
    """Single Gaussian weight distribution fit on the subgroup-averaged BCE."""
    _check_data(train)
    cfg = config.validate(len(train))
    root = SeededRng(cfg.seed)
    q = init_dist(cfg.topology, root.child(_INIT), cfg.init_scale)
    opt = make_optimizer(cfg.lower_optimizer, cfg.lower_lr, cfg.momentum)
    validator = _Validator(valid, cfg, root.child(_EVAL))
    history = []
    for epoch in range(cfg.epochs):
        r = root.child(_ROUND, epoch)
        idx = round_indices(len(train), cfg.subgroups_per_round, r.child(0))
        batches = [draw_with_replacement(train[a], cfg.samples_per_subgroup, r.child(1, int(a))) for a in idx]
        losses = []
        for step in range(cfg.lower_steps):
            net = sample(q, r.child(2, step), n_draws=cfg.mc_samples)
            gt, gr, tot = np.zeros(q.n_params), np.zeros(q.n_params), 0.0
            for b in batches:
                g = backward_bce(net, b.features, b.labels)
                gt += g.d_theta
                gr += g.d_rho
                tot += float(bce_per_draw(net, b.features, b.labels).mean())
            losses.append(tot / len(batches))
            _finite(losses[-1], "training loss", epoch=epoch, step=step)
            opt.step(_params(q), [gt / len(batches), 0 * gr if freeze_sigma else gr / len(batches)])
        rec = {"epoch": epoch, "train_bce": float(np.mean(losses)) if losses else float("nan")}
        metrics = validator.evaluate(q, deterministic=False)
        rec.update(metrics)
        history.append(rec)
        if validator.update(epoch, metrics, q):
            break
    best = validator.best_state if validator.best_state is not None else q
    return TrainedPredictor("snn", best, history, cfg)


def group_dro_update(weights, losses, eta: float, idx=None) -> np.ndarray:
    """Exponentiated-gradient step ``u_a <- u_a exp(eta L_a)``, renormalised.

    ``idx`` lists which subgroups ``losses`` refer to; the others keep their
    unnormalised weight.
    """
    u = np.array(weights, dtype=np.float64)
    idx = np.arange(len(u)) if idx is None else np.asarray(idx)
    losses = np.asarray(losses, dtype=np.float64)
    # shift by the max for overflow safety; it cancels in the normalisation
    logu = np.log(u)
    logu[idx] += eta * losses
    logu -= logu.max()
    u = np.exp(logu)
    return u / u.sum()


def train_group_dro(config: BilevelConfig, train: Sequence[SubgroupDataset],
                    valid: Sequence[SubgroupDataset] | None = None) -> TrainedPredictor:
    """Deterministic MLP trained on the DRO-reweighted subgroup losses."""
    _check_data(train)
    cfg = config.validate(len(train))
    root = SeededRng(cfg.seed)
    q = point_dist(cfg.topology, init_dist(cfg.topology, root.child(_INIT), cfg.init_scale).theta)
    zero = np.zeros(q.n_params)
    u = np.full(len(train), 1.0 / len(train))
    opt = make_optimizer(cfg.lower_optimizer, cfg.lower_lr, cfg.momentum)
    validator = _Validator(valid, cfg, root.child(_EVAL))
    history = []
    for epoch in range(cfg.epochs):
        r = root.child(_ROUND, epoch)
        idx = round_indices(len(train), cfg.subgroups_per_round, r.child(0))
        batches = [draw_with_replacement(train[a], cfg.samples_per_subgroup, r.child(1, int(a))) for a in idx]
        losses = []
        for step in range(cfg.lower_steps):
            net = sample(q, None, noise=zero)
            group_losses = np.array([bce_per_draw(net, b.features, b.labels)[0] for b in batches])
            _finite(float(group_losses.sum()), "training loss", epoch=epoch, step=step)
            u = group_dro_update(u, group_losses, cfg.dro_eta, idx)
            wts = u[idx] / u[idx].sum()
            grad = np.zeros(q.n_params)
            for wa, b in zip(wts, batches):
                grad += wa * backward_bce(net, b.features, b.labels).d_theta
            opt.step([q.theta], [grad])
            losses.append(float(wts @ group_losses))
        rec = {"epoch": epoch, "train_bce": float(np.mean(losses)) if losses else float("nan"),
               "max_group_weight": float(u.max())}
        metrics = validator.evaluate(q, deterministic=True)
        rec.update(metrics)
        history.append(rec)
        if validator.update(epoch, metrics, q):
            break
    best = validator.best_state if validator.best_state is not None else q
    return TrainedPredictor("group_dro", best, history, cfg)


def train(method: str, config: BilevelConfig, train_sets, valid_sets=None) -> TrainedPredictor:
    """Dispatch on ``method`` (one of ``fams``, ``erm``, ``snn``, ``group_dro``)."""
    if method == "fams":
        return train_fams(config, train_sets, valid_sets)
    if method == "erm":
        return train_erm(config, train_sets, valid_sets)
    if method == "snn":
        return train_snn(config, train_sets, valid_sets)
    if method == "group_dro":
        return train_group_dro(config, train_sets, valid_sets)
    raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
