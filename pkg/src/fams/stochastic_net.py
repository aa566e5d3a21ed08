"""Factorised Gaussian distributions over the weights of a small MLP.

A network with topology ``[n_in, h_1, ..., 1]`` is stored as one flat weight
vector. Each layer contributes its weight matrix (row-major, shape
``(fan_out, fan_in)``) followed by its bias vector. A distribution over such
vectors keeps a mean ``theta`` and a raw scale ``rho`` with
``sigma = softplus(rho)``.

Every routine works on a *stack* of weight draws of shape ``(S, d)`` so that
Monte-Carlo averages are vectorised; single draws are handled as ``S = 1``
and squeezed on the way out.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import ShapeError
from .numerics import SeededRng

__all__ = [
    "BCE_CLAMP",
    "GaussianWeightDist",
    "GradPair",
    "MlpTopology",
    "SampledNetwork",
    "backward_bce",
    "forward",
    "init_dist",
    "kl_divergence",
    "kl_gradients",
    "load_dist",
    "point_dist",
    "predict_mc",
    "sample",
    "save_dist",
    "softplus",
    "softplus_inv",
]

BCE_CLAMP = 1e-7
# sigma used to embed deterministic networks in the Gaussian representation
POINT_SIGMA = 1e-9
_ACTIVATIONS = ("relu", "tanh")


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(s):
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0):
        raise ValueError("softplus_inv is defined for positive values only")
    return s + np.log(-np.expm1(-s))


@dataclass(frozen=True)
class MlpTopology:
    layer_sizes: tuple[int, ...]
    activation: str = "relu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ShapeError("topology needs at least an input and an output layer")
        if sizes[-1] != 1:
            raise ShapeError("the output layer must have exactly one unit")
        if min(sizes) < 1:
            raise ShapeError("layer sizes must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_params(self) -> int:
        s = self.layer_sizes
        return sum((s[i] + 1) * s[i + 1] for i in range(len(s) - 1))

    def slices(self):
        """Yield ``(weight_slice, bias_slice, fan_in, fan_out)`` per layer."""
        off = 0
        s = self.layer_sizes
        for fan_in, fan_out in zip(s[:-1], s[1:]):
            w = slice(off, off + fan_in * fan_out)
            off += fan_in * fan_out
            b = slice(off, off + fan_out)
            off += fan_out
            yield w, b, fan_in, fan_out

    def to_dict(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "activation": self.activation}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpTopology":
        return cls(tuple(d["layer_sizes"]), d.get("activation", "relu"))


@dataclass
class GaussianWeightDist:
    topology: MlpTopology
    theta: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).copy()
        self.rho = np.asarray(self.rho, dtype=np.float64).copy()
        d = self.topology.n_params
        if self.theta.shape != (d,) or self.rho.shape != (d,):
            raise ShapeError(
                f"expected parameter vectors of length {d}, got "
                f"{self.theta.shape} and {self.rho.shape}"
            )
        if not (np.all(np.isfinite(self.theta)) and np.all(np.isfinite(self.rho))):
            raise ValueError("theta and rho must be finite")

    @property
    def sigma(self) -> np.ndarray:
        return softplus(self.rho)

    @property
    def n_params(self) -> int:
        return self.topology.n_params

    def copy(self) -> "GaussianWeightDist":
        return GaussianWeightDist(self.topology, self.theta, self.rho)

    def to_dict(self) -> dict:
        return {
            "topology": self.topology.to_dict(),
            "theta": self.theta.tolist(),
            "rho": self.rho.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianWeightDist":
        return cls(MlpTopology.from_dict(d["topology"]), np.array(d["theta"]), np.array(d["rho"]))


@dataclass
class SampledNetwork:
    """Concrete weight draw(s) ``w = theta + sigma * eps`` with the noise kept."""

    weights: np.ndarray
    noise: np.ndarray
    source: GaussianWeightDist = field(repr=False)

    @property
    def topology(self) -> MlpTopology:
        return self.source.topology

    @property
    def n_draws(self) -> int:
        return 1 if self.weights.ndim == 1 else self.weights.shape[0]


@dataclass
class GradPair:
    d_theta: np.ndarray
    d_rho: np.ndarray

    def __add__(self, other: "GradPair") -> "GradPair":
        return GradPair(self.d_theta + other.d_theta, self.d_rho + other.d_rho)

    def scale(self, c: float) -> "GradPair":
        return GradPair(c * self.d_theta, c * self.d_rho)


def _check_same_topology(a: GaussianWeightDist, b: GaussianWeightDist):
    if a.topology != b.topology:
        raise ShapeError(f"topology mismatch: {a.topology} vs {b.topology}")


def init_dist(topology: MlpTopology, rng: SeededRng, init_scale: float = 0.05) -> GaussianWeightDist:
    """He-style random means, zero biases and a uniform scale ``init_scale``."""
    if init_scale <= 0:
        raise ValueError("init_scale must be positive")
    theta = np.zeros(topology.n_params)
    for w, _, fan_in, fan_out in topology.slices():
        theta[w] = rng.normal(fan_in * fan_out) * np.sqrt(2.0 / fan_in)
    rho = np.full(topology.n_params, float(softplus_inv(init_scale)))
    return GaussianWeightDist(topology, theta, rho)


def point_dist(topology: MlpTopology, theta) -> GaussianWeightDist:
    """Deterministic network embedded as a Gaussian with negligible scale."""
    rho = np.full(topology.n_params, float(softplus_inv(POINT_SIGMA)))
    return GaussianWeightDist(topology, theta, rho)


def sample(dist: GaussianWeightDist, rng: SeededRng, n_draws: int | None = None,
           noise: np.ndarray | None = None) -> SampledNetwork:
    """Reparameterised draw. ``n_draws=None`` gives a single 1-D weight vector.

    ``noise`` injects a fixed epsilon instead of drawing one.
    """
    shape = (dist.n_params,) if n_draws is None else (n_draws, dist.n_params)
    if noise is None:
        eps = rng.normal(shape)
    else:
        eps = np.asarray(noise, dtype=np.float64)
        if eps.shape != shape:
            raise ShapeError(f"noise has shape {eps.shape}, expected {shape}")
    return SampledNetwork(dist.theta + dist.sigma * eps, eps, dist)


def _as_batch(topology: MlpTopology, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != topology.input_dim:
        raise ShapeError(f"expected inputs with {topology.input_dim} features, got shape {x.shape}")
    return x, single


def _layers(topology: MlpTopology, w: np.ndarray):
    S = w.shape[0]
    for ws, bs, fan_in, fan_out in topology.slices():
        yield w[:, ws].reshape(S, fan_out, fan_in), w[:, bs]


def _act(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _act_grad(z, a, kind):
    return (z > 0).astype(np.float64) if kind == "relu" else 1.0 - a * a


def _forward_logits(topology: MlpTopology, w: np.ndarray, x: np.ndarray):
    """Return output logits ``(S, n)`` and the cache needed by backprop.

    ``x`` is either shared by all draws, shape ``(n, in)``, or per draw,
    shape ``(S, n, in)``.
    """
    h = x if x.ndim == 3 else np.broadcast_to(x, (w.shape[0],) + x.shape)
    cache = []
    layers = list(_layers(topology, w))
    for i, (W, b) in enumerate(layers):
        z = h @ W.transpose(0, 2, 1) + b[:, None, :]
        cache.append((h, W, z))
        if i < len(layers) - 1:
            h = _act(z, topology.activation)
        else:
            h = z
    return h[..., 0], cache


def forward(net: SampledNetwork, x) -> np.ndarray | float:
    """Sigmoid scores of every draw in ``net`` on the input(s) ``x``.

    Output shape is ``(S, n)`` for stacked draws and batched inputs; the draw
    axis is dropped for a single draw and the sample axis for a 1-D input.
    """
    x, single_x = _as_batch(net.topology, x)
    w = np.atleast_2d(net.weights)
    logits, _ = _forward_logits(net.topology, w, x)
    tiny = np.finfo(np.float64).tiny
    out = np.clip(expit(logits), tiny, 1.0 - np.finfo(np.float64).epsneg)
    if net.weights.ndim == 1:
        out = out[0]
    if single_x:
        out = out[..., 0]
    return float(out) if np.ndim(out) == 0 else out


def weight_grad(topology: MlpTopology, w: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Per-draw gradient of the clamped mean BCE with respect to the weights.

    Returns ``(grad, loss)`` with shapes ``(S, d)`` and ``(S,)``.
    """
    logits, cache = _forward_logits(topology, w, x)
    s = expit(logits)
    sc = np.clip(s, BCE_CLAMP, 1.0 - BCE_CLAMP)
    loss = -(y * np.log(sc) + (1.0 - y) * np.log(1.0 - sc)).mean(axis=1)
    # zero where the clamp is active: the clamped loss is flat there
    inside = (s > BCE_CLAMP) & (s < 1.0 - BCE_CLAMP)
    dz = ((s - y) * inside / x.shape[-2])[..., None]
    grad = np.empty_like(w)
    slices = list(topology.slices())
    for i in range(len(cache) - 1, -1, -1):
        h_prev, W, _ = cache[i]
        ws, bs, _, _ = slices[i]
        grad[:, ws] = (dz.transpose(0, 2, 1) @ h_prev).reshape(w.shape[0], -1)
        grad[:, bs] = dz.sum(axis=1)
        if i > 0:
            dh = dz @ W
            z_prev = cache[i - 1][2]
            dz = dh * _act_grad(z_prev, h_prev, topology.activation)
    return grad, loss


def backward_bce(net: SampledNetwork, x, y) -> GradPair:
    """Reparameterised gradient of the (clamped) BCE w.r.t. ``(theta, rho)``.

    For a batch the loss is the batch mean; for stacked draws the gradient is
    averaged over draws, i.e. the usual Monte-Carlo estimator.
    """
    x, _ = _as_batch(net.topology, x)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if y.shape != (x.shape[0],):
        raise ShapeError("labels must match the number of inputs")
    w = np.atleast_2d(net.weights)
    eps = np.atleast_2d(net.noise)
    g, _ = weight_grad(net.topology, w, x, y)
    dsig = expit(net.source.rho)
    return GradPair(g.mean(axis=0), (g * eps).mean(axis=0) * dsig)


def bce_per_draw(net: SampledNetwork, x, y) -> np.ndarray:
    x, _ = _as_batch(net.topology, x)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    logits, _ = _forward_logits(net.topology, np.atleast_2d(net.weights), x)
    sc = np.clip(expit(logits), BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(y * np.log(sc) + (1.0 - y) * np.log(1.0 - sc)).mean(axis=1)


def kl_divergence(q_a: GaussianWeightDist, q: GaussianWeightDist) -> float:
    """KL(N(theta_a, sigma_a^2) || N(theta, sigma^2)) summed over coordinates."""
    _check_same_topology(q_a, q)
    sa, s = q_a.sigma, q.sigma
    ratio = (sa / s) ** 2
    diff = (q_a.theta - q.theta) / s
    return float(0.5 * np.sum(ratio + diff * diff - 1.0 - np.log(ratio)))


def kl_gradients(q_a: GaussianWeightDist, q: GaussianWeightDist) -> tuple[GradPair, GradPair]:
    """Analytic partials of ``kl_divergence`` w.r.t. both parameter sets."""
    _check_same_topology(q_a, q)
    sa, s = q_a.sigma, q.sigma
    s2 = s * s
    diff = q_a.theta - q.theta
    d_theta_a = diff / s2
    d_sigma_a = sa / s2 - 1.0 / sa
    d_sigma = 1.0 / s - (sa * sa + diff * diff) / (s2 * s)
    grad_a = GradPair(d_theta_a, d_sigma_a * expit(q_a.rho))
    grad_q = GradPair(-d_theta_a, d_sigma * expit(q.rho))
    return grad_a, grad_q


def predict_mc(dist: GaussianWeightDist, x, n_samples: int, rng: SeededRng):
    """Average sigmoid score over ``n_samples`` weight draws."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    net = sample(dist, rng, n_draws=n_samples)
    return np.mean(forward(net, x), axis=0)


def save_dist(dist: GaussianWeightDist, path) -> None:
    Path(path).write_text(json.dumps(dist.to_dict()))


def load_dist(path) -> GaussianWeightDist:
    return GaussianWeightDist.from_dict(json.loads(Path(path).read_text()))
