"""Mean-field Gaussian distributions over the weights of a ReLU MLP.

A :class:`GaussianNet` holds, per affine layer, weight/bias means and
log-variances. Weights are stored ``(fan_in, fan_out)`` so that a batch of
inputs ``X`` of shape ``(n, fan_in)`` maps to ``X @ W + b``.

Two stochastic forward passes are provided:

* weight sampling: draw a concrete :class:`PointNet` and evaluate it;
* local reparameterization (LRT): draw each pre-activation from the Gaussian
  it has given the layer input. For a single input this has exactly the same
  distribution as weight sampling with fresh weights.

The LRT batch pass keeps the noise and intermediate values so that
:func:`lrt_backward` can return analytic gradients with respect to every mean
and log-variance.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .fileio import atomic_write_text

__all__ = [
    "Architecture",
    "GaussianNet",
    "PointNet",
    "LrtCache",
    "PRIOR_LOGVAR",
    "init_uninformed_prior",
    "gaussian_kl",
    "gaussian_kl_grad",
    "mean_forward",
    "sample_point_net",
    "predict_sampled",
    "predict_lrt",
    "sampled_preactivations",
    "lrt_preactivations",
    "lrt_forward",
    "lrt_backward",
    "save_net",
    "load_net",
    "net_to_dict",
    "net_from_dict",
]

PRIOR_LOGVAR = -4.6


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    hidden_dims: tuple[int, ...] = (256, 256)
    output_dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be positive")
        if not self.hidden_dims:
            raise ValueError("at least one hidden layer is required")
        if any(h < 1 for h in self.hidden_dims):
            raise ValueError("hidden widths must be positive")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden_dims, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden_dims": list(self.hidden_dims),
            "output_dim": self.output_dim,
        }


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GaussianLayer:
    weight_mean: np.ndarray
    weight_logvar: np.ndarray
    bias_mean: np.ndarray
    bias_logvar: np.ndarray

    def __post_init__(self):
        for name in ("weight_mean", "weight_logvar", "bias_mean", "bias_logvar"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if self.weight_mean.shape != self.weight_logvar.shape:
            raise ValueError("weight mean/log-variance shapes differ")
        if self.bias_mean.shape != self.bias_logvar.shape:
            raise ValueError("bias mean/log-variance shapes differ")
        if self.bias_mean.shape != (self.weight_mean.shape[1],):
            raise ValueError("bias shape does not match layer width")
        if not (np.all(np.isfinite(self.weight_logvar)) and np.all(np.isfinite(self.bias_logvar))):
            raise ValueError("log-variances must be finite")

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        return self.weight_mean, self.weight_logvar, self.bias_mean, self.bias_logvar


@dataclass(frozen=True)
class GaussianNet:
    """Factorized Gaussian over all weights and biases of an MLP."""

    arch: Architecture
    layers: tuple[GaussianLayer, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        shapes = [l.weight_mean.shape for l in self.layers]
        if shapes != self.arch.layer_shapes:
            raise ValueError(f"layer shapes {shapes} do not match {self.arch.layer_shapes}")

    # flat parameter vector layout: per layer [W_mean, W_logvar, b_mean, b_logvar]
    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for layer in self.layers for a in layer.arrays()])

    @classmethod
    def from_vector(cls, arch: Architecture, vec: np.ndarray) -> "GaussianNet":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (2 * arch.n_params,):
            raise ValueError("parameter vector has the wrong length")
        layers, pos = [], 0
        for fan_in, fan_out in arch.layer_shapes:
            parts = []
            for shape in ((fan_in, fan_out), (fan_in, fan_out), (fan_out,), (fan_out,)):
                size = int(np.prod(shape))
                parts.append(vec[pos : pos + size].reshape(shape))
                pos += size
            layers.append(GaussianLayer(*parts))
        return cls(arch, tuple(layers))

    def with_zero_variance(self, logvar: float = -50.0) -> "GaussianNet":
        return GaussianNet(
            self.arch,
            tuple(
                GaussianLayer(
                    l.weight_mean,
                    np.full_like(l.weight_logvar, logvar),
                    l.bias_mean,
                    np.full_like(l.bias_logvar, logvar),
                )
                for l in self.layers
            ),
        )


@dataclass(frozen=True)
class PointNet:
    """A single hypothesis: concrete weights and biases."""

    arch: Architecture
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def forward(self, X: np.ndarray) -> np.ndarray:
        h = np.asarray(X, dtype=np.float64)
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h


def init_uninformed_prior(arch: Architecture, seed: int) -> GaussianNet:
    """Kaiming-uniform means (bound sqrt(6 / fan_in)), zero bias means, log-variance -4.6."""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in arch.layer_shapes:
        bound = math.sqrt(6.0 / fan_in)
        layers.append(
            GaussianLayer(
                weight_mean=rng.uniform(-bound, bound, size=(fan_in, fan_out)),
                weight_logvar=np.full((fan_in, fan_out), PRIOR_LOGVAR),
                bias_mean=np.zeros(fan_out),
                bias_logvar=np.full(fan_out, PRIOR_LOGVAR),
            )
        )
    return GaussianNet(arch, tuple(layers))


def _check_same_arch(a: GaussianNet, b: GaussianNet) -> None:
    if a.arch != b.arch:
        raise ValueError(f"architecture mismatch: {a.arch} vs {b.arch}")


def _kl_terms(mu1, lv1, mu0, lv0) -> float:
    return 0.5 * float(np.sum(np.exp(lv1 - lv0) + (mu1 - mu0) ** 2 * np.exp(-lv0) - 1.0 + lv0 - lv1))


def gaussian_kl(posterior: GaussianNet, prior: GaussianNet) -> float:
    """KL(posterior || prior) summed over all independent weight and bias coordinates."""
    _check_same_arch(posterior, prior)
    total = 0.0
    for q, p in zip(posterior.layers, prior.layers):
        total += _kl_terms(q.weight_mean, q.weight_logvar, p.weight_mean, p.weight_logvar)
        total += _kl_terms(q.bias_mean, q.bias_logvar, p.bias_mean, p.bias_logvar)
    return max(total, 0.0)


def gaussian_kl_grad(posterior: GaussianNet, prior: GaussianNet) -> np.ndarray:
    """Gradient of :func:`gaussian_kl` w.r.t. the posterior's flat parameter vector."""
    _check_same_arch(posterior, prior)
    flat = []
    for q, p in zip(posterior.layers, prior.layers):
        flat += [
            ((q.weight_mean - p.weight_mean) * np.exp(-p.weight_logvar)).ravel(),
            (0.5 * (np.exp(q.weight_logvar - p.weight_logvar) - 1.0)).ravel(),
            ((q.bias_mean - p.bias_mean) * np.exp(-p.bias_logvar)).ravel(),
            (0.5 * (np.exp(q.bias_logvar - p.bias_logvar) - 1.0)).ravel(),
        ]
    return np.concatenate(flat)


def mean_forward(net: GaussianNet, X: np.ndarray) -> np.ndarray:
    """Deterministic forward pass through the weight means."""
    return PointNet(
        net.arch,
        tuple(l.weight_mean for l in net.layers),
        tuple(l.bias_mean for l in net.layers),
    ).forward(X)


def sample_point_net(net: GaussianNet, rng: np.random.Generator) -> PointNet:
    weights, biases = [], []
    for l in net.layers:
        weights.append(l.weight_mean + np.exp(0.5 * l.weight_logvar) * rng.standard_normal(l.weight_mean.shape))
        biases.append(l.bias_mean + np.exp(0.5 * l.bias_logvar) * rng.standard_normal(l.bias_mean.shape))
    return PointNet(net.arch, tuple(weights), tuple(biases))


def _as_input(net: GaussianNet, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (net.arch.input_dim,):
        raise ValueError(f"expected input of length {net.arch.input_dim}, got shape {x.shape}")
    return x


def predict_sampled(net: GaussianNet, x, rng: np.random.Generator) -> float:
    """Draw one concrete network from ``net`` and evaluate it at ``x``."""
    x = _as_input(net, x)
    return float(sample_point_net(net, rng).forward(x[None, :])[0, 0])


def predict_lrt(net: GaussianNet, x, rng: np.random.Generator) -> float:
    """Evaluate ``net`` at ``x`` sampling pre-activations instead of weights."""
    x = _as_input(net, x)
    out, _ = lrt_forward(net, x[None, :], rng)
    return float(out[0])


def sampled_preactivations(net: GaussianNet, x, n_draws: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Per-layer pre-activations at ``x`` for ``n_draws`` independent weight draws.

    Returns one ``(n_draws, width)`` array per layer.
    """
    x = _as_input(net, x)
    h = np.broadcast_to(x, (n_draws, x.size))
    out = []
    last = len(net.layers) - 1
    for i, l in enumerate(net.layers):
        W = l.weight_mean + np.exp(0.5 * l.weight_logvar) * rng.standard_normal((n_draws, *l.weight_mean.shape))
        b = l.bias_mean + np.exp(0.5 * l.bias_logvar) * rng.standard_normal((n_draws, l.bias_mean.size))
        z = np.einsum("ni,nio->no", h, W) + b
        out.append(z)
        h = np.maximum(z, 0.0) if i < last else z
    return out


def lrt_preactivations(net: GaussianNet, x, n_draws: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Per-layer LRT pre-activations at ``x`` for ``n_draws`` independent passes."""
    x = _as_input(net, x)
    _, cache = lrt_forward(net, np.broadcast_to(x, (n_draws, x.size)), rng)
    return cache.pre


@dataclass
class LrtCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    std: list[np.ndarray] = field(default_factory=list)
    noise: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)


def lrt_forward(
    net: GaussianNet,
    X: np.ndarray,
    rng: np.random.Generator | None = None,
    noise: Sequence[np.ndarray] | None = None,
) -> tuple[np.ndarray, LrtCache]:
    """Batched LRT pass; one independent draw per row of ``X``.

    ``noise`` (one ``(n, width)`` standard-normal array per layer) overrides
    ``rng`` so that the same draw can be replayed, e.g. for finite differences.
    Returns the ``(n,)`` outputs (first output unit) and the backward cache.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.arch.input_dim:
        raise ValueError(f"expected inputs of shape (n, {net.arch.input_dim}), got {X.shape}")
    if noise is None and rng is None:
        raise ValueError("either rng or noise must be given")
    cache = LrtCache()
    h = X
    last = len(net.layers) - 1
    for i, l in enumerate(net.layers):
        mean = h @ l.weight_mean + l.bias_mean
        var = (h * h) @ np.exp(l.weight_logvar) + np.exp(l.bias_logvar)
        std = np.sqrt(var)
        eps = noise[i] if noise is not None else rng.standard_normal(mean.shape)
        z = mean + std * eps
        cache.inputs.append(h)
        cache.std.append(std)
        cache.noise.append(eps)
        cache.pre.append(z)
        h = np.maximum(z, 0.0) if i < last else z
    return h[:, 0], cache


def lrt_backward(net: GaussianNet, cache: LrtCache, d_out: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(d_out * outputs)`` w.r.t. the flat parameter vector."""
    n = d_out.shape[0]
    g = np.zeros((n, net.arch.output_dim))
    g[:, 0] = d_out
    grads: list[list[np.ndarray]] = [None] * len(net.layers)  # type: ignore[list-item]
    for i in range(len(net.layers) - 1, -1, -1):
        l = net.layers[i]
        h, std, eps = cache.inputs[i], cache.std[i], cache.noise[i]
        if i < len(net.layers) - 1:
            g = g * (cache.pre[i] > 0.0)
        g_var = g * eps / (2.0 * std)
        w_var = np.exp(l.weight_logvar)
        b_var = np.exp(l.bias_logvar)
        grads[i] = [
            h.T @ g,
            ((h * h).T @ g_var) * w_var,
            g.sum(axis=0),
            g_var.sum(axis=0) * b_var,
        ]
        if i > 0:
            g = g @ l.weight_mean.T + 2.0 * h * (g_var @ w_var.T)
    return np.concatenate([a.ravel() for layer in grads for a in layer])


# serialization: {"format", "version", "architecture", "layers": [{weight_mean,
# weight_logvar, bias_mean, bias_logvar}]}, weights nested row-major (fan_in, fan_out)
_FORMAT = "certbound.gaussian_net"


def net_to_dict(net: GaussianNet) -> dict:
    return {
        "format": _FORMAT,
        "version": 1,
        "architecture": net.arch.to_dict(),
        "layers": [
            {
                "weight_mean": l.weight_mean.tolist(),
                "weight_logvar": l.weight_logvar.tolist(),
                "bias_mean": l.bias_mean.tolist(),
                "bias_logvar": l.bias_logvar.tolist(),
            }
            for l in net.layers
        ],
    }


def net_from_dict(d: dict) -> GaussianNet:
    if d.get("format") != _FORMAT:
        raise ValueError("not a serialized GaussianNet")
    a = d["architecture"]
    arch = Architecture(a["input_dim"], tuple(a["hidden_dims"]), a["output_dim"])
    layers = tuple(
        GaussianLayer(l["weight_mean"], l["weight_logvar"], l["bias_mean"], l["bias_logvar"])
        for l in d["layers"]
    )
    return GaussianNet(arch, layers)


def save_net(net: GaussianNet, path) -> None:
    atomic_write_text(path, json.dumps(net_to_dict(net)))


def load_net(path) -> GaussianNet:
    return net_from_dict(json.loads(Path(path).read_text()))
