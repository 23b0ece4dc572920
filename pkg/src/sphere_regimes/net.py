"""Fully scale-invariant MLP: bias-free linear layers, affine-free batch norm, frozen head.

Every hidden weight matrix feeds a batch-norm layer with zero shift and unit
scale, so the network output does not change when any one of them is
multiplied by a positive number. The output layer is frozen at a random
initialization whose weight matrix is rescaled to a fixed Frobenius norm.
Gradients are computed by hand; batch statistics are always used.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import GroupLayout, GroupedParams


@dataclass(frozen=True)
class SiMlpSpec:
    input_dim: int = 20
    hidden_dims: tuple[int, ...] = (64, 32)
    num_classes: int = 3
    # Pre-BN variances are O(1); this keeps the epsilon's effect on scale
    # invariance below ~1e-12 even after a group shrinks tenfold.
    bn_epsilon: float = 1e-14
    last_layer_norm: float = 10.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ValueError("hidden_dims must be a non-empty list of positive widths")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if not self.bn_epsilon > 0:
            raise ValueError("bn_epsilon must be positive")
        if not self.last_layer_norm > 0:
            raise ValueError("last_layer_norm must be positive")


class BatchTooSmallError(ValueError):
    pass


@dataclass
class _Cache:
    inputs: list = field(default_factory=list)   # layer inputs h_{l-1}
    xhat: list = field(default_factory=list)     # normalized pre-activations
    inv_std: list = field(default_factory=list)


class SiMlp:
    """Objective over the flat vector of hidden weight matrices (one group per layer)."""

    def __init__(self, spec: SiMlpSpec, out_weight: np.ndarray, out_bias: np.ndarray):
        self.spec = spec
        dims = (spec.input_dim,) + spec.hidden_dims
        self.shapes = [(dims[i + 1], dims[i]) for i in range(len(spec.hidden_dims))]
        self.layout = GroupLayout.from_sizes([r * c for r, c in self.shapes],
                                             [f"layer{i + 1}" for i in range(len(self.shapes))])
        self.out_weight = np.array(out_weight, dtype=np.float64)
        self.out_bias = np.array(out_bias, dtype=np.float64)

    def weights(self, theta: np.ndarray) -> list[np.ndarray]:
        return [theta[s].reshape(shape) for s, shape in zip(self.layout.slices(), self.shapes)]

    def _forward(self, theta, x, cache=None):
        if x.shape[0] < 2:
            raise BatchTooSmallError("batch norm needs at least two samples")
        eps = self.spec.bn_epsilon
        h = x
        for w in self.weights(theta):
            a = h @ w.T
            mu = a.mean(axis=0)
            centered = a - mu
            var = np.mean(centered * centered, axis=0)
            inv_std = 1.0 / np.sqrt(var + eps)
            xhat = centered * inv_std
            if cache is not None:
                cache.inputs.append(h)
                cache.xhat.append(xhat)
                cache.inv_std.append(inv_std)
            h = np.maximum(xhat, 0.0)
        if cache is not None:
            cache.inputs.append(h)
        return h @ self.out_weight.T + self.out_bias

    def outputs(self, theta: np.ndarray, batch) -> np.ndarray:
        """Logits for a batch ``(x, y)``."""
        return self._forward(np.asarray(theta, dtype=np.float64), batch[0])

    @staticmethod
    def _cross_entropy(logits, y):
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.sum(np.exp(shifted), axis=1))
        logp = shifted - logz[:, None]
        return -float(np.mean(logp[np.arange(len(y)), y])), logp

    def value(self, theta: np.ndarray, batch) -> float:
        return self._cross_entropy(self.outputs(theta, batch), batch[1])[0]

    def loss_and_errors(self, theta: np.ndarray, batch) -> tuple[float, int]:
        logits = self.outputs(theta, batch)
        loss, _ = self._cross_entropy(logits, batch[1])
        return loss, int(np.sum(np.argmax(logits, axis=1) != batch[1]))

    def value_and_grad(self, theta: np.ndarray, batch) -> tuple[float, np.ndarray]:
        theta = np.asarray(theta, dtype=np.float64)
        x, y = batch
        cache = _Cache()
        logits = self._forward(theta, x, cache)
        loss, logp = self._cross_entropy(logits, y)
        n = x.shape[0]
        dlogits = np.exp(logp)
        dlogits[np.arange(n), y] -= 1.0
        dlogits /= n
        dh = dlogits @ self.out_weight
        grads = []
        ws = self.weights(theta)
        for layer in reversed(range(len(ws))):
            xhat = cache.xhat[layer]
            dxhat = dh * (xhat > 0)
            da = cache.inv_std[layer] * (dxhat - dxhat.mean(axis=0)
                                         - xhat * np.mean(dxhat * xhat, axis=0))
            grads.append((da.T @ cache.inputs[layer]).ravel())
            if layer:
                dh = da @ ws[layer]
        return loss, np.concatenate(grads[::-1])


def build_si_mlp(spec: SiMlpSpec) -> tuple[SiMlp, GroupedParams]:
    """Initialize with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and freeze the head.

    The sphere radius is the norm of the initial hidden weights.
    """
    rng = np.random.default_rng(spec.seed)
    dims = (spec.input_dim,) + spec.hidden_dims
    hidden = []
    for i in range(len(spec.hidden_dims)):
        bound = 1.0 / np.sqrt(dims[i])
        hidden.append(rng.uniform(-bound, bound, size=(dims[i + 1], dims[i])).ravel())
    fan_in = dims[-1]
    bound = 1.0 / np.sqrt(fan_in)
    w_out = rng.uniform(-bound, bound, size=(spec.num_classes, fan_in))
    w_out *= spec.last_layer_norm / np.linalg.norm(w_out)
    b_out = rng.uniform(-bound, bound, size=spec.num_classes)
    net = SiMlp(spec, w_out, b_out)
    theta = np.concatenate(hidden)
    return net, GroupedParams(theta, net.layout, float(np.linalg.norm(theta)))


def forward_backward(net: SiMlp, params: GroupedParams, batch) -> tuple[float, np.ndarray]:
    return net.value_and_grad(params.values, batch)
