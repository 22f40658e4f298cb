"""Training pathologies: weight domination, dying/full ReLUs, scaling harnesses."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import linalg
from .errors import DimensionError, InvalidValueError, TopologyError
from .nn import (
    BatchNorm,
    BlockVariant,
    Linear,
    Loss,
    Network,
    ReLU,
    ResidualBlock,
    backward,
    forward,
    loss_and_grad,
    scale_weights,
)

DOMINATION_THRESHOLD = 1e-3
_TINY = np.finfo(np.float64).tiny


@dataclass
class DominationReport:
    layer: int
    w_spec: float
    g_spec: float
    ratio: float
    dominated: bool


def detect_weight_domination(W, grad_W, threshold: float = DOMINATION_THRESHOLD, layer: int = 0) -> DominationReport:
    """Flag a layer whose gradient is negligible next to its weight.

    ratio = sigma_max(grad_W) / sigma_max(W); dominated when ratio < threshold.
    """
    W = linalg.as_matrix(W, "W")
    G = linalg.as_matrix(grad_W, "grad_W")
    if W.shape != G.shape:
        raise DimensionError(f"weight {W.shape} and gradient {G.shape} shapes differ")
    w_spec = linalg.spectral_norm(W)
    g_spec = linalg.spectral_norm(G)
    ratio = g_spec / max(w_spec, _TINY)
    return DominationReport(layer, w_spec, g_spec, ratio, ratio < threshold)


@dataclass
class NeuronActivity:
    """Counts for one ReLU layer (1-based, in forward order).

    Post-activation residual blocks contribute their output ReLU after the
    ReLUs of their branch.
    """

    layer: int
    dying_count: int
    full_count: int
    width: int
    approximate: bool = False


def relu_owners(net: Network) -> List[int]:
    """For each ReLU in forward order, the 1-based index of the Linear layer
    that most recently precedes it (0 if none)."""
    owners = []
    last = [0]

    def walk(layers):
        for layer in layers:
            if isinstance(layer, Linear):
                last[0] = layer.index
            elif isinstance(layer, ReLU):
                owners.append(last[0])
            elif isinstance(layer, ResidualBlock):
                walk(layer.branch)
                if layer.variant is BlockVariant.POST_ACT:
                    owners.append(last[0])

    walk(net.layers)
    return owners


def neuron_activity(net: Network, X, sample: Optional[int] = None, seed: int = 0) -> List[NeuronActivity]:
    """Dying (never active) and full (always active) units of every ReLU layer.

    Counts are exact over ``X`` processed as one batch.  ``sample`` restricts
    the pass to a seeded random subset, and the counts are then marked
    approximate.
    """
    X = np.asarray(X, dtype=np.float64)
    approximate = False
    if sample is not None and sample < X.shape[0]:
        rng = np.random.Generator(np.random.Philox(seed))
        X = X[np.sort(rng.choice(X.shape[0], sample, replace=False))]
        approximate = True
    cache = forward(net, X)
    masks = []

    def collect(tape):
        for layer, rec in tape:
            if isinstance(layer, ReLU):
                masks.append(rec)
            elif isinstance(layer, ResidualBlock):
                collect(rec[0])
                if rec[1] is not None:
                    masks.append(rec[1])

    collect(cache.tape)
    return [
        NeuronActivity(i, int(np.sum(~m.any(axis=0))), int(np.sum(m.all(axis=0))), m.shape[1], approximate)
        for i, m in enumerate(masks, 1)
    ]


@dataclass
class TheoremReport:
    activations: float
    output_grads: float
    weight_grads: float
    tol: float
    passed: bool = field(init=False)
    per_layer: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.passed = max(self.activations, self.output_grads, self.weight_grads) <= self.tol

    @property
    def max_deviation(self) -> float:
        return max(self.activations, self.output_grads, self.weight_grads)


def rel_deviation(actual, expected) -> float:
    """max|actual - expected| / max|expected| (0 when both vanish)."""
    actual = np.asarray(actual)
    expected = np.asarray(expected)
    scale = float(np.max(np.abs(expected), initial=0.0))
    diff = float(np.max(np.abs(actual - expected), initial=0.0))
    if scale == 0.0:
        return diff
    return diff / scale


def _check_alphas(net, alphas):
    alphas = np.asarray(alphas, dtype=np.float64).ravel()
    if alphas.size != net.depth:
        raise DimensionError(f"expected {net.depth} scales, got {alphas.size}")
    if not np.all(alphas > 0):
        raise InvalidValueError("scales must be positive")
    return alphas


def verify_theorem1(net: Network, X, alphas, grad_scale_mu: float, injected_grad, tol: float = 1e-10) -> TheoremReport:
    """Check the ReLU rescaling identities on a network without BN.

    With W_k -> alpha_k W_k and the output-gradient replaced by
    ``mu * injected_grad``, every layer should satisfy
    x_k -> (prod_{i<=k} alpha_i) x_k,
    dh_k -> mu (prod_{i>k} alpha_i) dh_k and
    dW_k -> mu (prod_{i!=k} alpha_i) dW_k.
    """
    if any(isinstance(l, (BatchNorm, ResidualBlock)) for l in net.layers):
        raise TopologyError("ReLU scaling check needs a plain network without BN or residual blocks")
    alphas = _check_alphas(net, alphas)
    mu = float(grad_scale_mu)
    base = backward(net, forward(net, X), injected_grad)
    scaled_net = scale_weights(net, alphas)
    scaled = backward(scaled_net, forward(scaled_net, X), mu * np.asarray(injected_grad, dtype=np.float64))

    K = net.depth
    total = float(np.prod(alphas))
    act = grad = wgrad = 0.0
    per_layer = {}
    for k in range(1, K + 1):
        fwd = float(np.prod(alphas[:k]))
        bwd = mu * float(np.prod(alphas[k:]))
        others = mu * total / alphas[k - 1]
        a = rel_deviation(scaled.h(k), fwd * base.h(k))
        if k < K:
            a = max(a, rel_deviation(scaled.x_in(k + 1), fwd * base.x_in(k + 1)))
        g = rel_deviation(scaled.grad_h(k), bwd * base.grad_h(k))
        w = rel_deviation(scaled.grad_W[k - 1], others * base.grad_W[k - 1])
        per_layer[k] = (a, g, w)
        act, grad, wgrad = max(act, a), max(grad, g), max(wgrad, w)
    return TheoremReport(act, grad, wgrad, tol, per_layer=per_layer)


def _check_bn_after_linear(net: Network):
    layers = net.layers
    for i, layer in enumerate(layers):
        if isinstance(layer, ResidualBlock):
            raise TopologyError("BN scaling check does not support residual blocks")
        if isinstance(layer, Linear):
            if i + 1 >= len(layers) or not isinstance(layers[i + 1], BatchNorm):
                raise TopologyError(f"Linear layer {layer.index} is not followed by BatchNorm")


def verify_theorem2(net: Network, X, alphas, y, loss=Loss.SOFTMAX_CE, tol: float = 1e-10) -> TheoremReport:
    """Check the BN rescaling identities using the real loss gradient.

    With BN after every Linear, W_k -> alpha_k W_k should leave every
    post-BN activation unchanged and divide dh_k and dW_k by alpha_k.
    """
    _check_bn_after_linear(net)
    alphas = _check_alphas(net, alphas)

    def run(n):
        cache = forward(n, X)
        _, g = loss_and_grad(cache.output, y, loss)
        return backward(n, cache, g)

    base = run(net)
    scaled = run(scale_weights(net, alphas))
    K = net.depth
    act = grad = wgrad = 0.0
    per_layer = {}
    for k in range(1, K + 1):
        inv = 1.0 / alphas[k - 1]
        if k < K:
            a = rel_deviation(scaled.x_in(k + 1), base.x_in(k + 1))
        else:
            a = rel_deviation(scaled.output, base.output)
        g = rel_deviation(scaled.grad_h(k), inv * base.grad_h(k))
        w = rel_deviation(scaled.grad_W[k - 1], inv * base.grad_W[k - 1])
        per_layer[k] = (a, g, w)
        act, grad, wgrad = max(act, a), max(grad, g), max(wgrad, w)
    return TheoremReport(act, grad, wgrad, tol, per_layer=per_layer)
