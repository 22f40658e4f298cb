"""Feed-forward networks with hand-written backward passes.

Networks are sequences of Linear (no bias), ReLU, BatchNorm and residual
blocks.  ``forward`` returns a :class:`BatchCache` holding, for every Linear
layer ``k`` (1-based, in forward order), the layer input ``x_{k-1}`` and
pre-activation ``h_k``; ``backward`` fills in the output-gradients ``dh_k``
and the parameter gradients of the batch-mean loss.

Output-gradients are kept at per-example scale: row ``i`` of ``dh_k`` is the
derivative of example ``i``'s loss, so ``dW_k = dh_k^T x_{k-1} / N``.
"""
from __future__ import annotations

import copy
import enum
import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import (
    BatchTooSmallError,
    CacheMismatchError,
    ConfigError,
    DimensionError,
    InvalidLabelError,
    InvalidValueError,
    ParameterError,
)

BN_EPS = 1e-5


class LayerKind(str, enum.Enum):
    LINEAR = "Linear"
    RELU = "ReLU"
    BATCHNORM = "BatchNorm"
    RESIDUAL = "ResidualBlock"


class BlockVariant(str, enum.Enum):
    POST_ACT = "PostAct"
    PRE_ACT = "PreAct"


class Init(str, enum.Enum):
    LECUN = "LeCun"
    HE = "He"


class Loss(str, enum.Enum):
    MSE = "MSE"
    SOFTMAX_CE = "SoftmaxCE"


class OptimizerKind(str, enum.Enum):
    FULL_GD = "FullGD"
    SGD = "SGD"
    ADAM = "Adam"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_dim: int
    out_dim: int
    block_variant: Optional[BlockVariant] = None

    def to_dict(self):
        d = {"kind": self.kind.value, "in_dim": self.in_dim, "out_dim": self.out_dim}
        if self.block_variant is not None:
            d["block_variant"] = self.block_variant.value
        return d

    @classmethod
    def from_dict(cls, d):
        variant = d.get("block_variant")
        return cls(LayerKind(d["kind"]), int(d["in_dim"]), int(d["out_dim"]),
                   BlockVariant(variant) if variant else None)


def linear(in_dim, out_dim):
    return LayerSpec(LayerKind.LINEAR, in_dim, out_dim)


def relu(dim):
    return LayerSpec(LayerKind.RELU, dim, dim)


def batchnorm(dim):
    return LayerSpec(LayerKind.BATCHNORM, dim, dim)


def residual(dim, variant=BlockVariant.POST_ACT):
    return LayerSpec(LayerKind.RESIDUAL, dim, dim, BlockVariant(variant))


def mlp_specs(in_dim, width, depth, out_dim, bn="none"):
    """Specs for an MLP with ``depth`` Linear layers.

    ``bn`` is ``"none"``, ``"hidden"`` (BN after every hidden Linear, before
    the ReLU) or ``"all"`` (also after the output Linear).
    """
    if bn not in ("none", "hidden", "all"):
        raise ConfigError(f"unknown bn placement {bn!r}", "bn")
    if depth < 1:
        raise ConfigError("depth must be >= 1", "depth")
    specs = []
    d = in_dim
    for _ in range(depth - 1):
        specs.append(linear(d, width))
        if bn != "none":
            specs.append(batchnorm(width))
        specs.append(relu(width))
        d = width
    specs.append(linear(d, out_dim))
    if bn == "all":
        specs.append(batchnorm(out_dim))
    return specs


def residual_mlp_specs(in_dim, width, blocks, out_dim, variant=BlockVariant.POST_ACT):
    """Stem Linear, ``blocks`` residual blocks, then the final Linear.

    The post-activation stem is Linear-BN-ReLU; the pre-activation stem is a
    bare Linear since each pre-activation block normalizes its own input.
    """
    variant = BlockVariant(variant)
    specs = [linear(in_dim, width)]
    if variant is BlockVariant.POST_ACT:
        specs += [batchnorm(width), relu(width)]
    specs += [residual(width, variant) for _ in range(blocks)]
    specs.append(linear(width, out_dim))
    return specs


# ---------------------------------------------------------------- layers

@dataclass
class Linear:
    W: np.ndarray
    index: int = 0


@dataclass
class ReLU:
    dim: int


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = BN_EPS
    index: int = 0


@dataclass
class ResidualBlock:
    """``PostAct``: y = ReLU(x + BN(W2 ReLU(BN(W1 x)))).
    ``PreAct``: y = x + W2 ReLU(BN(W1 ReLU(BN(x)))).
    ``branch`` holds the layers of the non-identity path in order.
    """

    variant: BlockVariant
    branch: list


@dataclass
class Network:
    layers: list
    specs: List[LayerSpec]
    last_bn: bool = False
    init: Init = Init.LECUN
    seed: int = 0
    version: int = 0
    linears: list = field(default_factory=list, repr=False)
    norms: list = field(default_factory=list, repr=False)

    @property
    def depth(self) -> int:
        """Number of Linear layers K."""
        return len(self.linears)

    @property
    def in_dim(self) -> int:
        return self.specs[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.linears[-1].W.shape[0]

    def weight(self, k) -> np.ndarray:
        """W_k for 1-based Linear index k."""
        return self.linears[k - 1].W

    def has_batchnorm(self) -> bool:
        return bool(self.norms)

    def parameters(self):
        """(name, array) pairs in a fixed order: every W, then every (gamma, beta)."""
        params = [(f"W{lin.index}", lin.W) for lin in self.linears]
        for bn in self.norms:
            params.append((f"gamma{bn.index}", bn.gamma))
            params.append((f"beta{bn.index}", bn.beta))
        return params

    def copy(self) -> "Network":
        return copy.deepcopy(self)


def _walk(layers):
    for layer in layers:
        yield layer
        if isinstance(layer, ResidualBlock):
            yield from _walk(layer.branch)


def _index_network(net: Network) -> Network:
    net.linears = [l for l in _walk(net.layers) if isinstance(l, Linear)]
    net.norms = [l for l in _walk(net.layers) if isinstance(l, BatchNorm)]
    for i, lin in enumerate(net.linears, 1):
        lin.index = i
    for i, bn in enumerate(net.norms, 1):
        bn.index = i
    return net


def _check_specs(specs: Sequence[LayerSpec]):
    if not specs:
        raise ConfigError("network needs at least one layer", "specs")
    for i, spec in enumerate(specs):
        if spec.in_dim < 1 or spec.out_dim < 1:
            raise ConfigError("dimensions must be positive", f"specs[{i}]")
        if spec.kind is not LayerKind.LINEAR and spec.in_dim != spec.out_dim:
            raise ConfigError(f"{spec.kind.value} must keep its width", f"specs[{i}]")
        if spec.kind is LayerKind.RESIDUAL and spec.block_variant is None:
            raise ConfigError("residual block needs a variant", f"specs[{i}]")
        if i and specs[i - 1].out_dim != spec.in_dim:
            raise ConfigError(
                f"in_dim {spec.in_dim} does not match previous out_dim {specs[i - 1].out_dim}",
                f"specs[{i}]")


def build_network(specs: Sequence[LayerSpec], last_bn: bool = False,
                  init=Init.LECUN, seed: int = 0, bn_eps: float = BN_EPS) -> Network:
    """Instantiate parameters for ``specs``.

    Weights are zero-mean Gaussians with variance 1/fan_in (LeCun) or
    2/fan_in (He), drawn from a Philox generator seeded with ``seed``.  With
    ``last_bn`` a BatchNorm is inserted right before the final Linear.
    BatchNorm layers start at gamma = 1, beta = 0 with epsilon ``bn_eps``.
    """
    if bn_eps < 0:
        raise ConfigError("bn_eps must be non-negative", "bn_eps")
    specs = list(specs)
    _check_specs(specs)
    init = Init(init)
    if last_bn:
        last = max((i for i, s in enumerate(specs) if s.kind is LayerKind.LINEAR), default=None)
        if last is None:
            raise ConfigError("last_bn needs a Linear layer", "last_bn")
        specs = specs[:last] + [batchnorm(specs[last].in_dim)] + specs[last:]
    rng = np.random.Generator(np.random.Philox(seed))
    gain = 1.0 if init is Init.LECUN else 2.0

    def make_linear(i, o):
        return Linear(rng.standard_normal((o, i)) * np.sqrt(gain / i))

    def make_bn(d):
        return BatchNorm(np.ones(d), np.zeros(d), float(bn_eps))

    layers = []
    for spec in specs:
        d = spec.in_dim
        if spec.kind is LayerKind.LINEAR:
            layers.append(make_linear(spec.in_dim, spec.out_dim))
        elif spec.kind is LayerKind.RELU:
            layers.append(ReLU(d))
        elif spec.kind is LayerKind.BATCHNORM:
            layers.append(make_bn(d))
        elif spec.block_variant is BlockVariant.POST_ACT:
            layers.append(ResidualBlock(BlockVariant.POST_ACT,
                                        [make_linear(d, d), make_bn(d), ReLU(d), make_linear(d, d), make_bn(d)]))
        else:
            layers.append(ResidualBlock(BlockVariant.PRE_ACT,
                                        [make_bn(d), ReLU(d), make_linear(d, d), make_bn(d), ReLU(d),
                                         make_linear(d, d)]))
    return _index_network(Network(layers, specs, bool(last_bn), init, int(seed)))


def scale_weights(net: Network, alphas) -> Network:
    """Copy of ``net`` with W_k replaced by alpha_k * W_k."""
    alphas = np.asarray(alphas, dtype=np.float64).ravel()
    if alphas.size != net.depth:
        raise DimensionError(f"expected {net.depth} scales, got {alphas.size}")
    if not np.all(alphas > 0):
        raise InvalidValueError("weight scales must be positive")
    out = net.copy()
    for lin, a in zip(out.linears, alphas):
        lin.W = a * lin.W
    out.version += 1
    return out


# ------------------------------------------------------------ batch norm

@dataclass
class BNStats:
    mean: np.ndarray
    var: np.ndarray
    std: np.ndarray
    xhat: np.ndarray
    gamma: np.ndarray


def bn_forward(h, gamma, beta, eps=BN_EPS):
    """Standardize each column over the batch, then scale and shift.

    Uses the biased (1/N) batch variance.  A column with zero spread and
    ``eps == 0`` normalizes to 0, so its output is ``beta``.
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2:
        raise DimensionError("bn_forward expects an N x d matrix")
    if h.shape[0] < 2:
        raise BatchTooSmallError("batch norm needs at least 2 examples")
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    mean = h.mean(axis=0)
    centered = h - mean
    var = np.mean(centered * centered, axis=0)
    std = np.sqrt(var + eps)
    xhat = np.divide(centered, std, out=np.zeros_like(centered), where=std > 0)
    return gamma * xhat + beta, BNStats(mean, var, std, xhat, gamma)


def bn_backward(grad_s, stats: BNStats):
    """Gradient through batch norm.

    ``dh = (g - mean(g) - mean(g * xhat) * xhat) / std`` with ``g = gamma *
    grad_s``; ``dgamma`` and ``dbeta`` are batch sums.
    """
    grad_s = np.asarray(grad_s, dtype=np.float64)
    if grad_s.shape != stats.xhat.shape:
        raise DimensionError(f"gradient shape {grad_s.shape} != activation shape {stats.xhat.shape}")
    g = stats.gamma * grad_s
    inner = g - g.mean(axis=0) - np.mean(g * stats.xhat, axis=0) * stats.xhat
    grad_h = np.divide(inner, stats.std, out=np.zeros_like(inner), where=stats.std > 0)
    return grad_h, np.sum(grad_s * stats.xhat, axis=0), np.sum(grad_s, axis=0)


# ------------------------------------------------------- forward/backward

@dataclass
class BatchCache:
    """Activations and gradients of one batch; lists are indexed by k - 1."""

    X: np.ndarray
    inputs: list
    pre: list
    bn_stats: list
    output: Optional[np.ndarray] = None
    grad_pre: Optional[list] = None
    grad_W: Optional[list] = None
    grad_gamma: Optional[list] = None
    grad_beta: Optional[list] = None
    token: tuple = ()
    tape: list = field(default_factory=list, repr=False)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def x_in(self, k) -> np.ndarray:
        """x_{k-1}, the input rows of Linear layer k."""
        return self.inputs[k - 1]

    def h(self, k) -> np.ndarray:
        return self.pre[k - 1]

    def grad_h(self, k) -> np.ndarray:
        if self.grad_pre is None:
            raise CacheMismatchError("backward has not been run on this cache")
        return self.grad_pre[k - 1]

    def param_grads(self):
        """Gradients aligned with ``Network.parameters()``."""
        if self.grad_W is None:
            raise CacheMismatchError("backward has not been run on this cache")
        grads = list(self.grad_W)
        for g, b in zip(self.grad_gamma, self.grad_beta):
            grads += [g, b]
        return grads


def _forward(layers, x, cache):
    tape = []
    for layer in layers:
        if isinstance(layer, Linear):
            cache.inputs[layer.index - 1] = x
            x = x @ layer.W.T
            cache.pre[layer.index - 1] = x
            tape.append((layer, None))
        elif isinstance(layer, ReLU):
            mask = x > 0
            x = np.where(mask, x, 0.0)
            tape.append((layer, mask))
        elif isinstance(layer, BatchNorm):
            x, stats = bn_forward(x, layer.gamma, layer.beta, layer.eps)
            cache.bn_stats[layer.index - 1] = stats
            tape.append((layer, stats))
        else:
            branch_out, sub = _forward(layer.branch, x, cache)
            z = x + branch_out
            if layer.variant is BlockVariant.POST_ACT:
                mask = z > 0
                z = np.where(mask, z, 0.0)
            else:
                mask = None
            tape.append((layer, (sub, mask)))
            x = z
    return x, tape


def forward(net: Network, X, mode: str = "train") -> BatchCache:
    """Run ``X`` (N x d0) through the network; BN always uses batch statistics."""
    if mode.lower() != "train":
        raise ParameterError("only train-mode forward passes are supported")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != net.in_dim:
        raise DimensionError(f"input must be N x {net.in_dim}, got {X.shape}")
    if net.has_batchnorm() and X.shape[0] < 2:
        raise BatchTooSmallError("networks with batch norm need at least 2 examples")
    cache = BatchCache(X, [None] * net.depth, [None] * net.depth, [None] * len(net.norms),
                       token=(id(net), net.version))
    cache.output, cache.tape = _forward(net.layers, X, cache)
    return cache


def _backward(tape, g, cache):
    n = cache.n
    for layer, rec in reversed(tape):
        if isinstance(layer, Linear):
            k = layer.index - 1
            cache.grad_pre[k] = g
            cache.grad_W[k] = (g.T @ cache.inputs[k]) / n
            g = g @ layer.W
        elif isinstance(layer, ReLU):
            g = np.where(rec, g, 0.0)
        elif isinstance(layer, BatchNorm):
            g, dgamma, dbeta = bn_backward(g, rec)
            cache.grad_gamma[layer.index - 1] = dgamma / n
            cache.grad_beta[layer.index - 1] = dbeta / n
        else:
            sub, mask = rec
            if mask is not None:
                g = np.where(mask, g, 0.0)
            g = g + _backward(sub, g, cache)
    return g


def backward(net: Network, cache: BatchCache, grad_out) -> BatchCache:
    """Back-propagate per-example output-gradients ``grad_out`` (N x c).

    Fills ``grad_pre`` (dh_k), ``grad_W`` and the BN parameter gradients of
    the batch-mean loss.  Returns the same cache.
    """
    if cache.token != (id(net), net.version):
        raise CacheMismatchError("cache was produced by a different network state")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if grad_out.shape != cache.output.shape:
        raise DimensionError(f"output gradient shape {grad_out.shape} != output shape {cache.output.shape}")
    cache.grad_pre = [None] * net.depth
    cache.grad_W = [None] * net.depth
    cache.grad_gamma = [None] * len(net.norms)
    cache.grad_beta = [None] * len(net.norms)
    _backward(cache.tape, grad_out, cache)
    return cache


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grad(h_out, targets, loss=Loss.SOFTMAX_CE):
    """Batch-mean loss and per-example output-gradients.

    MSE is ``sum_j (y_j - h_j)^2`` per example; SoftmaxCE takes integer
    labels.  Row ``i`` of the returned gradient is d loss_i / d h_out[i], so
    the gradient of the mean is that matrix divided by N.
    """
    h = np.asarray(h_out, dtype=np.float64)
    loss = Loss(loss)
    n = h.shape[0]
    if loss is Loss.MSE:
        y = np.asarray(targets, dtype=np.float64)
        if y.shape != h.shape:
            raise DimensionError(f"targets shape {y.shape} != outputs shape {h.shape}")
        r = h - y
        return float(np.sum(r * r) / n), 2.0 * r
    labels = np.asarray(targets)
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.mod(labels, 1) == 0):
            raise InvalidLabelError("labels must be integers")
        labels = labels.astype(np.int64)
    c = h.shape[1]
    if n and (labels.min() < 0 or labels.max() >= c):
        raise InvalidLabelError(f"labels must lie in [0, {c})")
    z = h - h.max(axis=1, keepdims=True)
    logsum = np.log(np.sum(np.exp(z), axis=1))
    rows = np.arange(n)
    value = float(np.mean(logsum - z[rows, labels]))
    grad = softmax(h)
    grad[rows, labels] -= 1.0
    return value, grad


def predict_error(h_out, labels) -> float:
    return float(np.mean(np.argmax(h_out, axis=1) != np.asarray(labels)))


# ------------------------------------------------------------ optimizers

@dataclass
class OptimizerState:
    kind: OptimizerKind = OptimizerKind.SGD
    lr: float = 0.1
    batch_size: Optional[int] = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Optional[list] = None
    v: Optional[list] = None
    frozen: frozenset = frozenset()  # 1-based Linear indices whose W is held fixed

    def __post_init__(self):
        self.kind = OptimizerKind(self.kind)
        if not self.lr >= 0:
            raise ParameterError("learning rate must be non-negative")
        self.frozen = frozenset(int(k) for k in self.frozen)


def step(net: Network, grads, opt: OptimizerState):
    """Apply one update in place; returns ``(net, opt)``.

    FullGD and SGD: theta -= lr * g.  Adam: bias-corrected moments.
    Weights of Linear layers listed in ``opt.frozen`` are left untouched.
    """
    params = net.parameters()
    if len(grads) != len(params):
        raise DimensionError(f"expected {len(params)} gradients, got {len(grads)}")
    for (name, p), g in zip(params, grads):
        if np.shape(g) != p.shape:
            raise DimensionError(f"gradient for {name} has shape {np.shape(g)}, expected {p.shape}")
    skip = {f"W{k}" for k in opt.frozen}
    opt.t += 1
    if opt.kind is OptimizerKind.ADAM:
        if opt.m is None:
            opt.m = [np.zeros_like(p) for _, p in params]
            opt.v = [np.zeros_like(p) for _, p in params]
        c1 = 1.0 - opt.beta1 ** opt.t
        c2 = 1.0 - opt.beta2 ** opt.t
        for i, ((name, p), g) in enumerate(zip(params, grads)):
            if name in skip:
                continue
            opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * g
            opt.v[i] = opt.beta2 * opt.v[i] + (1.0 - opt.beta2) * g * g
            p -= opt.lr * (opt.m[i] / c1) / (np.sqrt(opt.v[i] / c2) + opt.eps)
    else:
        for (name, p), g in zip(params, grads):
            if name not in skip:
                p -= opt.lr * g
    net.version += 1
    return net, opt


# ---------------------------------------------------------- persistence

def save_network(net: Network, path) -> None:
    meta = {
        "specs": [s.to_dict() for s in net.specs],
        "last_bn": net.last_bn,
        "init": net.init.value,
        "seed": net.seed,
        "eps": [bn.eps for bn in net.norms],
    }
    arrays = {name: arr for name, arr in net.parameters()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_network(path) -> Network:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        # saved specs already contain the inserted last BN
        net = build_network([LayerSpec.from_dict(s) for s in meta["specs"]], last_bn=False,
                            init=meta["init"], seed=meta["seed"])
        net.last_bn = meta["last_bn"]
        for lin in net.linears:
            lin.W = data[f"W{lin.index}"].copy()
        for bn, eps in zip(net.norms, meta["eps"]):
            bn.gamma = data[f"gamma{bn.index}"].copy()
            bn.beta = data[f"beta{bn.index}"].copy()
            bn.eps = eps
    return net
