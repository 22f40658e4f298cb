"""Layer-wise curvature: input/output-gradient second moments and their spectra.

For Linear layer k the curvature block is approximated by the Kronecker
product of ``Sx = E[x_{k-1} x_{k-1}^T]`` and ``Sgh = E[dh_k^T dh_k]``; its
eigenvalues are all pairwise products of the factor eigenvalues, so the
largest eigenvalue, condition number and percentile condition numbers come
from two small eigenproblems.  The ``*_exact`` functions build the actual
per-example outer-product matrices for comparison at small scale.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from . import linalg
from .errors import CapacityError, DimensionError, InvalidValueError, ParameterError
from .linalg import Spectrum
from .nn import BatchCache, Loss, Network, backward, forward, loss_and_grad, softmax

DEFAULT_PERCENTS = (0.5, 0.8, 0.9, 1.0)
DEFAULT_MAX_PARAMS = 2000
SYMMETRY_RTOL = 1e-10


class LabelMode(str, enum.Enum):
    EMPIRICAL = "Empirical"
    SAMPLED = "Sampled"


class GradMode(str, enum.Enum):
    KFAC = "KfacApprox"
    EXACT = "Exact"


@dataclass
class FimConfig:
    label_mode: LabelMode = LabelMode.SAMPLED
    samples: int = 1
    max_params: int = DEFAULT_MAX_PARAMS
    seed: int = 0

    def __post_init__(self):
        self.label_mode = LabelMode(self.label_mode)
        if self.samples < 1:
            raise ParameterError("FimConfig.samples must be >= 1")


@dataclass
class KfacSpectrum:
    lambda_max: float
    kappa: float
    kappa_p: Dict[float, float]


@dataclass
class LayerConditioning:
    layer: int
    lambda_max_sx: float
    lambda_max_sgh: float
    kappa_p_sx: Dict[float, float]
    kappa_p_sgh: Dict[float, float]
    lambda_max_f: float
    kappa_f: float
    kappa_p_f: Dict[float, float]
    lambda_max_sgw: float
    w_fro: float
    w_spec: float
    g_spec: float
    rank_eps_sx: float = 0.0
    rank_eps_sgh: float = 0.0


def kappa_p(spec: Spectrum, p: float) -> float:
    """lambda_max over the ceil(p*d)-th largest eigenvalue.

    Eigenvalues at or below ``spec.rank_eps`` count as zero.  For p = 1 a
    zero is replaced by the smallest nonzero eigenvalue; for p < 1 a zero
    gives ``inf``.  An all-zero spectrum gives ``inf``.
    """
    if not 0.0 < p <= 1.0:
        raise ParameterError(f"percentage must lie in (0, 1], got {p}")
    d = spec.dim
    if d == 0:
        raise ParameterError("empty spectrum")
    lam_max = float(spec.eigenvalues[0])
    if lam_max <= spec.rank_eps:
        return math.inf
    idx = max(1, math.ceil(round(p * d, 9)))
    lam_p = float(spec.eigenvalues[idx - 1])
    if lam_p <= spec.rank_eps:
        if p < 1.0:
            return math.inf
        lam_p = float(spec.nonzero()[-1])
    return lam_max / lam_p


def _factor_spectrum(a, name) -> Spectrum:
    A = linalg.as_matrix(a, name)
    if A.shape[0] != A.shape[1]:
        raise DimensionError(f"{name} must be square")
    scale = max(float(np.max(np.abs(A))) if A.size else 0.0, np.finfo(float).tiny)
    if np.max(np.abs(A - A.T), initial=0.0) > SYMMETRY_RTOL * scale:
        raise InvalidValueError(f"{name} is not symmetric")
    return linalg.sym_eig(A, psd=True)


def product_spectrum(sx: Spectrum, sgh: Spectrum) -> Spectrum:
    """Spectrum of the Kronecker product, from the factor eigenvalues."""
    prods = np.sort(np.multiply.outer(sx.eigenvalues, sgh.eigenvalues).ravel())[::-1]
    dim = prods.size
    return Spectrum(prods, dim, dim * (float(prods[0]) if dim else 0.0) * linalg.RANK_EPS_FACTOR)


def kfac_spectrum(sigma_x, sigma_gh, percents: Sequence[float] = DEFAULT_PERCENTS) -> KfacSpectrum:
    """Largest eigenvalue, condition number and kappa_p of ``Sx (x) Sgh``.

    lambda_max and kappa are products of the factor values; kappa_p comes
    from the sorted multiset of pairwise eigenvalue products.
    """
    sx = _factor_spectrum(sigma_x, "sigma_x")
    sgh = _factor_spectrum(sigma_gh, "sigma_gh")
    prod = product_spectrum(sx, sgh)
    return KfacSpectrum(
        lambda_max=sx.lambda_max * sgh.lambda_max,
        kappa=kappa_p(sx, 1.0) * kappa_p(sgh, 1.0),
        kappa_p={p: kappa_p(prod, p) for p in percents},
    )


def layer_covariances(cache: BatchCache, k: int):
    """(Sx, Sgh) for Linear layer k: uncentered second moments over the batch."""
    if not 1 <= k <= len(cache.inputs):
        raise IndexError(f"layer {k} out of range 1..{len(cache.inputs)}")
    return linalg.second_moment(cache.x_in(k)), linalg.second_moment(cache.grad_h(k))


# --------------------------------------------------------------- exact oracles

def _per_example_grads(cache: BatchCache, k: int) -> np.ndarray:
    """Rows are vec(dh_k(i) x_{k-1}(i)^T), row-major over W_k."""
    g = cache.grad_h(k)
    x = cache.x_in(k)
    return np.einsum("na,nb->nab", g, x).reshape(g.shape[0], -1)


def _sampled_output_grads(h_out: np.ndarray, loss: Loss, rng: np.random.Generator) -> np.ndarray:
    """Per-example output-gradients with targets drawn from the model.

    SoftmaxCE draws a label from the softmax; MSE draws ``y = h + noise``
    with noise variance 1/2, the Gaussian whose negative log-likelihood is
    the squared error.
    """
    if loss is Loss.SOFTMAX_CE:
        p = softmax(h_out)
        u = rng.random(h_out.shape[0])
        labels = np.minimum((np.cumsum(p, axis=1) < u[:, None]).sum(axis=1), h_out.shape[1] - 1)
        g = p.copy()
        g[np.arange(h_out.shape[0]), labels] -= 1.0
        return g
    noise = rng.standard_normal(h_out.shape) * math.sqrt(0.5)
    return -2.0 * noise


def _output_grad_draws(net: Network, X, y, cfg: FimConfig, loss: Loss):
    """Yield backward-complete caches, one per label draw."""
    loss = Loss(loss)
    cache = forward(net, X)
    if cfg.label_mode is LabelMode.EMPIRICAL:
        if y is None:
            raise ParameterError("Empirical label mode needs dataset labels")
        _, g = loss_and_grad(cache.output, y, loss)
        yield backward(net, cache, g)
        return
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    for _ in range(cfg.samples):
        g = _sampled_output_grads(cache.output, loss, rng)
        yield backward(net, cache, g)


def _layer_param_count(net: Network, k: int) -> int:
    if not 1 <= k <= net.depth:
        raise IndexError(f"layer {k} out of range 1..{net.depth}")
    return net.weight(k).size


def sub_fim_exact(net: Network, X, k: int, cfg: FimConfig = None, y=None, loss=Loss.SOFTMAX_CE) -> np.ndarray:
    """Mean over examples (and label draws) of vec(dW_k(i)) vec(dW_k(i))^T."""
    cfg = cfg or FimConfig()
    size = _layer_param_count(net, k)
    if size > cfg.max_params:
        raise CapacityError(f"layer {k} has {size} parameters, cap is {cfg.max_params}")
    F = np.zeros((size, size))
    draws = 0
    for cache in _output_grad_draws(net, X, y, cfg, loss):
        G = _per_example_grads(cache, k)
        F += G.T @ G
        draws += G.shape[0]
    F /= draws
    return 0.5 * (F + F.T)


def full_fim_exact(net: Network, X, cfg: FimConfig = None, y=None, loss=Loss.SOFTMAX_CE) -> np.ndarray:
    """Outer-product curvature over all weights, ordered W_1, ..., W_K (row-major)."""
    cfg = cfg or FimConfig()
    size = sum(lin.W.size for lin in net.linears)
    if size > cfg.max_params:
        raise CapacityError(f"network has {size} weights, cap is {cfg.max_params}")
    F = np.zeros((size, size))
    draws = 0
    for cache in _output_grad_draws(net, X, y, cfg, loss):
        G = np.concatenate([_per_example_grads(cache, k) for k in range(1, net.depth + 1)], axis=1)
        F += G.T @ G
        draws += G.shape[0]
    F /= draws
    return 0.5 * (F + F.T)


def second_moment_matrix(net: Network, X, labels, k: Optional[int] = None, max_params: int = DEFAULT_MAX_PARAMS,
                         loss=Loss.SOFTMAX_CE) -> np.ndarray:
    """Second moment of sample gradients using the dataset labels.

    ``k=None`` gives the matrix over all weights, otherwise the block of
    Linear layer k.
    """
    cfg = FimConfig(label_mode=LabelMode.EMPIRICAL, max_params=max_params)
    if k is None:
        return full_fim_exact(net, X, cfg, y=labels, loss=loss)
    return sub_fim_exact(net, X, k, cfg, y=labels, loss=loss)


def block_offdiag_ratio(F: np.ndarray, sizes: Sequence[int]) -> float:
    """Frobenius norm of the off-diagonal blocks relative to the whole matrix."""
    total = linalg.frobenius_norm(F)
    if total == 0.0:
        return 0.0
    mask = np.ones(F.shape, dtype=bool)
    start = 0
    for s in sizes:
        mask[start:start + s, start:start + s] = False
        start += s
    return math.sqrt(float(np.sum(F[mask] ** 2))) / total


def hessian_linear_regression(X, out_dim: int = 1) -> np.ndarray:
    """E[x x^T] (x) I for a linear least-squares model with ``out_dim`` outputs."""
    if out_dim < 1:
        raise ParameterError("out_dim must be >= 1")
    return linalg.kron(linalg.second_moment(X), np.eye(out_dim))


def softmax_output_matrix(c: int) -> np.ndarray:
    """S = (I - 11^T / c) / c, the softmax output Hessian at uniform predictions."""
    if c < 2:
        raise ParameterError("need at least 2 classes")
    return (np.eye(c) - np.full((c, c), 1.0 / c)) / c


def hessian_linear_classifier(X, c: int) -> np.ndarray:
    """E[x x^T] (x) S for a linear softmax classifier."""
    S = softmax_output_matrix(c)
    return linalg.kron(linalg.second_moment(X), S)


def weight_grad_second_moment(cache: BatchCache, k: int, mode=GradMode.KFAC,
                              max_params: int = DEFAULT_MAX_PARAMS) -> float:
    """Largest eigenvalue of the per-example weight-gradient second moment.

    ``Exact`` eigen-decomposes the mean of vec(dW_k(i)) vec(dW_k(i))^T
    (through the smaller of the two Gram matrices); ``KfacApprox`` returns
    lambda_max(Sx) * lambda_max(Sgh).
    """
    mode = GradMode(mode)
    if mode is GradMode.KFAC:
        sx, sgh = layer_covariances(cache, k)
        return linalg.sym_eig(sx, psd=True).lambda_max * linalg.sym_eig(sgh, psd=True).lambda_max
    G = _per_example_grads(cache, k)
    if G.shape[1] > max_params:
        raise CapacityError(f"layer {k} has {G.shape[1]} parameters, cap is {max_params}")
    n = G.shape[0]
    gram = (G @ G.T) / n if n < G.shape[1] else (G.T @ G) / n
    return linalg.sym_eig(gram, psd=True).lambda_max


def layer_conditioning(net: Network, cache: BatchCache, k: int,
                       percents: Sequence[float] = DEFAULT_PERCENTS,
                       grad_mode=GradMode.KFAC) -> LayerConditioning:
    """All probe statistics for Linear layer k from one forward/backward cache."""
    sigma_x, sigma_gh = layer_covariances(cache, k)
    sx = linalg.sym_eig(sigma_x, psd=True)
    sgh = linalg.sym_eig(sigma_gh, psd=True)
    prod = product_spectrum(sx, sgh)
    lam_f = sx.lambda_max * sgh.lambda_max
    if GradMode(grad_mode) is GradMode.KFAC:
        lam_gw = lam_f
    else:
        lam_gw = weight_grad_second_moment(cache, k, GradMode.EXACT)
    W = net.weight(k)
    return LayerConditioning(
        layer=k,
        lambda_max_sx=sx.lambda_max,
        lambda_max_sgh=sgh.lambda_max,
        kappa_p_sx={p: kappa_p(sx, p) for p in percents},
        kappa_p_sgh={p: kappa_p(sgh, p) for p in percents},
        lambda_max_f=lam_f,
        kappa_f=kappa_p(sx, 1.0) * kappa_p(sgh, 1.0),
        kappa_p_f={p: kappa_p(prod, p) for p in percents},
        lambda_max_sgw=lam_gw,
        w_fro=linalg.frobenius_norm(W),
        w_spec=linalg.spectral_norm(W),
        g_spec=linalg.spectral_norm(cache.grad_W[k - 1]),
        rank_eps_sx=sx.rank_eps,
        rank_eps_sgh=sgh.rank_eps,
    )
