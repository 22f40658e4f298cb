"""Self-check suites behind ``condlab verify``.

Each suite returns a list of :class:`Check` results; a suite passes when every
check's measured deviation is within its tolerance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from . import linalg
from .conditioning import FimConfig, LabelMode, full_fim_exact, kappa_p, kfac_spectrum, sub_fim_exact
from .diagnostics import verify_theorem1, verify_theorem2
from .nn import (
    Init,
    bn_backward,
    bn_forward,
    build_network,
    forward,
    backward,
    linear,
    loss_and_grad,
    mlp_specs,
    relu,
)


@dataclass
class Check:
    name: str
    value: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.value <= self.tol

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.value:.3e} <= {self.tol:.0e}"


def _rng(seed):
    return np.random.Generator(np.random.Philox(seed))


def _rel(a, b) -> float:
    if math.isinf(a) and math.isinf(b):
        return 0.0
    return abs(a - b) / max(abs(b), np.finfo(float).tiny)


def random_spd(rng, d):
    B = rng.standard_normal((d, d + 2))
    return B @ B.T / (d + 2) + 0.1 * np.eye(d)


def prop1_suite(pairs: int = 100, seed: int = 0, percents=(0.5, 0.8, 1.0), tol: float = 1e-10) -> List[Check]:
    """Kronecker-factored spectrum vs eigenvalues of the explicit Kronecker product."""
    worst = {"lambda_max": 0.0, "kappa": 0.0}
    worst.update({f"kappa_p{int(round(p * 100))}": 0.0 for p in percents})
    for i in range(pairs):
        rng = _rng(seed + i)
        dx, dh = (int(v) for v in rng.integers(2, 9, size=2))
        sx, sgh = random_spd(rng, dx), random_spd(rng, dh)
        fast = kfac_spectrum(sx, sgh, percents)
        oracle = linalg.sym_eig(linalg.kron(sx, sgh), psd=True)
        worst["lambda_max"] = max(worst["lambda_max"], _rel(fast.lambda_max, oracle.lambda_max))
        worst["kappa"] = max(worst["kappa"], _rel(fast.kappa, kappa_p(oracle, 1.0)))
        for p in percents:
            key = f"kappa_p{int(round(p * 100))}"
            worst[key] = max(worst[key], _rel(fast.kappa_p[p], kappa_p(oracle, p)))
    return [Check(f"prop1 {k} ({pairs} pairs)", v, tol) for k, v in worst.items()]


def _scaling_grid(seed, bn, eps=0.0):
    # He init keeps per-unit pre-BN variance near 1, where the eps > 0 error is about eps / var
    for K in (2, 4, 8):
        for mu in (1.0, 1.7):
            rng = _rng(seed + 7 * K + int(mu * 10))
            X = rng.standard_normal((32, 6))
            alphas = rng.uniform(0.5, 2.0, size=K)
            net = build_network(mlp_specs(6, 12, K, 4, bn="all" if bn else "none"),
                                init=Init.HE, seed=seed + K, bn_eps=eps)
            yield K, mu, rng, X, alphas, net


def theorem1_suite(seed: int = 0, tol: float = 1e-10) -> List[Check]:
    """ReLU scaling identities for K in {2, 4, 8} and mu in {1, 1.7}."""
    checks = []
    for K, mu, rng, X, alphas, net in _scaling_grid(seed, bn=False):
        injected = rng.standard_normal((X.shape[0], 4))
        rep = verify_theorem1(net, X, alphas, mu, injected, tol=tol)
        checks.append(Check(f"theorem1 K={K} mu={mu}", rep.max_deviation, tol))
    return checks


def theorem2_suite(seed: int = 0, tol: float = 1e-10, eps_tol: float = 1e-4) -> List[Check]:
    """BN scaling identities with eps = 0 (exact) and eps = 1e-5 (banded)."""
    checks = []
    for eps, t in ((0.0, tol), (1e-5, eps_tol)):
        for K, mu, rng, X, alphas, net in _scaling_grid(seed, bn=True, eps=eps):
            if mu != 1.0:
                continue  # the loss fixes the output-gradient; mu plays no role
            y = rng.integers(0, 4, size=X.shape[0])
            rep = verify_theorem2(net, X, alphas, y, tol=t)
            checks.append(Check(f"theorem2 K={K} eps={eps:g}", rep.max_deviation, t))
    return checks


def _central_diff(f, x, h):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def _normwise(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), np.finfo(float).tiny))


def network_gradient_error(net, X, y, h: float = 1e-6) -> float:
    """Worst normwise error of backward() against central differences of the mean loss."""
    cache = backward(net, forward(net, X), loss_and_grad(forward(net, X).output, y)[1])
    worst = 0.0
    for (name, p), g in zip(net.parameters(), cache.param_grads()):
        fd = _central_diff(lambda: loss_and_grad(forward(net, X).output, y)[0], p, h)
        worst = max(worst, _normwise(g, fd))
    return worst


def bn_grad_suite(seed: int = 0, tol: float = 1e-5, batches: int = 5) -> List[Check]:
    """Batch-norm backward and whole-network gradients against finite differences."""
    step = 1e-6
    worst = 0.0
    for i in range(batches):
        rng = _rng(seed + i)
        hmat = rng.standard_normal((8, 4)) * rng.uniform(0.5, 3.0, size=4) + rng.standard_normal(4)
        gamma = rng.uniform(0.5, 2.0, size=4)
        beta = rng.standard_normal(4)
        R = rng.standard_normal((8, 4))

        def objective():
            return float(np.sum(R * bn_forward(hmat, gamma, beta, 1e-5)[0]))

        _, stats = bn_forward(hmat, gamma, beta, 1e-5)
        gh, gg, gb = bn_backward(R, stats)
        for analytic, param in ((gh, hmat), (gg, gamma), (gb, beta)):
            worst = max(worst, _normwise(analytic, _central_diff(objective, param, step)))
    checks = [Check(f"bn backward vs finite differences ({batches} batches of 8x4)", worst, tol)]

    rng = _rng(seed + 100)
    X = rng.standard_normal((16, 5))
    y = rng.integers(0, 3, size=16)
    for bn in ("none", "hidden"):
        net = build_network(mlp_specs(5, 7, 3, 3, bn=bn), seed=seed)
        for bn_layer in net.norms:
            bn_layer.gamma[:] = rng.uniform(0.5, 1.5, size=bn_layer.gamma.size)
            bn_layer.beta[:] = rng.normal(0.0, 0.3, size=bn_layer.beta.size)
        err = network_gradient_error(net, X, y, step)
        checks.append(Check(f"3-layer network gradient (bn={bn})", err, tol))
    return checks


def blocks_suite(seed: int = 0, tol: float = 1e-12) -> List[Check]:
    """Per-layer exact blocks equal the diagonal blocks of the full matrix (2-3-2 net, batch 16)."""
    rng = _rng(seed)
    X = rng.standard_normal((16, 2))
    net = build_network([linear(2, 3), relu(3), linear(3, 2)], seed=seed)
    cfg = FimConfig(label_mode=LabelMode.SAMPLED, seed=seed)
    F = full_fim_exact(net, X, cfg)
    worst = 0.0
    start = 0
    for k in range(1, net.depth + 1):
        block = sub_fim_exact(net, X, k, cfg)
        n = block.shape[0]
        worst = max(worst, float(np.max(np.abs(F[start:start + n, start:start + n] - block))))
        start += n
    return [Check("sub-FIM blocks vs full-FIM diagonal (2-3-2, batch 16)", worst, tol)]


SUITES: Dict[str, Callable[[], List[Check]]] = {
    "prop1": prop1_suite,
    "theorem1": theorem1_suite,
    "theorem2": theorem2_suite,
    "bn-grad": bn_grad_suite,
    "blocks": blocks_suite,
}


def run_suite(name: str) -> List[Check]:
    if name not in SUITES:
        raise KeyError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    return SUITES[name]()
