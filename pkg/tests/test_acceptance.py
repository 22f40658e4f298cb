"""End-to-end acceptance checks, one test per criterion.

Each test records a title and a measured detail; conftest prints one
PASS/FAIL line per criterion at the end of the session.
"""
import math
import subprocess
import sys
import time

import numpy as np
import pytest

from condlab import linalg
from condlab.conditioning import FimConfig, LabelMode, full_fim_exact, layer_conditioning, sub_fim_exact
from condlab.data import default_mnist_dir, load_mnist
from condlab.nn import (
    Init,
    ReLU,
    backward,
    build_network,
    forward,
    loss_and_grad,
    mlp_specs,
    residual_mlp_specs,
)
from condlab.runner import ExperimentConfig, run_experiment
from condlab.verify import run_suite


@pytest.fixture(scope="module")
def mnist():
    root = default_mnist_dir()
    if root is None:
        pytest.skip("no MNIST directory available")
    train, _ = load_mnist(root)
    return train


@pytest.fixture
def crit(record_property):
    class Recorder:
        def __call__(self, number, title):
            record_property("criterion", number)
            record_property("title", f"criterion {number} ({title})")
            self.t0 = time.perf_counter()

        def detail(self, text):
            record_property("detail", text)

        def elapsed(self):
            return time.perf_counter() - self.t0

    return Recorder()


def lambda_max_x(cache, k):
    return linalg.sym_eig(linalg.second_moment(cache.x_in(k)), psd=True).lambda_max


def spearman(x, y):
    def ranks(v):
        v = np.asarray(v, dtype=float)
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        r[order] = np.arange(len(v), dtype=float)
        for value in np.unique(v):  # average ranks over ties
            tie = v == value
            r[tie] = r[tie].mean()
        return r

    rx, ry = ranks(x), ranks(y)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    denom = math.sqrt(float(np.sum(rx * rx) * np.sum(ry * ry)))
    return float(np.sum(rx * ry) / denom) if denom > 0 else 0.0


def run_checks(crit, number, title, suite, limit):
    crit(number, title)
    checks = run_suite(suite)
    took = crit.elapsed()
    worst = max(checks, key=lambda c: c.value / c.tol)
    crit.detail(f"{len(checks)} checks, worst {worst.name} = {worst.value:.3g} (tol {worst.tol:g}), {took:.2f}s")
    assert all(c.passed for c in checks), [c.line() for c in checks if not c.passed]
    assert took < limit


def test_criterion_01_kronecker_spectrum(crit):
    run_checks(crit, 1, "Kronecker spectrum exactness", "prop1", 10)


def test_criterion_02_relu_scaling(crit):
    run_checks(crit, 2, "ReLU scaling identities", "theorem1", 5)


def test_criterion_03_bn_scaling(crit):
    run_checks(crit, 3, "BN scaling identities", "theorem2", 5)


def test_criterion_04_bn_backward(crit):
    run_checks(crit, 4, "BN backward vs finite differences", "bn-grad", 5)


def test_criterion_05_block_consistency(crit):
    run_checks(crit, 5, "sub-FIM block consistency", "blocks", 5)


def test_criterion_06_plain_vs_bn_curvature(crit, mnist):
    crit(6, "plain vs BN curvature at LeCun init")
    X, y = mnist.X[:1024], mnist.y[:1024]

    def kfac_lambda(bn):
        # the probe path: empirical output-gradients, product of the factor maxima per layer
        net = build_network(mlp_specs(144, 24, 8, 10, bn=bn), init=Init.LECUN, seed=0)
        cache = forward(net, X)
        backward(net, cache, loss_and_grad(cache.output, y)[1])
        return max(layer_conditioning(net, cache, k).lambda_max_f for k in range(1, net.depth + 1))

    def full_lambda(bn):
        # width 8 keeps all 1616 weights within the exact-oracle capacity
        net = build_network(mlp_specs(144, 8, 8, 10, bn=bn), init=Init.LECUN, seed=0)
        F = full_fim_exact(net, X, FimConfig(label_mode=LabelMode.SAMPLED, seed=0))
        return linalg.sym_eig(F, psd=True).lambda_max

    kfac_ratio = kfac_lambda("none") / kfac_lambda("hidden")
    full_ratio = full_lambda("none") / full_lambda("hidden")
    took = crit.elapsed()
    crit.detail(f"full-FIM ratio (width 8) = {full_ratio:.3g}, K-FAC ratio (width 24) = {kfac_ratio:.3g}, "
                f"tol 1e-3, {took:.0f}s")
    assert full_ratio <= 1e-3
    assert kfac_ratio <= 1e-3
    assert took < 300


def test_criterion_07_input_magnitude_decay(crit, mnist):
    crit(7, "layer-input magnitude over 20 layers")
    X = mnist.X[:1024]
    ratios = {}
    for init, bn in ((Init.LECUN, "none"), (Init.HE, "none"), (Init.LECUN, "hidden"), (Init.HE, "hidden")):
        net = build_network(mlp_specs(144, 256, 20, 10, bn=bn), init=init, seed=0)
        cache = forward(net, X)
        ratios[init.value, bn] = lambda_max_x(cache, 20) / lambda_max_x(cache, 1)
    took = crit.elapsed()
    crit.detail(", ".join(f"{i}/{b}={r:.3g}" for (i, b), r in ratios.items()) + f", {took:.1f}s")
    assert ratios["LeCun", "none"] < 1e-4
    for key in (("He", "none"), ("LeCun", "hidden"), ("He", "hidden")):
        assert 1e-2 <= ratios[key] <= 1e2, key
    assert took < 120


def test_criterion_08_dying_and_full_neurons(crit, mnist):
    crit(8, "dying/full neurons at He init")

    def counts(bn):
        net = build_network(mlp_specs(144, 256, 20, 10, bn=bn), init=Init.HE, seed=0)
        cache = forward(net, mnist.X)
        masks = [mask for layer, mask in cache.tape if isinstance(layer, ReLU)]
        dying = [int(np.sum(~m.any(axis=0))) for m in masks]
        full = [int(np.sum(m.all(axis=0))) for m in masks]
        return dying, full

    dying, full = counts("none")
    total = [a + b for a, b in zip(dying, full)]
    rho = spearman(np.arange(1, len(total) + 1), total)
    bn_dying, bn_full = counts("hidden")
    took = crit.elapsed()
    crit.detail(f"plain dying+full per layer {total}, Spearman {rho:.3f}; "
                f"BN dying {sum(bn_dying)} full {sum(bn_full)}, {took:.1f}s")
    assert sum(total) > 0 and rho > 0
    assert sum(bn_dying) == 0 and sum(bn_full) == 0
    assert took < 60


def test_criterion_09_weight_domination_harm(crit):
    crit(9, "blocking layer-1 updates")
    base = {
        "seed": 0,
        "network": {"width": 256, "depth": 5, "bn": "hidden"},
        "optimizer": {"kind": "SGD", "lr": 0.1, "batch_size": 128, "epochs": 10},
        "probe": {"enabled": False},
    }
    free = run_experiment(ExperimentConfig.from_dict(base, env={})).final
    base["optimizer"]["frozen_layers"] = [1]
    blocked = run_experiment(ExperimentConfig.from_dict(base, env={})).final
    took = crit.elapsed()
    losses = blocked["epoch_losses"]
    crit.detail(f"train error blocked {blocked['train_error']:.5f} vs free {free['train_error']:.5f}; "
                f"blocked epoch loss {losses[0]:.4f} -> {losses[-1]:.4f}, {took:.0f}s")
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert blocked["train_error"] > free["train_error"]
    assert took < 300


def test_criterion_10_last_bn(crit, mnist):
    crit(10, "LastBN bounds the final-layer input")
    X = mnist.X[:1024]
    depths = (8, 16, 32, 64)
    found = {}
    for variant in ("PostAct", "PreAct"):
        for last_bn in (False, True):
            vals = []
            for blocks in depths:
                net = build_network(residual_mlp_specs(144, 64, blocks, 10, variant), last_bn=last_bn,
                                    init=Init.HE, seed=0)
                vals.append(lambda_max_x(forward(net, X), net.depth))
            found[variant, last_bn] = vals
    took = crit.elapsed()
    crit.detail("; ".join(f"{v} last_bn={lb}: " + ",".join(f"{x:.3g}" for x in vals)
                          for (v, lb), vals in found.items()) + f", {took:.0f}s")
    for variant in ("PostAct", "PreAct"):
        plain = found[variant, False]
        assert all(b > a for a, b in zip(plain, plain[1:])), variant
        bounded = found[variant, True]
        assert all(bounded[0] / 10 <= v <= bounded[0] * 10 for v in bounded), variant
    assert took < 300


def test_criterion_11_probe_scaling(crit):
    crit(11, "probe cost scaling")
    rng = np.random.Generator(np.random.Philox(0))

    def setup(d):
        net = build_network(mlp_specs(d, d, 3, 10), seed=0)
        return net, rng.standard_normal((1024, d)), rng.integers(0, 10, 1024)

    def probe(net, X, y):
        cache = forward(net, X)
        backward(net, cache, loss_and_grad(cache.output, y)[1])
        return layer_conditioning(net, cache, 2)

    widths = (32, 64, 128, 256)
    times = []
    for d in widths:
        args = setup(d)
        best = math.inf
        for _ in range(3):
            t = time.perf_counter()
            probe(*args)
            best = min(best, time.perf_counter() - t)
        times.append(best)
    slope = float(np.polyfit(np.log(widths), np.log(times), 1)[0])
    net, X, _ = setup(32)
    t = time.perf_counter()
    linalg.sym_eig(sub_fim_exact(net, X, 2, FimConfig(seed=0)), psd=True)
    exact = time.perf_counter() - t
    speedup = exact / times[0]
    crit.detail(f"times {', '.join(f'{x:.3g}s' for x in times)}, slope {slope:.2f}, "
                f"exact/probe at d=32 = {speedup:.0f}x")
    assert slope <= 3.5
    assert times[-1] < 10
    assert speedup >= 10


def test_criterion_12_cli_determinism(crit, tmp_path):
    crit(12, "byte-identical traces from the CLI")
    cfg = tmp_path / "config.json"
    cfg.write_text('{"seed": 3, "data": {"n_train": 600}, "network": {"width": 32, "depth": 4},'
                   ' "optimizer": {"batch_size": 100, "epochs": 2}}')
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        proc = subprocess.run([sys.executable, "-m", "condlab.cli", "run", "--config", str(cfg), "--out", str(out)],
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        outs.append((out / "trace.csv").read_bytes())
    lines = outs[0].count(b"\n")
    crit.detail(f"{len(outs[0])} bytes, {lines} lines, identical={outs[0] == outs[1]}")
    assert outs[0] == outs[1]
