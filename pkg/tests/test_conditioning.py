import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from condlab import linalg
from condlab.conditioning import (
    FimConfig,
    GradMode,
    LabelMode,
    block_offdiag_ratio,
    full_fim_exact,
    hessian_linear_classifier,
    hessian_linear_regression,
    kappa_p,
    kfac_spectrum,
    layer_conditioning,
    layer_covariances,
    second_moment_matrix,
    softmax_output_matrix,
    sub_fim_exact,
    weight_grad_second_moment,
)
from condlab.errors import CapacityError, InvalidValueError, ParameterError
from condlab.linalg import Spectrum
from condlab.nn import Loss, backward, build_network, forward, linear, loss_and_grad, mlp_specs, relu, softmax

from oracles import rng, second_moment_loop, softmax_hessian


def spectrum(values):
    v = np.array(sorted(values, reverse=True), dtype=float)
    return Spectrum(v, v.size, v.size * max(abs(v)) * 1e-12)


def trained_cache(net, X, y, loss=Loss.SOFTMAX_CE):
    cache = forward(net, X)
    _, g = loss_and_grad(cache.output, y, loss)
    return backward(net, cache, g)


# ---------------------------------------------------------------- kappa_p

def test_kappa_p_examples():
    assert kappa_p(spectrum([4, 2, 1]), 1.0) == 4
    assert kappa_p(spectrum([4, 2, 1]), 0.5) == 2
    assert kappa_p(spectrum([5, 0, 0]), 1.0) == 1
    assert kappa_p(spectrum([5, 0, 0]), 0.5) == math.inf
    assert kappa_p(spectrum([0, 0]), 1.0) == math.inf


def test_kappa_p_index_is_exact_ceiling():
    # 0.8 * 10 must pick the 8th eigenvalue, not the 9th, despite float round-off
    spec = spectrum(range(10, 0, -1))
    assert kappa_p(spec, 0.8) == 10 / 3
    assert kappa_p(spec, 0.7) == 10 / 4


def test_kappa_p_rejects_bad_percent():
    for p in (0.0, -0.1, 1.01):
        with pytest.raises(ParameterError):
            kappa_p(spectrum([1, 1]), p)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1e-3, 1e3), min_size=1, max_size=20))
def test_kappa_p_monotone_in_p(values):
    spec = spectrum(values)
    ks = [kappa_p(spec, p) for p in (0.1, 0.5, 0.8, 0.9, 1.0)]
    assert all(a <= b for a, b in zip(ks, ks[1:]))
    assert ks[0] >= 1.0


# ---------------------------------------------------------------- kfac_spectrum

def test_kfac_examples():
    r = kfac_spectrum(np.eye(2), np.diag([4.0, 1.0]))
    assert (r.lambda_max, r.kappa) == (4.0, 4.0)
    r = kfac_spectrum(np.diag([9.0, 1.0]), np.diag([4.0, 1.0]))
    assert (r.lambda_max, r.kappa) == (36.0, 36.0)
    # products {36, 9, 4, 1}: 50% -> 2nd largest
    assert r.kappa_p[0.5] == 4.0


@pytest.mark.parametrize("seed", range(5))
def test_kfac_matches_explicit_kronecker(seed):
    r = rng(seed)
    A = r.standard_normal((3, 5))
    B = r.standard_normal((3, 4))
    sx, sgh = A @ A.T / 5, B @ B.T / 4
    fast = kfac_spectrum(sx, sgh, (0.5, 0.8, 1.0))
    oracle = linalg.sym_eig(linalg.kron(sx, sgh), psd=True)
    assert fast.lambda_max == pytest.approx(oracle.lambda_max, rel=1e-10)
    assert fast.kappa == pytest.approx(kappa_p(oracle, 1.0), rel=1e-10)
    for p in (0.5, 0.8, 1.0):
        assert fast.kappa_p[p] == pytest.approx(kappa_p(oracle, p), rel=1e-10)


def test_kfac_rejects_asymmetric():
    with pytest.raises(InvalidValueError):
        kfac_spectrum(np.array([[1.0, 0.5], [0.0, 1.0]]), np.eye(2))


# ---------------------------------------------------------------- covariances

def test_layer_covariances_loop_oracle():
    net = build_network(mlp_specs(4, 5, 3, 3), seed=1)
    X = rng(1).standard_normal((12, 4))
    cache = trained_cache(net, X, rng(2).integers(0, 3, 12))
    for k in range(1, 4):
        sx, sgh = layer_covariances(cache, k)
        assert np.max(np.abs(sx - second_moment_loop(cache.x_in(k)))) <= 1e-12
        assert np.max(np.abs(sgh - second_moment_loop(cache.grad_h(k)))) <= 1e-12


def test_whitened_inputs_give_identity():
    X = np.sqrt(4) * np.eye(4)
    net = build_network([linear(4, 2)], seed=0)
    cache = trained_cache(net, X, [0, 1, 0, 1])
    sx, _ = layer_covariances(cache, 1)
    np.testing.assert_allclose(sx, np.eye(4))
    assert kappa_p(linalg.sym_eig(sx), 1.0) == pytest.approx(1.0)


def test_layer_index_checked():
    net = build_network(mlp_specs(4, 5, 2, 3), seed=1)
    cache = trained_cache(net, rng(0).standard_normal((5, 4)), [0, 1, 2, 0, 1])
    with pytest.raises(IndexError):
        layer_covariances(cache, 3)


# ---------------------------------------------------------------- exact oracles

def per_example_loop(net, X, grads_out, k):
    """vec(dh_k(i)^T x_{k-1}(i)) row by row through single-example backward passes."""
    rows = []
    for i in range(X.shape[0]):
        cache = forward(net, X[i:i + 1])
        backward(net, cache, grads_out[i:i + 1])
        # backward divides by the batch size, which is 1 here
        rows.append(cache.grad_W[k - 1].ravel())
    return np.array(rows)


def test_sub_fim_empirical_loop_oracle():
    net = build_network(mlp_specs(3, 4, 2, 3), seed=2)
    X = rng(3).standard_normal((10, 3))
    y = rng(4).integers(0, 3, 10)
    out = forward(net, X).output
    _, g = loss_and_grad(out, y)
    for k in (1, 2):
        G = per_example_loop(net, X, g, k)
        F = sub_fim_exact(net, X, k, FimConfig(label_mode=LabelMode.EMPIRICAL), y=y)
        np.testing.assert_allclose(F, G.T @ G / 10, atol=1e-13)
        np.testing.assert_allclose(second_moment_matrix(net, X, y, k), F, atol=0)


def test_sampled_labels_come_from_the_softmax():
    net = build_network(mlp_specs(3, 4, 2, 3), seed=2)
    X = np.repeat(rng(3).standard_normal((1, 3)), 4000, axis=0)
    F = sub_fim_exact(net, X, 2, FimConfig(label_mode=LabelMode.SAMPLED, seed=1))
    # with one repeated input the sampled FIM tends to (diag(p) - pp^T) (x) x x^T
    cache = forward(net, X[:1])
    p = softmax(cache.output)[0]
    x = cache.x_in(2)[0]
    expected = linalg.kron(softmax_hessian(p), np.outer(x, x))
    assert np.max(np.abs(F - expected)) <= 0.05 * np.max(np.abs(expected))


def test_sampled_fim_is_deterministic_given_seed():
    net = build_network(mlp_specs(3, 4, 2, 3), seed=2)
    X = rng(3).standard_normal((10, 3))
    a = full_fim_exact(net, X, FimConfig(seed=5))
    b = full_fim_exact(net, X, FimConfig(seed=5))
    assert np.array_equal(a, b)


def test_zero_weights_kill_upper_blocks():
    net = build_network(mlp_specs(3, 4, 3, 2), seed=0)
    for lin in net.linears:
        lin.W[:] = 0.0
    X = rng(0).standard_normal((6, 3))
    for k in (2, 3):
        assert np.all(sub_fim_exact(net, X, k) == 0.0)


def test_single_example_is_rank_one():
    net = build_network(mlp_specs(3, 4, 2, 3), seed=1)
    F = sub_fim_exact(net, rng(1).standard_normal((1, 3)), 1)
    assert len(linalg.sym_eig(F, psd=True).nonzero()) == 1


def test_single_layer_full_equals_sub():
    net = build_network([linear(3, 2)], seed=0)
    X = rng(0).standard_normal((5, 3))
    cfg = FimConfig(seed=3)
    np.testing.assert_array_equal(full_fim_exact(net, X, cfg), sub_fim_exact(net, X, 1, cfg))


def test_full_fim_blocks_and_psd():
    net = build_network([linear(2, 3), relu(3), linear(3, 2)], seed=0)
    X = rng(0).standard_normal((16, 2))
    cfg = FimConfig(seed=0)
    F = full_fim_exact(net, X, cfg)
    assert np.max(np.abs(F[:6, :6] - sub_fim_exact(net, X, 1, cfg))) <= 1e-12
    assert np.max(np.abs(F[6:, 6:] - sub_fim_exact(net, X, 2, cfg))) <= 1e-12
    spec = linalg.sym_eig(F)
    assert spec.eigenvalues[-1] >= -1e-10 * spec.lambda_max
    assert 0.0 <= block_offdiag_ratio(F, [6, 6]) < 1.0


def test_perfect_fit_second_moment_is_zero():
    net = build_network([linear(3, 2)], seed=0)
    X = rng(0).standard_normal((5, 3))
    Y = forward(net, X).output
    assert np.all(second_moment_matrix(net, X, Y, loss=Loss.MSE) == 0.0)
    sampled = full_fim_exact(net, X, FimConfig(seed=0), loss=Loss.MSE)
    assert np.max(np.abs(sampled)) > 0.0


def test_capacity_errors():
    net = build_network(mlp_specs(50, 50, 2, 2), seed=0)
    X = rng(0).standard_normal((3, 50))
    with pytest.raises(CapacityError):
        sub_fim_exact(net, X, 1)
    with pytest.raises(CapacityError):
        full_fim_exact(net, X)
    sub_fim_exact(net, X, 2)


# ---------------------------------------------------------------- linear-model Hessians

def test_linear_regression_hessian():
    X = rng(0).standard_normal((20, 3))
    np.testing.assert_array_equal(hessian_linear_regression(X, 1), linalg.second_moment(X))
    w = linalg.sym_eig(hessian_linear_regression(X, 3)).eigenvalues
    base = linalg.sym_eig(linalg.second_moment(X)).eigenvalues
    np.testing.assert_allclose(w, np.repeat(base, 3), rtol=1e-12)
    Q = np.sqrt(3) * np.eye(3)
    H = hessian_linear_regression(Q, 2)
    np.testing.assert_allclose(H, np.eye(6))


def test_softmax_output_matrix():
    np.testing.assert_allclose(softmax_output_matrix(2), [[0.25, -0.25], [-0.25, 0.25]])
    for c in (2, 3, 10):
        S = softmax_output_matrix(c)
        np.testing.assert_allclose(S, softmax_hessian(np.full(c, 1.0 / c)), atol=1e-16)
        np.testing.assert_allclose(S @ np.ones(c), 0.0, atol=1e-16)
    with pytest.raises(ParameterError):
        softmax_output_matrix(1)


def test_linear_classifier_hessian_matches_loss_curvature():
    # finite-difference Hessian of the mean CE loss of h = W x at W = 0
    X = rng(1).standard_normal((30, 3))
    y = rng(2).integers(0, 4, 30)
    c, d = 4, 3
    W = np.zeros((c, d))

    def grad():
        _, g = loss_and_grad(X @ W.T, y)
        return (g.T @ X / X.shape[0]).ravel()

    H_fd = np.zeros((c * d, c * d))
    flat = W.reshape(-1)
    for i in range(c * d):
        flat[i] = 1e-5
        gp = grad()
        flat[i] = -1e-5
        gm = grad()
        flat[i] = 0.0
        H_fd[:, i] = (gp - gm) / 2e-5
    # the returned matrix orders parameters input-major (column-major vec of W)
    H = hessian_linear_classifier(X, c)
    perm = np.arange(c * d).reshape(c, d).T.ravel()
    np.testing.assert_allclose(H, H_fd[np.ix_(perm, perm)], atol=1e-8)


# ---------------------------------------------------------------- weight-gradient second moment

def test_weight_grad_second_moment_single_example_identity():
    net = build_network(mlp_specs(3, 4, 2, 3), seed=0)
    cache = trained_cache(net, rng(0).standard_normal((1, 3)), [1])
    for k in (1, 2):
        x, g = cache.x_in(k)[0], cache.grad_h(k)[0]
        expected = float(x @ x) * float(g @ g)
        assert weight_grad_second_moment(cache, k, GradMode.EXACT) == pytest.approx(expected, rel=1e-12)
        assert weight_grad_second_moment(cache, k, GradMode.KFAC) == pytest.approx(expected, rel=1e-12)


def test_weight_grad_second_moment_exact_vs_brute_force():
    net = build_network(mlp_specs(3, 4, 2, 3), seed=0)
    X = rng(0).standard_normal((9, 3))
    y = rng(1).integers(0, 3, 9)
    cache = trained_cache(net, X, y)
    F = sub_fim_exact(net, X, 2, FimConfig(label_mode=LabelMode.EMPIRICAL), y=y)
    assert weight_grad_second_moment(cache, 2, GradMode.EXACT) == pytest.approx(
        np.linalg.eigvalsh(F)[-1], rel=1e-10)


def test_weight_grad_second_moment_zero_gradients():
    net = build_network([linear(3, 2)], seed=0)
    cache = backward(net, forward(net, np.ones((4, 3))), np.zeros((4, 2)))
    assert weight_grad_second_moment(cache, 1, GradMode.EXACT) == 0.0
    assert weight_grad_second_moment(cache, 1, GradMode.KFAC) == 0.0


# ---------------------------------------------------------------- layer_conditioning

def test_layer_conditioning_fields():
    net = build_network(mlp_specs(6, 8, 3, 3, bn="hidden"), seed=0)
    X = rng(0).standard_normal((40, 6))
    cache = trained_cache(net, X, rng(1).integers(0, 3, 40))
    for k in (1, 2, 3):
        lc = layer_conditioning(net, cache, k)
        assert lc.lambda_max_f == lc.lambda_max_sx * lc.lambda_max_sgh
        assert lc.lambda_max_sx >= 0 and lc.lambda_max_sgh >= 0
        assert all(v >= 1.0 for v in lc.kappa_p_f.values())
        assert lc.w_spec == pytest.approx(np.linalg.svd(net.weight(k), compute_uv=False)[0], rel=1e-8)
        assert lc.w_fro == pytest.approx(np.linalg.norm(net.weight(k)))
        assert lc.g_spec == pytest.approx(np.linalg.svd(cache.grad_W[k - 1], compute_uv=False)[0], rel=1e-8)
        exact = layer_conditioning(net, cache, k, grad_mode=GradMode.EXACT)
        assert exact.lambda_max_sgw > 0
