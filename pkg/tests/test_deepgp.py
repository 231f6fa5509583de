import math

import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dgpwidth import deepgp, gp
from dgpwidth import kernels as kern
from dgpwidth.deepgp import DeepGpArchitecture, Layer, WhitenedState
from dgpwidth.errors import DomainError
from dgpwidth.kernels import KernelSpec

RBF = KernelSpec("RBF")


def mean_se(v):
    v = np.asarray(v)
    return v.mean(axis=0), v.std(axis=0, ddof=1) / math.sqrt(len(v))


# ---------------------------------------------------------------------------
# architecture


def test_architecture_validation():
    with pytest.raises(DomainError):
        DeepGpArchitecture(1, [])
    with pytest.raises(DomainError):
        DeepGpArchitecture(1, [Layer(2, RBF)])
    with pytest.raises(DomainError):
        DeepGpArchitecture(1, [Layer(2, RBF), Layer(1, KernelSpec("AdditiveRBF", h=3))])
    with pytest.raises(DomainError):
        DeepGpArchitecture(1, [Layer(1, RBF)], noise=0.0)
    arch = deepgp.build(2, [RBF, KernelSpec("AdditiveRBF", h=3)], [3, 7])
    assert arch.widths == (3, 1) and arch.depth == 2


def test_architecture_json_round_trip():
    arch = deepgp.rbf_addrbf_addrbf(2, 2, 8, noise=0.05)
    d = arch.to_dict()
    assert set(d) == {"input_dim", "noise", "jitter", "layers"}
    assert DeepGpArchitecture.from_json(arch.to_json()) == arch
    with pytest.raises(DomainError):
        DeepGpArchitecture.from_dict({"input_dim": 1})


def test_limiting_kernel_selection():
    assert deepgp.limiting_kernel(deepgp.rbf_addrbf(1, 5)).variant == "LimitAddRBF"
    rr = deepgp.build(1, [RBF, KernelSpec("RBF", h=3)], [3, 1])
    assert deepgp.limiting_kernel(rr) == KernelSpec("LimitRBFRBF", h=3, inner=RBF)
    nn = deepgp.build(2, [KernelSpec("LinearBias", beta=0.5), KernelSpec("FiniteFeatureReLU", beta=0.3, h=4)], [4, 1])
    assert deepgp.limiting_kernel(nn).variant == "ArcCosine"
    three = deepgp.rbf_addrbf_addrbf(1, 2, 8)
    assert deepgp.limiting_kernel(three).variant == "QuadratureLimit"
    assert deepgp.limiting_kernel(deepgp.rbf_addrbf_addrbf(1, 6, 8)) is None


# ---------------------------------------------------------------------------
# prior sampling


def test_single_layer_prior_covariance():
    arch = deepgp.single_layer(1, RBF)
    X = np.array([[-0.5], [0.0], [1.0]])
    f = deepgp.sample_prior(arch, X, 0, n_samples=10 ** 5)[-1][..., 0]
    K = np.asarray(kern.kernel_matrix(RBF, X)) + arch.jitter * np.eye(3)
    prods = f[:, :, None] * f[:, None, :]
    m, se = mean_se(prods.reshape(len(f), -1))
    assert np.all(np.abs(m - K.ravel()) < 3 * se)


def test_single_point_unit_variance():
    arch = deepgp.single_layer(2, RBF)
    f = deepgp.sample_prior(arch, [[0.3, 0.1]], 1, n_samples=10 ** 5)[-1][:, 0, 0]
    assert f.var() == pytest.approx(1.0, abs=0.02)


@pytest.mark.parametrize("m", [1, 2, 8])
def test_additive_sequence_covariance_width_invariant(m):
    arch = deepgp.rbf_addrbf(1, m)
    X = np.array([[-0.5], [0.5]])
    f = deepgp.sample_prior(arch, X, 2, n_samples=10 ** 5, jitter=0.0)[-1][..., 0]
    m_, se = mean_se(f[:, 0] * f[:, 1])
    assert abs(m_ - kern.limit_add_rbf([-0.5], [0.5], RBF)) < 3 * se


def test_neural_network_prior_matches_arc_cosine():
    beta, H = 0.5, 3
    arch = deepgp.build(2, [KernelSpec("LinearBias", beta=beta), KernelSpec("FiniteFeatureReLU", beta=beta, h=H)], [H, 1])
    X = np.array([[0.6, -0.4], [-0.2, 1.1]])
    f = deepgp.sample_prior(arch, X, 3, n_samples=2 * 10 ** 5, jitter=0.0)[-1][..., 0]
    m, se = mean_se(f[:, 0] * f[:, 1])
    lim = np.asarray(kern.kernel_matrix(deepgp.limiting_kernel(arch), X))[0, 1]
    assert abs(m - lim) < 3 * se


def test_seed_determinism():
    arch = deepgp.rbf_addrbf(2, 3)
    X = np.random.default_rng(0).uniform(-1, 1, (6, 2))
    a = deepgp.sample_prior(arch, X, 11)
    b = deepgp.sample_prior(arch, X, 11)
    c = deepgp.sample_prior(arch, X, 12)
    assert all(np.array_equal(x, y) for x, y in zip(a.F, b.F))
    assert not np.array_equal(a.f, c.f)
    assert np.array_equal(deepgp.sample_prior(arch, X, 5, n_samples=4)[-1],
                          deepgp.sample_prior(arch, X, 5, n_samples=4)[-1])


def test_hidden_unit_permutation_leaves_output_unchanged():
    arch = deepgp.rbf_addrbf(1, 4)
    X = np.linspace(-1, 1, 5)[:, None]
    s = WhitenedState.standard_normal(arch, 5, 0)
    perm = np.array([2, 0, 3, 1])
    s2 = WhitenedState((s.Z[0][:, perm], s.Z[1]))
    assert deepgp.unwhiten(arch, X, s).f == pytest.approx(deepgp.unwhiten(arch, X, s2).f, abs=1e-12)


def test_prior_sample_is_finite_and_shaped():
    arch = deepgp.rbf_addrbf_addrbf(3, 2, 4)
    out = deepgp.sample_prior(arch, np.zeros((4, 3)), 0)
    assert [F.shape for F in out.F] == [(4, 2), (4, 4), (4, 1)]
    assert np.all(np.isfinite(out.f))


def test_rejects_wrong_input_dim():
    with pytest.raises(DomainError):
        deepgp.sample_prior(deepgp.rbf_addrbf(2, 1), np.zeros((3, 1)), 0)


# ---------------------------------------------------------------------------
# whitening


def test_unwhiten_zero_state():
    arch = deepgp.rbf_addrbf_addrbf(1, 2, 3)
    out = deepgp.unwhiten(arch, np.linspace(0, 1, 4)[:, None], WhitenedState.zeros(arch, 4))
    assert all(np.all(F == 0) for F in out.F)


def test_unwhiten_scalar():
    arch = deepgp.single_layer(1, RBF)
    out = deepgp.unwhiten(arch, [[0.2]], WhitenedState((np.array([[1.7]]),)))
    assert out.f[0] == pytest.approx(1.7 * math.sqrt(1 + 1e-4), rel=1e-14)


@settings(max_examples=30)
@given(st.integers(1, 6), st.integers(1, 3), st.integers(0, 10 ** 6))
def test_whiten_round_trip(n, width, seed):
    arch = deepgp.rbf_addrbf(2, width)
    X = np.random.default_rng(seed).uniform(-1, 1, (n, 2))
    s = WhitenedState.standard_normal(arch, n, seed)
    out = deepgp.unwhiten(arch, X, s)
    back = deepgp.whiten(arch, X, out)
    for a, b in zip(s.Z, back.Z):
        assert b == pytest.approx(a, rel=1e-8, abs=1e-8)
    for g in out.grams:
        assert g.reconstruct() == pytest.approx(g.K + g.jitter * np.eye(n), rel=1e-8, abs=1e-12)


def test_flatten_round_trip():
    arch = deepgp.rbf_addrbf(1, 3)
    s = WhitenedState.standard_normal(arch, 4, 0)
    flat = s.flatten()
    assert flat.shape == (deepgp.state_size(arch, 4),) == (16,)
    t = WhitenedState.unflatten(arch, 4, flat)
    assert all(np.array_equal(a, b) for a, b in zip(s.Z, t.Z))


def test_unwhiten_matches_prior_distribution():
    arch = deepgp.rbf_addrbf(1, 2)
    X = np.array([[-0.7], [0.1], [0.8]])
    n = 20000
    via_z = np.array([deepgp.unwhiten(arch, X, WhitenedState.standard_normal(arch, 3, [9, i])).f for i in range(n)])
    direct = deepgp.sample_prior(arch, X, 10, n_samples=n)[-1][..., 0]
    for stat in (lambda f: f, lambda f: f[:, :, None] * f[:, None, :], lambda f: f ** 4):
        a, sa = mean_se(stat(via_z).reshape(n, -1))
        b, sb = mean_se(stat(direct).reshape(n, -1))
        assert np.all(np.abs(a - b) < 3.5 * np.hypot(sa, sb))


# ---------------------------------------------------------------------------
# joint density


def test_log_joint_zero_state():
    arch = deepgp.single_layer(1, RBF, noise=1.0)
    v = deepgp.log_joint(arch, [[0.0]], [0.0], WhitenedState.zeros(arch, 1))
    assert v == pytest.approx(-math.log(2 * math.pi), rel=1e-12)


def test_log_joint_shift_changes_only_likelihood():
    arch = deepgp.rbf_addrbf(1, 2, noise=0.3)
    X = np.linspace(-1, 1, 5)[:, None]
    y = np.sin(2 * X[:, 0])
    s = WhitenedState.standard_normal(arch, 5, 1)
    f = deepgp.unwhiten(arch, X, s).f
    c = 0.7
    d = deepgp.log_joint(arch, X, y + c, s) - deepgp.log_joint(arch, X, y, s)
    expected = -0.5 * (np.sum((y + c - f) ** 2) - np.sum((y - f) ** 2)) / 0.3
    assert d == pytest.approx(expected, rel=1e-10)


def _fd_grad(fn, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return g


@settings(max_examples=15)
@given(st.integers(1, 5), st.integers(1, 3), st.integers(1, 3), st.integers(0, 10 ** 6))
def test_log_joint_gradient_finite_differences(n, width, depth, seed):
    rng = np.random.default_rng(seed)
    if depth == 1:
        arch = deepgp.single_layer(2, RBF, noise=0.2)
    elif depth == 2:
        arch = deepgp.rbf_addrbf(2, width, noise=0.2)
    else:
        arch = deepgp.rbf_addrbf_addrbf(2, width, 2, noise=0.2)
    X = rng.uniform(-1, 1, (n, 2))
    y = rng.standard_normal(n)
    fn = deepgp.make_log_joint(arch, X, y)
    x0 = rng.standard_normal(deepgp.state_size(arch, n))
    g = np.asarray(deepgp.grad_log_joint(arch, X, y, WhitenedState.unflatten(arch, n, x0)).flatten())
    fd = _fd_grad(lambda v: float(fn(jnp.asarray(v))), x0)
    assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-3)


# ---------------------------------------------------------------------------
# predictive


def test_single_layer_predictive_matches_gp():
    arch = deepgp.single_layer(1, RBF, noise=0.1)
    X = np.linspace(-1, 1, 6)[:, None]
    s = WhitenedState.standard_normal(arch, 6, 0)
    f = deepgp.unwhiten(arch, X, s).f
    Xs = np.array([[-0.3], [0.45], [2.0]])
    p = deepgp.predictive_moments(arch, X, s, Xs, 0)
    # conditioning on the latent values is a GP fit with vanishing noise
    fit = gp.fit(RBF, X, f, noise=1e-14, jitter=arch.jitter)
    mean, var = gp.predictive(fit, Xs)
    assert p.mean == pytest.approx(mean, rel=1e-8, abs=1e-10)
    assert p.var == pytest.approx(var, rel=1e-6, abs=1e-10)
    assert p.obs_var == pytest.approx(p.var + 0.1)


def test_predictive_interpolates_training_point():
    arch = DeepGpArchitecture(1, [Layer(1, RBF)], noise=0.1, jitter=1e-12)
    X = np.array([[-0.5], [0.3], [0.9]])
    s = WhitenedState.standard_normal(arch, 3, 1)
    f = deepgp.unwhiten(arch, X, s).f
    p = deepgp.predictive_sample(arch, X, s, [0.3], 0)
    assert p.mean == pytest.approx(f[1], abs=1e-6)
    assert p.var < 1e-8


def test_two_layer_predictive_dense_oracle():
    arch = deepgp.rbf_addrbf(1, 2)
    X = np.linspace(-1, 1, 5)[:, None]
    s = WhitenedState.standard_normal(arch, 5, 3)
    out = deepgp.unwhiten(arch, X, s)
    xs = np.array([[0.2]])
    # draw the hidden test values with the same seed, then check the last layer by dense algebra
    rng = np.random.default_rng(4)
    K1 = np.asarray(kern.kernel_matrix(RBF, X)) + arch.jitter * np.eye(5)
    k1s = np.asarray(kern.kernel_matrix(RBF, X, xs))
    m1 = k1s.T @ np.linalg.solve(K1, out.F[0])
    v1 = 1 + arch.jitter - (k1s.T @ np.linalg.solve(K1, k1s))[0, 0]
    f1s = m1 + math.sqrt(v1) * rng.standard_normal(m1.shape)
    k2 = arch.layers[1].kernel
    K2 = np.asarray(kern.kernel_matrix(k2, out.F[0])) + arch.jitter * np.eye(5)
    k2s = np.asarray(kern.kernel_matrix(k2, out.F[0], f1s))
    mean = (k2s.T @ np.linalg.inv(K2) @ out.F[1])[0, 0]
    var = 1 + arch.jitter - (k2s.T @ np.linalg.inv(K2) @ k2s)[0, 0]
    p = deepgp.predictive_moments(arch, X, s, xs, 4)
    assert p.mean[0] == pytest.approx(mean, rel=1e-8)
    assert p.var[0] == pytest.approx(var, rel=1e-8)


def test_predictive_variance_non_negative():
    arch = deepgp.rbf_addrbf_addrbf(1, 2, 3)
    X = np.linspace(-1, 1, 8)[:, None]
    s = WhitenedState.standard_normal(arch, 8, 2)
    p = deepgp.predictive_moments(arch, X, s, np.linspace(-2, 2, 30)[:, None], 0)
    assert np.all(p.var >= 0) and np.all(np.isfinite(p.mean))
