"""Exact single-layer GP regression for the limiting GPs."""

from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from . import kernels as kern
from .errors import DomainError, NumericalError
from .kernels import DEFAULT_JITTER

LOG_2PI = float(np.log(2.0 * np.pi))
PARAM_FLOOR = 1e-6


def gaussian_log_marginal(K, y, noise):
    """log N(y; 0, K + noise I) via Cholesky."""
    y = np.asarray(y, dtype=float).ravel()
    n = y.shape[0]
    L = kern.cholesky(np.asarray(K, dtype=float), noise)
    a = np.linalg.solve(L, y)
    return float(-0.5 * a @ a - np.sum(np.log(np.diag(L))) - 0.5 * n * LOG_2PI)


def _gaussian_log_marginal_jax(K, y, noise):
    n = y.shape[0]
    L = jnp.linalg.cholesky(K + noise * jnp.eye(n))
    a = jax.scipy.linalg.solve_triangular(L, y, lower=True)
    return -0.5 * a @ a - jnp.sum(jnp.log(jnp.diag(L))) - 0.5 * n * LOG_2PI


def log_marginal_likelihood(kernel, X, y, noise, jitter=DEFAULT_JITTER):
    if not noise > 0:
        raise DomainError(f"noise must be > 0, got {noise}")
    K = np.asarray(kern.kernel_matrix(kernel, np.atleast_2d(X)))
    return gaussian_log_marginal(K + jitter * np.eye(len(K)), y, noise)


@dataclass(frozen=True)
class GpFit:
    kernel: kern.KernelSpec
    noise: float
    X: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    K: np.ndarray = field(repr=False)
    L: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    lml: float = 0.0
    jitter: float = DEFAULT_JITTER

    def recompute_lml(self):
        n = len(self.y)
        return float(-0.5 * self.y @ self.alpha - np.sum(np.log(np.diag(self.L))) - 0.5 * n * LOG_2PI)


def fit(kernel, X, y, noise, jitter=DEFAULT_JITTER):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if not noise > 0:
        raise DomainError(f"noise must be > 0, got {noise}")
    K = np.asarray(kern.kernel_matrix(kernel, X))
    L = kern.cholesky(K, jitter + noise)
    alpha = np.linalg.solve(L.T, np.linalg.solve(L, y))
    a = np.linalg.solve(L, y)
    lml = float(-0.5 * a @ a - np.sum(np.log(np.diag(L))) - 0.5 * len(y) * LOG_2PI)
    return GpFit(kernel, float(noise), X, y, K, L, alpha, lml, jitter)


def predictive(gp_fit, X_star, observation=False):
    """Posterior mean and variance at ``X_star``; ``observation`` adds the noise."""
    Xs = np.atleast_2d(np.asarray(X_star, dtype=float))
    ks = np.asarray(kern.kernel_matrix(gp_fit.kernel, gp_fit.X, Xs))
    kss = np.asarray(kern.kernel_diag(gp_fit.kernel, Xs)) + gp_fit.jitter
    mean = ks.T @ gp_fit.alpha
    v = np.linalg.solve(gp_fit.L, ks)
    var = np.maximum(kss - np.sum(v * v, axis=0), 0.0)
    if observation:
        var = var + gp_fit.noise
    return mean, var


def predictive_log_likelihood(gp_fit, X_star, y_star):
    """Per-point log N(y*; mean, var + noise)."""
    mean, var = predictive(gp_fit, X_star, observation=True)
    r = np.asarray(y_star, dtype=float).ravel() - mean
    return -0.5 * (LOG_2PI + np.log(var) + r * r / var)


def make_lml_fn(template, X, y, jitter=DEFAULT_JITTER):
    """JAX function of ``{path: log value}`` (plus ``"noise"``) returning the lml."""
    X = jnp.asarray(np.atleast_2d(X), dtype=float)
    y = jnp.asarray(np.asarray(y, dtype=float).ravel())
    n = y.shape[0]

    def lml(log_params):
        params = {k: jnp.exp(v) for k, v in log_params.items() if k != "noise"}
        spec = template.with_params(params)
        K = kern.kernel_matrix(spec, X) + jitter * jnp.eye(n)
        return _gaussian_log_marginal_jax(K, y, jnp.exp(log_params["noise"]))

    return lml


@dataclass
class HyperOptResult:
    kernel: kern.KernelSpec
    noise: float
    history: list


def optimize_hypers(template, X, y, steps=100, lr=0.1, init_value=1.0, init_noise=0.2,
                    jitter=DEFAULT_JITTER, reset=True):
    """Adam ascent on the log marginal likelihood over log hyperparameters.

    With ``reset`` all covariance hyperparameters start at ``init_value`` and
    the noise at ``init_noise``; otherwise the template's values are used.
    """
    if steps < 1:
        raise DomainError("steps must be >= 1")
    start = template.params()
    theta = {k: jnp.log(init_value if reset else float(v)) for k, v in start.items()}
    theta["noise"] = jnp.log(init_noise)
    fn = make_lml_fn(template, X, y, jitter)
    value_and_grad = jax.jit(jax.value_and_grad(fn))
    floor = np.log(PARAM_FLOOR)
    m = {k: 0.0 for k in theta}
    v = {k: 0.0 for k in theta}
    b1, b2, eps = 0.9, 0.999, 1e-8
    history = []
    for t in range(1, steps + 1):
        val, grad = value_and_grad(theta)
        val = float(val)
        history.append(val)
        g = {k: float(x) for k, x in grad.items()}
        if not (np.isfinite(val) and all(np.isfinite(x) for x in g.values())):
            raise NumericalError(
                f"non-finite lml or gradient at Adam step {t}",
                diagnostics={"step": t, "lml": val, "grad": g,
                             "params": {k: float(np.exp(x)) for k, x in theta.items()}},
            )
        for k in theta:
            m[k] = b1 * m[k] + (1 - b1) * g[k]
            v[k] = b2 * v[k] + (1 - b2) * g[k] ** 2
            mhat = m[k] / (1 - b1 ** t)
            vhat = v[k] / (1 - b2 ** t)
            theta[k] = jnp.maximum(theta[k] + lr * mhat / (np.sqrt(vhat) + eps), floor)
    history.append(float(fn(theta)))
    params = {k: float(np.exp(x)) for k, x in theta.items()}
    noise = params.pop("noise")
    return HyperOptResult(template.with_params(params), noise, history)
