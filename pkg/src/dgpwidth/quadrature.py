"""Gauss-Hermite rules and tensorized Gaussian expectations."""

import itertools

import numpy as np

from .errors import DomainError, NumericalError

SQRT_PI = np.sqrt(np.pi)


def gauss_hermite_nodes(n):
    """Physicists' Gauss-Hermite rule.

    Returns ``(nodes, weights)`` with ``sum(w * f(xi)) ~ int f(t) exp(-t^2) dt``.
    The rule is exact for polynomials of degree ``2n - 1``.
    """
    if not isinstance(n, (int, np.integer)) or not 1 <= n <= 64:
        raise DomainError(f"node count must be an integer in [1, 64], got {n!r}")
    nodes, weights = np.polynomial.hermite.hermgauss(int(n))
    if not (np.all(np.isfinite(nodes)) and np.all(np.isfinite(weights))):
        raise NumericalError(f"Hermite root finding produced non-finite values for n={n}")
    if abs(weights.sum() - SQRT_PI) > 1e-10 * SQRT_PI:
        raise NumericalError(f"Hermite weights do not sum to sqrt(pi) for n={n}")
    return nodes, weights


def gaussian_rule(n, sigma=1.0):
    """Nodes and probability weights for expectations under N(0, sigma^2)."""
    nodes, weights = gauss_hermite_nodes(n)
    return np.sqrt(2.0) * sigma * nodes, weights / SQRT_PI


def tensor_gaussian_rule(n, dim, sigma=1.0):
    """Tensor-product rule for ``dim`` iid N(0, sigma^2) coordinates.

    Returns ``(points, weights)`` with ``points`` of shape ``(n**dim, dim)``.
    """
    x, w = gaussian_rule(n, sigma)
    idx = np.array(list(itertools.product(range(n), repeat=dim)), dtype=int).reshape(-1, dim)
    return x[idx], np.prod(w[idx], axis=1)


def gaussian_expectation(fn, n, sigma=1.0):
    """E[fn(t)] for t ~ N(0, sigma^2) by an n-node rule. ``fn`` must broadcast."""
    x, w = gaussian_rule(n, sigma)
    return np.tensordot(w, fn(x), axes=(0, 0))
