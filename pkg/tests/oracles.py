"""Independent closed-form references used by several test modules."""

import numpy as np

from dgpwidth import kernels as kern


def conjugate_latent_posterior(kernel, X, y, noise, jitter):
    """Exact posterior mean and covariance of f = chol(K + jitter I) z, z ~ N(0, I), y ~ N(f, noise I)."""
    n = len(y)
    C = np.asarray(kern.kernel_matrix(kernel, np.atleast_2d(X))) + jitter * np.eye(n)
    A = C + noise * np.eye(n)
    mean = C @ np.linalg.solve(A, y)
    cov = C - C @ np.linalg.solve(A, C)
    return mean, cov
