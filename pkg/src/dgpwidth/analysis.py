"""Monte-Carlo and quadrature diagnostics of Deep GP priors and posteriors.

Marginal densities at two inputs, moment and characteristic-function
comparisons against the covariance-matched Gaussian, concentration of the
conditional covariance with width, and posterior kernel-fit / predictive
log-likelihood summaries. All MC standard errors are block-jackknife
estimates over 20 contiguous blocks.
"""

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import deepgp, gp
from . import kernels as kern
from .errors import DomainError
from .quadrature import gauss_hermite_nodes, tensor_gaussian_rule  # noqa: F401  (re-export)

JACKKNIFE_BLOCKS = 20
QUADRATURE_BUDGET = 11 ** 4
MC_CHUNK = 50_000


def jackknife(values, estimator=np.mean, blocks=JACKKNIFE_BLOCKS):
    """Block-jackknife estimate and standard error.

    ``values`` is indexed by sample along axis 0; ``estimator`` maps a subset
    of samples to a scalar or array.
    """
    values = np.asarray(values)
    n = values.shape[0]
    if n < blocks:
        raise DomainError(f"need at least {blocks} samples for a {blocks}-block jackknife")
    full = np.asarray(estimator(values))
    edges = np.linspace(0, n, blocks + 1).astype(int)
    loo = np.stack([
        np.asarray(estimator(np.concatenate([values[:edges[b]], values[edges[b + 1]:]])))
        for b in range(blocks)
    ])
    se = np.sqrt((blocks - 1) / blocks * np.sum((loo - loo.mean(axis=0)) ** 2, axis=0))
    return full, se


def seed_sequence(seed):
    """Accept an int, a sequence of ints or an existing SeedSequence."""
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def _mean_se(values):
    est, se = jackknife(values)
    return float(est), float(se)


def limiting_gram(arch, X, jitter=True):
    """Second moment E[f_L f_L^T] of the prior, with the method used.

    Uses :func:`deepgp.limiting_kernel` (closed form or quadrature); returns
    ``(K, method)``. The jitter of the last layer is included when requested.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    spec = deepgp.limiting_kernel(arch)
    if spec is None:
        raise DomainError("no tractable limiting kernel for this architecture; use an MC reference")
    K = np.asarray(kern.kernel_matrix(spec, X))
    method = "quadrature" if spec.variant == "QuadratureLimit" else "closed_form"
    if jitter:
        K = K + arch.jitter * np.eye(len(K))
    return K, method


def _gauss_logpdf2(Y, K):
    """log N(y; 0, K) for bivariate y (P, 2) and covariances K (..., 2, 2) -> (..., P)."""
    a, b, c = K[..., 0, 0], K[..., 0, 1], K[..., 1, 1]
    det = a * c - b * b
    y1, y2 = Y[:, 0], Y[:, 1]
    quad = (c[..., None] * y1 ** 2 - 2 * b[..., None] * y1 * y2 + a[..., None] * y2 ** 2) / det[..., None]
    return -0.5 * quad - np.log(2 * np.pi) - 0.5 * np.log(det)[..., None]


# ---------------------------------------------------------------------------
# marginal densities


@dataclass
class GridConfig:
    lo: float = -3.0
    hi: float = 3.0
    n: int = 20

    def axis(self):
        return np.linspace(self.lo, self.hi, self.n)


@dataclass
class DensityGrid:
    y1: np.ndarray
    y2: np.ndarray
    density: np.ndarray  # (len(y1), len(y2)), density[i, j] = p(y1[i], y2[j])
    meta: dict = field(default_factory=dict)

    def mass(self):
        """Trapezoidal integral of the density over the grid rectangle."""
        return float(np.trapezoid(np.trapezoid(self.density, self.y2, axis=1), self.y1))

    def at(self, i, j):
        return float(self.density[i, j])

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["y1", "y2", "density"])
        for i, a in enumerate(self.y1):
            for j, b in enumerate(self.y2):
                w.writerow([repr(float(a)), repr(float(b)), repr(float(self.density[i, j]))])
        return buf.getvalue()

    def to_json(self):
        return json.dumps({"y1": self.y1.tolist(), "y2": self.y2.tolist(),
                           "density": self.density.tolist(), "meta": self.meta}, sort_keys=True)


def _is_limit(arch):
    return arch.depth == 1


def marginal_density(arch, x1, x2, Y, nodes=7, mc_samples=10 ** 6, seed=0):
    """p(y1, y2 | x1, x2) at the rows of ``Y`` (P, 2).

    Returns ``(density, meta)``. Single-layer architectures are exact
    Gaussians. Two-layer architectures whose last kernel depends on
    differences only are integrated over the iid layer-one differences by
    tensorized Gauss-Hermite quadrature when ``nodes**H1`` is within budget.
    Everything else is Monte Carlo over conditional Grams (SEs in ``meta``).
    """
    X = np.vstack([np.atleast_1d(np.asarray(x1, dtype=float)), np.atleast_1d(np.asarray(x2, dtype=float))])
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    eps = arch.jitter
    if _is_limit(arch):
        K = np.asarray(kern.kernel_matrix(arch.layers[0].kernel, X)) + eps * np.eye(2)
        return np.exp(_gauss_logpdf2(Y, K)), {"method": "exact"}
    k1, k2 = arch.layers[0].kernel, arch.layers[-1].kernel
    h1 = arch.layers[0].width
    if arch.depth == 2 and kern.is_stationary(k2) and nodes ** h1 <= QUADRATURE_BUDGET:
        s2 = float(np.asarray(kern._diff_variance(k1, X[:1], X[1:], np))[0, 0]) + 2 * eps
        u, w = tensor_gaussian_rule(nodes, h1, 1.0)
        tau = np.sqrt(s2) * u
        off = np.asarray(kern.stationary_profile(k2, tau))
        diag = float(np.asarray(kern.stationary_profile(k2, np.zeros((1, h1))))[0])
        Ks = np.zeros((len(w), 2, 2))
        Ks[:, 0, 0] = Ks[:, 1, 1] = diag + eps
        Ks[:, 0, 1] = Ks[:, 1, 0] = off
        dens = w @ np.exp(_gauss_logpdf2(Y, Ks))
        return dens, {"method": "quadrature", "nodes": nodes, "points": int(len(w))}
    # Monte Carlo over the conditional Gram of the last layer
    chunks = []
    rng = seed_sequence(seed)
    remaining = mc_samples
    for child in rng.spawn(int(np.ceil(mc_samples / MC_CHUNK))):
        n = min(MC_CHUNK, remaining)
        remaining -= n
        Ks = deepgp.sample_last_gram(arch, X, n, child) + eps * np.eye(2)
        chunks.append(np.exp(_gauss_logpdf2(Y, Ks)))
    vals = np.concatenate(chunks, axis=0)
    est, se = jackknife(vals, lambda v: v.mean(axis=0))
    return est, {"method": "monte_carlo", "samples": int(mc_samples), "se": se.tolist()}


def density_grid(arch, x1=-0.5, x2=0.5, grid=None, nodes=7, mc_samples=10 ** 6, seed=0):
    grid = grid or GridConfig()
    ax = grid.axis()
    Y = np.stack(np.meshgrid(ax, ax, indexing="ij"), axis=-1).reshape(-1, 2)
    dens, meta = marginal_density(arch, x1, x2, Y, nodes, mc_samples, seed)
    meta = dict(meta, x1=float(np.ravel(x1)[0]), x2=float(np.ravel(x2)[0]),
                architecture=arch.to_dict())
    if "se" in meta:
        meta["se"] = np.asarray(meta["se"]).reshape(grid.n, grid.n).tolist()
    return DensityGrid(ax, ax.copy(), dens.reshape(grid.n, grid.n), meta)


def density_diff(grid_a, grid_b):
    if not (np.array_equal(grid_a.y1, grid_b.y1) and np.array_equal(grid_a.y2, grid_b.y2)):
        raise DomainError("density grids must share their axes")
    return DensityGrid(grid_a.y1.copy(), grid_a.y2.copy(), grid_a.density - grid_b.density,
                       {"difference_of": [grid_a.meta.get("method"), grid_b.meta.get("method")]})


def matched_gaussian_density(arch, x1, x2, Y):
    """Density of N(0, K_lim) at the rows of ``Y``."""
    X = np.vstack([np.atleast_1d(x1), np.atleast_1d(x2)]).astype(float)
    K, _ = limiting_gram(arch, X)
    return np.exp(_gauss_logpdf2(np.atleast_2d(Y), K))


def peak_density(arch, x1=-0.5, x2=0.5, nodes=7, mc_samples=10 ** 6, seed=0):
    """Density at the prior mean (0, 0) and the matched Gaussian's value there."""
    origin = np.zeros((1, 2))
    d, meta = marginal_density(arch, x1, x2, origin, nodes, mc_samples, seed)
    g = matched_gaussian_density(arch, x1, x2, origin)
    out = {"peak": float(d[0]), "gaussian_peak": float(g[0]), "method": meta["method"]}
    if "se" in meta:
        out["se"] = float(meta["se"][0])
    return out


# ---------------------------------------------------------------------------
# moments and characteristic functions


def _double_factorial(k):
    return float(np.prod(np.arange(k, 0, -2, dtype=float))) if k > 0 else 1.0


def _projections(arch, X, t, samples, seed, jitter=None):
    """Samples of t^T f_L under the prior, chunked."""
    t = np.asarray(t, dtype=float)
    out = []
    remaining = samples
    for child in seed_sequence(seed).spawn(int(np.ceil(samples / MC_CHUNK))):
        n = min(MC_CHUNK, remaining)
        remaining -= n
        F = deepgp.sample_prior(arch, X, child, n_samples=n, jitter=jitter)[-1][..., 0]
        out.append(F @ t)
    return np.concatenate(out)


def _quadratic_forms(arch, X, t, samples, seed, jitter=None):
    """Samples of t^T (K_L(F_{L-1}) + jitter I) t."""
    t = np.asarray(t, dtype=float)
    eps = arch.jitter if jitter is None else jitter
    out = []
    remaining = samples
    for child in seed_sequence(seed).spawn(int(np.ceil(samples / MC_CHUNK))):
        n = min(MC_CHUNK, remaining)
        remaining -= n
        K = deepgp.sample_last_gram(arch, X, n, child, jitter=jitter)
        out.append(np.einsum("i,sij,j->s", t, K, t) + eps * (t @ t))
    return np.concatenate(out)


@dataclass
class MomentReport:
    orders: tuple
    moments: np.ndarray
    se: np.ndarray
    reference: np.ndarray
    excess_kurtosis: float
    excess_kurtosis_se: float
    samples: int
    reference_method: str
    estimator: str

    def to_dict(self):
        return {
            "orders": list(self.orders), "moments": self.moments.tolist(), "se": self.se.tolist(),
            "reference": self.reference.tolist(), "excess_kurtosis": self.excess_kurtosis,
            "excess_kurtosis_se": self.excess_kurtosis_se, "samples": self.samples,
            "reference_method": self.reference_method, "estimator": self.estimator,
        }


def reference_variance(arch, X, t, reference_samples=10 ** 6, seed=12345):
    """t^T K_lim t, from the limiting kernel or (flagged) large-sample MC."""
    t = np.asarray(t, dtype=float)
    try:
        K, method = limiting_gram(arch, X)
        return float(t @ K @ t), method
    except DomainError:
        q = _quadratic_forms(arch, X, t, reference_samples, seed)
        return float(q.mean()), "monte_carlo"


def moment_report(arch, X, t, samples=10 ** 6, seed=0, estimator="raw", orders=(2, 4, 6, 8)):
    """Even moments of t^T f_L against the covariance-matched Gaussian.

    ``estimator="raw"`` averages powers of prior draws of t^T f_L;
    ``"conditional"`` averages the exact Gaussian moments given the last
    layer's input, (r-1)!! (t^T K t)^(r/2), which has lower variance.
    """
    if samples < 10 ** 4:
        raise DomainError("moment estimates need at least 1e4 samples")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    orders = tuple(orders)
    if estimator == "raw":
        s = _projections(arch, X, t, samples, seed)
        powers = np.stack([s ** r for r in orders], axis=1)
    elif estimator == "conditional":
        q = _quadratic_forms(arch, X, t, samples, seed)
        powers = np.stack([_double_factorial(r - 1) * q ** (r // 2) for r in orders], axis=1)
    else:
        raise DomainError(f"unknown estimator {estimator!r}")
    est, se = jackknife(powers, lambda v: v.mean(axis=0))
    i2, i4 = orders.index(2), orders.index(4)
    kurt, kurt_se = jackknife(powers, lambda v: v[:, i4].mean() / v[:, i2].mean() ** 2 - 3.0)
    var, method = reference_variance(arch, X, t)
    ref = np.array([_double_factorial(r - 1) * var ** (r / 2) for r in orders])
    return MomentReport(orders, np.asarray(est), np.asarray(se), ref, float(kurt), float(kurt_se),
                        int(samples), method, estimator)


@dataclass
class ConcentrationReport:
    widths: list
    variances: np.ndarray
    se: np.ndarray
    means: np.ndarray
    slope: float

    def to_dict(self):
        return {"widths": list(self.widths), "variances": self.variances.tolist(),
                "se": self.se.tolist(), "means": self.means.tolist(), "slope": self.slope}


def with_width(arch, width):
    """Copy of a 2-layer architecture with first-layer width ``width``."""
    if arch.depth != 2:
        raise DomainError("width substitution is defined for 2-layer architectures")
    from dataclasses import replace

    k2 = arch.layers[1].kernel
    if deepgp.declared_input_width(k2) is not None:
        k2 = replace(k2, h=width) if k2.variant != "MatchedSecondLayer2of3" else replace(
            k2, inner=replace(k2.inner, h=width))
    return deepgp.DeepGpArchitecture(
        arch.input_dim,
        [deepgp.Layer(width, arch.layers[0].kernel), deepgp.Layer(1, k2)],
        arch.noise, arch.jitter)


def conditional_covariances(arch, x, x2, samples, seed, jitter=0.0):
    """Draws of k_2(f_1(x), f_1(x')) under the layer-one prior."""
    X = np.vstack([np.atleast_1d(x), np.atleast_1d(x2)]).astype(float)
    out = []
    remaining = samples
    for child in seed_sequence(seed).spawn(int(np.ceil(samples / MC_CHUNK))):
        n = min(MC_CHUNK, remaining)
        remaining -= n
        out.append(deepgp.sample_last_gram(arch, X, n, child, jitter=jitter)[:, 0, 1])
    return np.concatenate(out)


def cond_cov_concentration(arch, x, x2, widths, samples=10 ** 5, seed=0):
    """Variance of the conditional covariance entry across layer-one draws, per width."""
    if any(w < 1 for w in widths):
        raise DomainError("widths must be >= 1")
    variances, ses, means = [], [], []
    for i, w in enumerate(widths):
        c = conditional_covariances(with_width(arch, w), x, x2, samples, [seed, i])
        v, se = jackknife(c, lambda a: a.var(ddof=1))
        variances.append(float(v))
        ses.append(float(se))
        means.append(float(c.mean()))
    variances = np.array(variances)
    pos = variances > 0
    slope = float(np.polyfit(np.log(np.asarray(widths)[pos]), np.log(variances[pos]), 1)[0]) if pos.sum() >= 2 else float("nan")
    return ConcentrationReport(list(widths), variances, np.array(ses), np.array(means), slope)


@dataclass
class CfReport:
    lhs: float
    rhs: float
    se: float

    @property
    def gap(self):
        return self.lhs - self.rhs

    def to_dict(self):
        return {"lhs": self.lhs, "rhs": self.rhs, "se": self.se, "gap": self.gap}


def cf_bound_check(arch, X, t, samples=10 ** 5, seed=0, estimator="raw"):
    """Re E[exp(i t^T f_L)] against the Gaussian bound exp(-t^T K_lim t / 2)."""
    if samples < 10 ** 5:
        raise DomainError("characteristic-function checks need at least 1e5 samples")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    t = np.asarray(t, dtype=float)
    if estimator == "raw":
        vals = np.cos(_projections(arch, X, t, samples, seed))
    elif estimator == "conditional":
        vals = np.exp(-0.5 * _quadratic_forms(arch, X, t, samples, seed))
    else:
        raise DomainError(f"unknown estimator {estimator!r}")
    lhs, se = _mean_se(vals)
    var, _ = reference_variance(arch, X, t)
    return CfReport(lhs, float(np.exp(-0.5 * var)), se)


# ---------------------------------------------------------------------------
# posterior summaries


@dataclass
class FitSummary:
    values: np.ndarray
    mean: float
    se: float


def _summary(values):
    values = np.asarray(values, dtype=float)
    if len(values) >= JACKKNIFE_BLOCKS:
        m, se = _mean_se(values)
    else:
        m = float(values.mean())
        se = float(values.std(ddof=1) / np.sqrt(len(values))) if len(values) > 1 else 0.0
    return FitSummary(values, m, se)


def kernel_fit(arch, chain, X, y, noise=None):
    """log N(y; 0, K_L(F_{L-1}) + jitter I + noise I) per posterior sample."""
    states = list(chain.states()) if hasattr(chain, "states") else list(chain)
    if not states:
        raise DomainError("kernel fit needs at least one posterior sample")
    noise = arch.noise if noise is None else noise
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    last = arch.layers[-1].kernel
    values = []
    if arch.depth == 1:
        v = gp.log_marginal_likelihood(last, X, y, noise, arch.jitter)
        values = [v] * len(states)
    else:
        for state in states:
            out = deepgp.unwhiten(arch, X, state)
            K = np.asarray(kern.kernel_matrix(last, out.F[-2])) + arch.jitter * np.eye(n)
            values.append(gp.gaussian_log_marginal(K, y, noise))
    return _summary(values)


@dataclass
class PredictiveLL:
    mean: float
    se: float
    per_point: np.ndarray
    rmse: float


def predictive_ll(arch, chain, X, y, X_star, y_star, seed=0):
    """Mean test log likelihood of the equal-weight posterior mixture (nats/point)."""
    states = list(chain.states()) if hasattr(chain, "states") else list(chain)
    if not states:
        raise DomainError("predictive log likelihood needs at least one posterior sample")
    Xs = np.atleast_2d(np.asarray(X_star, dtype=float))
    ys = np.asarray(y_star, dtype=float).ravel()
    if len(ys) == 0:
        raise DomainError("empty test set")
    logs, means = [], []
    for i, state in enumerate(states):
        p = deepgp.predictive_moments(arch, X, state, Xs, [seed, i])
        r = ys - p.mean
        logs.append(-0.5 * (np.log(2 * np.pi * p.obs_var) + r * r / p.obs_var))
        means.append(p.mean)
    logs = np.asarray(logs)
    per_point = logsumexp(logs, axis=0) - np.log(len(states))
    rmse = float(np.sqrt(np.mean((np.mean(means, axis=0) - ys) ** 2)))
    se = float(per_point.std(ddof=1) / np.sqrt(len(ys))) if len(ys) > 1 else 0.0
    return PredictiveLL(float(per_point.mean()), se, per_point, rmse)
