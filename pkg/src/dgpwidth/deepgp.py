"""Deep GP architectures, whitened parameterization and prior/predictive sampling.

A Deep GP with layers ``k_1 .. k_L`` maps inputs ``X`` (N x D) through
``F_l = chol(K_l(F_{l-1}) + jitter I) Z_l`` with ``Z_l`` standard normal
(N x H_l). The final layer has width 1 and a Gaussian observation model.
"""

import json
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from . import kernels as kern
from .errors import DomainError, NumericalError
from .kernels import DEFAULT_JITTER, KernelSpec

LOG_2PI = float(np.log(2.0 * np.pi))

# variants whose ``h`` declares the number of input columns
_WIDTH_DECLARING = {"AdditiveRBF", "FiniteFeatureReLU", "MatchedSecondLayerW1", "RBF"}


def declared_input_width(spec):
    if spec.variant in _WIDTH_DECLARING:
        return spec.h
    if spec.variant == "MatchedSecondLayer2of3":
        return declared_input_width(spec.inner)
    return None


@dataclass(frozen=True)
class Layer:
    width: int
    kernel: KernelSpec


@dataclass(frozen=True)
class DeepGpArchitecture:
    input_dim: int
    layers: tuple
    noise: float = 0.01
    jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise DomainError("an architecture needs at least one layer")
        if self.input_dim < 1:
            raise DomainError("input_dim must be positive")
        if not self.noise > 0:
            raise DomainError(f"observation noise must be > 0, got {self.noise}")
        if self.layers[-1].width != 1:
            raise DomainError("the final layer must have width 1")
        prev = self.input_dim
        for i, layer in enumerate(self.layers):
            if layer.width < 1:
                raise DomainError(f"layer {i} width must be positive")
            declared = declared_input_width(layer.kernel)
            if declared is not None and declared != prev and not (i == 0 and layer.kernel.variant == "RBF"):
                raise DomainError(
                    f"layer {i} kernel expects {declared} input columns but receives {prev}"
                )
            prev = layer.width

    @property
    def depth(self):
        return len(self.layers)

    @property
    def widths(self):
        return tuple(layer.width for layer in self.layers)

    def state_shapes(self, n):
        return [(n, layer.width) for layer in self.layers]

    def to_dict(self):
        return {
            "input_dim": self.input_dim,
            "noise": float(self.noise),
            "jitter": float(self.jitter),
            "layers": [{"width": l.width, "kernel": l.kernel.to_dict()} for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d):
        try:
            layers = [Layer(int(l["width"]), KernelSpec.from_dict(l["kernel"])) for l in d["layers"]]
            return cls(int(d["input_dim"]), layers, float(d["noise"]),
                       float(d.get("jitter", DEFAULT_JITTER)))
        except (KeyError, TypeError) as exc:
            raise DomainError(f"malformed architecture description: {exc}") from None

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def with_noise(self, noise):
        return replace(self, noise=float(noise))


def build(input_dim, kernels, widths, noise=0.01, jitter=DEFAULT_JITTER):
    """Architecture from parallel lists; the last width is forced to 1."""
    widths = list(widths)
    widths[-1] = 1
    return DeepGpArchitecture(input_dim, [Layer(w, k) for w, k in zip(widths, kernels)], noise, jitter)


def rbf_addrbf(input_dim, width, o1=1.0, ell1=1.0, o2=1.0, ell2=1.0, noise=0.01, jitter=DEFAULT_JITTER):
    """The 2-layer {RBF + additive RBF} model used throughout the experiments."""
    return build(
        input_dim,
        [KernelSpec("RBF", o=o1, ell=ell1), KernelSpec("AdditiveRBF", o=o2, ell=ell2, h=width)],
        [width, 1], noise, jitter,
    )


def rbf_addrbf_addrbf(input_dim, h1, h2, o=(1.0, 1.0, 1.0), ell=(1.0, 1.0, 1.0), noise=0.01,
                      jitter=DEFAULT_JITTER):
    ks = [KernelSpec("RBF", o=o[0], ell=ell[0]),
          KernelSpec("AdditiveRBF", o=o[1], ell=ell[1], h=h1),
          KernelSpec("AdditiveRBF", o=o[2], ell=ell[2], h=h2)]
    return build(input_dim, ks, [h1, h2, 1], noise, jitter)


def single_layer(input_dim, kernel, noise=0.01, jitter=DEFAULT_JITTER):
    return build(input_dim, [kernel], [1], noise, jitter)


def limiting_kernel(arch, nodes=11):
    """Kernel of the single-layer GP sharing ``arch``'s prior second moment.

    Returns ``None`` when no closed form or tractable quadrature exists.
    """
    ls = arch.layers
    if len(ls) == 1:
        return ls[0].kernel
    if len(ls) == 2:
        k1, k2, h1 = ls[0].kernel, ls[1].kernel, ls[0].width
        if k2.variant == "AdditiveRBF":
            return KernelSpec("LimitAddRBF", o=k2.o, ell=k2.ell, inner=k1)
        if k2.variant == "RBF" and k2.h == h1:
            return KernelSpec("LimitRBFRBF", o=k2.o, ell=k2.ell, h=h1, inner=k1)
        if k2.variant == "FiniteFeatureReLU" and k1.variant == "LinearBias":
            return KernelSpec("ArcCosine", beta=k2.beta, inner=k1)
        if k2.variant == "MatchedSecondLayerW1":
            # columns are iid, so the second moment is that of a single column
            return KernelSpec("QuadratureLimit", h=1, nodes=nodes, inner=k1, outer=replace(k2, h=1))
        if kern.is_stationary(k2) and h1 <= kern.MAX_QUADRATURE_WIDTH:
            return KernelSpec("QuadratureLimit", h=h1, nodes=nodes, inner=k1, outer=k2)
        return None
    if len(ls) == 3:
        k1, k2, k3 = (l.kernel for l in ls)
        h1 = ls[0].width
        if (k2.variant == "AdditiveRBF" and k3.variant == "AdditiveRBF"
                and h1 <= kern.MAX_QUADRATURE_WIDTH):
            outer = KernelSpec("MatchedSecondLayer2of3", o=k3.o, ell=k3.ell, inner=k2)
            return KernelSpec("QuadratureLimit", h=h1, nodes=nodes, inner=k1, outer=outer)
    return None


# ---------------------------------------------------------------------------
# states and layer outputs


@dataclass(frozen=True)
class WhitenedState:
    Z: tuple

    def flatten(self):
        return np.concatenate([np.asarray(z).ravel() for z in self.Z])

    @classmethod
    def unflatten(cls, arch, n, flat):
        return cls(tuple(_split_flat(arch, n, np.asarray(flat))))

    @classmethod
    def zeros(cls, arch, n):
        return cls(tuple(np.zeros(s) for s in arch.state_shapes(n)))

    @classmethod
    def standard_normal(cls, arch, n, seed, scale=1.0):
        rng = np.random.default_rng(seed)
        return cls(tuple(scale * rng.standard_normal(s) for s in arch.state_shapes(n)))


def _split_flat(arch, n, flat):
    out, i = [], 0
    for shape in arch.state_shapes(n):
        size = shape[0] * shape[1]
        out.append(flat[i:i + size].reshape(shape))
        i += size
    return out


def state_size(arch, n):
    return sum(w for w in arch.widths) * n


@dataclass(frozen=True)
class LayerOutputs:
    F: tuple
    grams: tuple = field(repr=False)

    @property
    def f(self):
        """Final-layer latent values, shape (N,)."""
        return self.F[-1][..., 0]


def _check_inputs(arch, X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != arch.input_dim:
        raise DomainError(f"expected {arch.input_dim} input columns, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise DomainError("inputs must be finite")
    return X


def unwhiten(arch, X, state):
    """Sequential ``F_l = chol(K_l(F_{l-1}) + jitter I) Z_l``."""
    X = _check_inputs(arch, X)
    n = X.shape[0]
    if len(state.Z) != arch.depth:
        raise DomainError("state depth does not match architecture")
    F, grams, prev = [], [], X
    for layer, Z, shape in zip(arch.layers, state.Z, arch.state_shapes(n)):
        Z = np.asarray(Z, dtype=float)
        if Z.shape != shape:
            raise DomainError(f"state block has shape {Z.shape}, expected {shape}")
        g = kern.gram(layer.kernel, prev, jitter=arch.jitter)
        prev = g.L @ Z
        F.append(prev)
        grams.append(g)
    return LayerOutputs(tuple(F), tuple(grams))


def whiten(arch, X, outputs):
    """Inverse of :func:`unwhiten` given the cached Grams."""
    Z = [np.linalg.solve(g.L, F) for g, F in zip(outputs.grams, outputs.F)]
    return WhitenedState(tuple(Z))


def _sym_factor(K):
    # symmetric PSD square root; independent of the Cholesky route in unwhiten
    w, V = np.linalg.eigh(K)
    return V * np.sqrt(np.maximum(w, 0.0))[..., None, :]


def sample_prior(arch, X, seed, n_samples=None, jitter=None):
    """Draw layer outputs from the Deep GP prior.

    With ``n_samples=None`` returns one :class:`LayerOutputs`; otherwise a list
    of per-layer arrays of shape ``(n_samples, N, H_l)``. ``jitter`` overrides
    the architecture's diagonal term (0 gives the unregularized prior).
    """
    X = _check_inputs(arch, X)
    rng = np.random.default_rng(seed)
    eps = arch.jitter if jitter is None else jitter
    if n_samples is None:
        F, grams, prev = [], [], X
        for layer in arch.layers:
            K = np.asarray(kern.kernel_matrix(layer.kernel, prev))
            A = _sym_factor(K + eps * np.eye(len(K)))
            prev = A @ rng.standard_normal((len(K), layer.width))
            F.append(prev)
            grams.append(kern.GramMatrix(K=K, jitter=eps, L=_safe_cholesky(K, eps)))
        return LayerOutputs(tuple(F), tuple(grams))
    Fs = _sample_layers(arch, X, n_samples, rng, eps, arch.depth)
    return Fs


def _safe_cholesky(K, eps):
    try:
        return kern.cholesky(K, eps)
    except NumericalError:
        return np.full_like(K, np.nan)


def _sample_layers(arch, X, n, rng, eps, upto):
    """Batched draws of the first ``upto`` layers, each (n, N, H)."""
    N = X.shape[0]
    out = []
    K = np.asarray(kern.kernel_matrix(arch.layers[0].kernel, X))
    A = _sym_factor(K + eps * np.eye(N))
    prev = np.einsum("ij,sjh->sih", A, rng.standard_normal((n, N, arch.layers[0].width)))
    out.append(prev)
    for layer in arch.layers[1:upto]:
        K = np.asarray(kern.kernel_matrix(layer.kernel, prev))
        A = _sym_factor(K + eps * np.eye(N))
        prev = A @ rng.standard_normal((n, N, layer.width))
        out.append(prev)
    return out


def sample_last_gram(arch, X, n, seed, jitter=None):
    """Draws of the final layer's conditional Gram ``K_L(F_{L-1})`` (no jitter), (n, N, N)."""
    X = _check_inputs(arch, X)
    rng = np.random.default_rng(seed)
    eps = arch.jitter if jitter is None else jitter
    last = arch.layers[-1].kernel
    if arch.depth == 1:
        K = np.asarray(kern.kernel_matrix(last, X))
        return np.broadcast_to(K, (n,) + K.shape)
    prev = _sample_layers(arch, X, n, rng, eps, arch.depth - 1)[-1]
    return np.asarray(kern.kernel_matrix(last, prev))


# ---------------------------------------------------------------------------
# joint density


def _forward_jax(arch, X, Zs):
    prev = X
    for layer, Z in zip(arch.layers, Zs):
        K = kern.kernel_matrix(layer.kernel, prev)
        L = jnp.linalg.cholesky(K + arch.jitter * jnp.eye(K.shape[-1]))
        prev = L @ Z
    return prev[:, 0]


def make_log_joint(arch, X, y):
    """Return a JAX function ``flat_state -> log p(Z, y)``."""
    X = jnp.asarray(_check_inputs(arch, X))
    y = np.asarray(y, dtype=float).ravel()
    if y.shape[0] != X.shape[0]:
        raise DomainError("y length does not match the number of inputs")
    if not np.all(np.isfinite(y)):
        raise DomainError("targets must be finite")
    y = jnp.asarray(y)
    n = X.shape[0]
    shapes = arch.state_shapes(n)
    sizes = [a * b for a, b in shapes]
    noise = arch.noise

    def log_joint_flat(flat):
        Zs, i = [], 0
        for shape, size in zip(shapes, sizes):
            Zs.append(flat[i:i + size].reshape(shape))
            i += size
        f = _forward_jax(arch, X, Zs)
        prior = -0.5 * jnp.sum(flat ** 2) - 0.5 * flat.shape[0] * LOG_2PI
        r = y - f
        lik = -0.5 * jnp.sum(r ** 2) / noise - 0.5 * n * (LOG_2PI + jnp.log(noise))
        return prior + lik

    return log_joint_flat


def log_joint(arch, X, y, state):
    """log N(vec Z; 0, I) + log N(y; f_L, noise I), in nats."""
    fn = make_log_joint(arch, X, y)
    return float(fn(jnp.asarray(state.flatten())))


def grad_log_joint(arch, X, y, state):
    fn = make_log_joint(arch, X, y)
    g = jax.grad(fn)(jnp.asarray(state.flatten()))
    return WhitenedState.unflatten(arch, np.atleast_2d(X).shape[0], np.asarray(g))


# ---------------------------------------------------------------------------
# predictive


class Predictive(NamedTuple):
    mean: np.ndarray
    var: np.ndarray
    obs_var: np.ndarray


def _conditional(g, F_prev, F, kernel, Xs_prev, jitter):
    """GP conditional of a layer at new inputs: means (M, H) and shared variances (M,)."""
    ks = np.asarray(kern.kernel_matrix(kernel, F_prev, Xs_prev))  # (N, M)
    kss = np.asarray(kern.kernel_diag(kernel, Xs_prev)) + jitter
    A = np.linalg.solve(g.L, ks)  # L^-1 k*
    mean = A.T @ np.linalg.solve(g.L, F)
    var = np.maximum(kss - np.sum(A * A, axis=0), 0.0)
    return mean, var


def predictive_moments(arch, X, state, X_star, seed, outputs=None):
    """Sample hidden layers at ``X_star`` and return the final-layer conditional.

    Hidden layers are sampled independently per test point (marginal
    predictions). ``outputs`` may pass a cached :func:`unwhiten` result.
    """
    X = _check_inputs(arch, X)
    Xs = _check_inputs(arch, X_star)
    rng = np.random.default_rng(seed)
    out = unwhiten(arch, X, state) if outputs is None else outputs
    prev_train, prev_test = X, Xs
    for i, layer in enumerate(arch.layers):
        mean, var = _conditional(out.grams[i], prev_train, out.F[i], layer.kernel, prev_test, arch.jitter)
        if i == arch.depth - 1:
            return Predictive(mean[:, 0], var, var + arch.noise)
        prev_test = mean + np.sqrt(var)[:, None] * rng.standard_normal(mean.shape)
        prev_train = out.F[i]


def predictive_sample(arch, X, state, x_star, seed):
    """Predictive mean and variance of f* at one test input for one posterior state."""
    p = predictive_moments(arch, X, state, np.atleast_2d(x_star), seed)
    return Predictive(float(p.mean[0]), float(p.var[0]), float(p.obs_var[0]))
