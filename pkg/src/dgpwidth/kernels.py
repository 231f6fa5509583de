"""Covariance functions for Deep GP layers and their infinite-width limits.

Every kernel is described by an immutable :class:`KernelSpec`. Evaluation goes
through :func:`kernel_matrix`, which works on plain numpy arrays and on JAX
arrays (including tracers), so the same code backs prior sampling, marginal
likelihoods and the differentiable HMC target.

Composite variants carry their sub-kernels in ``inner``/``outer``:

* ``LimitAddRBF(o, ell, inner=k1)`` is the second moment of ``k1`` followed by
  an additive-RBF layer; it does not depend on the hidden width.
* ``LimitRBFRBF(o, ell, h=H1, inner=k1)`` is the second moment of ``k1``
  followed by a width-scaled RBF layer (``h=None`` gives the H1 -> inf limit).
* ``Limit3LayerAddRBF`` is ``LimitAddRBF`` whose inner kernel is itself a
  ``LimitAddRBF`` (both hidden widths infinite).
* ``MatchedSecondLayer2of3(o3, ell3, inner=AdditiveRBF(o2, ell2))`` is the
  conditional expectation of a 3-layer additive model's last kernel given
  layer one; ``MatchedSecondLayerW1`` is its additive, per-unit counterpart.
* ``QuadratureLimit(h=H1, inner=k1, outer=k2)`` is E[k2(f1(x), f1(x'))] over
  ``H1`` iid layer-one GPs, by tensorized Gauss-Hermite quadrature. ``k2`` must
  depend on its arguments only through their difference.
"""

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import CapabilityError, DomainError, NumericalError
from .quadrature import tensor_gaussian_rule

try:
    import jax
    import jax.numpy as jnp
except ImportError:  # pragma: no cover - jax is a hard dependency in practice
    jax = None
    jnp = None

DEFAULT_JITTER = 1e-4
MAX_QUADRATURE_WIDTH = 4

VARIANTS = (
    "RBF",
    "AdditiveRBF",
    "LinearBias",
    "FiniteFeatureReLU",
    "ArcCosine",
    "LimitAddRBF",
    "LimitRBFRBF",
    "Limit3LayerAddRBF",
    "MatchedSecondLayer2of3",
    "MatchedSecondLayerW1",
    "QuadratureLimit",
)

# hyperparameters each variant actually reads
_USES = {
    "RBF": ("o", "ell"),
    "AdditiveRBF": ("o", "ell"),
    "LinearBias": ("beta",),
    "FiniteFeatureReLU": ("beta",),
    "ArcCosine": ("beta",),
    "LimitAddRBF": ("o", "ell"),
    "LimitRBFRBF": ("o", "ell"),
    "Limit3LayerAddRBF": ("o", "ell"),
    "MatchedSecondLayer2of3": ("o", "ell"),
    "MatchedSecondLayerW1": ("o", "ell"),
    "QuadratureLimit": (),
}

_NEEDS_INNER = {
    "LimitAddRBF",
    "LimitRBFRBF",
    "Limit3LayerAddRBF",
    "MatchedSecondLayer2of3",
    "MatchedSecondLayerW1",
    "QuadratureLimit",
}

# kernels that depend on (z, z') only through z - z'
_STATIONARY = {"RBF", "AdditiveRBF", "MatchedSecondLayerW1"}


def _is_concrete(v):
    return isinstance(v, (int, float, np.integer, np.floating))


@dataclass(frozen=True)
class KernelSpec:
    variant: str
    o: float = 1.0
    ell: float = 1.0
    beta: float = 0.0
    h: int | None = None
    inner: "KernelSpec | None" = None
    outer: "KernelSpec | None" = None
    nodes: int = 11

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DomainError(f"unknown kernel variant {self.variant!r}")
        for name in ("o", "ell"):
            v = getattr(self, name)
            if _is_concrete(v) and not (math.isfinite(v) and v > 0):
                raise DomainError(f"{self.variant}.{name} must be finite and > 0, got {v}")
        if _is_concrete(self.beta) and not (math.isfinite(self.beta) and self.beta >= 0):
            raise DomainError(f"{self.variant}.beta must be finite and >= 0, got {self.beta}")
        if self.h is not None and (not isinstance(self.h, (int, np.integer)) or self.h < 1):
            raise DomainError(f"{self.variant}.h must be a positive integer or None, got {self.h!r}")
        if self.variant in _NEEDS_INNER and self.inner is None:
            raise DomainError(f"{self.variant} requires an inner kernel")
        if self.variant == "Limit3LayerAddRBF" and self.inner.variant != "LimitAddRBF":
            raise DomainError("Limit3LayerAddRBF requires a LimitAddRBF inner kernel")
        if self.variant == "MatchedSecondLayer2of3" and not is_stationary(self.inner):
            raise DomainError("MatchedSecondLayer2of3 requires a stationary inner kernel")
        if self.variant == "QuadratureLimit":
            if self.outer is None or self.h is None:
                raise DomainError("QuadratureLimit requires an outer kernel and a width h")
            if not is_stationary(self.outer):
                raise DomainError("QuadratureLimit requires an outer kernel that depends on z - z' only")
            if self.h > MAX_QUADRATURE_WIDTH:
                raise CapabilityError(
                    f"tensorized quadrature supports widths up to {MAX_QUADRATURE_WIDTH}, got {self.h}"
                )
        if self.nodes < 1:
            raise DomainError("nodes must be >= 1")

    # serialization ---------------------------------------------------------
    def to_dict(self):
        d = {"variant": self.variant, "o": float(self.o), "ell": float(self.ell),
             "beta": float(self.beta), "h": self.h}
        if self.inner is not None:
            d["inner"] = self.inner.to_dict()
        if self.outer is not None:
            d["outer"] = self.outer.to_dict()
        if self.variant == "QuadratureLimit":
            d["nodes"] = self.nodes
        return d

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict) or "variant" not in d:
            raise DomainError(f"kernel description must be an object with a 'variant' key: {d!r}")
        unknown = set(d) - {"variant", "o", "ell", "beta", "h", "inner", "outer", "nodes"}
        if unknown:
            raise DomainError(f"unknown kernel keys {sorted(unknown)}")
        return cls(
            variant=d["variant"],
            o=float(d.get("o", 1.0)),
            ell=float(d.get("ell", 1.0)),
            beta=float(d.get("beta", 0.0)),
            h=None if d.get("h") is None else int(d["h"]),
            inner=None if d.get("inner") is None else cls.from_dict(d["inner"]),
            outer=None if d.get("outer") is None else cls.from_dict(d["outer"]),
            nodes=int(d.get("nodes", 11)),
        )

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    # hyperparameters ---------------------------------------------------------
    def params(self, prefix=""):
        """Flat ``{path: value}`` of the positive hyperparameters this spec reads."""
        out = {}
        for name in _USES[self.variant]:
            if name == "beta" and not (_is_concrete(self.beta) and self.beta > 0):
                continue
            out[prefix + name] = getattr(self, name)
        for child in ("inner", "outer"):
            sub = getattr(self, child)
            if sub is not None:
                out.update(sub.params(prefix + child + "."))
        return out

    def with_params(self, values):
        """Copy with hyperparameters replaced from a ``{path: value}`` mapping."""
        return _with_params(self, values, "")


def _with_params(spec, values, prefix):
    changes = {}
    for name in ("o", "ell", "beta"):
        if prefix + name in values:
            changes[name] = values[prefix + name]
    for child in ("inner", "outer"):
        sub = getattr(spec, child)
        if sub is not None:
            changes[child] = _with_params(sub, values, prefix + child + ".")
    return replace(spec, **changes) if changes else spec


def is_stationary(spec):
    if spec.variant in _STATIONARY:
        return True
    if spec.variant in ("LimitAddRBF", "LimitRBFRBF", "MatchedSecondLayer2of3"):
        return is_stationary(spec.inner)
    return False


# ---------------------------------------------------------------------------
# array backend helpers


def _xp(*objs):
    if jax is None:
        return np
    for obj in objs:
        if isinstance(obj, jax.Array):
            return jnp
        if isinstance(obj, KernelSpec):
            leaves = [obj.o, obj.ell, obj.beta]
            if any(isinstance(v, jax.Array) for v in leaves):
                return jnp
            for sub in (obj.inner, obj.outer):
                if sub is not None and _xp(sub) is jnp:
                    return jnp
    return np


def _safe_sqrt(x, xp):
    pos = x > 0
    return xp.where(pos, xp.sqrt(xp.where(pos, x, 1.0)), 0.0)


def _sqdist(A, B, xp):
    # expanded form |a|^2 + |b|^2 - 2 a.b, clamped at zero
    a2 = xp.sum(A * A, axis=-1)[..., :, None]
    b2 = xp.sum(B * B, axis=-1)[..., None, :]
    d = a2 + b2 - 2.0 * (A @ xp.swapaxes(B, -1, -2))
    return xp.maximum(d, 0.0)


def _coord_diff(A, B):
    return A[..., :, None, :] - B[..., None, :, :]


def _check_width(spec, H):
    if spec.h is not None and spec.h != H:
        raise DomainError(f"{spec.variant} declares input width {spec.h} but received {H} columns")


# ---------------------------------------------------------------------------
# evaluation


def kernel_matrix(spec, A, B=None):
    """Pairwise covariances ``k(A[i], B[j])``.

    ``A`` has shape ``(..., N, H)`` and ``B`` shape ``(..., M, H)``; leading
    batch dimensions broadcast. Returns ``(..., N, M)``. Self-Grams
    (``B is None``) are symmetrized.
    """
    xp = _xp(spec, A, B)
    A = xp.asarray(A, dtype=float)
    same = B is None
    B = A if same else xp.asarray(B, dtype=float)
    if A.shape[-1] != B.shape[-1]:
        raise DomainError(f"column mismatch: {A.shape[-1]} vs {B.shape[-1]}")
    K = _pairwise(spec, A, B, xp)
    if same:
        K = 0.5 * (K + xp.swapaxes(K, -1, -2))
    return K


def kernel_diag(spec, A):
    """``k(A[i], A[i])`` with shape ``(..., N)``."""
    xp = _xp(spec, A)
    A = xp.asarray(A, dtype=float)
    return _diag(spec, A, xp)


def _pairwise(spec, A, B, xp):
    v = spec.variant
    H = A.shape[-1]
    if v == "RBF":
        scale = 1.0 if spec.h is None else float(spec.h)
        if spec.h is not None:
            _check_width(spec, H)
        return spec.o ** 2 * xp.exp(-_sqdist(A, B, xp) / (2.0 * spec.ell ** 2 * scale))
    if v == "AdditiveRBF":
        _check_width(spec, H)
        d = _coord_diff(A, B)
        return spec.o ** 2 * xp.mean(xp.exp(-d * d / (2.0 * spec.ell ** 2)), axis=-1)
    if v == "LinearBias":
        return spec.beta ** 2 + A @ xp.swapaxes(B, -1, -2)
    if v == "FiniteFeatureReLU":
        _check_width(spec, H)
        ra, rb = xp.maximum(A, 0.0), xp.maximum(B, 0.0)
        return spec.beta ** 2 + (ra @ xp.swapaxes(rb, -1, -2)) / H
    if v == "ArcCosine":
        if spec.inner is None:
            cross = A @ xp.swapaxes(B, -1, -2)
            na = xp.sum(A * A, axis=-1)
            nb = xp.sum(B * B, axis=-1)
        else:
            cross = _pairwise(spec.inner, A, B, xp)
            na = _diag(spec.inner, A, xp)
            nb = _diag(spec.inner, B, xp)
        return spec.beta ** 2 + _arccos_term(cross, na[..., :, None], nb[..., None, :], xp)
    if v in ("LimitAddRBF", "Limit3LayerAddRBF", "MatchedSecondLayer2of3", "LimitRBFRBF"):
        s2 = _diff_variance(spec.inner, A, B, xp)
        return _moment_from_diff_variance(spec, s2, xp)
    if v == "MatchedSecondLayerW1":
        _check_width(spec, H)
        cols = []
        for j in range(H):
            s2 = _diff_variance(spec.inner, A[..., j:j + 1], B[..., j:j + 1], xp)
            cols.append(_moment_from_diff_variance(spec, s2, xp))
        return sum(cols) / H
    if v == "QuadratureLimit":
        s2 = _diff_variance(spec.inner, A, B, xp)
        return _quadrature_expectation(spec, s2, xp)
    raise DomainError(f"unhandled variant {v}")  # pragma: no cover


def _diag(spec, A, xp):
    v = spec.variant
    n = A.shape[:-1]
    if v in ("RBF", "AdditiveRBF", "LimitAddRBF", "Limit3LayerAddRBF",
             "MatchedSecondLayer2of3", "LimitRBFRBF", "MatchedSecondLayerW1"):
        return spec.o ** 2 * xp.ones(n)
    if v == "LinearBias":
        return spec.beta ** 2 + xp.sum(A * A, axis=-1)
    if v == "FiniteFeatureReLU":
        r = xp.maximum(A, 0.0)
        return spec.beta ** 2 + xp.sum(r * r, axis=-1) / A.shape[-1]
    if v == "ArcCosine":
        na = xp.sum(A * A, axis=-1) if spec.inner is None else _diag(spec.inner, A, xp)
        # theta = 0: (1/2pi) |x|^2 pi
        return spec.beta ** 2 + 0.5 * na
    if v == "QuadratureLimit":
        return stationary_profile(spec.outer, xp.zeros(n + (spec.h,))) * xp.ones(n)
    raise DomainError(f"unhandled variant {v}")  # pragma: no cover


def _arccos_term(cross, na, nb, xp):
    norm = _safe_sqrt(na * nb, xp)
    pos = norm > 0
    cos = xp.clip(cross / xp.where(pos, norm, 1.0), -1.0, 1.0)
    theta = xp.arccos(cos)
    val = norm * (xp.sin(theta) + (np.pi - theta) * cos) / (2.0 * np.pi)
    return xp.where(pos, val, 0.0)


def _diff_variance(k1, A, B, xp):
    """Var[f(a) - f(b)] = k1(a,a) + k1(b,b) - 2 k1(a,b) for f ~ GP(0, k1)."""
    s2 = _diag(k1, A, xp)[..., :, None] + _diag(k1, B, xp)[..., None, :] - 2.0 * _pairwise(k1, A, B, xp)
    return xp.maximum(s2, 0.0)


def _moment_from_diff_variance(spec, s2, xp):
    if spec.variant == "LimitRBFRBF":
        if spec.h is None:
            return spec.o ** 2 * xp.exp(-s2 / (2.0 * spec.ell ** 2))
        H = float(spec.h)
        return spec.o ** 2 * (1.0 + s2 / (H * spec.ell ** 2)) ** (-H / 2.0)
    return spec.o ** 2 * (1.0 + s2 / spec.ell ** 2) ** -0.5


def stationary_profile(spec, tau):
    """Value of a stationary kernel as a function of the difference ``tau`` (..., H)."""
    xp = _xp(spec, tau)
    v = spec.variant
    if v == "RBF":
        scale = 1.0 if spec.h is None else float(spec.h)
        return spec.o ** 2 * xp.exp(-xp.sum(tau * tau, axis=-1) / (2.0 * spec.ell ** 2 * scale))
    if v == "AdditiveRBF":
        return spec.o ** 2 * xp.mean(xp.exp(-tau * tau / (2.0 * spec.ell ** 2)), axis=-1)
    if v in ("LimitAddRBF", "LimitRBFRBF", "MatchedSecondLayer2of3"):
        k0 = stationary_profile(spec.inner, xp.zeros_like(tau))
        s2 = xp.maximum(2.0 * (k0 - stationary_profile(spec.inner, tau)), 0.0)
        return _moment_from_diff_variance(spec, s2, xp)
    if v == "MatchedSecondLayerW1":
        cols = [stationary_profile(replace(spec, variant="LimitAddRBF", h=None), tau[..., j:j + 1])
                for j in range(tau.shape[-1])]
        return sum(cols) / tau.shape[-1]
    raise DomainError(f"{v} is not a stationary kernel")


def _quadrature_expectation(spec, s2, xp):
    # tau_i = sigma * u_i with u from a standard tensor rule
    u, w = tensor_gaussian_rule(spec.nodes, spec.h, 1.0)
    sigma = _safe_sqrt(s2, xp)
    tau = sigma[..., None, None] * u  # (..., N, M, Q, H)
    vals = stationary_profile(spec.outer, tau)
    return xp.tensordot(vals, xp.asarray(w), axes=([-1], [0]))


# ---------------------------------------------------------------------------
# Gram matrices


@dataclass(frozen=True)
class GramMatrix:
    K: np.ndarray
    jitter: float
    L: np.ndarray = field(repr=False)

    @property
    def n(self):
        return self.K.shape[-1]

    def reconstruct(self):
        return self.L @ np.swapaxes(self.L, -1, -2)


def cholesky(K, jitter=DEFAULT_JITTER):
    """Lower Cholesky factor of ``K + jitter I`` (numpy, batched)."""
    n = K.shape[-1]
    Kj = K + jitter * np.eye(n)
    try:
        return np.linalg.cholesky(Kj)
    except np.linalg.LinAlgError:
        min_eig = float(np.min(np.linalg.eigvalsh(Kj)))
        raise NumericalError(
            f"Cholesky failed for {n}x{n} Gram with jitter {jitter:g}; min eigenvalue {min_eig:.3e}",
            min_eigenvalue=min_eig,
        ) from None


def _check_finite(*arrays):
    for a in arrays:
        if a is not None and not np.all(np.isfinite(a)):
            raise DomainError("kernel inputs must be finite")


def gram(spec, Z, Z2=None, jitter=DEFAULT_JITTER):
    """Self-Gram (returns :class:`GramMatrix`) or cross-covariance (returns array)."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    _check_finite(Z)
    if Z2 is not None:
        Z2 = np.atleast_2d(np.asarray(Z2, dtype=float))
        _check_finite(Z2)
        return np.asarray(kernel_matrix(spec, Z, Z2))
    K = np.asarray(kernel_matrix(spec, Z))
    return GramMatrix(K=K, jitter=jitter, L=cholesky(K, jitter))


# ---------------------------------------------------------------------------
# scalar operations


def _pair(spec, x, xp_):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    xp_ = np.atleast_1d(np.asarray(xp_, dtype=float))
    _check_finite(x, xp_)
    if x.shape != xp_.shape:
        raise DomainError(f"input shapes differ: {x.shape} vs {xp_.shape}")
    return float(np.asarray(kernel_matrix(spec, x[None, :], xp_[None, :]))[0, 0])


def rbf(x, x2, o=1.0, ell=1.0):
    return _pair(KernelSpec("RBF", o=o, ell=ell), x, x2)


def additive_rbf(z, z2, o=1.0, ell=1.0):
    return _pair(KernelSpec("AdditiveRBF", o=o, ell=ell), z, z2)


def linear_bias(x, x2, beta=0.0):
    return _pair(KernelSpec("LinearBias", beta=beta), x, x2)


def finite_feature_relu(z, z2, beta=0.0):
    return _pair(KernelSpec("FiniteFeatureReLU", beta=beta), z, z2)


def arc_cosine(x, x2, beta=0.0):
    return _pair(KernelSpec("ArcCosine", beta=beta), x, x2)


def limit_add_rbf(x, x2, k1, o2=1.0, ell2=1.0):
    return _pair(KernelSpec("LimitAddRBF", o=o2, ell=ell2, inner=k1), x, x2)


def limit_rbf_rbf(x, x2, o1=1.0, ell1=1.0, o2=1.0, ell2=1.0, h1=None):
    """Second moment of RBF -> width-scaled RBF; ``h1=None`` (or inf) is the infinite-width limit."""
    if h1 is not None and math.isinf(h1):
        h1 = None
    spec = KernelSpec("LimitRBFRBF", o=o2, ell=ell2, h=h1, inner=KernelSpec("RBF", o=o1, ell=ell1))
    return _pair(spec, x, x2)


def limit_3layer_spec(o1=1.0, o2=1.0, o3=1.0, ell1=1.0, ell2=1.0, ell3=1.0):
    inner = KernelSpec("LimitAddRBF", o=o2, ell=ell2, inner=KernelSpec("RBF", o=o1, ell=ell1))
    return KernelSpec("Limit3LayerAddRBF", o=o3, ell=ell3, inner=inner)


def limit_3layer_add_rbf(x, x2, o1=1.0, o2=1.0, o3=1.0, ell1=1.0, ell2=1.0, ell3=1.0):
    return _pair(limit_3layer_spec(o1, o2, o3, ell1, ell2, ell3), x, x2)


def finite_3layer_spec(h1, o1=1.0, o2=1.0, o3=1.0, ell1=1.0, ell2=1.0, ell3=1.0, nodes=11):
    """Covariance of RBF -> additive RBF (width h1) -> additive RBF, by quadrature."""
    if h1 > MAX_QUADRATURE_WIDTH:
        raise CapabilityError(
            f"finite 3-layer quadrature needs {nodes}^H1 evaluations; H1 <= {MAX_QUADRATURE_WIDTH} supported, got {h1}"
        )
    outer = matched_depth_spec(h1, o2=o2, ell2=ell2, o3=o3, ell3=ell3)
    return KernelSpec("QuadratureLimit", h=h1, nodes=nodes,
                      inner=KernelSpec("RBF", o=o1, ell=ell1), outer=outer)


def finite_3layer_quadrature(x, x2, h1, o1=1.0, o2=1.0, o3=1.0, ell1=1.0, ell2=1.0, ell3=1.0, nodes=11):
    return _pair(finite_3layer_spec(h1, o1, o2, o3, ell1, ell2, ell3, nodes), x, x2)


def matched_depth_spec(h1, o2=1.0, ell2=1.0, o3=1.0, ell3=1.0):
    """Second-layer kernel matching a 3-layer additive model with first width ``h1``."""
    return KernelSpec("MatchedSecondLayer2of3", o=o3, ell=ell3,
                      inner=KernelSpec("AdditiveRBF", o=o2, ell=ell2, h=h1))


def matched_width_spec(h, o2=1.0, ell2=1.0, o3=1.0, ell3=1.0):
    """Additive second-layer kernel whose units each match a width-1 3-layer model."""
    return KernelSpec("MatchedSecondLayerW1", o=o3, ell=ell3, h=h,
                      inner=KernelSpec("RBF", o=o2, ell=ell2))


def matched_second_layer(z, z2, variant, o2=1.0, ell2=1.0, o3=1.0, ell3=1.0):
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if variant == "MatchedSecondLayer2of3":
        spec = matched_depth_spec(z.shape[0], o2, ell2, o3, ell3)
    elif variant == "MatchedSecondLayerW1":
        spec = matched_width_spec(z.shape[0], o2, ell2, o3, ell3)
    else:
        raise DomainError(f"not a matched second-layer variant: {variant!r}")
    return _pair(spec, z, z2)
