"""HMC with dual-averaging step-size adaptation over whitened Deep GP states."""

import json
import math
import time
from dataclasses import asdict, dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from . import deepgp
from .deepgp import WhitenedState
from .errors import DomainError

DIVERGENCE_THRESHOLD = 1000.0


@dataclass(frozen=True)
class HmcConfig:
    warmup: int = 500
    samples: int = 500
    target_accept: float = 0.8
    max_leapfrog: int = 1024
    step_size: float = 0.1
    trajectory_length: float = math.pi / 2
    seed: int = 0

    def __post_init__(self):
        for name in ("warmup", "samples", "max_leapfrog"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be positive")
        if not 0.0 < self.target_accept < 1.0:
            raise DomainError("target_accept must lie in (0, 1)")
        if not (self.step_size > 0 and self.trajectory_length > 0):
            raise DomainError("step_size and trajectory_length must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DomainError(f"unknown HMC config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass
class ChainResult:
    samples: np.ndarray  # (S, dim) flat whitened states
    accept_prob: np.ndarray  # per iteration, warmup first
    n_leapfrog: np.ndarray
    step_size: float
    divergences: int
    warmup_divergences: int
    seconds: float
    config: HmcConfig
    shapes: list = field(default_factory=list)

    @property
    def unreliable(self):
        return self.divergences > 0.1 * len(self.samples)

    @property
    def post_warmup_accept(self):
        return self.accept_prob[self.config.warmup:]

    def states(self):
        for flat in self.samples:
            yield WhitenedState(tuple(_split(flat, self.shapes)))

    def summary(self):
        """JSON-ready summary (no timing, so it is seed-deterministic)."""
        return {
            "mean": self.samples.mean(axis=0).tolist(),
            "variance": self.samples.var(axis=0).tolist(),
            "accept_rate": float(self.post_warmup_accept.mean()),
            "step_size": float(self.step_size),
            "divergences": int(self.divergences),
            "unreliable": bool(self.unreliable),
            "n_samples": int(len(self.samples)),
        }


def _split(flat, shapes):
    out, i = [], 0
    for a, b in shapes:
        out.append(flat[i:i + a * b].reshape(a, b))
        i += a * b
    return out


def leapfrog(grad_fn, position, momentum, step_size, n_steps):
    """Leapfrog integration with identity mass; ``grad_fn`` is the gradient of log p (JAX-traceable)."""
    q = jnp.asarray(position, dtype=float)
    p = jnp.asarray(momentum, dtype=float)
    p = p + 0.5 * step_size * grad_fn(q)

    def body(_, carry):
        q, p = carry
        q = q + step_size * p
        return q, p + step_size * grad_fn(q)

    q, p = jax.lax.fori_loop(0, n_steps - 1, body, (q, p))
    q = q + step_size * p
    p = p + 0.5 * step_size * grad_fn(q)
    return q, p


def _make_trajectory(logp_fn):
    vg = jax.value_and_grad(logp_fn)

    @jax.jit
    def trajectory(q, p, g, eps, n):
        p = p + 0.5 * eps * g

        def body(_, carry):
            q, p = carry
            q = q + eps * p
            _, g = vg(q)
            return q, p + eps * g

        q, p = jax.lax.fori_loop(0, n - 1, body, (q, p))
        q = q + eps * p
        lp, g = vg(q)
        p = p + 0.5 * eps * g
        return q, p, lp, g

    return jax.jit(vg), trajectory


class _DualAveraging:
    """Step-size adaptation of Hoffman & Gelman (2014), Algorithm 5."""

    def __init__(self, step_size, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = math.log(10.0 * step_size)
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.hbar = 0.0
        self.log_eps = math.log(step_size)
        self.log_eps_bar = 0.0
        self.t = 0

    def update(self, accept_prob):
        self.t += 1
        t = self.t
        w = 1.0 / (t + self.t0)
        self.hbar = (1 - w) * self.hbar + w * (self.target - accept_prob)
        self.log_eps = self.mu - math.sqrt(t) / self.gamma * self.hbar
        eta = t ** -self.kappa
        self.log_eps_bar = eta * self.log_eps + (1 - eta) * self.log_eps_bar
        return math.exp(self.log_eps)

    @property
    def final(self):
        return math.exp(self.log_eps_bar)


def hmc(logp_fn, init, config, shapes=None):
    """Run one chain on a JAX log density over flat vectors."""
    start = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    vg, trajectory = _make_trajectory(logp_fn)
    q = jnp.asarray(init, dtype=float)
    lp, g = vg(q)
    if not np.isfinite(float(lp)):
        raise DomainError("log density is not finite at the initial state")
    dim = q.shape[0]
    adapt = _DualAveraging(config.step_size, config.target_accept)
    eps = config.step_size
    total = config.warmup + config.samples
    accept = np.zeros(total)
    n_leap = np.zeros(total, dtype=int)
    samples = np.zeros((config.samples, dim))
    div_warm = div_post = 0
    for it in range(total):
        if it == config.warmup:
            eps = adapt.final
        length = config.trajectory_length * rng.uniform(0.8, 1.2)
        n = int(min(max(1, round(length / eps)), config.max_leapfrog))
        p0 = rng.standard_normal(dim)
        u = rng.uniform()
        q1, p1, lp1, g1 = trajectory(q, jnp.asarray(p0), g, eps, n)
        h0 = float(lp) - 0.5 * float(p0 @ p0)
        p1n = np.asarray(p1)
        h1 = float(lp1) - 0.5 * float(p1n @ p1n)
        delta = h1 - h0
        divergent = not np.isfinite(delta) or -delta > DIVERGENCE_THRESHOLD
        a = 0.0 if not np.isfinite(delta) else min(1.0, math.exp(min(delta, 0.0)))
        if divergent:
            a = 0.0
            if it < config.warmup:
                div_warm += 1
            else:
                div_post += 1
        accept[it] = a
        n_leap[it] = n
        if u < a:
            q, lp, g = q1, lp1, g1
        if it < config.warmup:
            eps = adapt.update(a)
        else:
            samples[it - config.warmup] = np.asarray(q)
    return ChainResult(
        samples=samples, accept_prob=accept, n_leapfrog=n_leap, step_size=eps,
        divergences=div_post, warmup_divergences=div_warm,
        seconds=time.perf_counter() - start, config=config, shapes=shapes or [(dim, 1)],
    )


def run_chain(arch, X, y, config, init):
    """Posterior samples of the whitened state of ``arch`` given data."""
    n = np.atleast_2d(X).shape[0]
    shapes = arch.state_shapes(n)
    flat = init.flatten()
    if flat.shape[0] != deepgp.state_size(arch, n):
        raise DomainError("initial state does not match the architecture")
    logp = deepgp.make_log_joint(arch, X, y)
    return hmc(logp, flat, config, shapes)


def run_chains(arch, X, y, config, init, n_chains, master_seed=None):
    """Independent chains with seeds spawned from one master seed, ordered by index."""
    seq = np.random.SeedSequence(config.seed if master_seed is None else master_seed)
    results = []
    for child in seq.spawn(n_chains):
        seed = int(child.generate_state(1)[0])
        cfg = HmcConfig(**{**config.to_dict(), "seed": seed})
        results.append(run_chain(arch, X, y, cfg, init))
    return results


def adam_ascent(fn, init, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Adam on a JAX scalar function of a flat vector; returns (final, trace of fn)."""
    vg = jax.value_and_grad(fn)

    def step(carry, t):
        x, m, v = carry
        val, g = vg(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        return (x + lr * mhat / (jnp.sqrt(vhat) + eps), m, v), val

    x0 = jnp.asarray(init, dtype=float)
    z = jnp.zeros_like(x0)
    ts = jnp.arange(1, steps + 1, dtype=float)
    (x, _, _), trace = jax.jit(lambda c: jax.lax.scan(step, c, ts))((x0, z, z))
    return np.asarray(x), np.asarray(trace)


def map_init(arch, X, y, steps=1000, lr=0.01, seed=0, init_scale=0.1, init=None):
    """MAP estimate of the whitened state by Adam, from a small random start."""
    if steps < 1:
        raise DomainError("steps must be >= 1")
    n = np.atleast_2d(X).shape[0]
    start = (WhitenedState.standard_normal(arch, n, seed, init_scale) if init is None else init).flatten()
    fn = deepgp.make_log_joint(arch, X, y)
    final, trace = adam_ascent(fn, start, steps, lr)
    if not np.isfinite(float(fn(jnp.asarray(final)))):
        final = start
    return WhitenedState.unflatten(arch, n, final)


def map_init_trace(arch, X, y, steps, lr=0.01, seed=0, init_scale=0.1):
    n = np.atleast_2d(X).shape[0]
    start = WhitenedState.standard_normal(arch, n, seed, init_scale).flatten()
    fn = deepgp.make_log_joint(arch, X, y)
    return adam_ascent(fn, start, steps, lr)[1]
