"""Datasets: CSV ingestion, train-fitted normalization, splits and synthetic generators."""

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import deepgp
from .errors import DomainError


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    x_min: np.ndarray = None
    x_max: np.ndarray = None
    y_mean: float = 0.0
    y_std: float = 1.0
    splits: dict = field(default_factory=dict)
    provenance: str = ""

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.X.shape[0] != self.y.shape[0]:
            raise DomainError("X and y have different numbers of rows")
        self.splits = {k: np.asarray(v, dtype=int) for k, v in self.splits.items()}

    def __len__(self):
        return len(self.y)

    def split(self, name):
        idx = self.splits[name]
        return self.X[idx], self.y[idx]

    @property
    def train(self):
        return self.split("train")

    @property
    def test(self):
        return self.split("test")

    def unnormalize_y(self, y):
        return np.asarray(y) * self.y_std + self.y_mean

    def normalize_y(self, y):
        return (np.asarray(y) - self.y_mean) / self.y_std

    def meta(self):
        return {
            "x_min": None if self.x_min is None else self.x_min.tolist(),
            "x_max": None if self.x_max is None else self.x_max.tolist(),
            "y_mean": float(self.y_mean),
            "y_std": float(self.y_std),
            "splits": {k: v.tolist() for k, v in sorted(self.splits.items())},
            "provenance": self.provenance,
        }


# ---------------------------------------------------------------------------
# CSV


def load_csv(path, target=-1):
    """Read a numeric CSV with a header row; column ``target`` (index or name) is y."""
    if not os.path.exists(path):
        raise DomainError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DomainError(f"{path} is empty")
    header, body = rows[0], [r for r in rows[1:] if r]
    if not body:
        raise DomainError(f"{path} has a header but no data rows")
    if isinstance(target, str):
        if target not in header:
            raise DomainError(f"target column {target!r} not in header")
        target = header.index(target)
    ncol = len(header)
    if not -ncol <= target < ncol:
        raise DomainError(f"target column {target} out of range for {ncol} columns")
    target %= ncol
    values = np.empty((len(body), ncol))
    for i, row in enumerate(body):
        if len(row) != ncol:
            raise DomainError(f"row {i + 1} has {len(row)} cells, expected {ncol}")
        try:
            values[i] = [float(c) for c in row]
        except ValueError:
            raise DomainError(f"row {i + 1} contains a non-numeric cell") from None
    X = np.delete(values, target, axis=1)
    return Dataset(X, values[:, target], provenance=f"csv:{os.path.basename(path)}")


def save_csv(path, X, y, names=None):
    X = np.atleast_2d(X)
    names = names or [f"x{j}" for j in range(X.shape[1])] + ["y"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row, t in zip(X, np.ravel(y)):
            w.writerow([repr(float(v)) for v in row] + [repr(float(t))])


def save(dataset, directory):
    """Persist a dataset bundle as {data.csv, meta.json}."""
    os.makedirs(directory, exist_ok=True)
    save_csv(os.path.join(directory, "data.csv"), dataset.X, dataset.y)
    with open(os.path.join(directory, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(dataset.meta(), fh, sort_keys=True, indent=1)


def load(directory):
    ds = load_csv(os.path.join(directory, "data.csv"), target=-1)
    with open(os.path.join(directory, "meta.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    arr = lambda v: None if v is None else np.asarray(v, dtype=float)
    return Dataset(ds.X, ds.y, arr(meta["x_min"]), arr(meta["x_max"]), meta["y_mean"],
                   meta["y_std"], meta["splits"], meta["provenance"])


# ---------------------------------------------------------------------------
# normalization and splits


def normalize(X, x_min, x_max):
    """Map features to [-1, 1] with the given ranges; constant columns go to 0."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    span = x_max - x_min
    flat = span <= 0
    out = 2.0 * (X - x_min) / np.where(flat, 1.0, span) - 1.0
    out[:, flat] = 0.0
    return out


def unnormalize(Xn, x_min, x_max):
    return (np.asarray(Xn) + 1.0) / 2.0 * (x_max - x_min) + x_min


def _fit_transforms(X, y):
    x_min, x_max = X.min(axis=0), X.max(axis=0)
    y_mean = float(y.mean())
    y_std = float(y.std())
    if not y_std > 0:
        y_std = 1.0
    return x_min, x_max, y_mean, y_std


def _split_sizes(n, fractions):
    sizes = [int(np.floor(f * n + 1e-9)) for f in fractions]
    # hand leftovers to the largest fractions first
    for i in np.argsort(fractions)[::-1][: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def prepare(raw, fractions=(0.75, 0.15, 0.10), max_train=1000, seed=0):
    """Shuffle, split train/test/val, cap train, and normalize with train statistics."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise DomainError(f"split fractions must be three non-negatives summing to 1, got {fractions}")
    n = len(raw)
    if n < 2:
        raise DomainError("need at least 2 rows to split")
    perm = np.random.default_rng(seed).permutation(n)
    n_tr, n_te, _ = _split_sizes(n, fractions)
    train = perm[:n_tr][:max_train]
    splits = {"train": np.sort(train), "test": np.sort(perm[n_tr:n_tr + n_te]),
              "val": np.sort(perm[n_tr + n_te:])}
    # rows dropped by the training cap are not used anywhere
    keep = np.sort(np.concatenate(list(splits.values())))
    remap = {int(old): new for new, old in enumerate(keep)}
    splits = {k: np.array([remap[int(i)] for i in v], dtype=int) for k, v in splits.items()}
    X, y = raw.X[keep], raw.y[keep]
    x_min, x_max, y_mean, y_std = _fit_transforms(X[splits["train"]], y[splits["train"]])
    return Dataset(normalize(X, x_min, x_max), (y - y_mean) / y_std, x_min, x_max, y_mean, y_std,
                   splits, raw.provenance)


def _half_split(n):
    n_tr = (n + 1) // 2
    return {"train": np.arange(n_tr), "test": np.arange(n_tr, n)}


# ---------------------------------------------------------------------------
# synthetic data


def step_targets(x):
    """+0.5 for x >= 0 and -0.5 otherwise."""
    return np.where(np.asarray(x) >= 0.0, 0.5, -0.5)


def synth_step(n=100, noise=0.05, seed=0, test_fraction=0.5):
    """Noisy step function on [-1, 1]; the data are left on their natural scale."""
    if n < 2:
        raise DomainError("synth_step needs n >= 2")
    if noise < 0:
        raise DomainError("noise must be non-negative")
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=n)
    y = step_targets(x) + noise * rng.standard_normal(n)
    n_te = int(round(test_fraction * n))
    splits = {"train": np.arange(n - n_te), "test": np.arange(n - n_te, n)}
    return Dataset(x[:, None], y, np.array([-1.0]), np.array([1.0]), splits=splits,
                   provenance=f"synth_step(n={n},noise={noise},seed={seed})")


def synth_dgp(arch, n=1000, d=None, seed=0):
    """Inputs uniform on [-1, 1]^d, targets a Deep GP prior draw plus observation noise."""
    d = arch.input_dim if d is None else d
    if d != arch.input_dim:
        raise DomainError(f"architecture expects {arch.input_dim} inputs, got d={d}")
    if n < 2:
        raise DomainError("synth_dgp needs n >= 2")
    ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    sx, sf, se = (np.random.default_rng(s) for s in ss.spawn(3))
    X = sx.uniform(-1.0, 1.0, size=(n, d))
    f = deepgp.sample_prior(arch, X, sf).f
    y = f + np.sqrt(arch.noise) * se.standard_normal(n)
    return Dataset(X, y, -np.ones(d), np.ones(d), splits=_half_split(n),
                   provenance=f"synth_dgp(seed={seed})")
