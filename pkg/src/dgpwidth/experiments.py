"""Experiment runners behind the command line.

Each runner takes a config dataclass and a master seed and returns an
:class:`ExperimentOutput`: named file contents (CSV or JSON text) plus a
JSON-ready summary. Nothing here touches the filesystem, so runs are easy to
compare byte for byte.
"""

import csv
import io
import json
from dataclasses import dataclass, field, fields, is_dataclass

import numpy as np

from . import analysis, data, deepgp, gp, inference
from . import kernels as kern
from .errors import ConfigError, DomainError
from .kernels import KernelSpec

# ---------------------------------------------------------------------------
# config plumbing


def _from_dict(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    names = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in d.items():
        sub = _NESTED.get((cls.__name__, key))
        if sub is not None and value is not None:
            value = _from_dict(sub, value, f"{where}.{key}")
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _to_dict(obj):
    if is_dataclass(obj):
        return {f.name: _to_dict(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (tuple, list)):
        return [_to_dict(v) for v in obj]
    return obj


@dataclass(frozen=True)
class HmcSettings:
    warmup: int = 200
    samples: int = 200
    target_accept: float = 0.8
    max_leapfrog: int = 1024
    step_size: float = 0.1

    def config(self, seed):
        return inference.HmcConfig(self.warmup, self.samples, self.target_accept,
                                   self.max_leapfrog, self.step_size, seed=seed)


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "step"  # step | csv | bundle | dgp
    n: int = 100
    noise: float = 0.05
    seed: int = None  # None derives the data seed from the master seed
    path: str = None
    target: object = -1
    fractions: tuple = (0.75, 0.15, 0.10)
    max_train: int = 1000

    def __post_init__(self):
        if self.kind not in ("step", "csv", "bundle", "dgp"):
            raise ConfigError(f"dataset kind must be step, csv, bundle or dgp, got {self.kind!r}")
        if self.kind in ("csv", "bundle") and not self.path:
            raise ConfigError(f"dataset kind {self.kind!r} needs a path")


@dataclass(frozen=True)
class DensityGridConfig:
    preset: str = "two_layer"  # two_layer | three_layer | limit
    width: int = 1
    x1: float = -0.5
    x2: float = 0.5
    lo: float = -3.0
    hi: float = 3.0
    n: int = 20
    nodes: int = 7
    mc_samples: int = 10 ** 6
    kurtosis_samples: int = 10 ** 5

    def __post_init__(self):
        if self.preset not in ("two_layer", "three_layer", "limit"):
            raise ConfigError(f"preset must be two_layer, three_layer or limit, got {self.preset!r}")
        if self.width < 1 or self.n < 2 or not self.hi > self.lo:
            raise ConfigError("width >= 1, n >= 2 and hi > lo are required")


@dataclass(frozen=True)
class WidthSweepConfig:
    widths: tuple = (1, 2, 4, 8, 16)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    hmc: HmcSettings = field(default_factory=HmcSettings)
    map_steps: int = 1000
    map_lr: float = 0.01
    hyperopt_steps: int = 200
    hyperopt_lr: float = 0.05

    def __post_init__(self):
        if not self.widths or min(self.widths) < 1:
            raise ConfigError("widths must be a non-empty list of positive integers")


@dataclass(frozen=True)
class DepthCompareConfig:
    h1: int = 2
    h2: int = 8
    input_dim: int = 2
    dataset: DatasetConfig = field(default_factory=lambda: DatasetConfig(kind="dgp", n=200, noise=0.01))
    hmc: HmcSettings = field(default_factory=HmcSettings)
    map_steps: int = 1000
    map_lr: float = 0.01
    hyperopt_steps: int = 100
    hyperopt_lr: float = 0.05
    nodes: int = 11
    covariance_samples: int = 10 ** 5

    def __post_init__(self):
        if not 1 <= self.h1 <= kern.MAX_QUADRATURE_WIDTH:
            raise ConfigError(f"h1 must lie in [1, {kern.MAX_QUADRATURE_WIDTH}] for the quadrature-matched GP")
        if self.h2 < 1 or self.input_dim < 1:
            raise ConfigError("h2 and input_dim must be positive")


@dataclass(frozen=True)
class ConvergenceConfig:
    x: tuple = (-0.5,)
    x2: tuple = (0.5,)
    concentration_widths: tuple = (1, 4, 16, 64, 256)
    concentration_samples: int = 10 ** 5
    invariance_widths: tuple = (1, 2, 8, 32)
    invariance_samples: int = 10 ** 5
    cf_scales: tuple = (0.5, 1.0, 1.5, 2.0, 3.0)
    cf_samples: int = 10 ** 5

    def __post_init__(self):
        if len(self.x) != len(self.x2):
            raise ConfigError("x and x2 must have the same dimension")


@dataclass(frozen=True)
class ControlConfig:
    widths: tuple = (1, 2, 4, 8)
    fit_widths: tuple = None  # defaults to ``widths``
    n: int = 200
    input_dim: int = 4
    noise: float = 0.01
    hmc: HmcSettings = field(default_factory=HmcSettings)
    map_steps: int = 1000
    map_lr: float = 0.01


_NESTED = {
    ("WidthSweepConfig", "dataset"): DatasetConfig,
    ("WidthSweepConfig", "hmc"): HmcSettings,
    ("DepthCompareConfig", "dataset"): DatasetConfig,
    ("DepthCompareConfig", "hmc"): HmcSettings,
    ("ControlConfig", "hmc"): HmcSettings,
}

CONFIGS = {
    "density-grid": DensityGridConfig,
    "width-sweep": WidthSweepConfig,
    "depth-compare": DepthCompareConfig,
    "convergence-check": ConvergenceConfig,
    "control": ControlConfig,
}


def parse_config(subcommand, d):
    if subcommand not in CONFIGS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    return _from_dict(CONFIGS[subcommand], d, subcommand)


def config_dict(config):
    return _to_dict(config)


@dataclass
class ExperimentOutput:
    files: dict  # name -> text
    summary: dict


def to_json(obj):
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n"


def to_csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _seeds(master, n):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(master).spawn(n)]


# ---------------------------------------------------------------------------
# architecture presets


def density_preset(preset, width, noise=0.01):
    """Architectures sharing the second moment of the width-1 3-layer additive model.

    ``two_layer`` puts a matched kernel on the second layer so every width
    has that second moment; ``three_layer`` is RBF -> additive RBF ->
    additive RBF with hidden widths ``width``; ``limit`` is the Gaussian
    with the shared second moment.
    """
    rbf = KernelSpec("RBF")
    if preset == "two_layer":
        return deepgp.build(1, [rbf, kern.matched_width_spec(width)], [width, 1], noise)
    if preset == "three_layer":
        return deepgp.rbf_addrbf_addrbf(1, width, width, noise=noise)
    if preset == "limit":
        return deepgp.single_layer(1, kern.finite_3layer_spec(1), noise)
    raise DomainError(f"unknown density preset {preset!r}")


def depth_presets(h1, h2, input_dim, params=None, noise=0.01, nodes=11):
    """Moment-matched 1-, 2- and 3-layer architectures built from one set of hyperparameters.

    ``params`` holds ``o1, ell1, o2, ell2, o3, ell3`` (unit by default).
    """
    p = {**dict(o1=1.0, ell1=1.0, o2=1.0, ell2=1.0, o3=1.0, ell3=1.0), **(params or {})}
    k1 = KernelSpec("RBF", o=p["o1"], ell=p["ell1"])
    k2 = KernelSpec("AdditiveRBF", o=p["o2"], ell=p["ell2"], h=h1)
    k3 = KernelSpec("AdditiveRBF", o=p["o3"], ell=p["ell3"], h=h2)
    matched = KernelSpec("MatchedSecondLayer2of3", o=p["o3"], ell=p["ell3"], inner=k2)
    one = KernelSpec("QuadratureLimit", h=h1, nodes=nodes, inner=k1, outer=matched)
    return {
        1: deepgp.single_layer(input_dim, one, noise),
        2: deepgp.build(input_dim, [k1, matched], [h1, 1], noise),
        3: deepgp.build(input_dim, [k1, k2, k3], [h1, h2, 1], noise),
    }


def _depth_params_from_kernel(spec):
    return {"o1": spec.inner.o, "ell1": spec.inner.ell, "o2": spec.outer.inner.o,
            "ell2": spec.outer.inner.ell, "o3": spec.outer.o, "ell3": spec.outer.ell}


# ---------------------------------------------------------------------------
# density grid


def run_density_grid(cfg, seed=0):
    arch = density_preset(cfg.preset, cfg.width)
    s_grid, s_peak, s_kurt = _seeds(seed, 3)
    grid_cfg = analysis.GridConfig(cfg.lo, cfg.hi, cfg.n)
    grid = analysis.density_grid(arch, cfg.x1, cfg.x2, grid_cfg, cfg.nodes, cfg.mc_samples, s_grid)
    peak = analysis.peak_density(arch, cfg.x1, cfg.x2, cfg.nodes, cfg.mc_samples, s_peak)
    X = np.array([[cfg.x1], [cfg.x2]])
    summary = {
        "preset": cfg.preset, "width": cfg.width, "method": grid.meta["method"],
        "peak": peak["peak"], "gaussian_peak": peak["gaussian_peak"],
        "mass": grid.mass(), "architecture": arch.to_dict(),
    }
    if "se" in peak:
        summary["peak_se"] = peak["se"]
    if grid.meta["method"] == "monte_carlo":
        summary["fallback"] = (f"quadrature over {cfg.nodes}^{arch.layers[0].width} nodes is outside the "
                               f"budget or the model is deeper than two layers; Monte Carlo with "
                               f"{cfg.mc_samples} draws used instead")
    if arch.depth > 1:
        rep = analysis.moment_report(arch, X, [1.0, -1.0], cfg.kurtosis_samples, s_kurt)
        summary["excess_kurtosis"] = rep.excess_kurtosis
        summary["excess_kurtosis_se"] = rep.excess_kurtosis_se
    else:
        summary["excess_kurtosis"] = 0.0
        summary["excess_kurtosis_se"] = 0.0
    return ExperimentOutput({"density_grid.csv": grid.to_csv(), "summary.json": to_json(summary)}, summary)


# ---------------------------------------------------------------------------
# regression helpers


def load_dataset(cfg, seed, arch=None):
    """Dataset with train/test splits and standardized targets."""
    data_seed = seed if cfg.seed is None else cfg.seed
    if cfg.kind == "step":
        ds = data.synth_step(cfg.n, cfg.noise, data_seed)
    elif cfg.kind == "dgp":
        if arch is None:
            raise ConfigError("dataset kind 'dgp' needs a generating architecture")
        ds = data.synth_dgp(arch.with_noise(cfg.noise), cfg.n, arch.input_dim, data_seed)
    elif cfg.kind == "csv":
        return data.prepare(data.load_csv(cfg.path, cfg.target), cfg.fractions, cfg.max_train, data_seed)
    else:
        return data.load(cfg.path)
    ytr = ds.y[ds.splits["train"]]
    mean, std = float(ytr.mean()), float(ytr.std()) or 1.0
    return data.Dataset(ds.X, (ds.y - mean) / std, ds.x_min, ds.x_max, mean, std, ds.splits, ds.provenance)


def fit_dgp(arch, Xtr, ytr, Xte, yte, hmc, map_steps, map_lr, seed):
    """MAP initialization followed by HMC; returns the chain and its test/fit summaries."""
    s_map, s_hmc, s_pred = _seeds(seed, 3)
    steps = map_steps * (4 if min(arch.widths[:-1], default=1) == 1 and arch.depth > 1 else 1)
    init = inference.map_init(arch, Xtr, ytr, steps=steps, lr=map_lr, seed=s_map)
    chain = inference.run_chain(arch, Xtr, ytr, hmc.config(s_hmc), init)
    ll = analysis.predictive_ll(arch, chain, Xtr, ytr, Xte, yte, seed=s_pred)
    fit = analysis.kernel_fit(arch, chain, Xtr, ytr)
    return chain, ll, fit


def _gp_row(kernel, noise, Xtr, ytr, Xte, yte, jitter=kern.DEFAULT_JITTER):
    fit = gp.fit(kernel, Xtr, ytr, noise, jitter)
    per = gp.predictive_log_likelihood(fit, Xte, yte)
    mean, _ = gp.predictive(fit, Xte)
    return {
        "test_ll": float(per.mean()), "test_ll_se": float(per.std(ddof=1) / np.sqrt(len(per))),
        "kernel_fit": float(fit.lml), "kernel_fit_se": 0.0,
        "rmse": float(np.sqrt(np.mean((mean - yte) ** 2))),
    }


def _chain_row(chain, ll, fit):
    return {
        "test_ll": ll.mean, "test_ll_se": ll.se, "kernel_fit": fit.mean, "kernel_fit_se": fit.se,
        "rmse": ll.rmse, "accept_rate": float(chain.post_warmup_accept.mean()),
        "step_size": float(chain.step_size), "divergences": int(chain.divergences),
        "unreliable": bool(chain.unreliable),
    }


_ROW_KEYS = ["test_ll", "test_ll_se", "kernel_fit", "kernel_fit_se", "rmse",
             "accept_rate", "step_size", "divergences", "unreliable"]


def _row_values(row):
    return ["" if row.get(k) is None else row[k] for k in _ROW_KEYS]


# ---------------------------------------------------------------------------
# width sweep


def run_width_sweep(cfg, seed=0):
    s_data, s_fit = _seeds(seed, 2)
    ds = load_dataset(cfg.dataset, s_data)
    Xtr, ytr = ds.train
    Xte, yte = ds.test
    D = Xtr.shape[1]
    template = KernelSpec("LimitAddRBF", inner=KernelSpec("RBF"))
    opt = gp.optimize_hypers(template, Xtr, ytr, cfg.hyperopt_steps, cfg.hyperopt_lr)
    lim = opt.kernel
    hypers = {"o1": lim.inner.o, "ell1": lim.inner.ell, "o2": lim.o, "ell2": lim.ell, "noise": opt.noise}
    rows = [dict(model="limit", width="inf", **_gp_row(lim, opt.noise, Xtr, ytr, Xte, yte))]
    for w, s in zip(cfg.widths, _seeds(s_fit, len(cfg.widths))):
        arch = deepgp.rbf_addrbf(D, w, hypers["o1"], hypers["ell1"], hypers["o2"], hypers["ell2"], opt.noise)
        chain, ll, fit = fit_dgp(arch, Xtr, ytr, Xte, yte, cfg.hmc, cfg.map_steps, cfg.map_lr, s)
        rows.append(dict(model="dgp", width=w, **_chain_row(chain, ll, fit)))
    csv_text = to_csv(["model", "width"] + _ROW_KEYS, [[r["model"], r["width"]] + _row_values(r) for r in rows])
    best = max((r for r in rows if r["model"] == "dgp"), key=lambda r: r["test_ll"])
    summary = {"hyperparameters": hypers, "rows": rows, "best_width": best["width"],
               "dataset": ds.provenance, "n_train": int(len(ytr)), "n_test": int(len(yte))}
    return ExperimentOutput({"width_sweep.csv": csv_text, "summary.json": to_json(summary)}, summary)


# ---------------------------------------------------------------------------
# depth comparison


def prior_covariance_check(archs, X, samples, seed):
    """MC prior second moments of each architecture at the rows of ``X`` (upper triangle)."""
    iu = np.triu_indices(len(X))
    out = {}
    for (depth, arch), s in zip(sorted(archs.items()), _seeds(seed, len(archs))):
        grams = [g for g in _chunks(lambda n, ss: deepgp.sample_last_gram(arch, X, n, ss), samples, s)]
        vals = np.concatenate(grams)[:, iu[0], iu[1]]
        est, se = analysis.jackknife(vals, lambda v: v.mean(axis=0))
        out[depth] = {"mean": est.tolist(), "se": se.tolist()}
    return out


def _chunks(fn, total, seed, size=analysis.MC_CHUNK):
    remaining = total
    for child in analysis.seed_sequence(seed).spawn(int(np.ceil(total / size))):
        n = min(size, remaining)
        remaining -= n
        yield fn(n, child)


def run_depth_compare(cfg, seed=0):
    s_data, s_opt, s_cov, s_fit = _seeds(seed, 4)
    generating = depth_presets(cfg.h1, cfg.h2, cfg.input_dim, noise=cfg.dataset.noise, nodes=cfg.nodes)[3]
    ds = load_dataset(cfg.dataset, s_data, arch=generating)
    Xtr, ytr = ds.train
    Xte, yte = ds.test
    template = depth_presets(cfg.h1, cfg.h2, Xtr.shape[1], nodes=cfg.nodes)[1].layers[0].kernel
    opt = gp.optimize_hypers(template, Xtr, ytr, cfg.hyperopt_steps, cfg.hyperopt_lr)
    params = _depth_params_from_kernel(opt.kernel)
    archs = depth_presets(cfg.h1, cfg.h2, Xtr.shape[1], params, opt.noise, cfg.nodes)
    Xcov = np.linspace(-0.5, 0.5, 3)[:, None] * np.ones((1, Xtr.shape[1]))
    cov = prior_covariance_check(archs, Xcov, cfg.covariance_samples, s_cov)
    rows = [dict(depth=1, **_gp_row(archs[1].layers[0].kernel, opt.noise, Xtr, ytr, Xte, yte))]
    for depth, s in zip((2, 3), _seeds(s_fit, 2)):
        chain, ll, fit = fit_dgp(archs[depth], Xtr, ytr, Xte, yte, cfg.hmc, cfg.map_steps, cfg.map_lr, s)
        rows.append(dict(depth=depth, **_chain_row(chain, ll, fit)))
    csv_text = to_csv(["depth"] + _ROW_KEYS, [[r["depth"]] + _row_values(r) for r in rows])
    summary = {"hyperparameters": dict(params, noise=opt.noise), "rows": rows,
               "prior_covariance": {str(k): v for k, v in cov.items()},
               "covariance_inputs": Xcov.tolist(), "dataset": ds.provenance}
    return ExperimentOutput({"depth_compare.csv": csv_text, "summary.json": to_json(summary)}, summary)


# ---------------------------------------------------------------------------
# convergence diagnostics


def width_invariance(x, x2, widths, samples, seed):
    """MC E[k_2(f_1(x), f_1(x'))] for the {RBF + additive RBF} model per width, vs the limit."""
    x, x2 = np.atleast_1d(x), np.atleast_1d(x2)
    base = deepgp.rbf_addrbf(len(x), 1)
    lim = float(kern.limit_add_rbf(x, x2, KernelSpec("RBF")))
    rows = []
    for w, s in zip(widths, _seeds(seed, len(widths))):
        c = analysis.conditional_covariances(analysis.with_width(base, w), x, x2, samples, s)
        m, se = analysis.jackknife(c)
        rows.append({"width": int(w), "mean": float(m), "se": float(se)})
    return {"limit": lim, "rows": rows}


def run_convergence_check(cfg, seed=0):
    s_conc, s_inv, s_cf = _seeds(seed, 3)
    x, x2 = np.asarray(cfg.x, dtype=float), np.asarray(cfg.x2, dtype=float)
    base = deepgp.rbf_addrbf(len(x), 1)
    conc = analysis.cond_cov_concentration(base, x, x2, list(cfg.concentration_widths),
                                           cfg.concentration_samples, s_conc)
    inv = width_invariance(x, x2, cfg.invariance_widths, cfg.invariance_samples, s_inv)
    X = np.vstack([x, x2])
    single = deepgp.single_layer(len(x), KernelSpec("RBF"))
    cf_rows = []
    for i, (scale, s) in enumerate(zip(cfg.cf_scales, _seeds(s_cf, len(cfg.cf_scales)))):
        t = scale * np.array([1.0, -1.0])
        for name, arch in (("width_1", base), ("one_layer", single)):
            rep = analysis.cf_bound_check(arch, X, t, cfg.cf_samples, [s, len(name)])
            cf_rows.append(dict(model=name, scale=float(scale), **rep.to_dict()))
    inv_ok = all(abs(r["mean"] - inv["limit"]) <= 3 * r["se"] for r in inv["rows"])
    verdicts = {
        "concentration_slope_in_range": bool(-1.15 <= conc.slope <= -0.85),
        "width_invariant_covariance": bool(inv_ok),
        "cf_gap_positive_width_1": bool(all(r["gap"] > 3 * r["se"] for r in cf_rows if r["model"] == "width_1")),
        "cf_gap_zero_one_layer": bool(all(abs(r["gap"]) <= 3 * r["se"] for r in cf_rows if r["model"] == "one_layer")),
    }
    summary = {"concentration": conc.to_dict(), "invariance": inv, "cf": cf_rows, "verdicts": verdicts}
    csv_text = to_csv(["width", "variance", "se", "mean"],
                      [[w, v, s, m] for w, v, s, m in zip(conc.widths, conc.variances, conc.se, conc.means)])
    return ExperimentOutput({"concentration.csv": csv_text, "summary.json": to_json(summary)}, summary)


# ---------------------------------------------------------------------------
# control experiment


def run_control(cfg, seed=0):
    fit_widths = cfg.fit_widths or cfg.widths
    rows = []
    gen_seeds = _seeds(seed, len(cfg.widths))
    for j, s_gen in zip(cfg.widths, gen_seeds):
        s_data, s_fit = _seeds(s_gen, 2)
        gen = deepgp.rbf_addrbf(cfg.input_dim, j, noise=cfg.noise)
        ds = data.synth_dgp(gen, cfg.n, cfg.input_dim, s_data)
        Xtr, ytr = ds.train
        Xte, yte = ds.test
        for k, s in zip(fit_widths, _seeds(s_fit, len(fit_widths))):
            arch = deepgp.rbf_addrbf(cfg.input_dim, k, noise=cfg.noise)
            chain, ll, fit = fit_dgp(arch, Xtr, ytr, Xte, yte, cfg.hmc, cfg.map_steps, cfg.map_lr, s)
            rows.append(dict(generating_width=j, fit_width=k, **_chain_row(chain, ll, fit)))
    csv_text = to_csv(["generating_width", "fit_width"] + _ROW_KEYS,
                      [[r["generating_width"], r["fit_width"]] + _row_values(r) for r in rows])
    matrix = [[next(r["test_ll"] for r in rows if r["generating_width"] == j and r["fit_width"] == k)
               for k in fit_widths] for j in cfg.widths]
    summary = {"generating_widths": list(cfg.widths), "fit_widths": list(fit_widths),
               "test_ll": matrix, "rows": rows}
    return ExperimentOutput({"control.csv": csv_text, "summary.json": to_json(summary)}, summary)


RUNNERS = {
    "density-grid": run_density_grid,
    "width-sweep": run_width_sweep,
    "depth-compare": run_depth_compare,
    "convergence-check": run_convergence_check,
    "control": run_control,
}
