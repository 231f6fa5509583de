import json
import os

import numpy as np
import pytest

from dgpwidth import analysis, cli, experiments
from dgpwidth.errors import ConfigError, DomainError

CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


def _cfg(tmp_path, d, name="c.json"):
    p = tmp_path / name
    p.write_text(json.dumps(d))
    return str(p)


def _run(argv, environ=None):
    return cli.main(argv, environ or {})


def test_density_grid_outputs_and_sidecars(tmp_path):
    out = tmp_path / "o"
    path = _cfg(tmp_path, {"preset": "limit", "n": 5})
    assert _run(["density-grid", "--config", path, "--out", str(out), "--seed", "3"]) == 0
    names = sorted(os.listdir(out))
    assert names == ["density_grid.csv", "density_grid.csv.meta.json", "summary.json", "summary.json.meta.json"]
    meta = json.loads((out / "summary.json.meta.json").read_text())
    assert meta["seed"] == 3 and meta["subcommand"] == "density-grid"
    assert meta["config"]["preset"] == "limit" and "code_version" in meta
    assert not any("time" in k for k in meta)
    summary = json.loads((out / "summary.json").read_text())
    assert summary["peak"] == pytest.approx(summary["gaussian_peak"], rel=1e-10)


@pytest.mark.parametrize("argv,content", [
    (["density-grid"], {"no_such_key": 1}),
    (["density-grid"], {"preset": "nope"}),
    (["density-grid"], {"width": 0}),
    (["width-sweep"], {"hmc": {"warmup": 0}}),
    (["width-sweep"], {"dataset": {"kind": "csv", "path": "/nonexistent.csv"}}),
    (["bogus"], {}),
])
def test_config_errors_exit_2(tmp_path, argv, content):
    path = _cfg(tmp_path, content)
    assert _run(argv + ["--config", path, "--out", str(tmp_path / "o")]) == 2


def test_unreadable_configs_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert _run(["density-grid", "--config", str(bad)]) == 2
    assert _run(["density-grid", "--config", str(tmp_path / "missing.json")]) == 2
    assert _run(["density-grid", "--config", _cfg(tmp_path, [1, 2])]) == 2
    assert _run(["density-grid", "--config", _cfg(tmp_path, {}), "--seed", "x"]) == 2


def test_numerical_failure_exit_3(tmp_path, monkeypatch):
    def boom(cfg, seed):
        raise FloatingPointError("overflow")
    monkeypatch.setitem(experiments.RUNNERS, "density-grid", boom)
    assert _run(["density-grid", "--config", _cfg(tmp_path, {})]) == 3


def _resolved(argv, env):
    return cli.resolve(cli.build_parser().parse_args(argv), env)


def test_precedence_flag_env_config(tmp_path):
    path = _cfg(tmp_path, {"seed": 1, "out": "from_file"})
    _, _, seed, out = _resolved(["density-grid", "--config", path], {})
    assert (seed, out) == (1, "from_file")
    env = {"DGPWIDTH_SEED": "2", "DGPWIDTH_OUT": "from_env"}
    _, _, seed, out = _resolved(["density-grid", "--config", path], env)
    assert (seed, out) == (2, "from_env")
    _, _, seed, out = _resolved(["density-grid", "--config", path, "--seed", "3", "--out", "flag"], env)
    assert (seed, out) == (3, "flag")
    _, cfg, _, _ = _resolved(["density-grid"], {"DGPWIDTH_CONFIG": _cfg(tmp_path, {"width": 4}, "e.json")})
    assert cfg.width == 4


def test_defaults_without_config():
    sub, cfg, seed, out = _resolved(["convergence-check"], {})
    assert sub == "convergence-check" and seed == 0 and out == "out"
    assert cfg == experiments.ConvergenceConfig()


def test_shipped_configs_parse():
    for name in sorted(os.listdir(CONFIGS)):
        sub = name.replace("_small", "").replace(".json", "").replace("_", "-")
        with open(os.path.join(CONFIGS, name)) as fh:
            raw = json.load(fh)
        raw.pop("seed", None)
        experiments.parse_config(sub, raw)


def test_config_round_trip():
    for sub, cls in experiments.CONFIGS.items():
        cfg = cls()
        d = json.loads(json.dumps(experiments.config_dict(cfg)))
        assert experiments.parse_config(sub, d) == cfg


def test_nested_unknown_key_rejected():
    with pytest.raises(ConfigError):
        experiments.parse_config("width-sweep", {"hmc": {"tree_depth": 3}})


def test_same_seed_same_bytes(tmp_path):
    path = os.path.join(CONFIGS, "convergence_check_small.json")
    for d in ("a", "b"):
        assert _run(["convergence-check", "--config", path, "--out", str(tmp_path / d)]) == 0
    for name in os.listdir(tmp_path / "a"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert _run(["convergence-check", "--config", path, "--out", str(tmp_path / "c"), "--seed", "9"]) == 0
    assert (tmp_path / "a" / "summary.json").read_bytes() != (tmp_path / "c" / "summary.json").read_bytes()


# ---------------------------------------------------------------------------
# presets


def test_limit_preset_is_gaussian_with_shared_moment():
    lim = experiments.density_preset("limit", 1)
    p = analysis.peak_density(lim)
    assert p["peak"] == pytest.approx(p["gaussian_peak"], rel=1e-10)
    two = experiments.density_preset("two_layer", 3)
    X = np.array([[-0.5], [0.5]])
    assert analysis.limiting_gram(two, X)[0] == pytest.approx(analysis.limiting_gram(lim, X)[0], rel=1e-8)


def test_density_presets_share_second_moment_by_mc():
    X = np.array([[-0.5], [0.5]])
    target = analysis.limiting_gram(experiments.density_preset("limit", 1), X, jitter=False)[0][0, 1]
    for preset in ("two_layer", "three_layer"):
        g = analysis.conditional_covariances(experiments.density_preset(preset, 1), [-0.5], [0.5], 2 * 10 ** 5, 1,
                                             jitter=0.0)
        m, se = analysis.jackknife(g)
        assert abs(m - target) < 4 * se + 2e-3


def test_depth_presets_share_second_moment():
    archs = experiments.depth_presets(2, 8, 1)
    X = np.array([[-0.5], [0.0], [0.5]])
    cov = experiments.prior_covariance_check(archs, X, 10 ** 5, 0)
    ref = np.asarray(cov[1]["mean"])
    for depth in (2, 3):
        m, se = np.asarray(cov[depth]["mean"]), np.asarray(cov[depth]["se"])
        assert np.all(np.abs(m - ref) < 4 * se + 5e-3)


def test_unknown_preset():
    with pytest.raises(DomainError):
        experiments.density_preset("four_layer", 1)


def test_to_csv_repr_floats():
    text = experiments.to_csv(["a", "b"], [[0.1, "x"]])
    assert text == "a,b\n0.1,x\n"
