"""Command line entry point: ``dgpwidth <subcommand> --config path.json [--seed N] [--out DIR]``.

Flags may also come from the environment (``DGPWIDTH_CONFIG``,
``DGPWIDTH_SEED``, ``DGPWIDTH_OUT``); an explicit flag wins over the
environment, which wins over a ``seed`` key in the config file. Exit codes:
0 success, 2 configuration error, 3 numerical failure.
"""

import argparse
import json
import os
import sys

from . import __version__, experiments
from .errors import ConfigError, DomainError, NumericalError

PREFIX = "DGPWIDTH_"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser():
    p = _Parser(prog="dgpwidth", description="Deep GP width experiments")
    p.add_argument("--version", action="version", version=f"dgpwidth {__version__}")
    p.add_argument("subcommand", choices=sorted(experiments.RUNNERS))
    p.add_argument("--config", default=None, help="JSON config (env DGPWIDTH_CONFIG)")
    p.add_argument("--seed", default=None, help="master seed (env DGPWIDTH_SEED)")
    p.add_argument("--out", default=None, help="output directory (env DGPWIDTH_OUT)")
    return p


def resolve(args, environ=None):
    """Merge flags, environment and config file into (subcommand, config, seed, out)."""
    env = os.environ if environ is None else environ
    path = args.config or env.get(PREFIX + "CONFIG")
    raw = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    raw = dict(raw)
    file_seed = raw.pop("seed", 0)
    seed = args.seed if args.seed is not None else env.get(PREFIX + "SEED", file_seed)
    try:
        seed = int(seed)
    except (TypeError, ValueError):
        raise ConfigError(f"seed must be an integer, got {seed!r}") from None
    if seed < 0:
        raise ConfigError("seed must be non-negative")
    out = args.out or env.get(PREFIX + "OUT") or raw.pop("out", None) or "out"
    raw.pop("out", None)
    cfg = experiments.parse_config(args.subcommand, raw)
    return args.subcommand, cfg, seed, out


def sidecar(subcommand, cfg, seed, name):
    return {
        "subcommand": subcommand, "file": name, "seed": seed,
        "config": experiments.config_dict(cfg), "code_version": __version__,
    }


def write_outputs(out_dir, subcommand, cfg, seed, output):
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out_dir}: {exc}") from None
    written = []
    for name, text in sorted(output.files.items()):
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        with open(path + ".meta.json", "w", encoding="utf-8", newline="\n") as fh:
            fh.write(experiments.to_json(sidecar(subcommand, cfg, seed, name)))
        written.append(path)
    return written


def main(argv=None, environ=None):
    try:
        args = build_parser().parse_args(argv)
        subcommand, cfg, seed, out = resolve(args, environ)
        output = experiments.RUNNERS[subcommand](cfg, seed)
        for path in write_outputs(out, subcommand, cfg, seed, output):
            print(path)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except DomainError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
