"""Run every CLI subcommand on the configs in a directory.

    python3 scripts/run_experiments.py [--configs configs] [--out out] [--small] [--seed N]

Each subcommand writes to <out>/<subcommand>/. ``--small`` picks the
``*_small.json`` configs, which finish in well under a minute.
"""

import argparse
import os
import sys

from dgpwidth import cli, experiments


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--configs", default=os.path.join(os.path.dirname(__file__), os.pardir, "configs"))
    p.add_argument("--out", default="out")
    p.add_argument("--small", action="store_true")
    p.add_argument("--seed", default=None)
    p.add_argument("subcommands", nargs="*", default=sorted(experiments.RUNNERS))
    args = p.parse_args(argv)
    suffix = "_small.json" if args.small else ".json"
    status = 0
    for sub in args.subcommands:
        argv = [sub, "--config", os.path.join(args.configs, sub.replace("-", "_") + suffix),
                "--out", os.path.join(args.out, sub)]
        if args.seed is not None:
            argv += ["--seed", str(args.seed)]
        print(f"== {sub}", flush=True)
        code = cli.main(argv)
        status = status or code
    return status


if __name__ == "__main__":
    sys.exit(main())
