"""Command line entry point.

Subcommands: train, validate-mcf, validate-willmore, flow, inpaint, export.
Most take --config CONFIG.toml with optional --output-dir, --seed, and
repeatable --override key=value flags.  The WILLMORE_THREADS environment
variable caps the BLAS/FFT thread count.

Exit codes: 0 success, 1 configuration or file-format error, 2 numerical
failure.
"""

from __future__ import annotations

import argparse
import contextlib
import os
import sys

from .experiments import (
    ConfigError,
    ExperimentConfig,
    cmd_export,
    cmd_flow,
    cmd_inpaint,
    cmd_train,
    cmd_validate_mcf,
    cmd_validate_willmore,
)
from .storage import FormatError

THREAD_ENV_VAR = "WILLMORE_THREADS"


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems count as config errors (exit 1)
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _thread_limit():
    """Context manager applying WILLMORE_THREADS, if set."""
    val = os.environ.get(THREAD_ENV_VAR)
    if not val:
        return contextlib.nullcontext()
    try:
        limit = int(val)
    except ValueError:
        raise ConfigError(f"{THREAD_ENV_VAR}={val!r} is not an integer") from None
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=limit)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(limit))
        return contextlib.nullcontext()


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="willmore", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="TOML experiment config")
        p.add_argument("--output-dir", default=None, help="overrides [experiment].output_dir")
        p.add_argument("--seed", type=int, default=None, help="overrides [experiment].seed")
        p.add_argument(
            "--override",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="dotted config override, e.g. grid.n=128 (repeatable)",
        )
        return p

    add_config_command("train", "train the one-step mean curvature operator")
    add_config_command("validate-mcf", "circle-family errors of the one-step methods")
    add_config_command("validate-willmore", "circle or rectangle Willmore flow errors")
    add_config_command("flow", "run a Willmore flow and export snapshots")
    add_config_command("inpaint", "masked restoration flow with a frozen-node audit")

    p_exp = sub.add_parser("export", help="convert WFLD <-> CSV / PGM")
    p_exp.add_argument("input")
    p_exp.add_argument("output")
    p_exp.add_argument("--slice-axis", type=int, default=None, help="3D fields: slice axis")
    p_exp.add_argument("--slice-index", type=int, default=None, help="3D fields: slice index")
    return parser


_COMMANDS = {
    "train": cmd_train,
    "validate-mcf": cmd_validate_mcf,
    "validate-willmore": cmd_validate_willmore,
    "flow": cmd_flow,
    "inpaint": cmd_inpaint,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with _thread_limit():
            if args.command == "export":
                cmd_export(args.input, args.output, args.slice_axis, args.slice_index)
                return 0
            from .experiments import load_config

            data = load_config(args.config, args.override)
            if args.seed is not None:
                data.setdefault("experiment", {})["seed"] = args.seed
            cfg = ExperimentConfig(data, path=args.config)
            _COMMANDS[args.command](cfg, output_dir=args.output_dir)
            return 0
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # numerical failures and solver errors
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
