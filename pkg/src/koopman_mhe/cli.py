"""Command line entry point: ``koopman-mhe generate|fit|eval|estimate|spectrum``.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness
from .centroidal_sim import STATE_LABELS, SimulationError
from .config import ConfigError, load_config, parse_gait_list
from .numerics import NumericsError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _u64(text: str) -> int:
    try:
        v = int(text, 10)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text, 10)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None,
                        help="experiment config JSON (default: packaged default.json)")
    common.add_argument("--seed", type=_u64, default=None, help="override the config seed")
    common.add_argument("--out", type=Path, default=None, help="output directory (overrides out_dir)")

    parser = argparse.ArgumentParser(
        prog="koopman-mhe",
        description="Centroidal simulation, DMD-with-control model fitting, and MHE vs EKF estimation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="simulate trajectories and write the manifest")
    p.add_argument("--gaits", type=str, default=None, help="comma-separated gait filter")

    p = sub.add_parser("fit", parents=[common], help="fit a linear model on the training split")
    p.add_argument("--gaits", type=str, default=None,
                   help="training gaits (default: dmdc.train_gaits from the config)")
    p.add_argument("--sv-threshold", type=float, default=None,
                   help="relative singular value cutoff of the pseudo-inverse")

    p = sub.add_parser("eval", parents=[common], help="open-loop RMSE on the validation split")
    p.add_argument("--horizon", type=_positive_int, default=None, help="rollout steps per window")
    p.add_argument("--model", type=Path, default=None, help="model file (default: <out>/model.json)")

    p = sub.add_parser("estimate", parents=[common], help="run MHE and/or EKF on validation data")
    p.add_argument("--estimator", choices=("mhe", "ekf", "both"), default=None)
    p.add_argument("--gaits", type=str, default=None, help="comma-separated gait filter")
    p.add_argument("--horizon", type=_positive_int, default=None, help="MHE window length N")
    p.add_argument("--model", type=Path, default=None, help="model file (default: <out>/model.json)")

    p = sub.add_parser("spectrum", parents=[common], help="eigenvalues of the fitted A")
    p.add_argument("--model", type=Path, default=None, help="model file (default: <out>/model.json)")
    return parser


def _resolve_config(args):
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out_dir"] = str(args.out)
    if getattr(args, "horizon", None) is not None and args.command == "estimate":
        changes["mhe.horizon"] = args.horizon
    return cfg.replace(**changes) if changes else cfg


def _run(args) -> int:
    cfg = _resolve_config(args)
    out = cfg.out_dir
    manifest = out / harness.MANIFEST
    model = getattr(args, "model", None) or out / harness.MODEL
    gaits = parse_gait_list(args.gaits) if getattr(args, "gaits", None) else None

    if args.command == "generate":
        path = harness.cmd_generate(cfg, gaits)
        print(f"wrote {path}")
    elif args.command == "fit":
        thr = cfg.sv_threshold if args.sv_threshold is None else args.sv_threshold
        if not thr >= 0:
            raise ConfigError("--sv-threshold must be non-negative")
        path = harness.cmd_fit(manifest, out, gaits or cfg.train_gaits, thr, cfg.scale_rows)
        print(f"wrote {path}")
    elif args.command == "eval":
        horizon = args.horizon or cfg.eval_horizon
        report = harness.cmd_eval_openloop(model, manifest, horizon, out)
        print("gait windows " + " ".join(STATE_LABELS))
        for r in report["rows"]:
            print(r["gait"], r["windows"], " ".join(f"{r['rmse'][s]:.4g}" for s in STATE_LABELS))
    elif args.command == "estimate":
        kinds = None if args.estimator is None else (
            ("mhe", "ekf") if args.estimator == "both" else (args.estimator,))
        summary = harness.cmd_estimate(model, manifest, cfg, kinds, gaits, out)
        print("gait estimator " + " ".join(STATE_LABELS))
        for r in summary["rows"]:
            print(r["gait"], r["estimator"], " ".join(f"{r['rmse'][s]:.4g}" for s in STATE_LABELS))
    elif args.command == "spectrum":
        for line in harness.format_spectrum(harness.cmd_spectrum(model)):
            print(line)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericsError, SimulationError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
