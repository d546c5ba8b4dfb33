"""Command line entry point: ``train``, ``sweep`` and ``report``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from stagger_lab import labrunner
from stagger_lab.labrunner import ConfigError
from stagger_lab.stagger import MODES


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stagger-lab", description="Staggered-reset PPO laboratory.")
    sub = ap.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=_positive, default=1, help="BLAS threads (1 gives bit-exact reruns)")
    common.add_argument("-v", "--verbose", action="store_true")

    train = sub.add_parser("train", parents=[common], help="train one agent")
    train.add_argument("--config", type=Path, help="JSON run config")
    train.add_argument("--seed", type=_u64)
    train.add_argument("--mode", choices=MODES)
    train.add_argument("--out", type=Path, required=True, help="output directory")

    sweep = sub.add_parser("sweep", parents=[common], help="run a paired naive/staggered sweep")
    sweep.add_argument("--config", type=Path, help="JSON sweep spec (needs 'sweep_kind')")
    sweep.add_argument("--kind", choices=labrunner.SWEEP_KINDS, help="built-in sweep, instead of --config")
    sweep.add_argument("--seeds", type=_positive, help="seeds per grid point")
    sweep.add_argument("--seed", type=_u64, help="first seed")
    sweep.add_argument("--mode", choices=MODES, help="run only this mode")
    sweep.add_argument("--workers", type=_positive, default=1)
    sweep.add_argument("--out", type=Path, required=True)

    rep = sub.add_parser("report", parents=[common], help="re-aggregate a finished sweep")
    rep.add_argument("--out", type=Path, required=True, help="sweep directory holding summary.csv")
    return ap


def _load_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _train(args) -> int:
    data = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        data["seed"] = args.seed
    if args.mode is not None:
        data.setdefault("schedule", {})
        if not isinstance(data["schedule"], dict):
            raise ConfigError("'schedule' must be an object")
        data["schedule"]["mode"] = args.mode
        if args.mode == "naive":
            data["schedule"]["num_groups"] = None
    cfg = labrunner.config_from_dict(data)

    def progress(row):
        logging.info("update %d acc %.3f success %s mse %.3f", row["update"], row["rolling_accuracy"],
                     f"{row['success_rate']:.3f}", row["value_mse"])

    r = labrunner.run_experiment(cfg, args.out, on_update=progress)
    print(f"final_success={r.final_success:.4f} mean_forgetting={r.mean_forgetting:.4f} "
          f"peak_value_mse={r.peak_value_mse:.4f} updates_to_threshold={r.updates_to_threshold}")
    return 0


def _sweep(args) -> int:
    if (args.config is None) == (args.kind is None):
        raise ConfigError("give exactly one of --config and --kind")
    data = _load_json(args.config) if args.config else {"sweep_kind": args.kind}
    if args.seeds is not None:
        data["seeds"] = args.seeds
    if args.seed is not None:
        data["first_seed"] = args.seed
    if args.mode is not None:
        data["modes"] = [args.mode]
    spec = labrunner.sweep_spec_from_dict(data)
    rows = labrunner.run_sweep(spec, args.out, workers=args.workers)
    print(f"{len(rows)} runs summarized in {args.out / 'summary.csv'}")
    return 0


def _report(args) -> int:
    summary = args.out / "summary.csv"
    if not summary.exists():
        raise ConfigError(f"{summary} not found")
    for kind, x, mode, n, metric, mean, std in labrunner.report(args.out):
        print(f"{kind:12s} x={x:<6g} {mode:9s} {metric:21s} n={n} mean={labrunner.fmt(mean)} std={labrunner.fmt(std)}")
    return 0


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad flags, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    labrunner.set_threads(args.threads)
    try:
        return {"train": _train, "sweep": _sweep, "report": _report}[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any run failure becomes a nonzero exit
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
