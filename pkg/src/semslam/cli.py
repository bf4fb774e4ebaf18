"""Command line entry point: ``semslam {simulate,run,eval,export-map}``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import List, Optional

from .evaluation import LengthMismatch, ate_rmse
from .scenario import ConfigError, load_config, make_estimator, read_tum, run_scenario, simulate_scenario, write_simulation


def _seed(text):
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _common(p, out_required=False):
    p.add_argument("--config", help="scenario JSON (default: packaged loop scenario)")
    p.add_argument("--seed", type=_seed, help="override the scenario seed")
    p.add_argument("--out", required=out_required, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="semslam", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write simulated frames and ground truth")
    _common(p, out_required=True)

    p = sub.add_parser("run", help="run the full pipeline and write trajectories, map and report")
    _common(p)
    p.add_argument("--disable-landmarks", action="store_true", help="odometry and feature points only")

    p = sub.add_parser("eval", help="ATE RMSE between two TUM trajectory files")
    p.add_argument("estimated")
    p.add_argument("groundtruth")

    p = sub.add_parser("export-map", help="run the pipeline and write only the landmark map")
    _common(p, out_required=True)
    return parser


def _summary(report):
    return {
        "mode": report["mode"],
        "frames": report["frames"],
        "ate_rmse": report["ate_rmse"],
        "ate_rmse_dead_reckoning": report["ate_rmse_dead_reckoning"],
        "landmarks": len(report["landmarks"]),
        "association": report["association"],
    }


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "eval":
            _, est = read_tum(args.estimated)
            _, gt = read_tum(args.groundtruth)
            print(json.dumps({"ate_rmse": ate_rmse(est, gt)}))
            return 0
        cfg = load_config(args.config, args.seed)
        if args.command == "simulate":
            seq = write_simulation(cfg, args.out)
            print(f"wrote {len(seq.frames)} frames to {args.out}")
        elif args.command == "run":
            out = run_scenario(cfg, args.out, disable_landmarks=args.disable_landmarks)
            print(json.dumps(_summary(out["report"]), indent=2, sort_keys=True))
        else:
            est = make_estimator(cfg).fit(simulate_scenario(cfg))
            path = args.out if args.out.endswith(".json") else os.path.join(args.out, "map.json")
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            est.registry_.save(path)
            print(f"wrote {len(est.registry_)} landmarks to {path}")
    except ConfigError as exc:
        print(f"config error at {exc.location}: {exc.args[0].split(': ', 1)[-1]}", file=sys.stderr)
        return 2
    except (LengthMismatch, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
