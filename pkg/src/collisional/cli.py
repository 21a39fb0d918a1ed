"""Command line entry point: ``collisional run|preset|list|validate``."""

from __future__ import annotations

import argparse
import json
import sys

from .linalg import NumericError
from .model import ResolutionError
from .scenarios import (
    EXIT_CHECK_FAILED,
    EXIT_INVALID,
    ConfigError,
    apply_overrides,
    list_presets,
    load_config,
    preset_config,
    run_scenario,
    validate_config,
)


def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help="output directory (default: $COLLISIONAL_OUT/<name>)")
    p.add_argument("--seed", type=int, help="master seed for trajectory ensembles")
    p.add_argument("--tau-points", type=int, help="use only the first K points of the sweep")
    p.add_argument("--ntraj", type=int, help="number of conditional trajectories")
    p.add_argument("--hbar", type=float, help="override the reduced Planck constant")


def parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="collisional", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run a scenario config")
    p.add_argument("config")
    _add_overrides(p)
    p = sub.add_parser("preset", help="run a built-in preset")
    p.add_argument("name")
    p.add_argument("--export", action="store_true", help="print the preset config instead of running it")
    _add_overrides(p)
    sub.add_parser("list", help="list built-in presets")
    p = sub.add_parser("validate", help="check a config against the schema")
    p.add_argument("config")
    return ap


def _report(res) -> None:
    for c in res.checks:
        flag = "PASS" if c.passed else ("FAIL" if c.gating else "note")
        print(f"{flag}  {c.name}: {c.value:.6g} (want {c.threshold})")
    print(f"{res.name}: {'passed' if res.passed else 'FAILED'}; wrote {len(res.files)} series")


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    try:
        if args.command == "list":
            for name, desc in list_presets():
                print(f"{name:30s} {desc}")
            return 0
        if args.command == "validate":
            cfg = load_config(args.config)
            print(f"{cfg['name']}: valid")
            return 0
        if args.command == "preset":
            cfg = preset_config(args.name)
            if args.export:
                print(json.dumps(cfg, indent=2))
                return 0
        else:
            cfg = load_config(args.config)
        cfg = apply_overrides(cfg, args.tau_points, args.ntraj, args.hbar, args.seed)
        validate_config(cfg)
        res = run_scenario(cfg, args.out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericError, ResolutionError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    _report(res)
    return res.exit_code


if __name__ == "__main__":
    sys.exit(main())
