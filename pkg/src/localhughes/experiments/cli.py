"""Command line interface: run, sweep, dump-preset, verify."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from .run import run_scenario, sweep, sweep_report
from .scenario import PRESETS, ScenarioError, dump_preset, load_scenario, preset, schema


def _load(ref: str):
    if ref in PRESETS:
        return preset(ref)
    return load_scenario(ref)


def _override(s, args):
    upd = {}
    if getattr(args, "solver", None):
        upd.setdefault("solver", {})["solver"] = args.solver
    if getattr(args, "reduction", None):
        upd.setdefault("solver", {})["reduction"] = args.reduction
    if getattr(args, "stride", None):
        upd.setdefault("solver", {})["stride"] = args.stride
    if getattr(args, "seed", None) is not None:
        upd["seed"] = args.seed
    if getattr(args, "scale", None):
        upd["scale"] = args.scale
    if getattr(args, "L", None) is not None:
        upd["vision"] = args.L
    if getattr(args, "t_max", None) is not None:
        upd.setdefault("time", {})["t_max"] = args.t_max
    if not upd:
        return s
    data = json.loads(s.model_dump_json())
    for k, v in upd.items():
        if isinstance(v, dict):
            data[k].update(v)
        else:
            data[k] = v
    return type(s).model_validate(data)


def _value(text: str):
    if text.lower() in ("inf", "infinity"):
        return math.inf
    try:
        return int(text)
    except ValueError:
        try:
            return float(text)
        except ValueError:
            return text


def _common(p: argparse.ArgumentParser):
    p.add_argument("scenario", help="scenario JSON file or preset name")
    p.add_argument("--solver", choices=["fsm", "fmm"])
    p.add_argument("--reduction", choices=["none", "mh", "vsharp"])
    p.add_argument("--stride", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--scale", choices=["desk", "fine"])
    p.add_argument("--t-max", dest="t_max", type=float)
    p.add_argument("--outdir", type=Path)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="localhughes", description="Localized Hughes crowd model simulations")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run one scenario")
    _common(r)
    r.add_argument("--L", type=_value, help="vision diameter (inf for global vision)")

    s = sub.add_parser("sweep", help="independent runs over one parameter")
    _common(s)
    s.add_argument("--param", default="L", help="dotted parameter path, L = vision diameter")
    s.add_argument("--values", nargs="+", type=_value, required=True)
    s.add_argument("--workers", type=int, default=1)

    d = sub.add_parser("dump-preset", help="print a preset as JSON")
    d.add_argument("name", nargs="?", choices=sorted(PRESETS))
    d.add_argument("--schema", action="store_true", help="print the JSON schema instead")

    sub.add_parser("verify", help="run the built-in oracle checks")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.cmd == "dump-preset":
            if args.schema:
                print(json.dumps(schema(), indent=2))
            elif args.name:
                print(dump_preset(args.name))
            else:
                print("give a preset name or --schema", file=sys.stderr)
                return 2
            return 0
        if args.cmd == "verify":
            from .verify import run_checks
            return 0 if run_checks() else 1
        s = _override(_load(args.scenario), args)
        if args.cmd == "run":
            rep = run_scenario(s, args.outdir)
            sys.stdout.write(rep.summary())
            return 0
        rows = sweep(s, args.param, args.values, args.outdir, args.workers)
        sys.stdout.write(sweep_report(args.param, rows))
        return 0 if all(r.status != "failed" for r in rows) else 1
    except ScenarioError as e:
        for path, msg in e.errors:
            print(f"error: {path}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
