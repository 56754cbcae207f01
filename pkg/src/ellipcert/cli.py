"""Command-line interface.

    ellipcert analyze  <src> [--config c.json] [-o cert.json] [--grid N]
                             [--margin M] [--dump-roles] [--dump-rules] [--json]
    ellipcert check    <cert> <src> [--json]
    ellipcert simulate <cert> <src> [--steps N] [--trials K] [--policy P]
                                    [--seed S] [--json]
    ellipcert roles    <src> [--json]
    ellipcert rules    <src> [--config c.json] [--json]

Exit codes: 0 success/proved/accepted, 1 not proved/rejected/level exceeded,
2 parse, configuration, or I/O errors.
"""

from __future__ import annotations

import argparse
import json
import math
import sys

import numpy as np

from . import __version__
from . import certificate as ct
from . import frontend as fe
from . import roles as rl
from . import semantics as sem
from . import simulate as sim
from . import synthesis as syn
from .config import AnalysisConfig
from .errors import EllipcertError, SourceError


def _load_config(args) -> AnalysisConfig:
    config = AnalysisConfig.load(args.config) if getattr(args, "config", None) \
        else AnalysisConfig()
    if getattr(args, "grid", None):
        config.grid = args.grid
    if getattr(args, "margin", None):
        config.margin = "auto" if args.margin == "auto" else float(args.margin)
    if getattr(args, "bound", None):
        config.default_bound = args.bound
    return config


def _roles_json(prog: fe.SourceProgram) -> dict[str, str]:
    cfg, info = rl.rename_pipeline(fe.build_cfg(prog))
    return rl.report_roles(rl.classify(cfg), info)


def cmd_analyze(args) -> int:
    config = _load_config(args)
    prog = fe.parse_file(args.source)
    if args.dump_roles:
        print(json.dumps(_roles_json(prog), indent=2))
        return 0
    compiled = sem.compile_program(prog, config)
    if args.dump_rules:
        print(json.dumps(sem.rules_to_jsonable(compiled.summary), indent=2))
        return 0
    result = syn.synthesize(compiled.summary, compiled.init, config)
    if not result.proved:
        if args.json:
            print(json.dumps({"status": "failed", "reason": result.reason,
                              "detail": result.detail}))
        else:
            print(f"FAILED: {result.reason}: {result.detail}")
        return 1
    cert = ct.emit(result, compiled, config)
    out_path = args.output or (args.source + ".cert.json")
    ct.save(cert, out_path)
    radii = [math.sqrt(max(cert.loop_head[i, i], 0.0))
             for i in range(len(cert.layout))]
    if args.json:
        print(json.dumps({
            "status": "proved",
            "certificate": out_path,
            "layout": list(cert.layout),
            "radii": radii,
            "theta": cert.theta,
            "margin": cert.margin,
        }))
    else:
        print(f"PROVED: invariant ellipsoid over {list(cert.layout)}")
        for cell, radius in zip(cert.layout, radii):
            print(f"  radius {cell} = {radius:.6g}")
        if cert.theta:
            print(f"  theta = { {k: round(v, 9) for k, v in cert.theta.items()} }")
        print(f"  certificate written to {out_path}")
    return 0


def cmd_check(args) -> int:
    return ct.verify_file(args.certificate, args.source)


def cmd_simulate(args) -> int:
    cert = ct.load(args.certificate)
    prog = fe.parse_file(args.source)
    report = sim.simulate(cert, prog, steps=args.steps, trials=args.trials,
                          policy=args.policy, seed=args.seed)
    if args.json:
        print(json.dumps(report.to_jsonable()))
    else:
        print(f"policy={report.policy} steps={report.steps} trials={report.trials} "
              f"seed={report.seed}")
        print(f"max Lyapunov level = {report.max_level!r} "
              f"({'within' if report.within_invariant else 'EXCEEDS'} invariant)")
    return 0 if report.within_invariant else 1


def cmd_roles(args) -> int:
    prog = fe.parse_file(args.source)
    print(json.dumps(_roles_json(prog), indent=2))
    return 0


def cmd_rules(args) -> int:
    config = _load_config(args)
    prog = fe.parse_file(args.source)
    compiled = sem.compile_program(prog, config)
    print(json.dumps(sem.rules_to_jsonable(compiled.summary), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ellipcert",
        description="Prove open-loop stability of controller code by "
                    "synthesizing and checking ellipsoidal loop invariants.")
    parser.add_argument("--version", action="version", version=f"ellipcert {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("analyze", help="synthesize an invariant and emit a certificate")
    p.add_argument("source")
    p.add_argument("--config", help="analysis config JSON")
    p.add_argument("-o", "--output", help="certificate output path")
    p.add_argument("--grid", type=int, help="grid points per scalar parameter")
    p.add_argument("--margin", help="containment margin ('auto' or a number)")
    p.add_argument("--bound", type=float, help="default input bound")
    p.add_argument("--dump-roles", action="store_true",
                   help="print the variable role map and exit")
    p.add_argument("--dump-rules", action="store_true",
                   help="print the compiled rule chain and exit")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_analyze)

    p = subs.add_parser("check", help="replay a certificate against its source")
    p.add_argument("certificate")
    p.add_argument("source")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_check)

    p = subs.add_parser("simulate", help="run the controller against a checked invariant")
    p.add_argument("certificate")
    p.add_argument("source")
    p.add_argument("--steps", type=int, default=100_000)
    p.add_argument("--trials", type=int, default=4)
    p.add_argument("--policy", choices=sim.POLICIES, default="adversarial-sign")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_simulate)

    p = subs.add_parser("roles", help="print the variable role map as JSON")
    p.add_argument("source")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_roles)

    p = subs.add_parser("rules", help="print the compiled rule chain as JSON")
    p.add_argument("source")
    p.add_argument("--config", help="analysis config JSON")
    p.add_argument("--bound", type=float, help="default input bound")
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_rules)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SourceError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except (EllipcertError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
