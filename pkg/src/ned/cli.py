"""``ned`` command line: run, validate, gadget, presets."""

from __future__ import annotations

import argparse
import ast
import json
import logging
import sys
from pathlib import Path

from . import constructions, harness
from .problems import dump_preset, preset, preset_names

log = logging.getLogger("ned")


def _parse_value(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _cmd_run(args) -> int:
    doc = json.loads(Path(args.config).read_text())
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.out is not None:
        doc["out"] = args.out
    if args.smoke:
        doc["smoke"] = True
    if args.methods:
        doc["methods"] = args.methods.split(",")
    cfg = harness.RunConfig.from_dict(doc)

    def progress(method, rec):
        if args.verbose and (rec.epoch % args.log_every == 0):
            log.info("%s epoch %d  lr %.3e  rel_l2 %.6e  res %.3e", method, rec.epoch, rec.lr, rec.rel_l2, rec.residual_rms)

    report = harness.run(cfg, progress=progress)
    for r in report.results:
        status = "ok" if r.completed else f"ABORTED ({r.error})"
        print(f"{r.name:8s} final rel_l2 {r.trace.final_rel_l2:.6e}  {status}  -> {Path(cfg.out) / r.trace_path}")
    for v in report.verdicts:
        print("  " + v)
    if args.plot:
        for p in harness.emit_plotdata(report, Path(cfg.out) / "plot"):
            print(f"wrote {p}")
    print(f"report: {report.report_path}")
    return 0 if report.ok else 1


def _cmd_validate(args) -> int:
    suites = sorted(harness.SUITES) if args.suite == "all" else [args.suite]
    ok = True
    for name in suites:
        rep = harness.validate(name)
        for line in rep.lines():
            print(line)
        print(f"{name}: {'PASS' if rep.passed else 'FAIL'} ({rep.seconds:.1f} s)")
        ok &= rep.passed
    return 0 if ok else 1


def _cmd_gadget(args) -> int:
    params = {}
    for item in args.params or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise SystemExit(f"bad --params entry {item!r}; expected key=value")
        params[key] = _parse_value(val)
    if args.name == "partition_of_unity":
        k = params.pop("k", None)
        gs = constructions.partition_of_unity(**params)
        if k is None:
            raise SystemExit("partition_of_unity needs k=<multi-index>, e.g. k=(0,1)")
        idx = [tuple(g.params["k"]) for g in gs].index(tuple(k))
        g = gs[idx]
    elif args.name in constructions.BUILDERS:
        g = constructions.BUILDERS[args.name](**params)
    else:
        names = sorted(list(constructions.BUILDERS) + ["partition_of_unity"])
        raise SystemExit(f"unknown gadget {args.name!r}; choose from {names}")
    report = constructions.verify(g)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = args.name + "".join(f"_{k}{v}" for k, v in params.items()).replace(" ", "")
    ckpt = out / f"{stem}.json"
    ckpt.write_text(json.dumps(g.checkpoint(), indent=1) + "\n")
    rpath = out / f"{stem}_report.json"
    rpath.write_text(json.dumps(report, indent=2, default=str) + "\n")
    print(json.dumps(report, indent=2, default=str))
    print(f"checkpoint: {ckpt}\nreport: {rpath}")
    return 0 if report["error_ok"] and report["budget_ok"] else 1


def _cmd_presets(args) -> int:
    if args.name:
        print(dump_preset(args.name))
        return 0
    for name in preset_names():
        p = preset(name)
        print(f"{name:18s} {p.kind:10s} d={p.dim:<3d} samples={p.n_samples:<6d} epochs={p.epochs}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ned", description="Neural energy descent experiments and checks.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run a comparison from a JSON config")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--smoke", action="store_true", help="use the preset's smoke variant")
    r.add_argument("--methods", help="comma-separated subset, e.g. ned_fe,sgd")
    r.add_argument("--plot", action="store_true", help="also write plot series and a gnuplot stub")
    r.add_argument("--log-every", type=int, default=100)
    r.set_defaults(fn=_cmd_run)

    v = sub.add_parser("validate", help="run an invariant suite")
    v.add_argument("--suite", required=True, choices=sorted(harness.SUITES) + ["all"])
    v.set_defaults(fn=_cmd_validate)

    g = sub.add_parser("gadget", help="build and verify a constructive network")
    g.add_argument("--name", required=True)
    g.add_argument("--params", nargs="*", metavar="KEY=VALUE")
    g.add_argument("--out", default="gadgets")
    g.set_defaults(fn=_cmd_gadget)

    p = sub.add_parser("presets", help="list presets or dump one as JSON")
    p.add_argument("name", nargs="?")
    p.set_defaults(fn=_cmd_presets)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
