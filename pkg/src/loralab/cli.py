"""Command-line interface.

Subcommands: ``run`` (one experiment), ``ablate`` (cumulative variant chain
over seeds), ``report`` (recompute metrics from a results document),
``gradcheck`` (finite-difference suites), ``selftest`` (all built-in
property suites). Exit code 0 on success; failures print a one-line JSON
error object to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import checks, runner
from .errors import LoralabError


def _fail(kind: str, message: str, code: int = 1) -> int:
    print(json.dumps({"error": {"kind": kind, "message": message}}), file=sys.stderr)
    return code


def _load_config(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _cmd_run(args) -> int:
    cfg = _load_config(args.config)
    artifacts = runner.run_experiment(cfg)
    paths = runner.emit_reports(artifacts, args.out)
    summary = {
        "avg_acc": artifacts.results["avg_acc"],
        "forgetting": artifacts.results.get("forgetting"),
        "out": args.out,
        "files": sorted(paths),
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    base_seed = cfg.get("seed", 0)
    seeds = [base_seed + i for i in range(args.seeds)]
    summary = runner.ablate(cfg, variants, seeds, args.out, jobs=args.jobs)
    table = {
        name: {
            "mean_avg_acc": summary["results"][name]["mean_avg_acc"],
            "mean_forgetting": summary["results"][name]["mean_forgetting"],
        }
        for name in summary["variants"]
    }
    print(json.dumps(table, indent=2, sort_keys=True))
    return 0


def _cmd_report(args) -> int:
    results = runner.read_results(f"{args.run}/results.json")
    recomputed = runner.recompute_metrics(results)
    stored = {"avg_acc": results["avg_acc"]}
    if "forgetting" in results:
        stored["forgetting"] = results["forgetting"]
    agree = all(recomputed[k] == stored[k] for k in stored)
    print(json.dumps({"recomputed": recomputed, "stored": stored, "consistent": agree},
                     indent=2, sort_keys=True))
    if not agree:
        return _fail("report", "stored metrics disagree with the accuracy matrix")
    return 0


def _print_results(results) -> int:
    ok = True
    for r in results:
        print(r.line())
        ok = ok and r.passed
    n_fail = sum(1 for r in results if not r.passed)
    print(f"{len(results) - n_fail}/{len(results)} checks passed")
    return 0 if ok else _fail("checks", f"{n_fail} check(s) failed")


def _cmd_gradcheck(args) -> int:
    results = []
    results += checks.qr_gradient_checks(args.instances)
    results += checks.ortho_gradient_checks(args.instances)
    results += checks.full_loss_gradient_checks(max(3, args.instances // 2))
    return _print_results(results)


def _cmd_selftest(args) -> int:
    return _print_results(checks.run_all(fast=args.fast))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loralab",
        description="Continual learning with weighted orthogonal low-rank adapter "
        "composition and important-parameter freezing.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute one experiment from a JSON config")
    p.add_argument("--config", required=True, help="path to the run config JSON")
    p.add_argument("--out", required=True, help="output directory for reports")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("ablate", help="run the cumulative variant chain")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", default=",".join(runner.VARIANT_ORDER),
                   help="comma-separated subset of: " + ",".join(runner.VARIANT_ORDER))
    p.add_argument("--seeds", type=int, default=1, help="number of seeds (config seed upward)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("report", help="recompute metrics from a run directory")
    p.add_argument("--run", required=True, help="directory containing results.json")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--instances", type=int, default=21)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("selftest", help="all built-in property suites")
    p.add_argument("--fast", action="store_true", help="smaller instance counts")
    p.set_defaults(func=_cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except LoralabError as exc:
        return _fail(type(exc).__name__, str(exc), code=2)
    except FileNotFoundError as exc:
        return _fail("FileNotFoundError", str(exc), code=2)
    except json.JSONDecodeError as exc:
        return _fail("JSONDecodeError", str(exc), code=2)


if __name__ == "__main__":
    sys.exit(main())
