"""Command-line entry point.

Verbs: ``run``, ``suite``, ``audit``, ``bounds`` and ``report``. Exit status is
0 on success, 2 when any run diverged and 1 on configuration or input errors.
Run artifacts go under ``$ADSGD_LAB_OUT`` (default ``./runs``) unless
``--out`` is given.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import audit as audit_mod
from .config import TABLE_CASES, ConfigError, load_config
from .engine import EventTrace
from .runner import output_root, report, run_suite

EXIT_OK, EXIT_ERROR, EXIT_DIVERGED = 0, 1, 2

BOUND_KEYS = {"B": int, "D": int, "L": float, "L_F": float, "L_L": float, "n": int,
              "alpha": float, "beta": float, "K": int, "sigma2": float, "f_gap": float,
              "lambda2": float, "lambda_min": float}


def _print_results(results):
    for r in results:
        status = "DIVERGED" if r.diverged else "ok"
        last = r.samples[-1] if r.samples else None
        loss = f"{last.loss_at_mean:.6g}" if last else "n/a"
        audit = r.audit or {}
        print(f"{r.case:20s} seed={r.seed:<4d} {r.algorithm:16s} t={r.sim_time:10.2f} "
              f"updates={r.updates:<8d} loss={loss:12s} B={audit.get('B_measured', '-')} "
              f"D_adsgd={audit.get('D_adsgd', '-')} D_asbcd={audit.get('D_asbcd', '-')} {status}")
        if r.run_dir is not None:
            print(f"    -> {r.run_dir}")


def cmd_run(args):
    config = load_config(args.config)
    if args.seeds:
        config = config.replace(seeds=args.seeds)
    results = run_suite(config, [config.delay_case], out_root=args.out or output_root())
    _print_results(results)
    return EXIT_DIVERGED if any(r.diverged for r in results) else EXIT_OK


def cmd_suite(args):
    config = load_config(args.config)
    if args.seeds:
        config = config.replace(seeds=args.seeds)
    cases = args.cases or list(TABLE_CASES)
    results = run_suite(config, cases, out_root=args.out or output_root())
    _print_results(results)
    return EXIT_DIVERGED if any(r.diverged for r in results) else EXIT_OK


def cmd_audit(args):
    try:
        trace = EventTrace.from_csv(args.trace)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read trace: {exc}") from None
    doc = audit_mod.audit_report(trace, lemma2=False)
    doc.update({k: v for k, v in trace.meta.items() if k not in doc})
    text = json.dumps(doc, indent=2, sort_keys=True)
    print(text)
    if args.json:
        with open(args.json, "w") as fh:
            fh.write(text + "\n")
    return EXIT_OK


def parse_bound_params(items) -> dict:
    params = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or key not in BOUND_KEYS:
            raise ConfigError(f"expected key=value with key in {sorted(BOUND_KEYS)}, got {item!r}")
        try:
            params[key] = BOUND_KEYS[key](value)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {value!r}") from None
    if "B" not in params or "D" not in params:
        raise ConfigError("bounds needs at least B= and D=")
    return params


def cmd_bounds(args):
    params = parse_bound_params(args.params)
    try:
        rep = audit_mod.evaluate_bounds(**params)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_report(args):
    try:
        summary = report(args.run_dir)
    except FileNotFoundError as exc:
        raise ConfigError(str(exc)) from None
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_DIVERGED if any(r["diverged"] for r in summary["runs"]) else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adsgd-lab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", help="run one configuration for all of its seeds")
    p.add_argument("config")
    p.add_argument("--out", help="output root (default $ADSGD_LAB_OUT or ./runs)")
    p.add_argument("--seeds", type=int, nargs="+")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("suite", help="run several delay cases times all seeds")
    p.add_argument("config")
    p.add_argument("--cases", nargs="+", choices=list(TABLE_CASES) + ["custom"])
    p.add_argument("--out")
    p.add_argument("--seeds", type=int, nargs="+")
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("audit", help="measure B and D of an exported trace CSV")
    p.add_argument("trace")
    p.add_argument("--json", help="also write the report to this file")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("bounds", help="evaluate the convergence-bound expressions")
    p.add_argument("params", nargs="+", metavar="key=value")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("report", help="summarize the runs below a directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
