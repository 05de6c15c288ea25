"""Command-line driver.

Subcommands: train, decode, sweep, eval, diagnose, report. Every
subcommand takes the experiment spec (JSON, or TOML on 3.11+) and an
output directory; stages that depend on earlier ones read their files
from there. Exit codes: 0 success, 1 spec error, 2 budget-invariant
violation detected in traces.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness
from .budget import BudgetViolationError
from .harness import ExperimentSpec, SpecError, TraceInvariantError
from .metrics import METRIC_NAMES


def _load_spec(args) -> ExperimentSpec:
    spec = ExperimentSpec.from_file(args.spec)
    if args.out_dir:
        spec = ExperimentSpec(**{**spec.__dict__, "out_dir": args.out_dir})
        spec.validate()
    return spec


def cmd_train(args) -> int:
    spec = _load_spec(args)
    ctx = harness.prepare(spec)
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    info = {
        "alphabet_size": ctx.alphabet.size,
        "n_prompts": len(ctx.prompts),
        "n_heldout_prompts": len(ctx.heldout_prompts),
        "mode": spec.mode,
        "order": spec.order,
    }
    (out / "models.json").write_text(json.dumps(info, indent=1, sort_keys=True))
    if ctx.tokenizer is not None:
        (out / "tokenizer.json").write_text(ctx.tokenizer.to_json())
    ctx.blocklist.save(out / "blocklist.txt")
    print(json.dumps(info))
    return 0


def cmd_decode(args) -> int:
    spec = _load_spec(args)
    ctx = harness.prepare(spec)
    k = args.k
    if args.method in harness.BUDGETED_METHODS and k is None:
        raise SpecError(f"method {args.method} needs --k")
    text, trace = harness.decode_one(ctx, args.method, k, args.seed, args.prompt)
    record = {
        "method": args.method,
        "k": k,
        "seed": args.seed,
        "prompt": args.prompt,
        "text": text,
    }
    if trace is not None:
        record["total_spent"] = trace.total_spent
        record["delta_init"] = trace.delta_init
        record["terminated_by"] = trace.terminated_by
        if args.trace_out:
            Path(args.trace_out).write_text(trace.to_jsonl())
    print(json.dumps(record))
    return 0


def cmd_sweep(args) -> int:
    spec = _load_spec(args)
    ctx = harness.prepare(spec)
    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    harness.run_sweep(ctx, out_dir)
    print(f"sweep written to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    spec = _load_spec(args)
    ctx = harness.prepare(spec)
    out_dir = Path(spec.out_dir)
    records = [json.loads(line) for line in (out_dir / "decodes.jsonl").read_text().splitlines()]
    reports = harness.evaluate(ctx, records)
    harness.write_reports(ctx, reports, out_dir)
    print(f"metrics written to {out_dir / 'metrics.csv'}")
    return 0


def cmd_diagnose(args) -> int:
    spec = _load_spec(args)
    ctx = harness.prepare(spec)
    out_dir = Path(spec.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle = harness.diagnostics(ctx)
    (out_dir / "diagnostics.json").write_text(json.dumps(bundle, indent=1, sort_keys=True))
    for domain, d in bundle["domains"].items():
        print(f"{domain}: kl_q90={d['kl_q90']:.4f} mean_delta={d['delta_init_mean']:.4f}")
    return 0


def cmd_report(args) -> int:
    spec = _load_spec(args)
    summary = harness.load_summary(spec.out_dir)
    rows = []
    for label, rep in summary["reports"].items():
        rows.append((label, rep["ncr_mean"], rep["utility"], rep["high_protection"]))
    print(f"{'configuration':<24} {'ncr_mean':>9} {'nll':>8}  high-protection")
    for label, ncr_mean, utility, high in rows:
        ncr_s = "-" if ncr_mean is None else f"{ncr_mean:9.3f}"
        utl_s = "-" if utility is None else f"{utility:8.4f}"
        print(f"{label:<24} {ncr_s} {utl_s}  {'yes' if high else ''}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tetherlm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--spec", required=True, help="experiment spec (.json or .toml)")
        p.add_argument("--out-dir", default=None, help="override the spec's output directory")

    p = sub.add_parser("train", help="train models and persist run inputs")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="decode one prompt with one method")
    common(p)
    p.add_argument("--method", required=True, choices=harness.ALL_METHODS)
    p.add_argument("--k", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prompt", type=int, default=0, help="prompt index")
    p.add_argument("--trace-out", default=None, help="write the step trace (JSONL)")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("sweep", help="decode the full (method, k, seed, prompt) grid")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="score a finished sweep")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="divergence and copy-position diagnostics")
    common(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("report", help="print the trade-off table from a finished run")
    common(p)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SpecError as exc:
        print(f"spec error: {exc}", file=sys.stderr)
        return 1
    except (TraceInvariantError, BudgetViolationError) as exc:
        print(f"budget invariant violation: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
