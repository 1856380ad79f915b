"""Command-line interface: params | flops | bench-scaling | gradcheck |
forward | distill-demo | oracle-check.

Every command is deterministic for a fixed (seed, flags); wall-clock fields
are opt-in and live in their own keys. Exit codes: 0 success, 1 check
failure, 2 usage error, 3 data-format error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys

import numpy as np

from . import tensor as T
from .analysis import CostReport, CostRow, count_macs, fit_scaling, time_kernel
from .attention import ATTENTION_KINDS, attention_probe
from .backbone import (VARIANTS, build_variant, cls_forward, mac_breakdown,
                       parameter_breakdown, seg_forward)
from .checks import GRADCHECK_SCOPES, gradcheck_scope, oracle_checks
from .distill import LOSS_NAMES, distill_step
from .serialize import FormatError, load_stn, save_stn
from .tensor import DimensionError


class UsageError(ValueError):
    pass


def _emit(text, out_path=None):
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _json_dumps(obj):
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def _merge_config(args, argv):
    """--config file.json supplies values for flags left at their defaults."""
    if not getattr(args, "config", None):
        return args
    with open(args.config) as fh:
        overrides = json.load(fh)
    explicit = {a.lstrip("-").replace("-", "_").split("=")[0]
                for a in argv if a.startswith("--")}
    for key, value in overrides.items():
        attr = key.replace("-", "_")
        if hasattr(args, attr) and attr not in explicit:
            setattr(args, attr, value)
    return args


# ---------------------------------------------------------------------------
# commands


def cmd_params(args):
    model = build_variant(args.variant, args.classes, task=args.task, seed=args.seed)
    parts = parameter_breakdown(model)
    if args.json:
        _emit(_json_dumps({"variant": args.variant, "task": args.task, "params": parts}),
              args.out)
    else:
        lines = [f"variant {args.variant} task {args.task} parameter counts"]
        lines += [f"  {k:<12} {v:>12,}" for k, v in parts.items()]
        _emit("\n".join(lines) + "\n", args.out)
    return 0


def cmd_flops(args):
    if args.size % 64:
        raise UsageError(f"--size must divide by 64, got {args.size}")
    model = build_variant(args.variant, args.classes, task=args.task, seed=args.seed)
    parts = mac_breakdown(model, args.size)
    doubled = {k: 2 * v for k, v in parts.items()}
    if args.json:
        _emit(_json_dumps({"variant": args.variant, "task": args.task, "size": args.size,
                           "macs": parts, "flops_2x": doubled}), args.out)
    else:
        lines = [f"variant {args.variant} task {args.task} at {args.size}x{args.size}"
                 " (MACs; FLOPs = 2x MACs)"]
        lines += [f"  {k:<12} {v:>16,}  {doubled[k]:>16,}" for k, v in parts.items()]
        _emit("\n".join(lines) + "\n", args.out)
    return 0


def cmd_bench_scaling(args):
    sizes = [int(s) for s in str(args.sizes).split(",") if s]
    if len(sizes) < 3:
        raise UsageError(f"need at least 3 sizes, got {sizes}")
    if args.attn not in ATTENTION_KINDS:
        raise UsageError(f"--attn must be one of {ATTENTION_KINDS}")
    report = CostReport()
    for size in sizes:
        probe = attention_probe(args.attn, args.channels, size, seed=args.seed,
                                window=args.window)
        macs = count_macs(probe)
        wall = 0
        if args.time:
            real = attention_probe(args.attn, args.channels, size, seed=args.seed,
                                   window=args.window, dtype=np.float32, real=True)
            wall = time_kernel(real, warmup=1, iters=3)["min_ns"]
        report.rows.append(CostRow(label=args.attn, h=size, w=size,
                                   c=args.channels, macs=macs, wall_ns=wall))
    fit = report.fit_rows()
    if args.json:
        _emit(_json_dumps(report.to_json_dict()), args.out)
    else:
        _emit(report.to_csv(), args.out)
        sys.stdout.write(_json_dumps({"fit": {"slope": fit.slope,
                                              "intercept": fit.intercept,
                                              "residual": fit.residual}}))
    return 0


def cmd_gradcheck(args):
    if args.scope not in GRADCHECK_SCOPES:
        raise UsageError(f"--scope must be one of {GRADCHECK_SCOPES}")
    if args.inject_vjp_bug:
        T._VJP_SIGN_BUG = True
    try:
        passed, rows = gradcheck_scope(args.scope, seed=args.seed, n_seeds=args.seeds)
    finally:
        T._VJP_SIGN_BUG = False
    if args.json:
        _emit(_json_dumps({"scope": args.scope, "pass": passed, "checks": rows}), args.out)
    else:
        lines = [f"gradcheck scope={args.scope} seeds={args.seeds}"]
        lines += [f"  {r['check']:<26} max_rel={r['max_rel_error']:.3e} "
                  f"thr={r['threshold']:.0e} {'PASS' if r['pass'] else 'FAIL'}"
                  for r in rows]
        lines.append("PASS" if passed else "FAIL")
        _emit("\n".join(lines) + "\n", args.out)
    return 0 if passed else 1


def cmd_forward(args):
    x = load_stn(args.input)
    if x.rank != 3 or x.shape[0] != 3:
        raise UsageError(f"input must be a (3, H, W) tensor, got shape {tuple(x.shape)}")
    model = build_variant(args.variant, args.classes, task=args.task, seed=args.seed)
    logits = seg_forward(model, x) if args.task == "seg" else cls_forward(model, x)
    save_stn(args.output, logits)
    digest = hashlib.sha256(open(args.output, "rb").read()).hexdigest()
    _emit(_json_dumps({"shape": list(logits.shape), "sha256": digest,
                       "output": args.output}), args.out)
    return 0


def cmd_distill_demo(args):
    if args.hw % 128:
        raise UsageError(f"--hw must divide by 128, got {args.hw}")
    losses = tuple(s for s in str(args.losses).split(",") if s)
    bad = set(losses) - set(LOSS_NAMES)
    if bad:
        raise UsageError(f"unknown losses {sorted(bad)}; valid: {LOSS_NAMES}")
    rng = np.random.default_rng(args.seed)
    teacher = build_variant(args.variant, args.classes, task="seg", seed=args.seed)
    student = build_variant(args.variant, args.classes, task="seg", seed=args.seed + 1)
    x = T.Tensor(rng.standard_normal((3, args.hw, args.hw)))
    labels = rng.integers(0, args.classes, size=(args.hw // 8, args.hw // 8))
    report = distill_step(teacher, student, x, labels, losses=losses,
                          upsample_variant=args.upsample, aligner_seed=args.seed)
    self_report = distill_step(teacher, teacher, x, labels, halve_student=False)
    _emit(_json_dumps({
        "losses_enabled": list(losses),
        "report": report.to_json_dict(),
        "self_check": {"l_feat": self_report.l_feat, "l_out": self_report.l_out},
    }), args.out)
    return 0


def cmd_oracle_check(args):
    passed, rows = oracle_checks(seed=args.seed)
    if args.json:
        _emit(_json_dumps({"pass": passed, "checks": rows}), args.out)
    else:
        lines = [f"  {r['check']:<36} diff={r['max_abs_diff']:.3e} "
                 f"tol={r['tol']:.0e} {'PASS' if r['pass'] else 'FAIL'}" for r in rows]
        lines.append("PASS" if passed else "FAIL")
        _emit("\n".join(lines) + "\n", args.out)
    return 0 if passed else 1


# ---------------------------------------------------------------------------
# parser


def _add_common(sub):
    sub.add_argument("--seed", type=int, default=42)
    sub.add_argument("--out", default=None, help="write the report to this path")
    sub.add_argument("--json", action="store_true")
    sub.add_argument("--config", default=None,
                     help="JSON file supplying defaults, overridden flag-wise")


def build_parser():
    parser = argparse.ArgumentParser(prog="seaformer")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("params", help="per-stage parameter counts")
    p.add_argument("--variant", required=True)
    p.add_argument("--task", choices=("seg", "cls"), default="seg")
    p.add_argument("--classes", type=int, default=None)
    _add_common(p)
    p.set_defaults(fn=cmd_params)

    p = subs.add_parser("flops", help="per-stage MAC counts at a given input size")
    p.add_argument("--variant", required=True)
    p.add_argument("--task", choices=("seg", "cls"), default="seg")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--size", type=int, default=512)
    _add_common(p)
    p.set_defaults(fn=cmd_flops)

    p = subs.add_parser("bench-scaling", help="MAC scaling rows plus log-log fit")
    p.add_argument("--attn", required=True)
    p.add_argument("--sizes", default="16,32,64,128")
    p.add_argument("--channels", type=int, default=64)
    p.add_argument("--window", type=int, default=4)
    p.add_argument("--time", action="store_true",
                   help="also measure wall time (float32, real compute)")
    _add_common(p)
    p.set_defaults(fn=cmd_bench_scaling)

    p = subs.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--scope", required=True)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--inject-vjp-bug", action="store_true",
                   help=argparse.SUPPRESS)
    _add_common(p)
    p.set_defaults(fn=cmd_gradcheck)

    p = subs.add_parser("forward", help="run one variant on an .stn tensor")
    p.add_argument("--variant", required=True)
    p.add_argument("--task", choices=("seg", "cls"), default="seg")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    _add_common(p)
    p.set_defaults(fn=cmd_forward)

    p = subs.add_parser("distill-demo", help="distillation losses on synthetic data")
    p.add_argument("--hw", type=int, default=128)
    p.add_argument("--classes", type=int, default=150)
    p.add_argument("--variant", default="T")
    p.add_argument("--losses", default="cls,cross,feat,out")
    p.add_argument("--upsample", choices=("mobilenet", "bilinear", "conv"),
                   default="mobilenet")
    _add_common(p)
    p.set_defaults(fn=cmd_distill_demo)

    p = subs.add_parser("oracle-check", help="squeeze/expand and identity equivalences")
    _add_common(p)
    p.set_defaults(fn=cmd_oracle_check)

    return parser


def main(argv=None):
    if argv is None:
        argv = sys.argv[1:]
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _merge_config(args, argv)
        if getattr(args, "classes", "absent") is None:
            args.classes = 150 if args.task == "seg" else 1000
        if getattr(args, "variant", None) is not None and args.variant not in VARIANTS:
            raise UsageError(
                f"unknown variant {args.variant!r}; valid names: {sorted(VARIANTS)}")
        return args.fn(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 2
    except FormatError as err:
        print(f"format error: {err}", file=sys.stderr)
        return 3
    except (DimensionError, T.ConfigurationError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
