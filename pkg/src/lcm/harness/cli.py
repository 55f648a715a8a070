"""Command-line entry: one binary, six subcommands.

Exit codes: 0 success, 1 property/benchmark failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys

from ..errors import ConfigError, DivergenceError
from .config import load_config


def _add_common(p):
    p.add_argument("--config", default=None, help="dotted-key config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override any config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lcm",
        description="Masked point modeling with a locally constrained compact "
                    "encoder and an SSM decoder: training, benchmarks, checks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("synth", "generate the synthetic dataset manifest"),
        ("pretrain", "masked-reconstruction pretraining"),
        ("finetune", "classifier fine-tuning (optionally from a checkpoint)"),
        ("benchmark", "parameter/FLOP counters, scaling fits, latency"),
        ("propcheck", "run the full property-check suite"),
        ("ordering-study", "pretrain-loss spread across patch orderings"),
    ]:
        _add_common(sub.add_parser(name, help=help_text))
    return parser


def _resolve_config(args):
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out={args.out}")
    if args.workers is not None:
        overrides.append(f"workers={args.workers}")
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "synth":
            from .synth import run_synth

            manifest = run_synth(cfg, cfg["out"])
            print(f"manifest hash {manifest['manifest_hash']} "
                  f"({len(manifest['entries'])} clouds)")
            return 0
        if args.command == "pretrain":
            from .pretrain import run_pretrain

            summary = run_pretrain(cfg)
            print(f"val chamfer {summary['val_loss_epoch0']:.6f} -> "
                  f"{summary['val_loss_final']:.6f}; checkpoint {summary['checkpoint']}")
            return 0
        if args.command == "finetune":
            from .finetune import run_finetune

            summary = run_finetune(cfg)
            keys = [k for k in ("mean_pretrained", "mean_scratch") if k in summary]
            print("; ".join(f"{k}={summary[k]:.4f}" for k in keys) or str(summary["per_seed"]))
            return 0
        if args.command == "benchmark":
            from .benchmark import run_benchmark

            report = run_benchmark(cfg)
            print(f"params {report['params']['transformer']/1e6:.2f}M vs "
                  f"{report['params']['lcm']/1e6:.2f}M; flop ratio "
                  f"{report['flops']['ratio']:.3f}; pass={report['pass']}")
            return 0 if report["pass"] else 1
        if args.command == "propcheck":
            from .propcheck import run_propcheck

            report = run_propcheck(cfg)
            print(f"{report['n_checks'] - report['n_failed']}/{report['n_checks']} checks passed")
            for res in report["checks"]:
                if not res["passed"]:
                    print(f"FAILED: {res['name']} ({res['detail']})")
            return 0 if report["passed"] else 1
        if args.command == "ordering-study":
            from .ordering import run_ordering_study

            report = run_ordering_study(cfg)
            print(f"{report['n_cells']} cells; FFN spread positive: "
                  f"{report['ffn_spread_all_positive']}; LCFFN tighter in "
                  f"{report['lcffn_spread_leq_ffn_count']}/{report['n_seeds']} seeds; "
                  f"scan cost ratio {report['combined_order_cost']['ratio']:.2f}")
            ok = report["ffn_spread_all_positive"] and report["combined_order_cost"]["within_25pct_of_q"]
            return 0 if ok else 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
