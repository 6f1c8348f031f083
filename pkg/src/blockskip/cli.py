"""Command-line entry points.

Exit code 0 on success; on failure a machine-readable JSON object
{"error": ..., "message": ...} goes to stderr and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import pipeline
from .pipeline import PipelineError, RunConfig


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(json.dumps({"error": "usage", "message": message}), file=sys.stderr)
        raise SystemExit(2)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="blockskip",
                     description="Learn, rectify, and execute per-timestep "
                                 "block-skipping masks for toy diffusion samplers.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="path to the run config JSON")
        p.add_argument("--force", action="store_true",
                       help="overwrite outputs / ignore config-hash mismatches")

    p = sub.add_parser("train-teacher", help="train and persist the frozen teacher")
    add_common(p)
    p.add_argument("--out", help="container directory (default <output_dir>/teacher)")

    p = sub.add_parser("train-mask", help="learn the per-timestep mask scores")
    add_common(p)
    p.add_argument("--model", help="teacher container (default <output_dir>/teacher)")
    p.add_argument("--out", help="mask file path (default <output_dir>/masks/mask.json)")
    p.add_argument("--sampling-mode", choices=["continuous", "bernoulli_st", "gumbel_softmax"])
    p.add_argument("--tau", type=float, help="gumbel-softmax temperature")
    p.add_argument("--lambda1", type=float, help="sparsity coefficient override")
    p.add_argument("--lambda2", type=float, help="bimodality coefficient override")
    p.add_argument("--iterations", type=int, help="gradient iterations per timestep")
    p.add_argument("--no-loss-scaling", action="store_true",
                   help="disable the timestep-aware loss weight")
    p.add_argument("--sweep-lambda1", help="comma-separated values; one mask file per value")

    p = sub.add_parser("rectify", help="apply the training-free rectification rule")
    add_common(p)
    p.add_argument("--mask", required=True, help="mask JSON to rectify")
    p.add_argument("--out", help="rectified mask path")
    p.add_argument("--model", help="teacher container (needed with --verify)")
    p.add_argument("--verify", action="store_true",
                   help="sample under both masks and report deviations")
    p.add_argument("--seeds", type=int, default=8, help="verification seeds")

    p = sub.add_parser("sample", help="sample chains, optionally under a mask")
    add_common(p)
    p.add_argument("--model", help="teacher container")
    p.add_argument("--mask", help="mask JSON (omit for the unmasked baseline)")
    p.add_argument("--seeds", type=int, default=4)
    p.add_argument("--count", type=int, default=256, help="samples per seed")
    p.add_argument("--label", default="samples", help="output subdirectory / stream label")
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("evaluate", help="summarize cost and sample quality")
    add_common(p)
    p.add_argument("--model", help="teacher container")
    p.add_argument("--mask", help="mask JSON")
    p.add_argument("--baseline-a", help="first unmasked sample directory")
    p.add_argument("--baseline-b", help="second unmasked sample directory (noise floor)")
    p.add_argument("--masked", help="masked sample directory")
    p.add_argument("--out", help="summary JSON path")
    p.add_argument("--timing-repetitions", type=int, default=10)
    p.add_argument("--grid", help="run the ablation grid instead "
                                  "(e.g. 'sampling-mode', 'toggles', 'sampling-mode x rectify')")
    p.add_argument("--grid-count", type=int, default=512, help="samples per grid cell")
    p.add_argument("--workers", type=int, help="parallel grid workers")

    p = sub.add_parser("report", help="export mask heatmap/histogram/sparsity tables")
    p.add_argument("--mask", required=True)
    p.add_argument("--stats", help="execution stats CSV from sampling")
    p.add_argument("--out", help="report directory")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "report":
        paths = pipeline.cmd_report(args.mask, stats_path=args.stats, out_dir=args.out)
        print(json.dumps({k: str(v) for k, v in paths.items()}))
        return 0

    config = RunConfig.load(args.config)
    if args.command == "train-teacher":
        out = pipeline.cmd_train_teacher(config, out_dir=args.out, force=args.force)
        print(str(out))
    elif args.command == "train-mask":
        overrides = dict(sampling_mode=args.sampling_mode, tau=args.tau,
                         lambda1=args.lambda1, lambda2=args.lambda2,
                         iterations=args.iterations)
        if args.no_loss_scaling:
            overrides["loss_scaling"] = False
        if args.sweep_lambda1:
            values = [float(v) for v in args.sweep_lambda1.split(",")]
            overrides.pop("lambda1", None)
            paths = pipeline.cmd_sweep_lambda1(config, values, model_dir=args.model,
                                               force=args.force, **overrides)
            print("\n".join(str(p) for p in paths))
        else:
            out = pipeline.cmd_train_mask(config, model_dir=args.model, out_path=args.out,
                                          force=args.force, **overrides)
            print(str(out))
    elif args.command == "rectify":
        seeds = list(range(args.seeds)) if args.verify else None
        out, report = pipeline.cmd_rectify(config, args.mask, out_path=args.out,
                                           verify_seeds=seeds, model_dir=args.model,
                                           force=args.force)
        print(str(out))
        print(str(report))
    elif args.command == "sample":
        out = pipeline.cmd_sample(config, model_dir=args.model, mask_path=args.mask,
                                  seeds=args.seeds, count=args.count, label=args.label,
                                  out_dir=args.out, force=args.force)
        print(str(out))
    elif args.command == "evaluate":
        if args.grid:
            table = pipeline.run_ablation(config, args.grid, model_dir=args.model,
                                          eval_count=args.grid_count, workers=args.workers,
                                          force=args.force)
            print(str(table))
            print(table.read_text())
        else:
            out = pipeline.cmd_evaluate(config, model_dir=args.model, mask_path=args.mask,
                                        baseline_a=args.baseline_a, baseline_b=args.baseline_b,
                                        masked=args.masked, out_path=args.out,
                                        timing_repetitions=args.timing_repetitions,
                                        force=args.force)
            print(str(out))
    return 0


def main(argv=None) -> None:
    try:
        raise SystemExit(run(argv))
    except SystemExit:
        raise
    except Exception as exc:  # surface every failure as machine-readable JSON
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        raise SystemExit(1)


if __name__ == "__main__":
    main()
