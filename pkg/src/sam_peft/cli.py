from __future__ import annotations

import argparse
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from .config import configure_logging, get_settings, parse_model
from .errors import SamPeftError
from .harness import (
    ExperimentConfig,
    evaluate,
    export_merge_lora,
    export_qlora_full_precision,
    memory_comparison,
    param_table,
    read_grid,
    sweep,
    train,
    write_csv,
    write_jsonl,
    write_sweep_csv,
)
from .interactive import TrainConfig
from .peft import PeftConfig
from .synth import GenSpec, generate

logger = logging.getLogger(__name__)


def _alpha(raw: str) -> float | str:
    return raw if raw == "learned" else float(raw)


def _dropout(raw: str) -> float:
    # "none" switches the dropout off, including FacT's default of 0.1.
    return 0.0 if raw.lower() == "none" else float(raw)


def _tasks(raw: str) -> list[str]:
    return [t.strip() for t in raw.split(",") if t.strip()]


def _add_method_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", required=True)
    p.add_argument("--rank", type=int)
    p.add_argument("--alpha", type=_alpha, help="a positive number or 'learned'")
    p.add_argument("--lora-scope", choices=("classic", "all"))
    p.add_argument("--proj", type=int, dest="projection_size", help="AdaptFormer bottleneck width")
    p.add_argument("--dropout", type=_dropout, help="a probability or 'none'")
    p.add_argument("--late-fraction", type=float)
    p.add_argument("--quant-block", type=int)


def _peft_config(args: argparse.Namespace) -> PeftConfig:
    return PeftConfig.create(
        method=args.method,
        rank=args.rank,
        alpha=args.alpha,
        lora_scope=args.lora_scope,
        projection_size=args.projection_size,
        dropout=args.dropout,
        late_fraction=args.late_fraction,
        quant_block=args.quant_block,
    )


def _seed(args: argparse.Namespace) -> int:
    return get_settings().default_seed if args.seed is None else args.seed


def cmd_gen_data(args: argparse.Namespace) -> int:
    values: dict[str, Any] = {
        "image_size": args.size,
        "n_train": args.n_train,
        "n_val": args.n_val,
        "n_test": args.n_test,
        "min_instances": args.min_inst,
        "max_instances": args.max_inst,
        "min_radius": args.min_r,
        "max_radius": args.max_r,
        "contrast": args.contrast,
        "noise": args.noise,
        "overlap_allowed": args.overlap,
        "single_object": args.single_object,
        "seed": _seed(args),
    }
    if args.resource_efficient:
        values.update(n_train=1, n_val=1, n_test=args.n_test or 1)
    spec = parse_model(GenSpec, {k: v for k, v in values.items() if v is not None})
    manifest = generate(spec, Path(args.out))
    sizes = ", ".join(f"{split} {len(entries)}" for split, entries in manifest.splits.items())
    print(f"wrote {manifest.task} dataset to {args.out}: {sizes}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    train_values: dict[str, Any] = {
        "batch_size": args.batch_size,
        "objects_per_image": args.objects_per_image,
        "lr": args.lr,
        "early_stop_patience": args.patience,
        "max_epochs": args.max_epochs,
        "seed": _seed(args),
    }
    if args.resource_efficient and args.objects_per_image is None:
        train_values["objects_per_image"] = 5
    config = parse_model(
        ExperimentConfig,
        {
            "experiment_id": args.experiment_id or Path(args.out).stem,
            "preset": args.preset,
            "peft": _peft_config(args),
            "train": parse_model(TrainConfig, {k: v for k, v in train_values.items() if v is not None}),
            "data": args.data,
            "tasks": _tasks(args.tasks),
            "seed": _seed(args),
            "n_train": args.n_train,
        },
    )
    result = train(config, Path(args.out))
    print(
        f"{config.experiment_id}: {result.epochs_run} epochs ({result.stop_reason}), "
        f"best val {result.best_score:.4f} at epoch {result.best_epoch} -> {result.checkpoint}"
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    evaluation = evaluate(
        Path(args.ckpt), Path(args.data), _tasks(args.tasks), iterations=args.iters, seed=_seed(args), split=args.split
    )
    if args.out_jsonl:
        write_jsonl(Path(args.out_jsonl), evaluation)
    if args.out_csv:
        write_csv(Path(args.out_csv), evaluation.summary())
    ctx = evaluation.context
    print(f"{ctx.experiment} ({ctx.method}), {ctx.params_trainable:,} trainable params, {ctx.act_bytes:,} activation bytes")
    for task, value in evaluation.aggregates().items():
        print(f"  {task:<6} {value:.4f}")
    return 0


def cmd_count_params(args: argparse.Namespace) -> int:
    print(param_table(args.preset, _peft_config(args)).render())
    return 0


def cmd_mem_report(args: argparse.Namespace) -> int:
    print(memory_comparison(args.preset, _peft_config(args), seed=_seed(args)).render())
    return 0


def cmd_export(args: argparse.Namespace) -> int:
    if args.merge_lora:
        report = export_merge_lora(Path(args.ckpt), Path(args.out))
    else:
        report = export_qlora_full_precision(Path(args.ckpt), Path(args.base) if args.base else None, Path(args.out))
    print(f"{report.kind} of a {report.source_method} checkpoint: {len(report.replaced)} layers -> {args.out}")
    print(f"  max abs diff vs source model: {report.max_abs_diff:.3g}")
    if report.max_abs_diff_base is not None:
        print(f"  max abs diff vs base model:   {report.max_abs_diff_base:.3g}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    grid = read_grid(Path(args.grid))
    out_dir = Path(args.out_dir) if args.out_dir else (get_settings().runs_dir or Path("runs")) / Path(args.grid).stem
    jobs = args.jobs if args.jobs is not None else get_settings().jobs
    rows = sweep(grid, data=Path(args.data) if args.data else None, out_dir=out_dir, jobs=jobs)
    write_sweep_csv(Path(args.out_csv), rows)
    failed = sum(row.status == "failed" for row in rows)
    print(f"{len(rows)} runs, {failed} failed -> {args.out_csv}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sam-peft", description="Parameter-efficient fine-tuning of a SAM-style model.")
    parser.add_argument("--log-level", help="overrides SAM_PEFT_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--min-inst", type=int)
    p.add_argument("--max-inst", type=int)
    p.add_argument("--min-r", type=float)
    p.add_argument("--max-r", type=float)
    p.add_argument("--contrast", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--overlap", action="store_true", default=None)
    p.add_argument("--single-object", action="store_true", default=None)
    p.add_argument("--resource-efficient", action="store_true")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--data", required=True)
    p.add_argument("--preset", default="toy")
    _add_method_flags(p)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--objects-per-image", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--tasks", default="ais,point,box,ip,ib")
    p.add_argument("--n-train", type=int)
    p.add_argument("--resource-efficient", action="store_true")
    p.add_argument("--experiment-id")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tasks", default="ais,point,box,ip,ib")
    p.add_argument("--iters", type=int, default=7)
    p.add_argument("--split", default="test")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-jsonl")
    p.add_argument("--out-csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("count-params", help="trainable / frozen parameter counts")
    p.add_argument("--preset", default="toy")
    _add_method_flags(p)
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("mem-report", help="retained activation bytes against full fine-tuning")
    p.add_argument("--preset", default="toy")
    _add_method_flags(p)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_mem_report)

    p = sub.add_parser("export", help="merge LoRA or move a QLoRA run back to full precision")
    p.add_argument("--ckpt", required=True)
    kind = p.add_mutually_exclusive_group(required=True)
    kind.add_argument("--merge-lora", action="store_true")
    kind.add_argument("--qlora-full-precision", action="store_true")
    p.add_argument("--base", help="full-precision base checkpoint (default: <ckpt>.base.ckpt)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("sweep", help="run a grid of configurations")
    p.add_argument("--grid", required=True)
    p.add_argument("--data")
    p.add_argument("--jobs", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--out-csv", required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.func(args)
    except SamPeftError as exc:
        logger.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
