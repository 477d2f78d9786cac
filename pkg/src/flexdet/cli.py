"""Command-line interface.

Subcommands: gen-data, train, eval, ablate, complexity, bench-decoder.
Exit codes: 0 ok, 1 user error, 2 internal error. Failures print one
machine-parsable JSON line to stderr.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np


class UserError(Exception):
    pass


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except UserError as err:
        _fail("user", str(err))
        return 1
    except (FileNotFoundError, json.JSONDecodeError, KeyError, ValueError) as err:
        _fail("user", f"{type(err).__name__}: {err}")
        return 1
    except Exception as err:  # noqa: BLE001 - last-resort diagnostics
        _fail("internal", f"{type(err).__name__}: {err}")
        return 2


def _fail(code: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": code, "message": message}) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flexdet")
    sub = parser.add_subparsers(required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    p.add_argument("spec", help="dataset spec JSON")
    p.add_argument("out", help="output JSONL path")
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="train a detector from a run config")
    p.add_argument("run", help="run config JSON")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("checkpoint", help="checkpoint directory")
    p.add_argument("data", help="scenes JSONL")
    p.add_argument("--threshold", type=float, default=None,
                   help="override the selection threshold without retraining")
    p.add_argument("--out", default=None, help="output directory (default: checkpoint dir)")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("ablate", help="train preset variants under a shared budget")
    p.add_argument("preset", help="preset name")
    p.add_argument("--train-data", required=True)
    p.add_argument("--eval-data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=3000)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("complexity", help="query count and decoder FLOPs vs threshold")
    p.add_argument("model", help="checkpoint directory or detector config JSON")
    p.add_argument("data", help="scenes JSONL")
    p.add_argument("--out", default=None, help="output directory (default: cwd)")
    p.add_argument("--thresholds", default="0.01,0.02,0.03,0.05,0.1,0.2,0.4",
                   help="comma-separated thresholds")
    p.set_defaults(handler=cmd_complexity)

    p = sub.add_parser("bench-decoder", help="time the decoder against a conventional one")
    p.add_argument("config", help="detector config JSON, or '-' for defaults")
    p.add_argument("--queries", type=int, default=128)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--out", default=None, help="output directory (default: cwd)")
    p.set_defaults(handler=cmd_bench)

    return parser


# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .scenes import DatasetSpec, generate, save

    with open(args.spec) as fh:
        raw = json.load(fh)
    known = {f.name for f in dataclasses.fields(DatasetSpec)}
    unknown = set(raw) - known
    if unknown:
        raise UserError(f"unknown dataset spec keys: {sorted(unknown)}")
    for key in ("count_weights", "size_range"):
        if key in raw:
            raw[key] = tuple(raw[key])
    spec = DatasetSpec(**raw)
    save(generate(spec), args.out)
    print(f"wrote {spec.n_scenes} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .config import load_run_config
    from .plots import save_loss_curves
    from .train import train

    run = load_run_config(args.run)
    if not os.path.exists(run.train_data):
        raise UserError(f"training dataset not found: {run.train_data}")
    model, ckpt = train(run)
    metrics_path = os.path.join(run.out_dir, "metrics.csv")
    with open(metrics_path) as fh:
        rows = list(csv.DictReader(fh))
    save_loss_curves(rows, os.path.join(run.out_dir, "loss_curves.png"))
    print(f"checkpoint: {ckpt}")
    print(f"metrics: {metrics_path}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .plots import save_bucket_chart
    from .scenes import load
    from .train import evaluate_model

    model, _ = load_checkpoint(args.checkpoint)
    scenes = load(args.data)
    report = evaluate_model(model, scenes, score_threshold=args.threshold)
    out_dir = args.out or args.checkpoint
    os.makedirs(out_dir, exist_ok=True)
    json_path = os.path.join(out_dir, "eval_report.json")
    with open(json_path, "w") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    with open(os.path.join(out_dir, "eval_report.csv"), "w") as fh:
        fh.write(report.to_csv())
    save_bucket_chart(report, os.path.join(out_dir, "eval_buckets.png"))
    print(report.to_json())
    return 0


def cmd_ablate(args) -> int:
    from .plots import save_ablation_chart
    from .presets import preset_variants
    from .train import run_preset

    seeds = [int(s) for s in args.seeds.split(",") if s]
    try:
        preset_variants(args.preset, _default_detector())
    except KeyError as err:
        raise UserError(str(err)) from err
    rows = run_preset(
        args.preset,
        train_data=args.train_data,
        eval_data=args.eval_data,
        out_dir=args.out,
        iterations=args.iterations,
        batch_size=args.batch_size,
        seeds=seeds,
    )
    csv_path = os.path.join(args.out, "comparison.csv")
    _write_csv(csv_path, rows, ["preset", "variant", "seed", "ap", "ap50",
                                "duplicate_rate", "mean_query_count"])
    save_ablation_chart(rows, os.path.join(args.out, "comparison.png"))
    for row in rows:
        print(f"{row['variant']}(seed {row['seed']}): ap50={row['ap50']:.3f} "
              f"dup={row['duplicate_rate']:.3f} queries={row['mean_query_count']:.1f}")
    print(f"table: {csv_path}")
    return 0


def cmd_complexity(args) -> int:
    from .metrics import decoder_flops
    from .plots import save_complexity_curve
    from .scenes import load
    from .train import collect_evals

    model = _load_model_arg(args.model)
    scenes = load(args.data)
    thresholds = sorted(float(t) for t in args.thresholds.split(",") if t)
    rows = []
    for thr in thresholds:
        evals = collect_evals(model, scenes, score_threshold=thr)
        mean_q = float(np.mean([im.n_queries for im in evals]))
        rows.append(
            {
                "threshold": thr,
                "mean_query_count": mean_q,
                "decoder_flops": decoder_flops(mean_q, model.cfg).total,
            }
        )
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "complexity.csv")
    _write_csv(csv_path, rows, ["threshold", "mean_query_count", "decoder_flops"])
    save_complexity_curve(rows, os.path.join(out_dir, "complexity.png"))
    for row in rows:
        print(f"S={row['threshold']}: queries={row['mean_query_count']:.1f} "
              f"flops={row['decoder_flops']:.3g}")
    return 0


def cmd_bench(args) -> int:
    from .bench import bench_decoder
    from .plots import save_bench_chart

    if args.config == "-":
        cfg = _default_detector()
    else:
        cfg = _load_detector_config(args.config)
    result = bench_decoder(cfg, n_queries=args.queries, iters=args.iters, warmup=args.warmup)
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "bench.json"), "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    save_bench_chart(result, os.path.join(out_dir, "bench.png"))
    print(
        f"two-stage: {result['ours_ms']:.2f} ms (std {result['ours_std_ms']:.2f}) | "
        f"baseline: {result['baseline_ms']:.2f} ms (std {result['baseline_std_ms']:.2f}) | "
        f"ratio: {result['ratio']:.3f}"
    )
    return 0


# ---------------------------------------------------------------------------


def _default_detector():
    from .config import DetectorConfig

    return DetectorConfig()


def _load_detector_config(path: str):
    from .config import detector_config_from_dict

    with open(path) as fh:
        return detector_config_from_dict(json.load(fh))


def _load_model_arg(path: str):
    from .checkpoint import load_checkpoint
    from .model import Detector

    if os.path.isdir(path):
        model, _ = load_checkpoint(path)
        return model
    return Detector(_load_detector_config(path))


def _write_csv(path: str, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


if __name__ == "__main__":
    sys.exit(main())
