"""Training loop and evaluation driver."""

from __future__ import annotations

import csv
import os

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .losses import total_loss
from .metrics import EvalReport, ImageEval, evaluate
from .model import Detector, final_detections
from .optim import Adam
from .scenes import Scene, load


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, scene_ids: list[int], terms: dict):
        self.iteration = iteration
        self.scene_ids = scene_ids
        self.terms = terms
        super().__init__(
            f"non-finite loss at iteration {iteration}; batch scene ids {scene_ids}; "
            f"terms {terms}"
        )


LOSS_COLUMNS = [
    "iteration", "kind", "total", "enc_cls", "locate_cls", "locate_l1",
    "locate_giou", "dedup_cls", "dedup_l1", "dedup_giou", "grad_norm",
    "ap50", "duplicate_rate", "mean_query_count",
]


def train(run: RunConfig, progress=None) -> tuple[Detector, str]:
    """Run the full loop: returns the model and the checkpoint directory.
    Writes metrics.csv (loss rows each iteration, eval rows periodically)
    under ``run.out_dir``."""
    os.makedirs(run.out_dir, exist_ok=True)
    train_scenes = load(run.train_data)
    if not train_scenes:
        raise ValueError(f"empty training dataset: {run.train_data}")
    eval_scenes = load(run.eval_data) if run.eval_data else []

    model = Detector(run.detector)
    start_iteration = 0
    resume_dir = os.path.join(run.out_dir, "checkpoint")
    if os.path.exists(os.path.join(resume_dir, "manifest.json")):
        model, start_iteration = load_checkpoint(resume_dir, run.detector)

    params = list(model.named_parameters())
    optimizer = Adam(
        params,
        learning_rate=run.optimizer.learning_rate,
        weight_decay=run.optimizer.weight_decay,
        clip_norm=run.optimizer.clip_norm,
    )
    order_rng = np.random.default_rng(run.seed + 1)

    metrics_path = os.path.join(run.out_dir, "metrics.csv")
    mode = "a" if start_iteration > 0 and os.path.exists(metrics_path) else "w"
    with open(metrics_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(LOSS_COLUMNS)
        order = _shuffled_indices(order_rng, len(train_scenes))
        cursor = 0
        drop_at = int(run.iterations * run.optimizer.lr_drop_fraction)
        for iteration in range(start_iteration, run.iterations):
            if iteration == drop_at and run.optimizer.lr_drop_factor != 1.0:
                optimizer.lr = run.optimizer.learning_rate * run.optimizer.lr_drop_factor
            batch = []
            for _ in range(run.batch_size):
                if cursor >= len(order):
                    order = _shuffled_indices(order_rng, len(train_scenes))
                    cursor = 0
                batch.append(train_scenes[order[cursor]])
                cursor += 1

            for _, p in params:
                p.grad = None
            out = model.forward([s.image_grid for s in batch])
            last = out.layers[-1]
            if not (
                np.all(np.isfinite(last.class_logits.values))
                and np.all(np.isfinite(last.box_logits.values))
            ):
                raise TrainingDiverged(
                    iteration, [s.id for s in batch], {"forward": "non-finite"}
                )
            breakdown = total_loss(
                out,
                [s.gt_classes() for s in batch],
                [s.gt_boxes() for s in batch],
                run.detector.replication,
                run.detector.locate_cost,
                run.detector.dedup_cost,
                run.detector.size_prior,
                run.detector.loss,
            )
            total = float(breakdown.total.values)
            if not np.isfinite(total):
                raise TrainingDiverged(iteration, [s.id for s in batch], breakdown.terms)
            breakdown.total.backward()
            grad_norm = optimizer.step()

            row = [iteration, "loss", total]
            row += [breakdown.terms[k] for k in LOSS_COLUMNS[3:10]]
            row += [grad_norm, "", "", ""]
            writer.writerow(row)

            if eval_scenes and (iteration + 1) % run.eval_interval == 0:
                report = evaluate_model(model, eval_scenes)
                writer.writerow(
                    [iteration, "eval", "", "", "", "", "", "", "", "", "",
                     report.ap50, report.duplicate_rate, report.mean_query_count]
                )
            if progress is not None:
                progress(iteration, total)

    ckpt_dir = os.path.join(run.out_dir, "checkpoint")
    save_checkpoint(model, ckpt_dir, run.iterations)
    return model, ckpt_dir


def _shuffled_indices(rng, n: int) -> list[int]:
    idx = np.arange(n)
    rng.shuffle(idx)
    return idx.tolist()


def run_preset(
    preset: str,
    train_data: str,
    eval_data: str,
    out_dir: str,
    iterations: int = 3000,
    batch_size: int = 2,
    seeds: list[int] | None = None,
    base: "RunConfig | None" = None,
) -> list[dict]:
    """Train every variant of a preset under a shared budget and collect
    one comparison row per (variant, seed)."""
    import dataclasses

    from .config import DetectorConfig
    from .presets import preset_variants

    base = base or RunConfig()
    seeds = seeds or [0]
    eval_scenes = load(eval_data)
    rows = []
    for variant, det_cfg in preset_variants(preset, base.detector):
        for seed in seeds:
            run = dataclasses.replace(
                base,
                detector=dataclasses.replace(det_cfg, seed=seed),
                iterations=iterations,
                batch_size=batch_size,
                train_data=train_data,
                eval_data="",
                out_dir=os.path.join(out_dir, f"{variant}-seed{seed}"),
                preset=preset,
                seed=seed,
            )
            model, _ = train(run)
            report = evaluate_model(model, eval_scenes)
            rows.append(
                {
                    "preset": preset,
                    "variant": variant,
                    "seed": seed,
                    "ap": report.ap,
                    "ap50": report.ap50,
                    "duplicate_rate": report.duplicate_rate,
                    "mean_query_count": report.mean_query_count,
                }
            )
    return rows


def evaluate_model(
    model: Detector,
    scenes: list[Scene],
    score_threshold: float | None = None,
    eval_batch: int = 8,
) -> EvalReport:
    images = collect_evals(model, scenes, score_threshold, eval_batch)
    return evaluate(images)


def collect_evals(
    model: Detector,
    scenes: list[Scene],
    score_threshold: float | None = None,
    eval_batch: int = 8,
) -> list[ImageEval]:
    """Run inference over the scenes and package predictions for metrics."""
    from .boxes import cxcywh_to_xyxy

    images: list[ImageEval] = []
    with ad.no_grad():
        for lo in range(0, len(scenes), eval_batch):
            chunk = scenes[lo : lo + eval_batch]
            out = model.forward([s.image_grid for s in chunk], score_threshold)
            for b, scene in enumerate(chunk):
                boxes, classes, scores = final_detections(
                    out, b, nms_eval=model.cfg.nms_eval, nms_iou=model.cfg.nms_iou
                )
                gt_boxes = scene.gt_boxes()
                images.append(
                    ImageEval(
                        pred_boxes=boxes,
                        pred_classes=classes,
                        pred_scores=scores,
                        gt_boxes=cxcywh_to_xyxy(gt_boxes) if len(gt_boxes) else np.zeros((0, 4)),
                        gt_classes=scene.gt_classes(),
                        n_queries=int(out.queries.active[b].sum()),
                    )
                )
    return images
