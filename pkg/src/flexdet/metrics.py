"""Detection metrics (COCO-style AP/AR), a duplicate-rate measure, query
statistics per object-count bucket, and the decoder cost model."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .boxes import iou_matrix
from .config import DetectorConfig

IOU_THRESHOLDS = tuple(np.arange(0.50, 0.96, 0.05).round(2))
RECALL_GRID = np.linspace(0.0, 1.0, 101)
BUCKET_STEP = 5  # object-count bucket width


@dataclass
class ImageEval:
    """Predictions and ground truth for one image, boxes in xyxy."""

    pred_boxes: np.ndarray
    pred_classes: np.ndarray
    pred_scores: np.ndarray
    gt_boxes: np.ndarray
    gt_classes: np.ndarray
    n_queries: int = 0


@dataclass
class EvalReport:
    ap: float
    ap50: float
    ap75: float
    ar: float
    duplicate_rate: float
    mean_query_count: float
    per_bucket: list[dict] = field(default_factory=list)
    n_images: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "ap": self.ap,
                "ap50": self.ap50,
                "ap75": self.ap75,
                "ar": self.ar,
                "duplicate_rate": self.duplicate_rate,
                "mean_query_count": self.mean_query_count,
                "per_bucket": self.per_bucket,
                "n_images": self.n_images,
            },
            indent=2,
            sort_keys=True,
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["metric", "value"])
        for key in ("ap", "ap50", "ap75", "ar", "duplicate_rate", "mean_query_count"):
            writer.writerow([key, getattr(self, key)])
        for row in self.per_bucket:
            writer.writerow([f"bucket_{row['bucket']}_mean_queries", row["mean_query_count"]])
            writer.writerow([f"bucket_{row['bucket']}_ap50", row["ap50"]])
        return buf.getvalue()


def _class_pr(
    images: list[ImageEval], cls: int, iou_thr: float
) -> tuple[np.ndarray, np.ndarray, int]:
    """Score-descending TP/FP flags and the gt count for one class."""
    records = []  # (score, image index, pred row)
    n_gt = 0
    for i, im in enumerate(images):
        n_gt += int((im.gt_classes == cls).sum())
        for r in np.flatnonzero(im.pred_classes == cls):
            records.append((im.pred_scores[r], i, r))
    records.sort(key=lambda t: (-t[0], t[1], t[2]))
    tp = np.zeros(len(records))
    fp = np.zeros(len(records))
    taken: dict[int, set] = {}
    for rank, (_, i, r) in enumerate(records):
        im = images[i]
        gt_rows = np.flatnonzero(im.gt_classes == cls)
        best_iou, best_g = 0.0, -1
        if gt_rows.size:
            ious = iou_matrix(im.pred_boxes[r][None], im.gt_boxes[gt_rows])[0]
            order = np.argsort(-ious, kind="stable")
            for k in order:
                g = int(gt_rows[k])
                if ious[k] < iou_thr:
                    break
                if g not in taken.setdefault(i, set()):
                    best_iou, best_g = float(ious[k]), g
                    break
        if best_g >= 0:
            tp[rank] = 1
            taken[i].add(best_g)
        else:
            fp[rank] = 1
    return tp, fp, n_gt


def _ap_from_flags(tp: np.ndarray, fp: np.ndarray, n_gt: int) -> tuple[float, float]:
    """101-point interpolated AP and the final recall."""
    if n_gt == 0:
        return float("nan"), float("nan")
    if len(tp) == 0:
        return 0.0, 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(fp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1e-12)
    # precision envelope: best precision at any recall >= r
    interp = np.zeros_like(RECALL_GRID)
    for k, r in enumerate(RECALL_GRID):
        mask = recall >= r - 1e-12
        interp[k] = precision[mask].max() if mask.any() else 0.0
    return float(interp.mean()), float(recall[-1])


def average_precision(
    images: list[ImageEval], iou_thresholds=IOU_THRESHOLDS
) -> tuple[float, float, float, float]:
    """(AP over thresholds, AP50, AP75, AR); macro mean over the classes
    that actually appear in the ground truth."""
    classes = sorted({int(c) for im in images for c in im.gt_classes})
    if not classes:
        return 0.0, 0.0, 0.0, 0.0
    ap_per_thr: dict[float, list[float]] = {t: [] for t in iou_thresholds}
    recalls = []
    for cls in classes:
        for thr in iou_thresholds:
            tp, fp, n_gt = _class_pr(images, cls, thr)
            ap, rec = _ap_from_flags(tp, fp, n_gt)
            if not np.isnan(ap):
                ap_per_thr[thr].append(ap)
                recalls.append(rec)
    mean_ap = {t: float(np.mean(v)) if v else 0.0 for t, v in ap_per_thr.items()}
    ap = float(np.mean(list(mean_ap.values())))
    ar = float(np.mean(recalls)) if recalls else 0.0
    return ap, mean_ap.get(0.5, 0.0), mean_ap.get(0.75, 0.0), ar


def duplicate_rate(
    images: list[ImageEval], iou_thr: float = 0.5, score_thr: float = 0.3
) -> float:
    """Mean surplus of confident predictions per ground truth: for each gt,
    the count of score-passing predictions overlapping it beyond the first
    (floored at zero), averaged over all gts."""
    surplus = []
    for im in images:
        if im.gt_boxes.shape[0] == 0:
            continue
        strong = im.pred_scores > score_thr
        for g in range(im.gt_boxes.shape[0]):
            if not strong.any():
                surplus.append(0.0)
                continue
            ious = iou_matrix(im.gt_boxes[g][None], im.pred_boxes[strong])[0]
            surplus.append(max(0.0, float((ious > iou_thr).sum()) - 1.0))
    return float(np.mean(surplus)) if surplus else 0.0


def bucket_of(n_objects: int, step: int = BUCKET_STEP) -> str:
    lo = ((n_objects - 1) // step) * step + 1
    return f"{lo}-{lo + step - 1}"


def bucket_stats(images: list[ImageEval], step: int = BUCKET_STEP) -> list[dict]:
    """Per object-count bucket: mean active query count and AP50. Buckets
    with no images are omitted; rows sorted by bucket start."""
    groups: dict[int, list[ImageEval]] = {}
    for im in images:
        n = im.gt_boxes.shape[0]
        if n == 0:
            continue
        lo = ((n - 1) // step) * step + 1
        groups.setdefault(lo, []).append(im)
    rows = []
    for lo in sorted(groups):
        members = groups[lo]
        _, ap50, _, _ = average_precision(members, iou_thresholds=(0.5,))
        rows.append(
            {
                "bucket": f"{lo}-{lo + step - 1}",
                "n_images": len(members),
                "mean_objects": float(np.mean([m.gt_boxes.shape[0] for m in members])),
                "mean_query_count": float(np.mean([m.n_queries for m in members])),
                "ap50": ap50,
            }
        )
    return rows


def evaluate(images: list[ImageEval]) -> EvalReport:
    ap, ap50, ap75, ar = average_precision(images)
    return EvalReport(
        ap=ap,
        ap50=ap50,
        ap75=ap75,
        ar=ar,
        duplicate_rate=duplicate_rate(images),
        mean_query_count=float(np.mean([im.n_queries for im in images])) if images else 0.0,
        per_bucket=bucket_stats(images),
        n_images=len(images),
    )


# ---------------------------------------------------------------------------
# decoder cost model


@dataclass(frozen=True)
class FlopsBreakdown:
    locate_ca: float
    locate_ffn: float
    dedup_ca: float
    dedup_sa: float
    dedup_sa_proj: float
    dedup_ffn: float

    @property
    def total(self) -> float:
        return (
            self.locate_ca
            + self.locate_ffn
            + self.dedup_ca
            + self.dedup_sa
            + self.dedup_sa_proj
            + self.dedup_ffn
        )


def decoder_flops(n_queries: float, cfg: DetectorConfig) -> FlopsBreakdown:
    """Closed-form decoder cost at ``n_queries`` active queries, counting
    a multiply-add as 2 FLOPs over the matmul terms.

    Per layer, with c channels and m encoder tokens:
      ca(n)      = 4 n c^2 + 4 n m c      (query/out projections, scores, mix)
      sa(n)      = 4 c n^2                (pairwise scores and mix)
      sa_proj(n) = 8 n c^2                (q/k/v/out projections of SA)
      ffn(n)     = 4 n c hidden
    The encoder-side key/value projections of cross-attention are a fixed
    per-image cost shared by any decoder and are not attributed here, which
    keeps ca strictly linear in n.
    """
    n = float(n_queries)
    c = cfg.channels
    m = cfg.n_tokens
    ca = 4 * n * c * c + 4 * n * m * c
    sa = 4 * c * n * n
    sa_proj = 8 * n * c * c
    ffn = 4 * n * c * cfg.ffn_hidden
    sa_ffn = 4 * n * c * cfg.sa_block_hidden
    return FlopsBreakdown(
        locate_ca=cfg.locate_layers * ca,
        locate_ffn=cfg.locate_layers * ffn,
        dedup_ca=cfg.dedup_layers * ca,
        dedup_sa=cfg.dedup_layers * cfg.sa_blocks * sa,
        dedup_sa_proj=cfg.dedup_layers * cfg.sa_blocks * sa_proj,
        dedup_ffn=cfg.dedup_layers * cfg.sa_blocks * sa_ffn,
    )
