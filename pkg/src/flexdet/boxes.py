"""Axis-aligned boxes in normalized coordinates: representations,
conversions, overlap metrics, pairwise cost matrices, and greedy NMS."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# extents below this are clamped, never rejected, so training stays total
MIN_EXTENT = 1e-6


@dataclass(frozen=True)
class BoxCxCyWH:
    """Center/size box; coordinates normalized to [0, 1], extents clamped."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        object.__setattr__(self, "cx", float(min(max(self.cx, 0.0), 1.0)))
        object.__setattr__(self, "cy", float(min(max(self.cy, 0.0), 1.0)))
        object.__setattr__(self, "w", float(min(max(self.w, MIN_EXTENT), 1.0)))
        object.__setattr__(self, "h", float(min(max(self.h, MIN_EXTENT), 1.0)))

    def to_xyxy(self) -> "BoxXYXY":
        return BoxXYXY(
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class BoxXYXY:
    """Corner box with x1 < x2, y1 < y2."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate corner box: {self}")

    def to_cxcywh(self) -> BoxCxCyWH:
        return BoxCxCyWH(
            (self.x1 + self.x2) / 2.0,
            (self.y1 + self.y2) / 2.0,
            self.x2 - self.x1,
            self.y2 - self.y1,
        )

    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


def cxcywh_to_xyxy(b: np.ndarray) -> np.ndarray:
    """[..., 4] center/size -> corner form."""
    b = np.asarray(b, dtype=np.float64)
    half = b[..., 2:] / 2.0
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def xyxy_to_cxcywh(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    wh = b[..., 2:] - b[..., :2]
    return np.concatenate([b[..., :2] + wh / 2.0, wh], axis=-1)


def iou(a, b) -> float:
    a, b = _as_xyxy(a), _as_xyxy(b)
    return float(iou_matrix(a[None], b[None])[0, 0])


def giou(a, b) -> float:
    a, b = _as_xyxy(a), _as_xyxy(b)
    return float(giou_matrix(a[None], b[None])[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of xyxy boxes: [n, 4] x [m, 4] -> [n, m]."""
    inter, union = _inter_union(a, b)
    return np.where(union > 0, inter / np.maximum(union, 1e-30), 0.0)


def giou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise generalized IoU: IoU minus the enclosing-box penalty."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    inter, union = _inter_union(a, b)
    iou_m = np.where(union > 0, inter / np.maximum(union, 1e-30), 0.0)
    lo = np.minimum(a[:, None, :2], b[None, :, :2])
    hi = np.maximum(a[:, None, 2:], b[None, :, 2:])
    enclose = (hi - lo).prod(axis=-1)
    return iou_m - (enclose - union) / np.maximum(enclose, 1e-30)


def _inter_union(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    lo = np.maximum(a[:, None, :2], b[None, :, :2])
    hi = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(hi - lo, 0.0, None)
    inter = wh.prod(axis=-1)
    area_a = (a[:, 2:] - a[:, :2]).prod(axis=-1)
    area_b = (b[:, 2:] - b[:, :2]).prod(axis=-1)
    union = area_a[:, None] + area_b[None, :] - inter
    return inter, union


def pairwise_cost_matrices(pred_cxcywh: np.ndarray, gt_cxcywh: np.ndarray):
    """L1 distance (center/size space) and GIoU cost (-giou) matrices,
    shaped [n_pred, n_gt]. Empty gt yields empty matrices."""
    pred = np.asarray(pred_cxcywh, dtype=np.float64).reshape(-1, 4)
    if pred.shape[0] == 0:
        raise ValueError("pairwise_cost_matrices needs at least one prediction")
    gt = np.asarray(gt_cxcywh, dtype=np.float64).reshape(-1, 4)
    if gt.shape[0] == 0:
        return np.zeros((pred.shape[0], 0)), np.zeros((pred.shape[0], 0))
    l1 = np.abs(pred[:, None, :] - gt[None, :, :]).sum(axis=-1)
    giou_cost = -giou_matrix(cxcywh_to_xyxy(pred), cxcywh_to_xyxy(gt))
    return l1, giou_cost


def nms(boxes_xyxy: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy descending-score suppression. Ties break toward the lower
    original index, so results are deterministic."""
    boxes = np.asarray(boxes_xyxy, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    if boxes.shape[0] != scores.shape[0]:
        raise ValueError("nms: scores must align with boxes")
    order = np.argsort(-scores, kind="stable")
    keep: list[int] = []
    suppressed = np.zeros(len(scores), dtype=bool)
    for idx in order:
        if suppressed[idx]:
            continue
        keep.append(int(idx))
        overlaps = iou_matrix(boxes[idx][None], boxes)[0]
        suppressed |= overlaps > iou_threshold
    return keep


def _as_xyxy(b) -> np.ndarray:
    if isinstance(b, BoxXYXY):
        return b.as_array()
    if isinstance(b, BoxCxCyWH):
        return b.to_xyxy().as_array()
    return np.asarray(b, dtype=np.float64)
