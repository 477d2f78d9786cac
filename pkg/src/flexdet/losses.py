"""Training losses: size-prior-weighted classification (soft-target BCE
with a squared-score damped negative term), box regression (L1 + GIoU),
and the per-stage weighted assembly."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .matching import MatchResult, match_one_to_many, match_one_to_one

if TYPE_CHECKING:
    from .model import ModelOutput


@dataclass(frozen=True)
class SizePriorParams:
    """Knobs of the size prior: mixing exponent and the image pixel extents
    the ground-truth box areas are measured against."""

    alpha: float = 0.5
    image_h: float = 256.0
    image_w: float = 256.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


@dataclass(frozen=True)
class LossWeights:
    enc_cls: float = 1.5
    locate_cls: float = 2.0
    locate_l1: float = 5.0
    locate_giou: float = 2.0
    dedup_cls: float = 2.0
    dedup_l1: float = 5.0
    dedup_giou: float = 2.0


@dataclass
class LossBreakdown:
    terms: dict[str, float]
    total: Tensor

    def weighted_sum(self, weights: LossWeights) -> float:
        w = vars(weights)
        return sum(w[k] * v for k, v in self.terms.items())


def size_prior_factor(gt_box_cxcywh: np.ndarray, params: SizePriorParams) -> float:
    """(1 - sqrt(area fraction))^alpha + 1; in [1, 2], larger for smaller
    boxes, exactly 1 for a full-image box."""
    h_px = float(gt_box_cxcywh[3]) * params.image_h
    w_px = float(gt_box_cxcywh[2]) * params.image_w
    frac = np.sqrt((h_px / params.image_h) * (w_px / params.image_w))
    base = max(1.0 - frac, 0.0)
    # continuity in the base: a full-image box gives factor exactly 1 at
    # every alpha, including alpha = 0 (where x**0 would jump to 1)
    term = 0.0 if base == 0.0 else base**params.alpha
    return float(term + 1.0)


def blend_target(score: float, iou_value: float, mix: float = 0.25) -> float:
    """Soft label from the current score and the box overlap: geometric
    mixing score^mix * iou^(1-mix); monotone in both arguments."""
    score = min(max(score, 0.0), 1.0)
    iou_value = min(max(iou_value, 0.0), 1.0)
    return float(score**mix * iou_value ** (1.0 - mix))


def classification_loss(
    pred_logits: Tensor,
    match: MatchResult,
    gt_boxes: np.ndarray,
    targets: np.ndarray,
    params: SizePriorParams,
    query_mask: np.ndarray | None = None,
    gt_classes: np.ndarray | None = None,
) -> Tensor:
    """Sum over positives of BCE(p, t) scaled by the size prior, plus
    p^2-damped BCE toward zero over every other (query, class) entry.

    Positives are the (matched query, its gt class) entries of ``match``;
    ``targets`` aligns with ``match.pairs``. Rows where ``query_mask`` is
    false (padding queries) are excluded entirely.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if np.any(targets < 0) or np.any(targets > 1):
        raise ValueError("targets must lie in [0, 1]")
    n, ncls = pred_logits.shape
    if gt_classes is None:
        gt_classes = np.zeros(len(gt_boxes), dtype=np.int64)

    soft = np.zeros((n, ncls), dtype=np.float64)
    pos_weight = np.zeros((n, ncls), dtype=np.float64)
    neg_mask = np.ones((n, ncls), dtype=np.float64)
    if query_mask is not None:
        neg_mask[~np.asarray(query_mask, dtype=bool)] = 0.0
    for (gt_idx, query), t in zip(match.gt_pairs(), targets):
        c = int(gt_classes[gt_idx])
        soft[query, c] = t
        pos_weight[query, c] = size_prior_factor(gt_boxes[gt_idx], params)
        neg_mask[query, c] = 0.0

    bce = ad.bce_with_logits(pred_logits, soft)
    pos_term = ad.sum_(ad.mul(bce, Tensor(pos_weight)))
    p = ad.sigmoid(pred_logits)
    neg_term = ad.sum_(ad.mul(ad.mul(ad.square(p), bce), Tensor(neg_mask)))
    return ad.add(pos_term, neg_term)


def box_losses(
    pred_boxes: Tensor,
    gt_boxes: np.ndarray,
    match: MatchResult,
) -> tuple[Tensor, Tensor]:
    """(mean L1 in center/size space, mean 1-GIoU) over matched pairs;
    both zero with zero gradient when nothing is matched."""
    pairs = match.gt_pairs()
    if not pairs:
        zero = Tensor(np.array(0.0, dtype=pred_boxes.dtype))
        return zero, zero
    gt_idx = np.array([g for g, _ in pairs], dtype=np.int64)
    q_idx = np.array([q for _, q in pairs], dtype=np.int64)
    pred = ad.take_rows(pred_boxes, q_idx)
    gt = np.asarray(gt_boxes, dtype=np.float64)[gt_idx]

    l1 = ad.mean_(ad.sum_(ad.absolute(ad.sub(pred, Tensor(gt))), axis=-1))
    giou_loss = ad.mean_(ad.sub(ad._coerce(1.0), giou_pairs_t(pred, gt)))
    return l1, giou_loss


def giou_pairs_t(pred_cxcywh: Tensor, gt_cxcywh: np.ndarray) -> Tensor:
    """Differentiable rowwise GIoU between predicted boxes and fixed
    targets, both in center/size form. Returns a [k] tensor."""
    px = _cxcywh_to_xyxy_t(pred_cxcywh)
    gx = Tensor(np.asarray(_cxcywh_to_xyxy_np(gt_cxcywh)))

    def col(t, i):
        return ad.slice_axis(t, 1, i, i + 1)

    ix1 = ad.maximum(col(px, 0), col(gx, 0))
    iy1 = ad.maximum(col(px, 1), col(gx, 1))
    ix2 = ad.minimum(col(px, 2), col(gx, 2))
    iy2 = ad.minimum(col(px, 3), col(gx, 3))
    inter = ad.mul(ad.relu(ad.sub(ix2, ix1)), ad.relu(ad.sub(iy2, iy1)))

    area_p = ad.mul(ad.sub(col(px, 2), col(px, 0)), ad.sub(col(px, 3), col(px, 1)))
    area_g = ad.mul(ad.sub(col(gx, 2), col(gx, 0)), ad.sub(col(gx, 3), col(gx, 1)))
    union = ad.sub(ad.add(area_p, area_g), inter)
    iou = ad.div(inter, union)

    ex1 = ad.minimum(col(px, 0), col(gx, 0))
    ey1 = ad.minimum(col(px, 1), col(gx, 1))
    ex2 = ad.maximum(col(px, 2), col(gx, 2))
    ey2 = ad.maximum(col(px, 3), col(gx, 3))
    enclose = ad.mul(ad.sub(ex2, ex1), ad.sub(ey2, ey1))

    g = ad.sub(iou, ad.div(ad.sub(enclose, union), enclose))
    return ad.reshape(g, (-1,))


def _cxcywh_to_xyxy_t(b: Tensor) -> Tensor:
    xy = ad.slice_axis(b, 1, 0, 2)
    half = ad.mul(ad.slice_axis(b, 1, 2, 4), ad._coerce(0.5))
    return ad.concat([ad.sub(xy, half), ad.add(xy, half)], axis=1)


def _cxcywh_to_xyxy_np(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    half = b[:, 2:] / 2.0
    return np.concatenate([b[:, :2] - half, b[:, :2] + half], axis=1)


# ---------------------------------------------------------------------------
# per-stage assembly


def matched_targets(
    logits_np: np.ndarray,
    boxes_np: np.ndarray,
    gt_classes: np.ndarray,
    gt_boxes: np.ndarray,
    match: MatchResult,
    mix: float = 0.25,
) -> np.ndarray:
    """Soft labels for the matched pairs: the current score geometrically
    blended with the box overlap (both detached)."""
    pairs = match.gt_pairs()
    if not pairs:
        return np.zeros(0)
    from .boxes import cxcywh_to_xyxy, iou_matrix

    g_idx = np.array([g for g, _ in pairs], dtype=np.int64)
    q_idx = np.array([q for _, q in pairs], dtype=np.int64)
    p = ad.sigmoid_np(logits_np)[q_idx, gt_classes[g_idx]]
    full = iou_matrix(cxcywh_to_xyxy(boxes_np[q_idx]), cxcywh_to_xyxy(gt_boxes[g_idx]))
    u = np.clip(np.diagonal(full), 0.0, 1.0)
    return np.clip(p, 0.0, 1.0) ** mix * u ** (1.0 - mix)


def _stage_image_loss(
    logits: Tensor,
    boxes_t: Tensor,
    gt_classes: np.ndarray,
    gt_boxes: np.ndarray,
    match: MatchResult,
    params: SizePriorParams,
    query_mask: np.ndarray | None,
) -> tuple[Tensor, Tensor, Tensor]:
    """(cls, l1, giou) losses for one image at one layer; the cls sum is
    normalized by the matched-slot count so scenes with many replicated
    slots do not dominate."""
    targets = matched_targets(logits.values, boxes_t.values, gt_classes, gt_boxes, match)
    cls = classification_loss(
        logits, match, gt_boxes, targets, params, query_mask=query_mask, gt_classes=gt_classes
    )
    cls = ad.mul(cls, ad._coerce(1.0 / max(1, len(match.pairs))))
    l1, gl = box_losses(boxes_t, gt_boxes, match)
    return cls, l1, gl


def total_loss(
    output: "ModelOutput",
    gt_classes_per_image: list[np.ndarray],
    gt_boxes_per_image: list[np.ndarray],
    replication: int,
    locate_cost,
    dedup_cost,
    params: SizePriorParams,
    weights: LossWeights,
) -> LossBreakdown:
    """Weighted sum of the encoder auxiliary loss (one-to-many over all
    tokens), per-locating-layer one-to-many losses, and per-dedup-layer
    one-to-one losses. Per-term values are means over images and over the
    layers of each stage."""
    batch = len(gt_classes_per_image)
    acc: dict[str, list[Tensor]] = {k: [] for k in (
        "enc_cls", "locate_cls", "locate_l1", "locate_giou",
        "dedup_cls", "dedup_l1", "dedup_giou",
    )}

    n_locate = sum(1 for lo in output.layers if lo.stage == "locate")
    n_dedup = sum(1 for lo in output.layers if lo.stage == "dedup")

    from .model import image_rows

    for b in range(batch):
        gcls = np.asarray(gt_classes_per_image[b], dtype=np.int64)
        gbox = np.asarray(gt_boxes_per_image[b], dtype=np.float64)

        enc_logits = image_rows(output.encoder.class_logits, b)
        enc_boxes_t = ad.sigmoid(image_rows(output.encoder.init_box_logit, b))
        enc_match = match_one_to_many(
            enc_logits.values, enc_boxes_t.values, gcls, gbox, replication, locate_cost
        )
        enc_cls, _, _ = _stage_image_loss(
            enc_logits, enc_boxes_t, gcls, gbox, enc_match, params, None
        )
        acc["enc_cls"].append(enc_cls)

        active_idx = np.flatnonzero(output.queries.active[b])
        for layer in output.layers:
            logits = image_rows(layer.class_logits, b)
            boxes_t = ad.sigmoid(image_rows(layer.box_logits, b))
            act_logits = ad.take_rows(logits, active_idx)
            act_boxes = ad.take_rows(boxes_t, active_idx)
            if layer.stage == "locate":
                m = match_one_to_many(
                    act_logits.values, act_boxes.values, gcls, gbox, replication, locate_cost
                )
                scale = 1.0 / n_locate
                keys = ("locate_cls", "locate_l1", "locate_giou")
            else:
                m = match_one_to_one(
                    act_logits.values, act_boxes.values, gcls, gbox, dedup_cost
                )
                scale = 1.0 / n_dedup
                keys = ("dedup_cls", "dedup_l1", "dedup_giou")
            cls, l1, gl = _stage_image_loss(
                act_logits, act_boxes, gcls, gbox, m, params, None
            )
            for key, term in zip(keys, (cls, l1, gl)):
                acc[key].append(ad.mul(term, ad._coerce(scale)))

    terms: dict[str, float] = {}
    total: Tensor | None = None
    w = vars(weights)
    weight_of = {
        "enc_cls": "enc_cls",
        "locate_cls": "locate_cls", "locate_l1": "locate_l1", "locate_giou": "locate_giou",
        "dedup_cls": "dedup_cls", "dedup_l1": "dedup_l1", "dedup_giou": "dedup_giou",
    }
    for key, parts in acc.items():
        if parts:
            term = parts[0]
            for p in parts[1:]:
                term = ad.add(term, p)
            term = ad.mul(term, ad._coerce(1.0 / batch))
        else:
            term = Tensor(np.array(0.0))
        terms[key] = float(term.values)
        weighted = ad.mul(term, ad._coerce(w[weight_of[key]]))
        total = weighted if total is None else ad.add(total, weighted)
    return LossBreakdown(terms=terms, total=total)
