"""Bipartite matching between target slots and queries.

Two label-assignment regimes share one exact solver: one-to-many (each
ground truth replicated so several queries carry it) for the locating
stage, and plain one-to-one for the dedup stage.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import pairwise_cost_matrices


@dataclass(frozen=True)
class CostWeights:
    """Weights of the classification / L1 / GIoU terms in the match cost."""

    cls: float = 0.2
    l1: float = 5.0
    giou: float = 2.0


# stage defaults: locating stage keeps the classification term small so
# geometry dominates; the dedup stage weighs all three terms equally
LOCATE_COST = CostWeights(0.2, 5.0, 2.0)
DEDUP_COST = CostWeights(2.0, 2.0, 2.0)


@dataclass
class MatchResult:
    """Injective assignment of target slots to query indices."""

    pairs: list[tuple[int, int]]  # (slot, query)
    slot_gt: list[int]  # slot -> original gt index
    unmatched_queries: list[int]
    total_cost: float
    n_queries: int = 0

    def gt_pairs(self) -> list[tuple[int, int]]:
        """(gt index, query index) for every matched slot."""
        return [(self.slot_gt[s], q) for s, q in self.pairs]

    @property
    def matched_queries(self) -> list[int]:
        return [q for _, q in self.pairs]


def hungarian(cost: np.ndarray) -> MatchResult:
    """Exact minimum-cost assignment of all rows of an m x n matrix
    (m <= n; taller matrices are solved transposed, matching min(m, n)
    rows). Rows are augmented in order, which fixes tie-breaking."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    m, n = cost.shape
    if m == 0 or n == 0:
        return MatchResult([], [], list(range(n)), 0.0, n_queries=n)
    transposed = m > n
    work = cost.T if transposed else cost
    row_of_col = _solve_rectangular(work)

    pairs = []
    for col, row in enumerate(row_of_col):
        if row < 0:
            continue
        slot, query = (col, row) if transposed else (row, col)
        pairs.append((slot, query))
    pairs.sort()
    matched = {q for _, q in pairs}
    total = float(sum(cost[s, q] for s, q in pairs))
    return MatchResult(
        pairs=pairs,
        slot_gt=list(range(m)),
        unmatched_queries=[q for q in range(n) if q not in matched],
        total_cost=total,
        n_queries=n,
    )


def _solve_rectangular(cost: np.ndarray) -> np.ndarray:
    """Shortest-augmenting-path assignment (potentials form) for m <= n.

    Returns row index assigned to each column, -1 if the column is free.
    """
    m, n = cost.shape
    u = np.zeros(m + 1)
    v = np.zeros(n + 1)
    # p[j] = row (1-based) assigned to column j; column 0 is virtual
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, m + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1, :] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(candidates.argmin()) + 1
            delta = candidates[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_of_col = np.full(n, -1, dtype=np.int64)
    for j in range(1, n + 1):
        if p[j] != 0:
            row_of_col[j - 1] = p[j] - 1
    return row_of_col


def classification_cost(pred_logits: np.ndarray, gt_classes: np.ndarray) -> np.ndarray:
    """BCE cost of asserting each gt's class at full confidence:
    -log sigmoid(logit[gt class]), computed stably. [n_pred, n_gt]."""
    logits = np.asarray(pred_logits, dtype=np.float64)
    picked = logits[:, np.asarray(gt_classes, dtype=np.int64)]
    return np.logaddexp(0.0, -picked)


def build_match_cost(
    pred_logits: np.ndarray,
    pred_boxes: np.ndarray,
    gt_classes: np.ndarray,
    gt_boxes: np.ndarray,
    weights: CostWeights,
) -> np.ndarray:
    """Weighted matching cost, entry [query, gt]. Boxes in cxcywh."""
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    if gt_classes.size == 0:
        return np.zeros((np.asarray(pred_boxes).shape[0], 0))
    l1, giou_cost = pairwise_cost_matrices(pred_boxes, gt_boxes)
    cls = classification_cost(pred_logits, gt_classes)
    return weights.cls * cls + weights.l1 * l1 + weights.giou * giou_cost


def match_one_to_many(
    pred_logits: np.ndarray,
    pred_boxes: np.ndarray,
    gt_classes: np.ndarray,
    gt_boxes: np.ndarray,
    replication: int,
    weights: CostWeights,
) -> MatchResult:
    """Replicate each gt ``replication`` times (clamped so every gt keeps
    an equal share of the available queries) and solve one assignment over
    the replicated slots; each gt ends up with that many distinct queries."""
    n_queries = np.asarray(pred_boxes).shape[0]
    if n_queries < 1:
        raise ValueError("need at least one query")
    n_gt = np.asarray(gt_classes).size
    if n_gt == 0:
        return MatchResult([], [], list(range(n_queries)), 0.0, n_queries=n_queries)
    k_eff = max(1, min(int(replication), n_queries // n_gt))
    base = build_match_cost(pred_logits, pred_boxes, gt_classes, gt_boxes, weights)
    slot_cost = np.repeat(base.T, k_eff, axis=0)  # [n_gt * k_eff, n_queries]
    result = hungarian(slot_cost)
    result.slot_gt = [s // k_eff for s in range(n_gt * k_eff)]
    return result


def match_one_to_one(
    pred_logits: np.ndarray,
    pred_boxes: np.ndarray,
    gt_classes: np.ndarray,
    gt_boxes: np.ndarray,
    weights: CostWeights,
) -> MatchResult:
    return match_one_to_many(pred_logits, pred_boxes, gt_classes, gt_boxes, 1, weights)
