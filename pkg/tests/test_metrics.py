import dataclasses

import numpy as np
import pytest

from flexdet import metrics as mx
from flexdet.config import DetectorConfig


def make_image(preds, gts, n_queries=0):
    """preds: list of (box_xyxy, cls, score); gts: list of (box_xyxy, cls)."""
    return mx.ImageEval(
        pred_boxes=np.array([p[0] for p in preds], dtype=float).reshape(-1, 4),
        pred_classes=np.array([p[1] for p in preds], dtype=int),
        pred_scores=np.array([p[2] for p in preds], dtype=float),
        gt_boxes=np.array([g[0] for g in gts], dtype=float).reshape(-1, 4),
        gt_classes=np.array([g[1] for g in gts], dtype=int),
        n_queries=n_queries,
    )


UNIT = [0.0, 0.0, 1.0, 1.0]


def reference_ap(images, cls, thr):
    """Plain-python reference: sort by score, greedy match, rectangle-free
    101-point interpolation computed directly from the PR points."""
    preds = []
    for i, im in enumerate(images):
        for r in range(len(im.pred_scores)):
            if im.pred_classes[r] == cls:
                preds.append((float(im.pred_scores[r]), i, r))
    preds.sort(key=lambda t: (-t[0], t[1], t[2]))
    n_gt = sum(int((im.gt_classes == cls).sum()) for im in images)
    if n_gt == 0:
        return None
    used = set()
    flags = []
    for _, i, r in preds:
        im = images[i]
        best_iou, best_g = 0.0, None
        for g in range(len(im.gt_classes)):
            if im.gt_classes[g] != cls or (i, g) in used:
                continue
            from flexdet.boxes import iou

            v = iou(im.pred_boxes[r], im.gt_boxes[g])
            if v >= thr and v > best_iou:
                best_iou, best_g = v, g
        if best_g is not None:
            used.add((i, best_g))
            flags.append(1)
        else:
            flags.append(0)
    tps = np.cumsum(flags) if flags else np.array([])
    total = 0.0
    for k, r_level in enumerate(np.linspace(0, 1, 101)):
        best = 0.0
        for j in range(len(flags)):
            recall = tps[j] / n_gt
            precision = tps[j] / (j + 1)
            if recall >= r_level - 1e-12:
                best = max(best, precision)
        total += best
    return total / 101


def test_perfect_single_prediction():
    im = make_image([(UNIT, 0, 0.9)], [(UNIT, 0)])
    ap, ap50, ap75, ar = mx.average_precision([im])
    assert ap == 1.0 and ap50 == 1.0 and ap75 == 1.0 and ar == 1.0


def test_duplicate_prediction_after_full_recall():
    im = make_image([(UNIT, 0, 0.9), (UNIT, 0, 0.8)], [(UNIT, 0)])
    _, ap50, _, _ = mx.average_precision([im])
    assert ap50 == 1.0


def test_no_predictions():
    im = make_image([], [(UNIT, 0)])
    ap, ap50, _, ar = mx.average_precision([im])
    assert ap == 0.0 and ap50 == 0.0 and ar == 0.0


def test_low_ranked_fp_before_tp_hurts():
    im = make_image(
        [([0.6, 0.6, 0.9, 0.9], 0, 0.9), (UNIT, 0, 0.5)],
        [(UNIT, 0)],
    )
    _, ap50, _, _ = mx.average_precision([im])
    assert ap50 == pytest.approx(0.5, abs=0.01)


def test_matches_reference_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(40):
        images = []
        for _ in range(rng.integers(1, 3)):
            preds = []
            gts = []
            for _ in range(rng.integers(0, 7)):
                lo = rng.uniform(0, 0.6, 2)
                hi = lo + rng.uniform(0.1, 0.4, 2)
                preds.append(([*lo, *hi], int(rng.integers(0, 2)), float(rng.uniform())))
            for _ in range(rng.integers(1, 4)):
                lo = rng.uniform(0, 0.6, 2)
                hi = lo + rng.uniform(0.1, 0.4, 2)
                gts.append(([*lo, *hi], int(rng.integers(0, 2))))
            images.append(make_image(preds, gts))
        for thr in (0.5, 0.75):
            for cls in (0, 1):
                expected = reference_ap(images, cls, thr)
                if expected is None:
                    continue
                tp, fp, n_gt = mx._class_pr(images, cls, thr)
                got, _ = mx._ap_from_flags(tp, fp, n_gt)
                assert got == pytest.approx(expected, abs=1e-9)


def test_ap_invariant_under_monotone_score_transform():
    rng = np.random.default_rng(1)
    images = []
    for _ in range(3):
        preds = []
        gts = []
        for _ in range(5):
            lo = rng.uniform(0, 0.6, 2)
            hi = lo + rng.uniform(0.1, 0.4, 2)
            preds.append(([*lo, *hi], int(rng.integers(0, 2)), float(rng.uniform(0.1, 0.9))))
        for _ in range(2):
            lo = rng.uniform(0, 0.6, 2)
            hi = lo + rng.uniform(0.1, 0.4, 2)
            gts.append(([*lo, *hi], int(rng.integers(0, 2))))
        images.append(make_image(preds, gts))
    base = mx.average_precision(images)
    transformed = [
        dataclasses.replace(im, pred_scores=np.tanh(3 * im.pred_scores) + 1.0)
        for im in images
    ]
    assert mx.average_precision(transformed) == pytest.approx(base, abs=1e-12)


def test_duplicate_rate_cases():
    one_per_gt = make_image([(UNIT, 0, 0.9)], [(UNIT, 0)])
    assert mx.duplicate_rate([one_per_gt]) == 0.0

    stacked = make_image(
        [(UNIT, 0, 0.9), (UNIT, 0, 0.8), (UNIT, 0, 0.7)], [(UNIT, 0)]
    )
    assert mx.duplicate_rate([stacked]) == 2.0

    weak = make_image(
        [(UNIT, 0, 0.2), (UNIT, 0, 0.1), (UNIT, 0, 0.25)], [(UNIT, 0)]
    )
    assert mx.duplicate_rate([weak]) == 0.0

    no_gt = make_image([(UNIT, 0, 0.9)], [])
    assert mx.duplicate_rate([no_gt]) == 0.0


def test_flops_linear_in_n_for_ca():
    cfg = DetectorConfig()
    a = mx.decoder_flops(64, cfg)
    b = mx.decoder_flops(128, cfg)
    assert b.locate_ca == 2 * a.locate_ca
    assert b.dedup_ca == 2 * a.dedup_ca


def test_flops_quadratic_in_n_for_sa():
    cfg = DetectorConfig()
    a = mx.decoder_flops(64, cfg)
    b = mx.decoder_flops(128, cfg)
    assert b.dedup_sa == 4 * a.dedup_sa


def test_flops_no_sa_blocks():
    cfg = DetectorConfig(sa_blocks=0)
    f = mx.decoder_flops(128, cfg)
    assert f.dedup_sa == 0 and f.dedup_sa_proj == 0 and f.dedup_ffn == 0
    assert f.total > 0


def test_flops_strictly_increasing():
    cfg = DetectorConfig()
    base = mx.decoder_flops(64, cfg).total
    assert mx.decoder_flops(65, cfg).total > base
    assert mx.decoder_flops(64, dataclasses.replace(cfg, sa_blocks=3)).total > base
    assert mx.decoder_flops(64, dataclasses.replace(cfg, locate_layers=5)).total > base
    assert mx.decoder_flops(64, dataclasses.replace(cfg, dedup_layers=3)).total > base


def test_bucket_stats_single_bucket():
    ims = [make_image([(UNIT, 0, 0.9)], [(UNIT, 0)], n_queries=7) for _ in range(3)]
    rows = mx.bucket_stats(ims)
    assert len(rows) == 1
    assert rows[0]["bucket"] == "1-5"
    assert rows[0]["mean_query_count"] == 7.0
    assert rows[0]["n_images"] == 3


def test_bucket_stats_empty_bucket_omitted():
    few = make_image([(UNIT, 0, 0.9)], [(UNIT, 0)], n_queries=3)
    many_gts = [([0.05 * i, 0.05 * i, 0.05 * i + 0.04, 0.05 * i + 0.04], 0) for i in range(12)]
    many = make_image([], many_gts, n_queries=30)
    rows = mx.bucket_stats([few, many])
    assert [r["bucket"] for r in rows] == ["1-5", "11-15"]


def test_bucket_counts_match_direct_enumeration():
    rng = np.random.default_rng(2)
    images = []
    for _ in range(30):
        n = int(rng.integers(1, 14))
        gts = []
        for _ in range(n):
            lo = rng.uniform(0, 0.8, 2)
            gts.append(([*lo, *(lo + 0.1)], 0))
        images.append(make_image([], gts, n_queries=int(rng.integers(1, 40))))
    rows = mx.bucket_stats(images)
    for row in rows:
        lo = int(row["bucket"].split("-")[0])
        members = [
            im for im in images if lo <= len(im.gt_classes) <= lo + mx.BUCKET_STEP - 1
        ]
        assert row["n_images"] == len(members)
        assert row["mean_query_count"] == pytest.approx(
            np.mean([im.n_queries for im in members])
        )


def test_report_serialization_roundtrip():
    im = make_image([(UNIT, 0, 0.9)], [(UNIT, 0)], n_queries=4)
    report = mx.evaluate([im])
    blob = report.to_json()
    assert '"ap50": 1.0' in blob
    csv_text = report.to_csv()
    assert "ap50,1.0" in csv_text
