"""Experiment presets: each maps to a list of (variant name, detector
config overrides) trained under a shared budget and compared on the same
eval data."""

from __future__ import annotations

import dataclasses

from .config import DetectorConfig


PRESETS: dict[str, list[tuple[str, dict]]] = {
    # remove the self-attention blocks from the dedup stage
    "no-sa": [
        ("default", {}),
        ("no-sa", {"sa_blocks": 0}),
    ],
    # no self-attention, but class-wise NMS at eval time
    "binary-nms": [
        ("default", {}),
        ("no-sa", {"sa_blocks": 0}),
        ("binary-nms", {"sa_blocks": 0, "nms_eval": True}),
    ],
    # run self-attention before cross-attention inside dedup layers
    "sa-first": [
        ("default", {}),
        ("sa-first", {"sa_first": True}),
    ],
    # let dedup-stage gradients flow back into the locating stage
    "no-sgq": [
        ("default", {}),
        ("no-sgq", {"stop_grad_boundary": False}),
    ],
    # ground-truth replication sweep
    "k-sweep": [(f"k{k}", {"replication": k}) for k in (1, 3, 6, 9)],
    # how the six decoder layers split between the two stages
    "blp-dp-split": [
        (f"split-{t1}-{t2}", {"locate_layers": t1, "dedup_layers": t2})
        for t1, t2 in ((1, 5), (2, 4), (3, 3), (4, 2), (5, 1))
    ],
    # fixed-size top-N selection instead of threshold selection
    "fixed-query": [
        ("default", {}),
        ("fixed-query", {"fixed_query_count": 64}),
    ],
}


def preset_variants(name: str, base: DetectorConfig) -> list[tuple[str, DetectorConfig]]:
    if name not in PRESETS:
        raise KeyError(f"unknown preset '{name}'; choose from {sorted(PRESETS)}")
    return [
        (variant, dataclasses.replace(base, **overrides))
        for variant, overrides in PRESETS[name]
    ]
