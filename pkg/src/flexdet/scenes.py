"""Procedural detection scenes: filled rectangles on a token grid whose
fill pattern encodes the class, plus JSONL serialization.

Rendering is a pure function of (spec, seed, scene index), so generation
is reproducible and parallelizable per index.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from .boxes import BoxCxCyWH, cxcywh_to_xyxy, iou_matrix


class GenerationError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    n_scenes: int = 500
    # weight per object count, starting at 1 object
    count_weights: tuple[float, ...] = (1.0,) * 10
    size_range: tuple[float, float] = (0.12, 0.3)
    num_classes: int = 5
    grid: int = 14
    channels: int = 3
    noise: float = 0.05
    max_overlap: float = 0.3
    # cap on the accumulated fraction of an object later objects may paint
    # over; keeps every object's dominant fill visible
    max_covered: float = 0.35
    image_h: float = 256.0
    image_w: float = 256.0
    seed: int = 0

    @staticmethod
    def dense(n_scenes: int = 200, seed: int = 0) -> "DatasetSpec":
        """Crowded preset: more objects, smaller boxes, more overlap."""
        return DatasetSpec(
            n_scenes=n_scenes,
            count_weights=(0.0,) * 4 + (1.0,) * 21,
            size_range=(0.07, 0.16),
            max_overlap=0.5,
            max_covered=0.5,
            seed=seed,
        )


@dataclass
class Scene:
    id: int
    image_grid: np.ndarray  # [grid, grid, channels] float32
    gt: list[tuple[int, BoxCxCyWH]] = field(default_factory=list)
    image_h: float = 256.0
    image_w: float = 256.0

    def gt_classes(self) -> np.ndarray:
        return np.array([c for c, _ in self.gt], dtype=np.int64)

    def gt_boxes(self) -> np.ndarray:
        if not self.gt:
            return np.zeros((0, 4))
        return np.stack([b.as_array() for _, b in self.gt])


# class patterns keyed by cell parity (py % 2, px % 2); 3-channel values.
# solid fills for the first three classes, a checkerboard and stripes after
# that. Every parity-local color is unique across classes, so even a
# single interior cell identifies the class.
_PATTERNS = np.array(
    [
        [[[1, 0, 0]] * 2] * 2,
        [[[0, 1, 0]] * 2] * 2,
        [[[0, 0, 1]] * 2] * 2,
        [[[1, 1, 0], [1, 0, 1]], [[1, 0, 1], [1, 1, 0]]],  # yellow/magenta checker
        [[[0, 1, 1], [0, 1, 1]], [[1, 1, 1], [1, 1, 1]]],  # cyan/white stripes
    ],
    dtype=np.float64,
)


def pattern_value(class_id: int, px: int, py: int, channels: int) -> np.ndarray:
    base = _PATTERNS[class_id % len(_PATTERNS), py % 2, px % 2]
    if channels == 3:
        return base
    reps = int(np.ceil(channels / 3))
    return np.tile(base, reps)[:channels]


def pattern_grid(class_id: int, grid: int, channels: int) -> np.ndarray:
    """[grid, grid, channels] tiling of the class pattern over cell parity."""
    yy, xx = np.meshgrid(np.arange(grid) % 2, np.arange(grid) % 2, indexing="ij")
    base = _PATTERNS[class_id % len(_PATTERNS)][yy, xx]
    if channels == 3:
        return base
    reps = int(np.ceil(channels / 3))
    return np.tile(base, (1, 1, reps))[:, :, :channels]


def render_scene(spec: DatasetSpec, index: int) -> Scene:
    """Generate scene ``index``: sample an object count from the spec
    weights, place boxes by rejection sampling under the pairwise-overlap
    cap, and rasterize with fractional cell coverage."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, index]))
    weights = np.asarray(spec.count_weights, dtype=np.float64)
    if weights.sum() <= 0:
        raise GenerationError("count_weights must have positive mass")
    count = int(rng.choice(np.arange(1, len(weights) + 1), p=weights / weights.sum()))

    boxes: list[np.ndarray] = []
    covered: list[float] = []  # accumulated occluded fraction per object
    tries = 0
    while len(boxes) < count:
        tries += 1
        if tries > 200 * count:
            raise GenerationError(
                f"could not place {count} objects under overlap cap "
                f"{spec.max_overlap} (scene {index})"
            )
        w, h = rng.uniform(spec.size_range[0], spec.size_range[1], size=2)
        cx = rng.uniform(w / 2, 1.0 - w / 2)
        cy = rng.uniform(h / 2, 1.0 - h / 2)
        cand = np.array([cx, cy, w, h])
        if boxes:
            cand_xy = cxcywh_to_xyxy(cand)[None]
            prev_xy = cxcywh_to_xyxy(np.stack(boxes))
            if iou_matrix(cand_xy, prev_xy).max() > spec.max_overlap:
                continue
            lo = np.maximum(cand_xy[0, :2], prev_xy[:, :2])
            hi = np.minimum(cand_xy[0, 2:], prev_xy[:, 2:])
            inter = np.clip(hi - lo, 0.0, None).prod(axis=-1)
            areas = (prev_xy[:, 2:] - prev_xy[:, :2]).prod(axis=-1)
            extra = inter / areas  # the candidate paints over earlier boxes
            if np.any(np.asarray(covered) + extra > spec.max_covered):
                continue
            for i, e in enumerate(extra):
                covered[i] += float(e)
        boxes.append(cand)
        covered.append(0.0)

    classes = rng.integers(0, spec.num_classes, size=count)
    grid = spec.grid
    image = rng.uniform(0.0, spec.noise, size=(grid, grid, spec.channels))
    cell_lo = np.arange(grid) / grid
    cell_hi = cell_lo + 1.0 / grid
    for cls, box in zip(classes, boxes):
        x1, y1, x2, y2 = cxcywh_to_xyxy(box)
        ox = np.clip(np.minimum(x2, cell_hi) - np.maximum(x1, cell_lo), 0.0, None)
        oy = np.clip(np.minimum(y2, cell_hi) - np.maximum(y1, cell_lo), 0.0, None)
        cov = np.outer(oy, ox) * grid * grid  # fraction of each cell covered
        pattern = pattern_grid(int(cls), grid, spec.channels)
        image = image * (1.0 - cov[..., None]) + pattern * cov[..., None]
    if spec.noise > 0:
        image += rng.normal(0.0, spec.noise, size=image.shape)
        image = np.clip(image, 0.0, 1.0)

    gt = [(int(c), BoxCxCyWH(*b)) for c, b in zip(classes, boxes)]
    return Scene(
        id=index,
        image_grid=image.astype(np.float32),
        gt=gt,
        image_h=spec.image_h,
        image_w=spec.image_w,
    )


def generate(spec: DatasetSpec):
    """Stream of scenes for the whole spec."""
    for i in range(spec.n_scenes):
        yield render_scene(spec, i)


def classify_patch(scene: Scene, box: BoxCxCyWH, num_classes: int) -> int:
    """Nearest-template rule: each covered cell votes for the class whose
    pattern color at that cell parity is closest, majority wins. Per-cell
    votes keep partial occlusion or edge dilution from flipping the call."""
    grid = scene.image_grid.shape[0]
    channels = scene.image_grid.shape[2]
    x1, y1, x2, y2 = box.to_xyxy().as_array()

    def votes(require_center: bool) -> np.ndarray:
        tally = np.zeros(num_classes)
        for py in range(grid):
            for px in range(grid):
                ox = min(x2, (px + 1) / grid) - max(x1, px / grid)
                oy = min(y2, (py + 1) / grid) - max(y1, py / grid)
                if ox <= 0 or oy <= 0:
                    continue
                cx, cy = (px + 0.5) / grid, (py + 0.5) / grid
                if require_center and not (x1 <= cx <= x2 and y1 <= cy <= y2):
                    continue
                weight = ox * oy * grid * grid  # fraction of the cell covered
                cell = scene.image_grid[py, px]
                dists = [
                    ((cell - pattern_value(cls, px, py, channels)) ** 2).sum()
                    for cls in range(num_classes)
                ]
                tally[int(np.argmin(dists))] += weight
        return tally

    tally = votes(True)
    if tally.sum() == 0:
        tally = votes(False)  # boxes thinner than a cell: take touching cells
    return int(tally.argmax())


# ---------------------------------------------------------------------------
# serialization: one JSON object per line; the grid travels as base-64
# little-endian float32, so round-trips are bit-exact


def scene_to_record(scene: Scene) -> dict:
    grid = np.ascontiguousarray(scene.image_grid.astype("<f4"))
    return {
        "id": scene.id,
        "gt": [[c, b.cx, b.cy, b.w, b.h] for c, b in scene.gt],
        "shape": list(grid.shape),
        "grid": base64.b64encode(grid.tobytes()).decode("ascii"),
        "image_h": scene.image_h,
        "image_w": scene.image_w,
    }


def scene_from_record(record: dict) -> Scene:
    shape = tuple(record["shape"])
    raw = base64.b64decode(record["grid"])
    grid = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    gt = [(int(e[0]), BoxCxCyWH(*e[1:])) for e in record["gt"]]
    return Scene(
        id=int(record["id"]),
        image_grid=grid,
        gt=gt,
        image_h=float(record["image_h"]),
        image_w=float(record["image_w"]),
    )


def save(scenes, path: str) -> None:
    with open(path, "w") as fh:
        for scene in scenes:
            fh.write(json.dumps(scene_to_record(scene), separators=(",", ":")))
            fh.write("\n")


def load(path: str) -> list[Scene]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(scene_from_record(json.loads(line)))
            except (KeyError, ValueError, TypeError) as err:
                raise DatasetFormatError(f"{path}:{lineno}: bad scene record: {err}") from err
    return out
