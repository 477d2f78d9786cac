"""Configuration dataclasses, JSON round-tripping, and config hashing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .losses import LossWeights, SizePriorParams
from .matching import CostWeights


@dataclass(frozen=True)
class DetectorConfig:
    # token grid and widths
    grid: int = 14
    channels_in: int = 3
    channels: int = 64
    heads: int = 4
    encoder_blocks: int = 2
    ffn_hidden: int = 128
    sa_block_hidden: int = 64
    # decoder structure: locating stage (cross-attention only) then dedup
    # stage (cross-attention + sa_blocks self-attention blocks per layer)
    locate_layers: int = 4
    dedup_layers: int = 2
    sa_blocks: int = 2
    sa_first: bool = False  # ablation: run the SA blocks before the CA step
    stop_grad_boundary: bool = True  # stop query/box gradients between stages
    # query selection
    score_threshold: float = 0.02
    pool_cap: int = 128
    fixed_query_count: int | None = None  # ablation: fixed top-N selection
    # supervision
    replication: int = 6  # queries per ground truth in one-to-many matching
    num_classes: int = 5
    size_prior: SizePriorParams = field(default_factory=SizePriorParams)
    locate_cost: CostWeights = field(default_factory=lambda: CostWeights(0.2, 5.0, 2.0))
    dedup_cost: CostWeights = field(default_factory=lambda: CostWeights(2.0, 2.0, 2.0))
    loss: LossWeights = field(default_factory=LossWeights)
    # eval-time NMS (off by default; the dedup stage does this job)
    nms_eval: bool = False
    nms_iou: float = 0.5
    layernorm_eps: float = 1e-5
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.locate_layers < 1 or self.dedup_layers < 1:
            raise ValueError("both decoder stages need at least one layer")
        if self.sa_blocks < 0:
            raise ValueError("sa_blocks must be >= 0")
        if not 0.0 < self.score_threshold < 1.0:
            raise ValueError("score_threshold must lie in (0, 1)")
        if self.channels % self.heads != 0:
            raise ValueError("channels must be divisible by heads")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def n_tokens(self) -> int:
        return self.grid * self.grid


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    clip_norm: float = 0.1
    # step-decay late in the run, the usual detection recipe
    lr_drop_fraction: float = 0.8
    lr_drop_factor: float = 0.1


@dataclass(frozen=True)
class RunConfig:
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    iterations: int = 3000
    batch_size: int = 2
    eval_interval: int = 500
    train_data: str = ""
    eval_data: str = ""
    out_dir: str = "runs/default"
    preset: str = "default"
    seed: int = 0


def _from_dict(cls, data: dict):
    kwargs = {}
    nested = {
        "detector": DetectorConfig,
        "optimizer": OptimizerConfig,
        "size_prior": SizePriorParams,
        "locate_cost": CostWeights,
        "dedup_cost": CostWeights,
        "loss": LossWeights,
    }
    valid = {f.name for f in fields(cls)}
    unknown = set(data) - valid
    if unknown:
        raise ValueError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    for key, value in data.items():
        if key in nested and isinstance(value, dict):
            kwargs[key] = _from_dict(nested[key], value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def detector_config_from_dict(data: dict) -> DetectorConfig:
    return _from_dict(DetectorConfig, data)


def run_config_from_dict(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data)


def load_run_config(path: str) -> RunConfig:
    with open(path) as fh:
        return run_config_from_dict(json.load(fh))


def config_to_json(cfg) -> str:
    return json.dumps(asdict(cfg), indent=2, sort_keys=True)


def config_hash(cfg: DetectorConfig) -> str:
    canonical = json.dumps(asdict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]
