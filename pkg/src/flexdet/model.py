"""The detector: a tiny token encoder, threshold-based flexible query
selection, and a two-stage decoder.

Stage one ("locate") runs cross-attention-only layers so many queries can
gather box evidence; stage two ("dedup") adds masked self-attention blocks
among the active queries so duplicates suppress each other. Query features
and box states are stop-gradiented at the stage boundary so the one-to-one
losses of stage two cannot disturb stage one's one-to-many training.

All tensors are batched [batch, rows, channels]; query alignment pads each
image to the batch-max query count with its lowest-score tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Parameter, Tensor
from .config import DetectorConfig


def _np_dtype(name: str):
    return np.float32 if name == "float32" else np.float64


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng, dtype, bias: bool = True):
        bound = np.sqrt(6.0 / (n_in + n_out))
        self.w = Parameter(rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype))
        self.b = Parameter(np.zeros(n_out, dtype=dtype)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.matmul(x, self.w)
        if self.b is not None:
            out = ad.add(out, self.b)
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, dtype, eps: float):
        self.gain = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


class FeedForward(Module):
    """Two linear layers around a smooth rectifier."""

    def __init__(self, dim: int, hidden: int, rng, dtype):
        self.lin1 = Linear(dim, hidden, rng, dtype)
        self.lin2 = Linear(hidden, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(ad.silu(self.lin1(x)))


class MultiHeadAttention(Module):
    """Scaled dot-product attention over batched inputs [batch, rows, dim];
    ``key_mask`` rows marked False are excluded from every query's keys."""

    def __init__(self, dim: int, heads: int, rng, dtype):
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, rng, dtype)
        self.wk = Linear(dim, dim, rng, dtype)
        self.wv = Linear(dim, dim, rng, dtype)
        self.wo = Linear(dim, dim, rng, dtype)

    def __call__(self, q_in: Tensor, kv_in: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        b, n, _ = q_in.shape
        m = kv_in.shape[1]
        q = self._split(self.wq(q_in), b, n)
        k = self._split(self.wk(kv_in), b, m)
        v = self._split(self.wv(kv_in), b, m)
        scale = 1.0 / np.sqrt(self.head_dim)
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), ad._coerce(scale))
        if key_mask is not None:
            bias = np.where(key_mask, 0.0, -1e9).astype(scores.dtype)
            scores = ad.add(scores, Tensor(bias[:, None, None, :]))
        attn = ad.softmax(scores, axis=-1)
        mixed = ad.matmul(attn, v)  # [b, heads, n, head_dim]
        merged = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (b, n, -1))
        return self.wo(merged)

    def _split(self, x: Tensor, b: int, rows: int) -> Tensor:
        return ad.transpose(ad.reshape(x, (b, rows, self.heads, self.head_dim)), (0, 2, 1, 3))


class EncoderBlock(Module):
    def __init__(self, cfg: DetectorConfig, rng, dtype):
        self.attn = MultiHeadAttention(cfg.channels, cfg.heads, rng, dtype)
        self.ln_attn = LayerNorm(cfg.channels, dtype, cfg.layernorm_eps)
        self.ffn = FeedForward(cfg.channels, cfg.ffn_hidden, rng, dtype)
        self.ln_ffn = LayerNorm(cfg.channels, dtype, cfg.layernorm_eps)

    def __call__(self, x: Tensor) -> Tensor:
        u = self.ln_attn(ad.add(x, self.attn(x, x)))
        return self.ln_ffn(ad.add(self.ffn(u), u))


class LocateLayer(Module):
    """Cross-attention-only decoder layer: queries read the encoder map,
    then a feed-forward mixes channels. No query-to-query interaction."""

    def __init__(self, cfg: DetectorConfig, rng, dtype):
        self.ca = MultiHeadAttention(cfg.channels, cfg.heads, rng, dtype)
        self.ln_ca = LayerNorm(cfg.channels, dtype, cfg.layernorm_eps)
        self.mlp = FeedForward(cfg.channels, cfg.ffn_hidden, rng, dtype)
        self.ln_mlp = LayerNorm(cfg.channels, dtype, cfg.layernorm_eps)

    def __call__(self, q: Tensor, tokens: Tensor, active: np.ndarray) -> Tensor:
        u = self.ln_ca(ad.add(q, self.ca(q, tokens)))
        return self.ln_mlp(ad.add(self.mlp(u), u))


class SelfAttentionBlock(Module):
    def __init__(self, cfg: DetectorConfig, rng, dtype):
        self.sa = MultiHeadAttention(cfg.channels, cfg.heads, rng, dtype)
        self.ln = LayerNorm(cfg.channels, dtype, cfg.layernorm_eps)
        self.mlp = FeedForward(cfg.channels, cfg.sa_block_hidden, rng, dtype)

    def __call__(self, q: Tensor, active: np.ndarray) -> Tensor:
        return self.mlp(self.ln(ad.add(q, self.sa(q, q, key_mask=active))))


class DedupLayer(Module):
    """Cross-attention refinement followed by self-attention blocks over
    the active queries only (padding queries are masked out of the keys)."""

    def __init__(self, cfg: DetectorConfig, rng, dtype):
        self.ca = MultiHeadAttention(cfg.channels, cfg.heads, rng, dtype)
        self.ln_ca = LayerNorm(cfg.channels, dtype, cfg.layernorm_eps)
        self.blocks = [SelfAttentionBlock(cfg, rng, dtype) for _ in range(cfg.sa_blocks)]
        self.sa_first = cfg.sa_first

    def __call__(self, q: Tensor, tokens: Tensor, active: np.ndarray) -> Tensor:
        if self.sa_first:
            for block in self.blocks:
                q = block(q, active)
            return self.ln_ca(ad.add(q, self.ca(q, tokens)))
        q = self.ln_ca(ad.add(q, self.ca(q, tokens)))
        for block in self.blocks:
            q = block(q, active)
        return q


@dataclass
class EncoderBatch:
    tokens: Tensor  # [batch, n_tokens, channels]
    class_logits: Tensor  # [batch, n_tokens, num_classes]
    init_box_logit: Tensor  # [batch, n_tokens, 4], inverse-sigmoid space
    positions: np.ndarray  # [n_tokens, 2] grid cell centers
    scores: np.ndarray  # [batch, n_tokens] detached max-class score


@dataclass
class QuerySelection:
    features: Tensor  # [batch, n_q, channels]
    box_logits: Tensor  # [batch, n_q, 4]
    active: np.ndarray  # [batch, n_q] False marks padding queries
    source_tokens: np.ndarray  # [batch, n_q] encoder token index
    scores: np.ndarray  # [batch, n_q]

    @property
    def n_queries(self) -> int:
        return self.active.shape[1]

    def active_counts(self) -> np.ndarray:
        return self.active.sum(axis=1)


@dataclass
class LayerOutput:
    stage: str  # "locate" or "dedup"
    index: int
    class_logits: Tensor  # [batch, n_q, num_classes]
    box_logits: Tensor  # [batch, n_q, 4] cumulative box state

    def boxes(self, image: int) -> np.ndarray:
        return ad.sigmoid_np(self.box_logits.values[image])


@dataclass
class ModelOutput:
    encoder: EncoderBatch
    queries: QuerySelection
    layers: list[LayerOutput]


def image_rows(t: Tensor, image: int) -> Tensor:
    """Differentiable [rows, cols] view of one batch element."""
    sliced = ad.slice_axis(t, 0, image, image + 1)
    return ad.reshape(sliced, t.shape[1:])


class Detector(Module):
    def __init__(self, cfg: DetectorConfig):
        self.cfg = cfg
        dtype = _np_dtype(cfg.dtype)
        rng = np.random.default_rng(cfg.seed)
        self.embed = Linear(cfg.channels_in, cfg.channels, rng, dtype)
        self.positions = grid_positions(cfg.grid)
        self._pos_enc = sinusoidal_encoding(self.positions, cfg.channels).astype(dtype)
        self.encoder_blocks = [EncoderBlock(cfg, rng, dtype) for _ in range(cfg.encoder_blocks)]
        self.enc_class_head = Linear(cfg.channels, cfg.num_classes, rng, dtype)
        self.enc_box_head = FeedForward(cfg.channels, cfg.channels, rng, dtype)
        self.enc_box_out = Linear(cfg.channels, 4, rng, dtype)

        self.locate_layers = [LocateLayer(cfg, rng, dtype) for _ in range(cfg.locate_layers)]
        self.locate_class_head = Linear(cfg.channels, cfg.num_classes, rng, dtype)
        self.locate_box_head = Linear(cfg.channels, 4, rng, dtype)
        self.dedup_layers = [DedupLayer(cfg, rng, dtype) for _ in range(cfg.dedup_layers)]
        self.dedup_class_head = Linear(cfg.channels, cfg.num_classes, rng, dtype)
        self.dedup_box_head = Linear(cfg.channels, 4, rng, dtype)

        # box refinement starts as the identity: offset heads emit zero
        # until trained, so early layers cannot wreck the initial boxes
        for head in (self.locate_box_head, self.dedup_box_head, self.enc_box_out):
            head.w.values[:] = 0.0
            head.b.values[:] = 0.0
        # initial sizes decode to a small-box prior instead of half the image
        self.enc_box_out.b.values[2:] = -1.75
        # class scores start near 0.05: above the selection threshold (the
        # early pool stays large) but close enough that unsupported tokens
        # sink below it once the negative pressure accumulates
        for head in (self.enc_class_head, self.locate_class_head, self.dedup_class_head):
            head.w.values *= 0.1
            head.b.values[:] = -2.9

    # ------------------------------------------------------------------
    def encode(self, images: list[np.ndarray]) -> EncoderBatch:
        cfg = self.cfg
        dtype = _np_dtype(cfg.dtype)
        stacked = np.stack(
            [np.asarray(img, dtype=dtype).reshape(cfg.n_tokens, cfg.channels_in) for img in images]
        )
        x = ad.add(self.embed(Tensor(stacked)), Tensor(self._pos_enc))
        for block in self.encoder_blocks:
            x = block(x)
        class_logits = self.enc_class_head(x)
        box_raw = self.enc_box_out(ad.silu(self.enc_box_head(x)))
        init_box_logit = self._decode_initial_boxes(box_raw)
        scores = ad.sigmoid_np(class_logits.values).max(axis=-1)
        return EncoderBatch(
            tokens=x,
            class_logits=class_logits,
            init_box_logit=init_box_logit,
            positions=self.positions,
            scores=scores,
        )

    def _decode_initial_boxes(self, box_raw: Tensor) -> Tensor:
        """Center = token position plus a cell-bounded offset; size comes
        straight through a sigmoid. The result is stored in inverse-sigmoid
        space so layer refinements stay additive and the box stays valid."""
        cfg = self.cfg
        span = 0.98 / cfg.grid  # keep centers strictly inside (0, 1)
        off = ad.sigmoid(ad.slice_axis(box_raw, -1, 0, 2))
        pos = Tensor(self.positions.astype(box_raw.dtype))
        center = ad.add(pos, ad.mul(ad.sub(off, ad._coerce(0.5)), ad._coerce(span)))
        center_logit = ad.sub(ad.log(center), ad.log(ad.sub(ad._coerce(1.0), center)))
        size_logit = ad.slice_axis(box_raw, -1, 2, 4)
        return ad.concat([center_logit, size_logit], axis=-1)

    # ------------------------------------------------------------------
    def select_queries(
        self, enc: EncoderBatch, score_threshold: float | None = None
    ) -> QuerySelection:
        """Threshold selection over token scores with batch alignment:
        every image gets the batch-max query count, short images padded
        with their lowest-score tokens (marked inactive)."""
        cfg = self.cfg
        thr = cfg.score_threshold if score_threshold is None else score_threshold
        batch = enc.scores.shape[0]
        chosen: list[np.ndarray] = []
        for b in range(batch):
            row = enc.scores[b]
            order = np.argsort(-row, kind="stable")
            if cfg.fixed_query_count is not None:
                chosen.append(order[: min(cfg.fixed_query_count, len(order))])
                continue
            pool = order[row[order] >= thr]
            if pool.size == 0:
                pool = order[:1]
            chosen.append(pool[: cfg.pool_cap])

        n_q = max(len(c) for c in chosen)
        active = np.zeros((batch, n_q), dtype=bool)
        source = np.zeros((batch, n_q), dtype=np.int64)
        scores = np.zeros((batch, n_q))
        for b, act_idx in enumerate(chosen):
            idx = act_idx
            if len(idx) < n_q:
                ascending = np.argsort(enc.scores[b], kind="stable")
                taken = set(idx.tolist())
                pads = [t for t in ascending if t not in taken][: n_q - len(idx)]
                idx = np.concatenate([idx, np.array(pads, dtype=np.int64)])
            active[b, : len(act_idx)] = True
            source[b] = idx
            scores[b] = enc.scores[b, idx]
        features = ad.take_rows_batched(enc.tokens, source)
        box_logits = ad.take_rows_batched(enc.init_box_logit, source)
        return QuerySelection(features, box_logits, active, source, scores)

    # ------------------------------------------------------------------
    def forward(
        self, images: list[np.ndarray], score_threshold: float | None = None
    ) -> ModelOutput:
        enc = self.encode(images)
        queries = self.select_queries(enc, score_threshold)
        feats = queries.features
        box_logits = queries.box_logits
        layers: list[LayerOutput] = []

        for li, layer in enumerate(self.locate_layers):
            feats = layer(feats, enc.tokens, queries.active)
            box_logits = ad.add(box_logits, self.locate_box_head(feats))
            layers.append(LayerOutput("locate", li, self.locate_class_head(feats), box_logits))

        if self.cfg.stop_grad_boundary:
            feats = ad.stop_gradient(feats)
            box_logits = ad.stop_gradient(box_logits)

        for li, layer in enumerate(self.dedup_layers):
            feats = layer(feats, enc.tokens, queries.active)
            box_logits = ad.add(box_logits, self.dedup_box_head(feats))
            layers.append(LayerOutput("dedup", li, self.dedup_class_head(feats), box_logits))

        return ModelOutput(encoder=enc, queries=queries, layers=layers)

    def parameter_count(self) -> int:
        return sum(p.values.size for _, p in self.named_parameters())


def grid_positions(grid: int) -> np.ndarray:
    """Normalized centers of the token grid, row-major [grid*grid, 2]."""
    centers = (np.arange(grid) + 0.5) / grid
    yy, xx = np.meshgrid(centers, centers, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def sinusoidal_encoding(positions: np.ndarray, channels: int) -> np.ndarray:
    """Fixed 2-d sine/cosine features; half the channels for each axis."""
    half = channels // 2
    quarter = half // 2
    freqs = 10000.0 ** (-np.arange(quarter) / max(quarter, 1))
    out = np.zeros((positions.shape[0], channels))
    for axis in range(2):
        angle = positions[:, axis : axis + 1] * freqs[None, :] * 2 * np.pi
        out[:, axis * half : axis * half + quarter] = np.sin(angle)
        out[:, axis * half + quarter : (axis + 1) * half] = np.cos(angle)
    return out


def final_detections(
    output: ModelOutput, image: int, nms_eval: bool = False, nms_iou: float = 0.5
):
    """(boxes_xyxy, class_ids, scores) from the last dedup layer's active
    queries; optional class-wise NMS for the ablation configs."""
    from .boxes import cxcywh_to_xyxy, nms

    last = output.layers[-1]
    act = np.flatnonzero(output.queries.active[image])
    boxes = last.boxes(image)[act]
    probs = ad.sigmoid_np(last.class_logits.values[image][act])
    classes = probs.argmax(axis=1)
    scores = probs.max(axis=1)
    boxes_xyxy = cxcywh_to_xyxy(boxes)
    if nms_eval and len(scores):
        keep: list[int] = []
        for c in np.unique(classes):
            members = np.flatnonzero(classes == c)
            kept = nms(boxes_xyxy[members], scores[members], nms_iou)
            keep.extend(members[kept].tolist())
        keep.sort()
        return boxes_xyxy[keep], classes[keep], scores[keep]
    return boxes_xyxy, classes, scores
