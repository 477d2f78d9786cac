"""Wall-clock comparison of the two-stage decoder against a conventional
decoder that runs self-attention + cross-attention + feed-forward in every
layer, at equal width and query count."""

from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Tensor
from .config import DetectorConfig
from .model import DedupLayer, FeedForward, LayerNorm, LocateLayer, MultiHeadAttention, _np_dtype


class BaselineLayer(Module):
    """Conventional decoder layer: SA, then CA, then FFN."""

    def __init__(self, cfg: DetectorConfig, rng, dtype):
        self.sa = MultiHeadAttention(cfg.channels, cfg.heads, rng, dtype)
        self.ln_sa = LayerNorm(cfg.channels, dtype, cfg.layernorm_eps)
        self.ca = MultiHeadAttention(cfg.channels, cfg.heads, rng, dtype)
        self.ln_ca = LayerNorm(cfg.channels, dtype, cfg.layernorm_eps)
        self.ffn = FeedForward(cfg.channels, cfg.ffn_hidden, rng, dtype)
        self.ln_ffn = LayerNorm(cfg.channels, dtype, cfg.layernorm_eps)

    def __call__(self, q: Tensor, tokens: Tensor, active: np.ndarray) -> Tensor:
        q = self.ln_sa(ad.add(q, self.sa(q, q, key_mask=active)))
        q = self.ln_ca(ad.add(q, self.ca(q, tokens)))
        return self.ln_ffn(ad.add(self.ffn(q), q))


def _time_stack(layers, q0: Tensor, tokens: Tensor, active, iters: int, warmup: int):
    def run():
        q = q0
        for layer in layers:
            q = layer(q, tokens, active)
        return q

    with ad.no_grad():
        for _ in range(warmup):
            run()
        samples = np.empty(iters)
        for i in range(iters):
            t0 = time.perf_counter()
            run()
            samples[i] = time.perf_counter() - t0
    return float(samples.mean() * 1e3), float(samples.std() * 1e3)


def bench_decoder(
    cfg: DetectorConfig, n_queries: int = 128, iters: int = 100, warmup: int = 10
) -> dict:
    """Average per-forward decoder time (ms, with std over iterations) for
    the two-stage stack and the conventional baseline at equal query count,
    plus their ratio (baseline / two-stage)."""
    dtype = _np_dtype(cfg.dtype)
    rng = np.random.default_rng(cfg.seed)
    ours = [LocateLayer(cfg, rng, dtype) for _ in range(cfg.locate_layers)] + [
        DedupLayer(cfg, rng, dtype) for _ in range(cfg.dedup_layers)
    ]
    depth = cfg.locate_layers + cfg.dedup_layers
    baseline = [BaselineLayer(cfg, rng, dtype) for _ in range(depth)]

    q0 = Tensor(rng.normal(size=(1, n_queries, cfg.channels)).astype(dtype))
    tokens = Tensor(rng.normal(size=(1, cfg.n_tokens, cfg.channels)).astype(dtype))
    active = np.ones((1, n_queries), dtype=bool)

    ours_ms, ours_std = _time_stack(ours, q0, tokens, active, iters, warmup)
    base_ms, base_std = _time_stack(baseline, q0, tokens, active, iters, warmup)
    return {
        "n_queries": n_queries,
        "iters": iters,
        "ours_ms": ours_ms,
        "ours_std_ms": ours_std,
        "baseline_ms": base_ms,
        "baseline_std_ms": base_std,
        "ratio": base_ms / ours_ms,
    }
