"""Figure rendering for the CLI report paths. Every figure lands next to
its delimited output file."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_loss_curves(rows: list[dict], path: str) -> None:
    """Per-term loss curves over iterations from metrics.csv loss rows."""
    loss_rows = [r for r in rows if r["kind"] == "loss"]
    if not loss_rows:
        return
    iters = [int(r["iteration"]) for r in loss_rows]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(iters, [float(r["total"]) for r in loss_rows], lw=0.8)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("total loss")
    ax1.set_yscale("log")
    for term in ("enc_cls", "locate_cls", "dedup_cls", "locate_l1", "dedup_l1"):
        ax2.plot(iters, [float(r[term]) for r in loss_rows], lw=0.8, label=term)
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("term value")
    ax2.set_yscale("log")
    ax2.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_bucket_chart(report, path: str) -> None:
    """Mean query count and AP50 per object-count bucket."""
    if not report.per_bucket:
        return
    buckets = [row["bucket"] for row in report.per_bucket]
    queries = [row["mean_query_count"] for row in report.per_bucket]
    ap50 = [row["ap50"] for row in report.per_bucket]
    x = np.arange(len(buckets))
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.bar(x, queries, width=0.6, color="tab:blue", alpha=0.7)
    ax1.set_xticks(x, buckets)
    ax1.set_xlabel("objects per image")
    ax1.set_ylabel("mean selected queries", color="tab:blue")
    ax2 = ax1.twinx()
    ax2.plot(x, ap50, "o-", color="tab:red")
    ax2.set_ylabel("AP50", color="tab:red")
    ax2.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_complexity_curve(rows: list[dict], path: str) -> None:
    """Query count and decoder FLOPs as functions of the score threshold."""
    if not rows:
        return
    thr = [r["threshold"] for r in rows]
    fig, ax1 = plt.subplots(figsize=(6, 4))
    ax1.plot(thr, [r["mean_query_count"] for r in rows], "o-", color="tab:cyan")
    ax1.set_xlabel("score threshold")
    ax1.set_ylabel("mean query count", color="tab:cyan")
    ax2 = ax1.twinx()
    ax2.plot(thr, [r["decoder_flops"] for r in rows], "s-", color="tab:purple")
    ax2.set_ylabel("decoder FLOPs", color="tab:purple")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_ablation_chart(rows: list[dict], path: str) -> None:
    """AP50 and duplicate rate per preset variant."""
    if not rows:
        return
    names = [r["variant"] for r in rows]
    x = np.arange(len(names))
    fig, ax1 = plt.subplots(figsize=(max(6, len(names) * 1.2), 4))
    ax1.bar(x - 0.2, [r["ap50"] for r in rows], width=0.4, color="tab:green", label="AP50")
    ax1.set_xticks(x, names, rotation=20)
    ax1.set_ylabel("AP50", color="tab:green")
    ax1.set_ylim(0, 1.05)
    ax2 = ax1.twinx()
    ax2.bar(x + 0.2, [r["duplicate_rate"] for r in rows], width=0.4,
            color="tab:orange", label="duplicate rate")
    ax2.set_ylabel("duplicate rate", color="tab:orange")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_bench_chart(result: dict, path: str) -> None:
    """Per-forward decoder timing comparison."""
    names = ["two-stage", "baseline"]
    means = [result["ours_ms"], result["baseline_ms"]]
    stds = [result["ours_std_ms"], result["baseline_std_ms"]]
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.bar(names, means, yerr=stds, color=["tab:blue", "tab:gray"], capsize=4)
    ax.set_ylabel("decoder forward (ms)")
    ax.set_title(f"speedup x{result['ratio']:.2f}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
