"""Matplotlib figures rendered next to the delimited report files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def save_ksweep_figure(rows, path) -> None:
    """EM and F1 against the number of split-phase blocks k."""
    ks = [r[0] for r in rows]
    em = [r[1] for r in rows]
    f1 = [r[2] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ks, em, "o-", label="EM")
    ax.plot(ks, f1, "s--", label="F1")
    ax.set_xlabel("non-interaction blocks k")
    ax.set_ylabel("score (%)")
    ax.set_xticks(ks)
    ax.set_ylim(0, 105)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_bench_figure(reports, path) -> None:
    """Stacked per-phase wall-clock bars, one bar per benchmark mode."""
    fig, ax = plt.subplots(figsize=(6, 4))
    modes = [r.mode for r in reports]
    phase_names = ["NI Q", "NI P", "I Q-P"]
    bottoms = [0.0] * len(reports)
    for name in phase_names:
        heights = [r.phases[name].seconds if name in r.phases else 0.0 for r in reports]
        ax.bar(modes, heights, bottom=bottoms, label=name)
        bottoms = [b + h for b, h in zip(bottoms, heights)]
    for i, r in enumerate(reports):
        label = f"x{r.speedup:.1f}" if r.speedup else ""
        ax.text(i, bottoms[i], label, ha="center", va="bottom")
    ax.set_ylabel("seconds")
    ax.grid(alpha=0.3, axis="y")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_eval_figure(summary, path) -> None:
    """EM / F1 for both aggregation policies plus retrieval recall."""
    labels = ["EM w/o", "EM w/", "F1 w/o", "F1 w/", "R"]
    values = [summary.reader_only.em, summary.fused.em,
              summary.reader_only.f1, summary.fused.f1,
              summary.reader_only.recall]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(labels, values, color=["#4477aa", "#4477aa", "#66ccee", "#66ccee", "#228833"])
    ax.set_ylabel("percent")
    ax.set_ylim(0, 105)
    ax.grid(alpha=0.3, axis="y")
    for i, v in enumerate(values):
        ax.text(i, v, f"{v:.1f}", ha="center", va="bottom")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
