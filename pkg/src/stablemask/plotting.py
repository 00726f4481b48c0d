"""Report figures written straight to files (Agg backend, no display)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def attention_heatmaps(traces, path, title: str = "") -> None:
    """Grid of layer x head attention matrices for one sequence."""
    L, H = len(traces), traces[0].probs.shape[0]
    fig, axes = plt.subplots(L, H, figsize=(2.6 * H, 2.4 * L), squeeze=False)
    for l, tr in enumerate(traces):
        for h in range(H):
            ax = axes[l][h]
            ax.imshow(tr.probs[h], cmap="viridis", vmin=0.0, vmax=1.0)
            ax.set_title(f"layer {l} head {h}", fontsize=8)
            ax.set_xticks([])
            ax.set_yticks([])
    if title:
        fig.suptitle(title, fontsize=9)
    _save(fig, path)


def mask_ratio_plot(curves: dict, path) -> None:
    """``curves``: label -> per-position real attention mass."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for label, alpha in curves.items():
        ax.plot(np.arange(1, len(alpha) + 1), alpha, marker=".", label=label)
    ax.set_xlabel("query position")
    ax.set_ylabel("real attention mass")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    _save(fig, path)


def first_token_plot(trends: dict, path) -> None:
    """``trends``: label -> ``(n, 2)`` array from :func:`first_token_trend`."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for label, tr in trends.items():
        ax.plot(tr[:, 0], tr[:, 1], label=label)
    ax.set_xlabel("query position")
    ax.set_ylabel("attention on token 1")
    ax.legend(fontsize=8)
    _save(fig, path)


def loss_curve(records, path, smooth: int = 20) -> None:
    """Training loss per step with a trailing moving average."""
    steps = np.array([r["step"] for r in records])
    loss = np.array([r["loss"] for r in records])
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(steps, loss, alpha=0.3, lw=0.8)
    if len(loss) >= smooth > 1:
        avg = np.convolve(loss, np.ones(smooth) / smooth, mode="valid")
        ax.plot(steps[smooth - 1:], avg, lw=1.5)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    _save(fig, path)


def bench_plot(rows, path) -> None:
    """Streamed-pass wall time against sequence length, one line per tiling."""
    rows = list(rows)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    tilings = sorted({(r["Br"], r["Bc"]) for r in rows if r["Br"] < r["n"] or r["Bc"] < r["n"]})
    for br, bc in tilings:
        sel = sorted((r for r in rows if (r["Br"], r["Bc"]) == (br, bc)), key=lambda r: r["n"])
        ax.plot([r["n"] for r in sel], [r["wall_ms"] for r in sel], marker="o", label=f"{br}x{bc}")
    naive = {r["n"]: r["naive_ms"] for r in rows}
    ns = sorted(naive)
    ax.plot(ns, [naive[n] for n in ns], "k--", label="dense")
    ax.set_xlabel("n")
    ax.set_ylabel("ms")
    ax.legend(fontsize=7)
    _save(fig, path)


def accuracy_bars(table: dict, path) -> None:
    """``table``: method -> {task: accuracy in [0, 1]}."""
    methods = list(table)
    tasks = sorted({t for row in table.values() for t in row})
    x = np.arange(len(tasks))
    w = 0.8 / max(len(methods), 1)
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for k, m in enumerate(methods):
        ax.bar(x + k * w, [100 * table[m].get(t, np.nan) for t in tasks], w, label=m)
    ax.set_xticks(x + w * (len(methods) - 1) / 2)
    ax.set_xticklabels(tasks, fontsize=8)
    ax.set_ylabel("accuracy (%)")
    ax.legend(fontsize=8)
    _save(fig, path)
