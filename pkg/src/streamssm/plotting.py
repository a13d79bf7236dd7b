"""Figures written next to CSV/JSON outputs (non-interactive Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # no timestamp metadata so reruns produce identical files
    fig.savefig(path, dpi=110, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def plot_trace(trace, path, annotations=()):
    """Probability and per-block state norms against signal time."""
    t = np.array([r.time_s for r in trace])
    prob = np.array([np.atleast_1d(r.probability)[0] for r in trace])
    norms = np.array([r.block_norms for r in trace])
    fig, (a0, a1) = plt.subplots(2, 1, figsize=(8, 5), sharex=True)
    a0.plot(t, prob, lw=0.8)
    a0.set_ylabel("probability")
    a0.set_ylim(-0.02, 1.02)
    for a in annotations:
        for ax in (a0, a1):
            ax.axvspan(a.onset_s, a.offset_s, color="tab:red", alpha=0.15, lw=0)
    for b in range(norms.shape[1]):
        a1.plot(t, norms[:, b], lw=0.8, label=f"block {b}")
    a1.set_yscale("log")
    a1.set_ylabel("state L2 norm")
    a1.set_xlabel("time (s)")
    a1.legend(fontsize=7, loc="upper right")
    return _save(fig, path)


def plot_flops(report, path):
    rows = report.rows()[:-1]  # components only
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.barh([r[0] for r in rows], [r[1] / 1e6 for r in rows])
    ax.set_xlabel("MFLOPs per step")
    ax.invert_yaxis()
    return _save(fig, path)


def plot_latency(stats, path):
    fig, ax = plt.subplots(figsize=(6, 3))
    labels = [f"{s.context_patches} patches" for s in stats]
    ax.boxplot([s.samples * 1e3 for s in stats], showfliers=False)
    ax.set_xticks(range(1, len(stats) + 1), labels)
    ax.set_ylabel("step latency (ms)")
    return _save(fig, path)


def plot_loss_curve(losses, path, title: str = ""):
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(np.arange(len(losses)), losses, lw=0.9)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    return _save(fig, path)


def plot_flows(results, path):
    """``results``: mapping label -> FlowResult; log time axis."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, r in results.items():
        keep = r.t > 0
        ax.plot(r.t[keep], r.w[keep], lw=1.0, label=label)
        ax.axhline(r.w_fix, lw=0.5, ls=":", color="grey")
    ax.set_xscale("log")
    ax.set_xlabel("t")
    ax.set_ylabel("w")
    ax.legend(fontsize=7)
    return _save(fig, path)


def plot_band_drops(drops: dict[str, float], path):
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(list(drops), list(drops.values()))
    ax.axhline(0.0, color="black", lw=0.6)
    ax.set_ylabel("AUROC drop")
    return _save(fig, path)


def plot_ablation(rows, path):
    """``rows``: list of (seed, persistent_auroc, windowed_auroc)."""
    fig, ax = plt.subplots(figsize=(5, 3))
    seeds = [r[0] for r in rows]
    x = np.arange(len(rows))
    ax.bar(x - 0.2, [r[1] for r in rows], 0.4, label="persistent")
    ax.bar(x + 0.2, [r[2] for r in rows], 0.4, label="windowed")
    ax.set_xticks(x, [str(s) for s in seeds])
    ax.set_xlabel("seed")
    ax.set_ylabel("AUROC")
    ax.set_ylim(0.0, 1.0)
    ax.legend(fontsize=7)
    return _save(fig, path)
