"""Matplotlib renderings of the report's plot data (PNG, deterministic bytes)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path, tag=None):
    meta = {"Software": None}
    if tag:
        meta["Comment"] = tag
    fig.savefig(path, dpi=100, metadata=meta)
    plt.close(fig)


def _grid(n, ncols=5):
    nrows = int(np.ceil(n / ncols))
    fig, axes = plt.subplots(nrows, ncols, figsize=(3.2 * ncols, 2.6 * nrows), squeeze=False)
    for ax in axes.flat[n:]:
        ax.axis("off")
    return fig, axes.flat


def age_histogram(path, labels, counts, tag=None):
    fig, ax = plt.subplots(figsize=(8, 3.5))
    ax.bar(range(len(counts)), counts, color="0.4")
    ax.set_xticks(range(len(labels)), labels, rotation=45, ha="right")
    ax.set_ylabel("records")
    ax.set_xlabel("age group")
    fig.tight_layout()
    _save(fig, path, tag)


def shap_beeswarm(path, summaries, n_show=10, tag=None):
    """One panel per class: phi on x, features on y, colour = scaled feature value.

    ``summaries`` is a list of dicts with ``class_label``, ``features`` (top
    names), ``phi`` and ``values`` (n_samples x k).
    """
    fig, axes = _grid(len(summaries))
    jitter = np.random.default_rng(0)
    for ax, s in zip(axes, summaries):
        phi = np.asarray(s["phi"], dtype=float)
        val = np.asarray(s["values"], dtype=float)
        k = min(n_show, phi.shape[1])
        for j in range(k):
            v = val[:, j]
            lo, hi = np.nanpercentile(v, [5, 95]) if np.isfinite(v).any() else (0.0, 1.0)
            c = np.clip((v - lo) / (hi - lo), 0, 1) if hi > lo else np.full(v.shape, 0.5)
            y = k - 1 - j + jitter.uniform(-0.25, 0.25, size=v.size)
            ax.scatter(phi[:, j], y, c=np.nan_to_num(c, nan=0.5), cmap="coolwarm", s=3,
                       vmin=0, vmax=1, linewidths=0)
        ax.set_yticks(range(k), list(reversed(s["features"][:k])), fontsize=6)
        ax.axvline(0, color="0.6", lw=0.5)
        ax.set_title(s["class_label"], fontsize=8)
        ax.tick_params(axis="x", labelsize=6)
    fig.tight_layout()
    _save(fig, path, tag)


def mean_beats(path, time_ms, beats, labels, tag=None):
    fig, ax = plt.subplots(figsize=(7, 4))
    cmap = plt.get_cmap("viridis")
    for i, (b, lab) in enumerate(zip(beats, labels)):
        ax.plot(time_ms, b, color=cmap(i / max(len(beats) - 1, 1)), lw=1, label=lab)
    ax.set_xlabel("time from R-peak (ms)")
    ax.set_ylabel("mV")
    ax.legend(fontsize=6, ncol=3)
    fig.tight_layout()
    _save(fig, path, tag)


def saliency_beats(path, panels, tag=None):
    """Mean beat per group with attribution shading and top-k marks in red.

    ``panels``: list of dicts with ``label``, ``time_ms``, ``signal``,
    ``attribution``, ``topk``.
    """
    fig, axes = _grid(len(panels))
    for ax, p in zip(axes, panels):
        t = np.asarray(p["time_ms"])
        x = np.asarray(p["signal"])
        a = np.asarray(p["attribution"])
        ax.plot(t, x, color="k", lw=0.8)
        top = np.asarray(p["topk"], dtype=int)
        ax.scatter(t[top], x[top], color="red", s=8, zorder=3)
        ax2 = ax.twinx()
        ax2.fill_between(t, a, color="tab:blue", alpha=0.25, lw=0)
        ax2.set_yticks([])
        ax.set_title(p["label"], fontsize=8)
        ax.tick_params(labelsize=6)
    fig.tight_layout()
    _save(fig, path, tag)


def auc_bars(path, labels, series, tag=None):
    """Grouped bars: ``series`` maps a model name to per-class AUCs."""
    fig, ax = plt.subplots(figsize=(8, 3.5))
    n = len(series)
    width = 0.8 / max(n, 1)
    x = np.arange(len(labels))
    for i, (name, vals) in enumerate(sorted(series.items())):
        v = np.array([np.nan if a is None else a for a in vals], dtype=float)
        ax.bar(x + (i - (n - 1) / 2) * width, v, width, label=name)
    ax.set_xticks(x, labels, rotation=45, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("one-vs-rest AUC")
    ax.axhline(0.5, color="0.5", lw=0.5, ls="--")
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, path, tag)
