"""Report figures.  Uses the non-interactive Agg backend; every function writes one PNG."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .retrieval import IMAGE_RETRIEVAL, SENTENCE_RETRIEVAL  # noqa: E402

# fixed metadata keeps PNG bytes stable across reruns
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def recall_bars(rows: Sequence[dict], path, title: str = "Recall@K") -> Path:
    ks = sorted({r["K"] for r in rows})
    get = {(r["direction"], r["K"]): r["recall"] for r in rows}
    x = np.arange(len(ks))
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for off, (direction, label) in zip((-0.2, 0.2), ((IMAGE_RETRIEVAL, "image retrieval"),
                                                   (SENTENCE_RETRIEVAL, "sentence retrieval"))):
        ax.bar(x + off, [get.get((direction, k), 0.0) for k in ks], width=0.4, label=label)
    ax.set_xticks(x, [f"R@{k}" for k in ks])
    ax.set_ylim(0, 1)
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def loss_curves(reports: Sequence[dict], path, keys: Sequence[str] = ("mlm", "moc", "mrfr", "itm", "total"),
                smooth: int = 10) -> Path:
    """Per-step losses across all stages; stage boundaries are marked with vertical lines."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = np.arange(len(reports))
    for k in keys:
        vals = np.array([r.get(k) if r.get(k) is not None else np.nan for r in reports], dtype=float)
        if np.all(np.isnan(vals)):
            continue
        if smooth > 1 and len(vals) >= smooth:
            kernel = np.ones(smooth) / smooth
            vals = np.convolve(np.nan_to_num(vals), kernel, mode="valid")
            ax.plot(steps[smooth - 1:], vals, label=k)
        else:
            ax.plot(steps, vals, label=k)
    prev = None
    for i, r in enumerate(reports):
        if prev is not None and r.get("stage") != prev:
            ax.axvline(i, color="grey", lw=0.8, ls="--")
        prev = r.get("stage")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def ablation_comparison(values: Mapping[str, Sequence[float]], path, title: str, ylabel: str = "R@1") -> Path:
    """Per-arm seed values as dots with the median as a bar."""
    names = list(values)
    fig, ax = plt.subplots(figsize=(1.4 * len(names) + 2, 3.2))
    for i, n in enumerate(names):
        v = np.asarray(values[n], dtype=float)
        ax.bar(i, np.median(v), width=0.6, alpha=0.6)
        ax.scatter(np.full(len(v), i), v, s=12, color="k", zorder=3)
    ax.set_xticks(range(len(names)), names, fontsize=8)
    ax.set_ylim(0, 1)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)
