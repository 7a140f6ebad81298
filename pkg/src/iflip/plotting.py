"""PNG artifact emission: ROC curves, loss curves, cue-map grids."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from PIL import Image  # noqa: E402

from .evalkit import ScoreSet, roc_points


def save_cue_png(cue_map: np.ndarray, path: str | Path) -> None:
    """One cue map in [0,1] as an 8-bit grayscale PNG."""
    arr = np.clip(np.asarray(cue_map), 0.0, 1.0)
    Image.fromarray((arr * 255).round().astype(np.uint8), mode="L").save(path)


def save_cue_grid_png(cue_maps: np.ndarray, path: str | Path, cols: int = 8,
                      scale: int = 4) -> None:
    """Tile (n, g, g) cue maps into one grayscale grid image."""
    maps = np.clip(np.asarray(cue_maps), 0.0, 1.0)
    n, g, _ = maps.shape
    rows = (n + cols - 1) // cols
    canvas = np.ones((rows * (g + 2), cols * (g + 2)), dtype=np.float64)
    for i in range(n):
        r, c = divmod(i, cols)
        canvas[r * (g + 2) + 1:r * (g + 2) + 1 + g,
               c * (g + 2) + 1:c * (g + 2) + 1 + g] = maps[i]
    img = Image.fromarray((canvas * 255).round().astype(np.uint8), mode="L")
    img = img.resize((canvas.shape[1] * scale, canvas.shape[0] * scale), Image.NEAREST)
    img.save(path)


def save_roc_png(sets: list[ScoreSet], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    for s in sets:
        fpr, tpr = roc_points(s)
        ax.plot(fpr, tpr, label=s.domain_id or "scores", drawstyle="steps-post")
    ax.plot([0, 1], [0, 1], "k:", lw=0.8)
    ax.set_xlabel("FPR")
    ax.set_ylabel("TPR")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_curves_png(metrics_jsonl: str | Path, path: str | Path) -> None:
    rows = [json.loads(line) for line in Path(metrics_jsonl).read_text().splitlines() if line]
    steps = [r["step"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in ("total", "content", "style", "cls", "cue"):
        values = [r[key] for r in rows]
        if any(v != 0.0 for v in values):
            ax.plot(steps, values, label=key, lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
