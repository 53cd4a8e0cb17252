"""Figures from run histories: Prec@0.5 per period, loss per epoch, attention heat maps."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .history import read_history  # noqa: E402


def _load_runs(runs: Sequence[str | Path]) -> dict[str, list[dict]]:
    out = {}
    for r in runs:
        p = Path(r)
        path = p / "history.jsonl" if p.is_dir() else p
        records = read_history(path)
        if not records:
            raise ValueError(f"empty history: {path}")
        label = p.name if p.is_dir() else p.parent.name
        while label in out:
            label += "'"
        out[label] = records
    if not out:
        raise ValueError("no histories given")
    return out


def plot_periods(histories: dict[str, list[dict]], path: Path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, recs in histories.items():
        ax.plot([r["period"] for r in recs], [100 * r["val_prec_at_05"] for r in recs], marker="o", label=label)
    ax.set_xlabel("retraining period")
    ax.set_ylabel("val Prec@0.5 (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    return fig


def plot_loss(histories: dict[str, list[dict]], path: Path):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for label, recs in histories.items():
        losses, boundaries = [], []
        for r in recs:
            if losses:
                boundaries.append(len(losses) + 0.5)
            losses.extend(r["train_loss"])
        ax.plot(np.arange(1, len(losses) + 1), losses, label=label)
        for b in boundaries:
            ax.axvline(b, color="gray", linestyle="--", linewidth=0.8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    return fig


def save_attention_image(grid: np.ndarray, path: str | Path, scale: int = 8) -> np.ndarray:
    """Write a grid as a heat image upscaled by an integer factor; returns the upscaled array."""
    up = np.kron(np.asarray(grid, dtype=np.float64), np.ones((scale, scale)))
    plt.imsave(path, up, cmap="jet", vmin=0.0, vmax=1.0)
    return up


def emit_plots(runs: Sequence[str | Path], out_dir: str | Path,
               attention: dict[str, np.ndarray] | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    histories = _load_runs(runs)
    written = [out / "prec_vs_period.png", out / "loss_vs_epoch.png"]
    plt.close(plot_periods(histories, written[0]))
    plt.close(plot_loss(histories, written[1]))
    for name, grid in (attention or {}).items():
        p = out / f"attention_{name}.png"
        save_attention_image(grid, p)
        written.append(p)
    return written
