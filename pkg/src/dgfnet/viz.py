"""Matplotlib renderings used by the analysis and CLI layers."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from dgfnet.errors import ContractError


def spectrogram_png(magnitude: np.ndarray, path: str | Path,
                    title: str | None = None) -> Path:
    """Render a magnitude spectrogram as a dB-scaled viridis image,
    frequency upward, time rightward."""
    mag = np.asarray(magnitude, dtype=float)
    if mag.ndim != 2:
        raise ContractError(f"expected a 2-D magnitude array, got shape {mag.shape}")
    db = 20.0 * np.log10(np.maximum(mag, 1e-8))
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(db, origin="lower", aspect="auto", cmap="viridis")
    ax.set_xlabel("frame")
    ax.set_ylabel("frequency bin")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, label="dB")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def heatmap_png(values: np.ndarray, path: str | Path, title: str | None = None,
                vmin: float | None = None, vmax: float | None = None,
                cmap: str = "viridis") -> Path:
    values = np.asarray(values, dtype=float)
    if values.ndim != 2:
        raise ContractError(f"expected a 2-D array, got shape {values.shape}")
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(values, origin="lower", aspect="auto",
                   cmap=cmap, vmin=vmin, vmax=vmax)
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def loss_curve_png(steps: np.ndarray, losses: np.ndarray,
                   path: str | Path, title: str = "training loss") -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(np.asarray(steps), np.asarray(losses), lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
