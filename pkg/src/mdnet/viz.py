"""Heatmaps, boundary overlays and the side-by-side decoder panel.

Heatmaps use matplotlib's ``viridis`` colormap (perceptually uniform) sampled
with 256 levels. Images are written as metadata-free PNG.
"""

from __future__ import annotations

from collections.abc import Sequence
from pathlib import Path

import numpy as np
from matplotlib import colormaps
from PIL import Image

from mdnet.metrics import boundary

COLORMAP = "viridis"
BOUNDARY_COLOR = (255, 64, 64)
HEADS = ("M1", "M2", "M3")


def heatmap(prob: np.ndarray) -> np.ndarray:
    """Map probabilities [H, W] in [0, 1] to an RGB uint8 image."""
    levels = np.rint(np.clip(prob, 0.0, 1.0) * 255).astype(np.uint8)
    lut = (colormaps[COLORMAP](np.arange(256) / 255.0)[:, :3] * 255).round().astype(np.uint8)
    return lut[levels]


def overlay(image: np.ndarray, mask: np.ndarray, color=BOUNDARY_COLOR) -> np.ndarray:
    """Grayscale image [H, W] in [0, 1] with the mask boundary painted in ``color``."""
    gray = np.rint(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    rgb[boundary(mask.astype(bool))] = color
    return rgb


def panel(tiles: Sequence[np.ndarray], gap: int = 4) -> np.ndarray:
    """Concatenate RGB tiles left to right with white separators."""
    h = tiles[0].shape[0]
    sep = np.full((h, gap, 3), 255, dtype=np.uint8)
    parts = []
    for i, tile in enumerate(tiles):
        if i:
            parts.append(sep)
        parts.append(tile)
    return np.concatenate(parts, axis=1)


def save_png(array: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path, format="PNG")
    return path


def render(
    image: np.ndarray,
    probs: Sequence[np.ndarray],
    out_dir: str | Path,
    threshold: float = 0.5,
    prefix: str = "",
) -> list[Path]:
    """Write heatmap and overlay per head plus an M1|M2|M3 panel; return the paths.

    ``image`` is the grayscale input [H, W]; ``probs`` are the three probability
    maps [H, W] in head order.
    """
    out = Path(out_dir)
    paths = []
    maps = []
    for name, prob in zip(HEADS, probs):
        hm = heatmap(prob)
        maps.append(hm)
        paths.append(save_png(hm, out / f"{prefix}heatmap_{name}.png"))
        paths.append(save_png(overlay(image, prob > threshold), out / f"{prefix}overlay_{name}.png"))
    paths.append(save_png(panel(maps), out / f"{prefix}panel.png"))
    return paths
