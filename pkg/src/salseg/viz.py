"""Static figure output: grayscale heatmaps, indexed-colour masks and a summary panel."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

# distinct colours for the first classes; later classes cycle
PALETTE = [
    (40, 40, 40), (230, 159, 0), (86, 180, 233), (0, 158, 115),
    (240, 228, 66), (0, 114, 178), (213, 94, 0), (204, 121, 167),
]


def to_uint8(values: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255 for display; a constant map becomes all zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi - lo <= 0:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.round((v - lo) / (hi - lo) * 255).astype(np.uint8)


def _upscale(img: Image.Image, scale: int) -> Image.Image:
    if scale <= 1:
        return img
    return img.resize((img.width * scale, img.height * scale), Image.NEAREST)


def save_heatmap(values: np.ndarray, path: str | Path, scale: int = 8) -> Path:
    """8-bit grayscale PNG of a 2-D map."""
    path = Path(path)
    _upscale(Image.fromarray(to_uint8(values), mode="L"), scale).save(path)
    return path


def save_mask(mask: np.ndarray, path: str | Path, scale: int = 2) -> Path:
    """Indexed-colour PNG; pixel values are class ids."""
    path = Path(path)
    mask = np.asarray(mask)
    img = Image.fromarray(mask.astype(np.uint8), mode="P")
    flat = [c for i in range(256) for c in PALETTE[i % len(PALETTE)]]
    img.putpalette(flat)
    _upscale(img, scale).save(path)
    return path


def save_partition(fg: np.ndarray, path: str | Path, scale: int = 8) -> Path:
    """Binary overlay: foreground tokens white, background black."""
    path = Path(path)
    img = Image.fromarray(np.where(np.asarray(fg, dtype=bool), 255, 0).astype(np.uint8), mode="L")
    _upscale(img, scale).save(path)
    return path


def save_panel(panels: Sequence[tuple[str, np.ndarray, str]], path: str | Path,
               title: Optional[str] = None) -> Path:
    """One row of labelled subplots; each entry is (caption, array, 'heat' | 'mask')."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.colors import ListedColormap

    path = Path(path)
    cmap = ListedColormap(np.array(PALETTE) / 255.0)
    fig, axes = plt.subplots(1, len(panels), figsize=(3 * len(panels), 3.2), squeeze=False)
    for ax, (caption, arr, kind) in zip(axes[0], panels):
        if kind == "mask":
            ax.imshow(arr, cmap=cmap, vmin=0, vmax=len(PALETTE) - 1, interpolation="nearest")
        else:
            ax.imshow(arr, cmap="magma", interpolation="nearest")
        ax.set_title(caption, fontsize=9)
        ax.axis("off")
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
