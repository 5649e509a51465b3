"""Image sources for teacher training: synthetic colored shapes, .npy batches, PNG folders."""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np
import torch


def make_shapes_dataset(count: int, resolution: int = 32, seed: int = 0) -> torch.Tensor:
    """Colored discs, squares and triangles on dark backgrounds, values in [-1, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:resolution, 0:resolution] + 0.5
    out = np.empty((count, 3, resolution, resolution), dtype=np.float32)
    for i in range(count):
        bg = rng.uniform(-1.0, -0.4, size=3)
        fg = rng.uniform(-0.2, 1.0, size=3)
        size = rng.uniform(0.18, 0.35) * resolution
        cx, cy = rng.uniform(size, resolution - size, size=2)
        kind = rng.integers(3)
        if kind == 0:
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= size**2
        elif kind == 1:
            mask = (np.abs(xx - cx) <= size * 0.85) & (np.abs(yy - cy) <= size * 0.85)
        else:
            mask = (yy >= cy - size) & (yy <= cy + size) & (np.abs(xx - cx) <= (yy - (cy - size)) / 2)
        out[i] = np.where(mask[None], fg[:, None, None], bg[:, None, None])
    return torch.from_numpy(out)


def load_images(path: Union[str, Path], resolution: int) -> torch.Tensor:
    """Load a (N, C, H, W) ``.npy`` array or a folder of PNG/JPEG files scaled to [-1, 1]."""
    path = Path(path)
    if path.suffix == ".npy":
        arr = np.load(path).astype(np.float32)
    elif path.is_dir():
        from PIL import Image

        files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
        if not files:
            raise ValueError(f"no images in {path}")
        arr = np.stack([
            np.asarray(Image.open(f).convert("RGB").resize((resolution, resolution), Image.BILINEAR), dtype=np.float32)
            .transpose(2, 0, 1) / 127.5 - 1.0
            for f in files
        ])
    else:
        raise ValueError(f"unsupported dataset path {path}")
    if arr.ndim != 4 or arr.shape[0] == 0:
        raise ValueError(f"{path}: expected a non-empty (N, C, H, W) array, got {arr.shape}")
    if arr.min() < -1.0 - 1e-6 or arr.max() > 1.0 + 1e-6:
        raise ValueError(f"{path}: image values must lie in [-1, 1]")
    return torch.from_numpy(np.ascontiguousarray(arr))


def save_grid_png(images: torch.Tensor, path: Union[str, Path], nrow: int) -> Path:
    """Tile (N, C, H, W) images in [-1, 1] into one PNG."""
    from PIL import Image

    x = images.detach().cpu().numpy()
    n, c, h, w = x.shape
    ncol = nrow
    nrows = -(-n // ncol)
    grid = np.zeros((c, nrows * h, ncol * w), dtype=np.float32) - 1.0
    for i in range(n):
        r, k = divmod(i, ncol)
        grid[:, r * h : (r + 1) * h, k * w : (k + 1) * w] = x[i]
    pixels = np.clip((grid + 1.0) * 127.5 + 0.5, 0, 255).astype(np.uint8).transpose(1, 2, 0)
    if c == 1:
        pixels = pixels[..., 0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels).save(path)
    return path
