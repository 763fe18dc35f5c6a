"""PNG export of rendered views."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(image, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    a = (np.asarray(image, dtype=np.float64) - lo) / (hi - lo)
    a = np.clip(np.nan_to_num(a), 0.0, 1.0)
    return np.round(a * 255.0).astype(np.uint8)


def save_png(image, path, lo: float = 0.0, hi: float = 1.0) -> Path:
    path = Path(path)
    a = to_uint8(image, lo, hi)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    if a.ndim not in (2, 3):
        raise ValueError(f"cannot write an image of shape {a.shape}")
    Image.fromarray(a).save(path)
    return path


def save_views_png(views, path, lo: float = 0.0, hi: float = 1.0, pad: int = 1) -> Path:
    """Views side by side in one strip, separated by ``pad`` white pixels."""
    views = [to_uint8(v, lo, hi) for v in views]
    h = max(v.shape[0] for v in views)
    blocks = []
    for v in views:
        if v.ndim == 2:
            v = np.repeat(v[..., None], 3, axis=2)
        block = np.full((h, v.shape[1] + pad, 3), 255, dtype=np.uint8)
        block[:v.shape[0], :v.shape[1]] = v
        blocks.append(block)
    Image.fromarray(np.concatenate(blocks, axis=1)).save(path)
    return Path(path)
