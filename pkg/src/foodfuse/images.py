"""Image helpers: HxWxC float arrays in [0, 1] on disk as 8-bit PNG."""

from __future__ import annotations

from pathlib import Path
from collections.abc import Sequence

import numpy as np
import torch
from PIL import Image as PILImage

Image = np.ndarray


def quantize(x: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so in-memory images equal their PNG round trip."""
    return np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0


def save_png(path: str | Path, image: Image) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    PILImage.fromarray(arr).save(path, format="PNG")


def load_png(path: str | Path, gray: bool = False) -> Image:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("L" if gray else "RGB"), dtype=np.float64) / 255.0
    return arr[..., None] if gray else arr


def to_tensor(images: Image | Sequence[Image]) -> torch.Tensor:
    """Array(s) HxWxC -> float tensor (B, C, H, W) in the default dtype."""
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images]
    batch = np.stack([np.asarray(im) for im in images]).transpose(0, 3, 1, 2)
    return torch.as_tensor(np.ascontiguousarray(batch), dtype=torch.get_default_dtype())


def to_array(tensor: torch.Tensor) -> Image:
    """Tensor (C, H, W) or (1, C, H, W) -> array HxWxC (float64)."""
    t = tensor.detach().cpu()
    if t.dim() == 4:
        t = t[0]
    return t.permute(1, 2, 0).numpy().astype(np.float64)


def contact_sheet(rows: Sequence[Sequence[Image]], pad: int = 2) -> Image:
    """Grid of equally sized RGB tiles on a white background."""
    h, w = rows[0][0].shape[:2]
    ncol = max(len(r) for r in rows)
    sheet = np.ones((len(rows) * (h + pad) + pad, ncol * (w + pad) + pad, 3))
    for i, row in enumerate(rows):
        for j, tile in enumerate(row):
            tile = np.repeat(tile, 3, axis=2) if tile.shape[2] == 1 else tile
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            sheet[y:y + h, x:x + w] = tile
    return sheet
