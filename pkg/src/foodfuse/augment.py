"""Training-time foreground and background augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .forge import sample_view_params, warp_pair
from .images import Image
from .numerics import RngStream


@dataclass(frozen=True)
class AugmentConfig:
    noise: bool = True
    blur: bool = True
    dropout: bool = True
    affine: bool = True
    background_crop: bool = True
    apply_prob: float = 0.5
    noise_sigma_max: float = 0.05
    blur_radius_max: int = 2
    dropout_rate: float = 0.05
    crop_scale_min: float = 0.8

    @classmethod
    def off(cls) -> AugmentConfig:
        return cls(noise=False, blur=False, dropout=False, affine=False, background_crop=False)


def _stream(seed: int | RngStream, tag: str) -> RngStream:
    return seed if isinstance(seed, RngStream) else RngStream(seed, (tag,))


def augment_foreground(foreground: Image, mask: Image, seed: int | RngStream, cfg: AugmentConfig = AugmentConfig(),
                       canvas: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> tuple[Image, Image]:
    """Distort and warp a foreground; photometric changes only touch masked pixels."""
    rng = _stream(seed, "augment_fg").numpy()
    fg, m = foreground.copy(), mask.copy()
    if cfg.affine and rng.random() < cfg.apply_prob:
        params = sample_view_params(rng)
        wfg, wm = warp_pair(fg, m, params, canvas)
        # A warp that empties the mask cannot be learned from; keep the original then.
        if wm.any():
            fg, m = wfg, wm
    inside = m[..., 0] > 0.5
    if cfg.blur and rng.random() < cfg.apply_prob:
        r = int(rng.integers(1, cfg.blur_radius_max + 1))
        blurred = ndimage.uniform_filter(fg, size=(2 * r + 1, 2 * r + 1, 1), mode="nearest")
        fg = np.where(inside[..., None], blurred, fg)
    if cfg.noise and rng.random() < cfg.apply_prob:
        sigma = rng.uniform(0.0, cfg.noise_sigma_max)
        fg = np.where(inside[..., None], np.clip(fg + rng.normal(0.0, sigma, fg.shape), 0.0, 1.0), fg)
    if cfg.dropout and rng.random() < cfg.apply_prob:
        drop = inside & (rng.random(inside.shape) < cfg.dropout_rate)
        fg = np.where(drop[..., None], 0.0, fg)
    return fg, m


def resized_crop(image: Image, scale: float, oy: float, ox: float, size: int) -> Image:
    """Crop a ``scale``-sided window at fractional offset (oy, ox) and resample it to ``size``."""
    h, w, ch = image.shape
    ch_h, ch_w = scale * h, scale * w
    if ch_h == size == h and ch_w == size == w:
        return image.copy()
    y0, x0 = oy * (h - ch_h), ox * (w - ch_w)
    ys = y0 + (np.arange(size) + 0.5) * ch_h / size - 0.5
    xs = x0 + (np.arange(size) + 0.5) * ch_w / size - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = np.empty((size, size, ch))
    for c in range(ch):
        out[..., c] = ndimage.map_coordinates(image[..., c], [yy, xx], order=1, mode="nearest")
    return out


def sample_crop(seed: int | RngStream, cfg: AugmentConfig = AugmentConfig()) -> tuple[float, float, float]:
    """Crop parameters ``(scale, oy, ox)``; the identity crop when background cropping is off."""
    if not cfg.background_crop:
        return 1.0, 0.0, 0.0
    rng = _stream(seed, "augment_bg").numpy()
    return float(rng.uniform(cfg.crop_scale_min, 1.0)), float(rng.random()), float(rng.random())


def augment_background(background: Image, seed: int | RngStream, cfg: AugmentConfig = AugmentConfig(),
                       size: int | None = None, scale: float | None = None) -> Image:
    """Random resized crop (side scale in [crop_scale_min, 1]) back to the training size.

    Training applies the same crop to the ground truth so the target stays
    aligned with the background it is conditioned on.
    """
    s, oy, ox = sample_crop(seed, cfg)
    if scale is not None:
        s = scale
    return resized_crop(background, s, oy, ox, size or background.shape[0])

