"""Image <-> latent codecs.

``patch`` is a lossless space-to-depth rearrangement of pixels mapped to
[-1, 1]. ``learned`` is a small convolutional autoencoder trained on pixel
MSE. Both take and return batched ``(B, 3, H, W)`` tensors in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .numerics import ShapeError, Tensor


@dataclass(frozen=True)
class LatentCodecConfig:
    mode: str = "patch"
    factor: int = 4
    latent_channels: int = 48

    def validate(self) -> None:
        if self.mode not in ("patch", "learned"):
            raise ValueError(f"codec.mode must be 'patch' or 'learned', got {self.mode!r}")
        if self.factor < 1 or self.factor & (self.factor - 1):
            raise ValueError("codec.factor must be a power of two")
        if self.mode == "patch" and self.latent_channels != 3 * self.factor**2:
            raise ValueError(f"codec.latent_channels must equal 3*factor^2 = {3 * self.factor**2} in patch mode")


class LatentCodec(nn.Module):
    def __init__(self, cfg: LatentCodecConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        if cfg.mode == "learned":
            hidden = 64
            enc: list[nn.Module] = [nn.Conv2d(3, hidden, 3, padding=1)]
            dec: list[nn.Module] = [nn.Conv2d(cfg.latent_channels, hidden, 3, padding=1)]
            for _ in range(cfg.factor.bit_length() - 1):
                enc += [nn.SiLU(), nn.Conv2d(hidden, hidden, 4, stride=2, padding=1)]
                dec += [nn.SiLU(), nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(hidden, hidden, 3, padding=1)]
            enc += [nn.SiLU(), nn.Conv2d(hidden, cfg.latent_channels, 3, padding=1)]
            dec += [nn.SiLU(), nn.Conv2d(hidden, 3, 3, padding=1)]
            self.encoder = nn.Sequential(*enc)
            self.decoder = nn.Sequential(*dec)

    def latent_shape(self, height: int, width: int) -> tuple[int, int, int]:
        f = self.cfg.factor
        if height % f or width % f:
            raise ShapeError("encode", (height, width), (f,), detail="image extents must be divisible by the codec factor")
        return (self.cfg.latent_channels, height // f, width // f)

    def encode(self, images: Tensor) -> Tensor:
        self.latent_shape(images.shape[-2], images.shape[-1])
        x = images * 2.0 - 1.0
        if self.cfg.mode == "patch":
            return F.pixel_unshuffle(x, self.cfg.factor)
        return self.encoder(x)

    def decode_raw(self, latents: Tensor) -> Tensor:
        """Decode without clamping, in [-1, 1] pixel units (used for reconstruction training)."""
        if latents.dim() != 4 or latents.shape[1] != self.cfg.latent_channels:
            raise ShapeError("decode", latents.shape, (self.cfg.latent_channels,), detail="latent channel count")
        if self.cfg.mode == "patch":
            return F.pixel_shuffle(latents, self.cfg.factor)
        return self.decoder(latents)

    def decode(self, latents: Tensor) -> Tensor:
        return ((self.decode_raw(latents) + 1.0) / 2.0).clamp(0.0, 1.0)


def fit_codec(codec: LatentCodec, images: Tensor, steps: int = 1500, lr: float = 2e-3, batch_size: int = 8,
              seed: int = 0) -> list[float]:
    """Train a learned codec on pixel MSE; returns the per-step loss."""
    if codec.cfg.mode != "learned":
        return []
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(codec.parameters(), lr=lr)
    target = images * 2.0 - 1.0
    losses = []
    codec.train()
    for _ in range(steps):
        idx = torch.randperm(len(images), generator=gen)[:batch_size]
        recon = codec.decode_raw(codec.encode(images[idx]))
        loss = F.mse_loss(recon, target[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(loss.item())
    codec.eval()
    return losses
