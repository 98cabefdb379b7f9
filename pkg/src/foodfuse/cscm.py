"""Content-structure control branch.

A trainable clone of the denoiser's encoder half reads ``z_t`` plus a
zero-projected background latent and emits one control feature per
injection point, each through its own zero-initialized 1x1 convolution.
Untrained, every emitted feature is exactly zero.
"""

from __future__ import annotations

import copy

import torch
from torch import nn

from .numerics import ShapeError, Tensor
from .unet import UNet


class ZeroProjection(nn.Conv2d):
    def __init__(self, channels: int):
        super().__init__(channels, channels, 1)
        nn.init.zeros_(self.weight)
        nn.init.zeros_(self.bias)


class ControlBranch(nn.Module):
    def __init__(self, unet: UNet, ctx_tokens: int):
        super().__init__()
        cfg = unet.cfg
        self.cfg = cfg
        self.encoder = copy.deepcopy(unet.encoder)
        self.zero_in = ZeroProjection(cfg.latent_channels)
        widths = cfg.level_channels + [cfg.level_channels[-1]]
        self.zero_out = nn.ModuleList(ZeroProjection(ch) for ch in widths)
        # Stands in for the empty-prompt context of the control branch.
        self.null_tokens = nn.Parameter(torch.randn(ctx_tokens, cfg.d_ctx) * 0.02)

    def forward(self, z_t: Tensor, bg_latent: Tensor, t: Tensor) -> list[Tensor]:
        if z_t.shape != bg_latent.shape:
            raise ShapeError("cscm", z_t.shape, bg_latent.shape, detail="background latent must match z_t")
        ctx = self.null_tokens.unsqueeze(0).expand(z_t.shape[0], -1, -1)
        skips, mid, _ = self.encoder(z_t + self.zero_in(bg_latent), t, ctx)
        return [proj(feat) for proj, feat in zip(self.zero_out, skips + [mid])]
