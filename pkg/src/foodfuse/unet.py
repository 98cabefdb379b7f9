"""Noise predictor: a small latent UNet with cross-attention to the fused context.

The network is split into an encoder half (input conv, down levels, mid
block) and a decoder half so that the control branch can clone the encoder.
Injected control features are added to each skip feature and to the mid
feature just before the decoder consumes them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from . import numerics as nx
from .numerics import ShapeError, Tensor


@dataclass(frozen=True)
class UNetConfig:
    latent_channels: int = 48
    base_channels: int = 64
    channel_multipliers: tuple[int, ...] = (1, 2)
    attention_levels: tuple[int, ...] = (0, 1)
    mid_attention: bool = True
    d_ctx: int = 128
    timestep_embed_dim: int = 128
    heads: int = 4
    norm_groups: int = 16
    zero_init_output: bool = False

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    @property
    def level_channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    def validate(self) -> None:
        if self.levels < 2:
            raise ValueError("unet.channel_multipliers needs at least two levels")
        if not set(self.attention_levels) <= set(range(self.levels)):
            raise ValueError("unet.attention_levels must be a subset of the level indices")
        for ch in self.level_channels:
            if ch % self.norm_groups or ch % self.heads:
                raise ValueError(f"unet level width {ch} must be divisible by norm_groups and heads")

    def injection_signature(self, latent_hw: tuple[int, int]) -> list[tuple[int, int, int]]:
        """Shapes (C, H, W) of the control features: one per skip junction, then the mid block."""
        h, w = latent_hw
        shapes = []
        for i, ch in enumerate(self.level_channels):
            shapes.append((ch, h >> i, w >> i))
        last = self.levels - 1
        shapes.append((self.level_channels[-1], h >> last, w >> last))
        return shapes


def timestep_embedding(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.nn.functional.pad(emb, (0, 1))
    return emb.to(torch.get_default_dtype())


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d)) with d the key width."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError("cross_attention", q.shape, k.shape, detail="query and key widths differ")
    return nx.softmax(nx.matmul(q, nx.transpose(k)) / math.sqrt(k.shape[-1]), dim=-1)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError("cross_attention", k.shape, v.shape, detail="key and value counts differ")
    return nx.matmul(attention_weights(q, k), v)


class CrossAttention(nn.Module):
    """Queries from a spatial feature map, keys and values from the context tokens."""

    def __init__(self, channels: int, d_ctx: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm = nn.LayerNorm(channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(d_ctx, channels, bias=False)
        self.to_v = nn.Linear(d_ctx, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    def attend(self, seq: Tensor, ctx: Tensor) -> Tensor:
        """Multi-head attention output before the output projection and residual."""
        if ctx.shape[-1] != self.to_k.in_features:
            raise ShapeError("cross_attention", seq.shape, ctx.shape, detail="context width differs from d_ctx")
        b, n, c = seq.shape
        h = self.heads

        def split(x: Tensor) -> Tensor:
            return x.reshape(b, x.shape[1], h, c // h).transpose(1, 2)

        out = attention(split(self.to_q(seq)), split(self.to_k(ctx)), split(self.to_v(ctx)))
        return out.transpose(1, 2).reshape(b, n, c)

    def forward(self, x: Tensor, ctx: Tensor) -> Tensor:
        b, c, hh, ww = x.shape
        seq = x.flatten(2).transpose(1, 2)
        seq = seq + self.to_out(self.attend(self.norm(seq), ctx))
        return seq.transpose(1, 2).reshape(b, c, hh, ww)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout)
        self.norm2 = nn.GroupNorm(groups, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(nx.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(nx.silu(self.norm2(h)))
        return h + self.skip(x)


class Stage(nn.Module):
    """ResBlock optionally followed by cross-attention."""

    def __init__(self, cin: int, cout: int, cfg: UNetConfig, attend: bool):
        super().__init__()
        self.res = ResBlock(cin, cout, cfg.timestep_embed_dim, cfg.norm_groups)
        self.attn = CrossAttention(cout, cfg.d_ctx, cfg.heads) if attend else None

    def forward(self, x: Tensor, temb: Tensor, ctx: Tensor) -> Tensor:
        x = self.res(x, temb)
        return self.attn(x, ctx) if self.attn is not None else x


class UNetEncoder(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        chs = cfg.level_channels
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.base_channels, cfg.timestep_embed_dim), nn.SiLU(),
            nn.Linear(cfg.timestep_embed_dim, cfg.timestep_embed_dim),
        )
        self.conv_in = nn.Conv2d(cfg.latent_channels, cfg.base_channels, 3, padding=1)
        self.down = nn.ModuleList()
        prev = cfg.base_channels
        for i, ch in enumerate(chs):
            self.down.append(Stage(prev, ch, cfg, i in cfg.attention_levels))
            prev = ch
        self.mid1 = Stage(prev, prev, cfg, cfg.mid_attention)
        self.mid2 = ResBlock(prev, prev, cfg.timestep_embed_dim, cfg.norm_groups)

    def embed_time(self, t: Tensor) -> Tensor:
        emb = timestep_embedding(t, self.cfg.base_channels)
        return self.time_mlp(emb.to(self.time_mlp[0].weight.dtype))

    def forward(self, x: Tensor, t: Tensor, ctx: Tensor) -> tuple[list[Tensor], Tensor, Tensor]:
        temb = self.embed_time(t)
        h = self.conv_in(x)
        skips = []
        for i, stage in enumerate(self.down):
            if i > 0:
                h = nx.avg_downsample(h)
            h = stage(h, temb, ctx)
            skips.append(h)
        mid = self.mid2(self.mid1(h, temb, ctx), temb)
        return skips, mid, temb


class UNetDecoder(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        chs = cfg.level_channels
        self.up = nn.ModuleList()
        self.up_convs = nn.ModuleList()
        prev = chs[-1]
        for i in reversed(range(cfg.levels)):
            self.up.append(Stage(prev + chs[i], chs[i], cfg, i in cfg.attention_levels))
            self.up_convs.append(nn.Conv2d(chs[i], chs[i - 1], 3, padding=1) if i > 0 else nn.Identity())
            prev = chs[i - 1] if i > 0 else chs[i]
        self.norm_out = nn.GroupNorm(cfg.norm_groups, chs[0])
        self.conv_out = nn.Conv2d(chs[0], cfg.latent_channels, 3, padding=1)
        if cfg.zero_init_output:
            nn.init.zeros_(self.conv_out.weight)
            nn.init.zeros_(self.conv_out.bias)

    def forward(self, skips: list[Tensor], mid: Tensor, temb: Tensor, ctx: Tensor) -> Tensor:
        h = mid
        levels = len(skips)
        for j, (stage, up_conv) in enumerate(zip(self.up, self.up_convs)):
            i = levels - 1 - j
            h = stage(nx.concat([h, skips[i]], axis=1), temb, ctx)
            if i > 0:
                h = up_conv(nx.nearest_upsample(h))
        return self.conv_out(nx.silu(self.norm_out(h)))


class UNet(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = UNetEncoder(cfg)
        self.decoder = UNetDecoder(cfg)
        # Timestep-conditioned output head: eps = a(t) * z_t + exp(b(t)) * net(z_t).
        # It starts as the bare network (a = b = 0). Training can learn the input
        # skip that high-noise steps need, where eps is almost z_t itself.
        self.out_gate = nn.Linear(cfg.timestep_embed_dim, 2)
        nn.init.zeros_(self.out_gate.weight)
        nn.init.zeros_(self.out_gate.bias)

    def forward(self, z_t: Tensor, t: Tensor, ctx: Tensor, injections: list[Tensor] | None = None) -> Tensor:
        if z_t.dim() != 4 or z_t.shape[1] != self.cfg.latent_channels:
            raise ShapeError("unet", z_t.shape, (self.cfg.latent_channels,), detail="latent channel count")
        skips, mid, temb = self.encoder(z_t, t, ctx)
        if injections is not None:
            expected = self.cfg.injection_signature((z_t.shape[-2], z_t.shape[-1]))
            if len(injections) != len(expected):
                raise ShapeError("unet", (len(injections),), (len(expected),), detail="injection count")
            for idx, (feat, shape) in enumerate(zip(injections, expected)):
                if tuple(feat.shape[1:]) != shape or feat.shape[0] != z_t.shape[0]:
                    raise ShapeError("unet", feat.shape, (z_t.shape[0], *shape), detail=f"injection {idx}")
            skips = [s + f for s, f in zip(skips, injections[:-1])]
            mid = mid + injections[-1]
        out = self.decoder(skips, mid, temb, ctx)
        gate = self.out_gate(temb)
        skip, scale = gate[:, 0, None, None, None], torch.exp(gate[:, 1, None, None, None])
        return skip * z_t + scale * out
