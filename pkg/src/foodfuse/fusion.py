"""Fusion encoder and fusion mapping network.

A small vision transformer encodes each image into patch tokens; features
from several depths are concatenated per token. The mapping network lets a
fixed set of learned queries attend over the foreground and background
tokens together and squeezes the result through a low-rank bottleneck,
yielding one fused token sequence for the denoiser's cross-attention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from . import numerics as nx
from .numerics import ShapeError, Tensor

FOREGROUND, BACKGROUND = 0, 1


@dataclass(frozen=True)
class FusionEncoderConfig:
    patch_size: int = 8
    width: int = 96
    depth: int = 4
    heads: int = 4
    tap_layers: tuple[int, ...] = (2, 3, 4)
    tokens: int = 16
    rank: int = 16

    def validate(self) -> None:
        taps = list(self.tap_layers)
        if not taps or taps != sorted(set(taps)) or taps[0] < 1 or taps[-1] > self.depth:
            raise ValueError(f"fusion.tap_layers must be non-empty, strictly increasing and within 1..{self.depth}")
        if self.width % self.heads:
            raise ValueError("fusion.width must be divisible by fusion.heads")

    @property
    def tap_widths(self) -> list[int]:
        return [self.width] * len(self.tap_layers)

    @property
    def embed_width(self) -> int:
        return sum(self.tap_widths)


@dataclass
class ImageEmbedding:
    tokens: Tensor  # (B, N, d_total)
    source: int
    widths: list[int] = field(default_factory=list)

    def per_tap(self) -> list[Tensor]:
        return list(torch.split(self.tokens, self.widths, dim=-1))


class TransformerBlock(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class FusionEncoder(nn.Module):
    """Shared-weight patch transformer applied to foreground and background alike."""

    def __init__(self, cfg: FusionEncoderConfig, image_size: int):
        super().__init__()
        cfg.validate()
        if image_size % cfg.patch_size:
            raise ShapeError("encode_image", (image_size,), (cfg.patch_size,), detail="image size not divisible by patch size")
        self.cfg = cfg
        self.grid = image_size // cfg.patch_size
        self.patchify = nn.Conv2d(3, cfg.width, cfg.patch_size, stride=cfg.patch_size)
        self.pos = nn.Parameter(torch.randn(self.grid * self.grid, cfg.width) * 0.02)
        self.blocks = nn.ModuleList(TransformerBlock(cfg.width, cfg.heads) for _ in range(cfg.depth))
        self.tap_norms = nn.ModuleList(nn.LayerNorm(cfg.width) for _ in cfg.tap_layers)

    def forward(self, images: Tensor, source: int) -> ImageEmbedding:
        p = self.cfg.patch_size
        if images.dim() != 4 or images.shape[-1] % p or images.shape[-2] % p:
            raise ShapeError("encode_image", images.shape, (p,), detail="image extents must be divisible by the patch size")
        x = self.patchify(images * 2.0 - 1.0).flatten(2).transpose(1, 2)
        if x.shape[1] != self.pos.shape[0]:
            raise ShapeError("encode_image", images.shape, (self.grid * p,), detail="image size differs from the configured size")
        x = x + self.pos
        taps = []
        tap_iter = iter(zip(self.cfg.tap_layers, self.tap_norms))
        nxt = next(tap_iter, None)
        for depth, block in enumerate(self.blocks, start=1):
            x = block(x)
            if nxt is not None and nxt[0] == depth:
                taps.append(nxt[1](x))
                nxt = next(tap_iter, None)
        return ImageEmbedding(nx.concat(taps, axis=-1), source, self.cfg.tap_widths)


class FusionMapper(nn.Module):
    def __init__(self, cfg: FusionEncoderConfig, d_ctx: int, grid_tokens: int):
        super().__init__()
        self.grid_tokens = grid_tokens
        self.in_proj = nn.Linear(cfg.embed_width, d_ctx)
        self.source = nn.Parameter(torch.randn(2, d_ctx) * 0.02)
        self.pos = nn.Parameter(torch.randn(grid_tokens, d_ctx) * 0.02)
        self.queries = nn.Parameter(torch.randn(cfg.tokens, d_ctx) * 0.02)
        self.norm_kv = nn.LayerNorm(d_ctx)
        self.attn = nn.MultiheadAttention(d_ctx, 4, batch_first=True)
        self.norm_out = nn.LayerNorm(d_ctx)
        self.down = nn.Linear(d_ctx, cfg.rank)
        self.up = nn.Linear(cfg.rank, d_ctx)

    def project(self, emb: ImageEmbedding) -> Tensor:
        tokens = self.in_proj(emb.tokens)
        n = tokens.shape[1]
        if n % self.grid_tokens:
            raise ShapeError("fuse", emb.tokens.shape, (self.grid_tokens,), detail="token count is not a whole number of patch grids")
        pos = self.pos.repeat(n // self.grid_tokens, 1)
        return tokens + pos + self.source[emb.source]

    def forward(self, h_fore: ImageEmbedding, h_back: ImageEmbedding) -> Tensor:
        if h_fore.tokens.shape[-1] != h_back.tokens.shape[-1] or h_fore.tokens.shape[-1] != self.in_proj.in_features:
            raise ShapeError("fuse", h_fore.tokens.shape, h_back.tokens.shape, detail="embedding widths differ")
        if h_fore.source != FOREGROUND or h_back.source != BACKGROUND:
            raise ValueError("fuse expects one foreground and one background embedding")
        kv = self.norm_kv(nx.concat([self.project(h_fore), self.project(h_back)], axis=1))
        q = self.queries.expand(kv.shape[0], -1, -1)
        x = q + self.attn(q, kv, kv, need_weights=False)[0]
        return x + self.up(self.down(self.norm_out(x)))


class FusionModule(nn.Module):
    def __init__(self, cfg: FusionEncoderConfig, image_size: int, d_ctx: int):
        super().__init__()
        self.cfg = cfg
        self.encoder = FusionEncoder(cfg, image_size)
        self.mapper = FusionMapper(cfg, d_ctx, self.encoder.grid**2)
        self.null_tokens = nn.Parameter(torch.randn(cfg.tokens, d_ctx) * 0.02)

    def encode_image(self, images: Tensor, source: int = FOREGROUND) -> ImageEmbedding:
        return self.encoder(images, source)

    def fuse(self, h_fore: ImageEmbedding, h_back: ImageEmbedding) -> Tensor:
        return self.mapper(h_fore, h_back)

    def null_embedding(self, batch: int = 1) -> Tensor:
        return self.null_tokens.unsqueeze(0).expand(batch, -1, -1)

    def forward(self, foregrounds: Tensor | list[Tensor], background: Tensor) -> Tensor:
        """Fused context ``(B, K, d_ctx)``; several foregrounds have their tokens concatenated."""
        if isinstance(foregrounds, Tensor):
            foregrounds = [foregrounds]
        embs = [self.encode_image(fg, FOREGROUND) for fg in foregrounds]
        h_fore = ImageEmbedding(nx.concat([e.tokens for e in embs], axis=1), FOREGROUND, embs[0].widths)
        return self.fuse(h_fore, self.encode_image(background, BACKGROUND))

    def single_image_context(self, foreground: Tensor) -> Tensor:
        """Ablation context: projected foreground tokens only, no mapping network.

        Tokens are average-pooled down to the configured token budget so the
        result can stand in for a fused embedding anywhere.
        """
        tokens = self.mapper.project(self.encode_image(foreground, FOREGROUND))
        pooled = F.adaptive_avg_pool1d(tokens.transpose(1, 2), self.cfg.tokens)
        return pooled.transpose(1, 2)
