"""The composition model: codec, fusion module, denoiser and control branch."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .codec import LatentCodec, LatentCodecConfig
from .cscm import ControlBranch
from .diffusion import SamplerConfig, Schedule, build_schedule, sample
from .fusion import FusionEncoderConfig, FusionModule
from .numerics import Tensor, seeded
from .unet import UNet, UNetConfig

GROUPS = ("fusion_module", "cross_attention_projections", "cscm", "null_embeddings", "unet_trunk", "latent_codec")
_ATTN_PROJ = (".attn.to_q.", ".attn.to_k.", ".attn.to_v.", ".attn.to_out.")


@dataclass(frozen=True)
class DiffusionConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def schedule(self) -> Schedule:
        return build_schedule(self.T, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    codec: LatentCodecConfig = field(default_factory=LatentCodecConfig)
    fusion: FusionEncoderConfig = field(default_factory=FusionEncoderConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    seed: int = 0

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def param_group(name: str) -> str:
    if name.startswith("codec."):
        return "latent_codec"
    if name.endswith("null_tokens"):
        return "null_embeddings"
    if name.startswith("fusion."):
        return "fusion_module"
    if name.startswith("cscm."):
        return "cscm"
    if any(p in name for p in _ATTN_PROJ):
        return "cross_attention_projections"
    return "unet_trunk"


class CompositionModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        with seeded(cfg.seed):
            self.codec = LatentCodec(cfg.codec)
            self.fusion = FusionModule(cfg.fusion, cfg.image_size, cfg.unet.d_ctx)
            self.unet = UNet(cfg.unet)
            self.cscm = ControlBranch(self.unet, cfg.fusion.tokens)
        self.schedule = cfg.diffusion.schedule()

    def groups(self) -> dict[str, dict[str, nn.Parameter]]:
        out: dict[str, dict[str, nn.Parameter]] = {g: {} for g in GROUPS}
        for name, p in self.named_parameters():
            out[param_group(name)][name] = p
        return out

    def group_digest(self, group: str) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.groups()[group].items()):
            h.update(name.encode())
            h.update(p.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def context(self, foregrounds: Tensor | list[Tensor], background: Tensor, use_fusion: bool = True) -> Tensor:
        if use_fusion:
            return self.fusion(foregrounds, background)
        fg = foregrounds if isinstance(foregrounds, Tensor) else foregrounds[0]
        return self.fusion.single_image_context(fg)

    def null_context(self, batch: int) -> Tensor:
        return self.fusion.null_embedding(batch)

    def predict_noise(self, z_t: Tensor, t: Tensor, ctx: Tensor, bg_latent: Tensor | None = None,
                      use_cscm: bool = True) -> Tensor:
        injections = self.cscm(z_t, bg_latent, t) if use_cscm and bg_latent is not None else None
        return self.unet(z_t, t, ctx, injections)

    @torch.no_grad()
    def compose(self, foregrounds: Tensor | list[Tensor], background: Tensor, sampler: SamplerConfig,
                use_cscm: bool = True, use_fusion: bool = True, conditional_only: bool = False) -> Tensor:
        """Composite images ``(B, 3, H, W)`` in [0, 1] from foreground(s) and a background."""
        ctx = self.context(foregrounds, background, use_fusion)
        null = self.null_context(background.shape[0])
        bg_latent = self.codec.encode(background)

        def eps_fn(z: Tensor, t: Tensor, c: Tensor) -> Tensor:
            return self.predict_noise(z, t, c, bg_latent, use_cscm)

        z0 = sample(eps_fn, ctx, null, tuple(bg_latent.shape), sampler, self.schedule, conditional_only)
        return self.codec.decode(z0)
