import copy

import pytest
import torch

from foodfuse.numerics import RngStream, ShapeError, seeded
from foodfuse.unet import CrossAttention, UNet, UNetConfig, attention, timestep_embedding

from gradutil import call, sampled_param_grad_check

SMALL = UNetConfig(latent_channels=4, base_channels=16, d_ctx=8, timestep_embed_dim=16, heads=2, norm_groups=4)


def inputs(cfg, b=2, hw=16, dtype=torch.float32, seed=0):
    s = RngStream(seed, ("unet",))
    return (s.child("z").normal((b, cfg.latent_channels, hw, hw), dtype),
            torch.tensor([3, 800][:b]),
            s.child("c").normal((b, 5, cfg.d_ctx), dtype))


def test_attention_hand_values():
    q = torch.tensor([[0.0], [1.0]])
    k = torch.tensor([[0.0], [1.0]])
    v = torch.tensor([[0.0], [10.0]])
    out = attention(q, k, v)
    assert out[0].item() == pytest.approx(5.0)
    assert out[1].item() == pytest.approx(7.3106, abs=1e-4)


def test_single_context_token_returns_its_value_row():
    with seeded(0):
        ca = CrossAttention(8, 6, 2)
    seq, tok = torch.randn(1, 10, 8), torch.randn(1, 1, 6)
    out = ca.attend(seq, tok)
    v = ca.to_v(tok)
    assert torch.allclose(out, v.expand(1, 10, 8), atol=1e-6)
    assert torch.allclose(ca.attend(seq, tok.repeat(1, 2, 1)), out, atol=1e-6)


def test_context_width_mismatch():
    with seeded(0):
        ca = CrossAttention(8, 6, 2)
    with pytest.raises(ShapeError):
        ca.attend(torch.randn(1, 4, 8), torch.randn(1, 2, 5))


@pytest.mark.parametrize("hw", [8, 16])
def test_output_shape_matches_latent(hw):
    with seeded(0):
        net = UNet(SMALL)
    z, t, c = inputs(SMALL, hw=hw)
    assert net(z, t, c).shape == z.shape


def test_zero_injections_equal_absent():
    with seeded(0):
        net = UNet(SMALL)
    z, t, c = inputs(SMALL)
    zeros = [torch.zeros(2, *s) for s in SMALL.injection_signature((16, 16))]
    assert torch.equal(net(z, t, c, zeros), net(z, t, c))


def test_injection_signature_default():
    assert UNetConfig().injection_signature((16, 16)) == [(64, 16, 16), (128, 8, 8), (128, 8, 8)]


def test_bad_injection_rejected():
    with seeded(0):
        net = UNet(SMALL)
    z, t, c = inputs(SMALL)
    sig = SMALL.injection_signature((16, 16))
    with pytest.raises(ShapeError, match="injection 1"):
        net(z, t, c, [torch.zeros(2, *sig[0]), torch.zeros(2, 3, 3, 3), torch.zeros(2, *sig[2])])
    with pytest.raises(ShapeError):
        net(z, t, c, [torch.zeros(2, *sig[0])])


def test_timestep_sensitivity_and_embedding():
    with seeded(0):
        net = UNet(SMALL)
    z, _, c = inputs(SMALL)
    a = net(z, torch.tensor([10, 10]), c)
    b = net(z, torch.tensor([900, 900]), c)
    assert (a - b).abs().max().item() > 0
    emb = timestep_embedding(torch.tensor([0, 5]), 7)
    assert emb.shape == (2, 7) and emb[0, :3].tolist() == [1.0, 1.0, 1.0]


def test_invalid_configs():
    with pytest.raises(ValueError):
        UNetConfig(channel_multipliers=(1,)).validate()
    with pytest.raises(ValueError):
        UNetConfig(attention_levels=(2,)).validate()
    with pytest.raises(ValueError):
        UNetConfig(base_channels=30).validate()


def test_zero_init_output_option():
    with seeded(0):
        net = UNet(UNetConfig(**{**SMALL.__dict__, "zero_init_output": True}))
    z, t, c = inputs(SMALL)
    assert torch.equal(net(z, t, c), torch.zeros_like(z))


def test_sampled_parameter_gradients_float64():
    with seeded(0):
        net = UNet(SMALL).double()
    z, t, c = inputs(SMALL, dtype=torch.float64)

    def loss(params):
        return call(net, params, z, t, c).pow(2).sum()

    assert sampled_param_grad_check(net, loss, n_coords=32, seed=1) < 1e-4
