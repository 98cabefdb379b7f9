import torch

from foodfuse.cscm import ControlBranch, ZeroProjection
from foodfuse.model import CompositionModel, ModelConfig
from foodfuse.numerics import RngStream, seeded
from foodfuse.unet import UNet, UNetConfig

SMALL = UNetConfig(latent_channels=4, base_channels=16, d_ctx=8, timestep_embed_dim=16, heads=2, norm_groups=4)


def test_zero_projection_is_zero():
    p = ZeroProjection(5)
    assert torch.equal(p(torch.randn(1, 5, 3, 3)), torch.zeros(1, 5, 3, 3))


def test_untrained_features_are_exactly_zero_and_match_signature():
    with seeded(0):
        unet = UNet(SMALL)
        branch = ControlBranch(unet, 3)
    z, bg = torch.randn(2, 4, 16, 16), torch.randn(2, 4, 16, 16)
    feats = branch(z, bg, torch.tensor([1, 500]))
    assert [tuple(f.shape[1:]) for f in feats] == SMALL.injection_signature((16, 16))
    assert all(torch.equal(f, torch.zeros_like(f)) for f in feats)


def test_branch_is_a_copy_not_shared():
    with seeded(0):
        unet = UNet(SMALL)
        branch = ControlBranch(unet, 3)
    a = dict(unet.encoder.named_parameters())
    for name, p in branch.encoder.named_parameters():
        assert torch.equal(p, a[name]) and p.data_ptr() != a[name].data_ptr()


def test_full_model_matches_no_cscm_at_init():
    model = CompositionModel(ModelConfig())
    s = RngStream(0, ("cscm",))
    z = s.child("z").normal((2, 48, 16, 16))
    bg = s.child("bg").normal((2, 48, 16, 16))
    ctx = s.child("c").normal((2, 16, 128))
    t = torch.tensor([10, 700])
    with torch.no_grad():
        assert torch.equal(model.predict_noise(z, t, ctx, bg, True), model.predict_noise(z, t, ctx, bg, False))


def test_one_step_makes_output_projection_nonzero():
    model = CompositionModel(ModelConfig())
    s = RngStream(1, ("cscm",))
    z, bg = s.child("z").normal((2, 48, 16, 16)), s.child("bg").normal((2, 48, 16, 16))
    eps, ctx = s.child("e").normal((2, 48, 16, 16)), s.child("c").normal((2, 16, 128))
    params = list(model.cscm.parameters())
    opt = torch.optim.Adam(params, lr=1e-3)
    loss = (model.predict_noise(z, torch.tensor([5, 600]), ctx, bg, True) - eps).pow(2).mean()
    loss.backward()
    grads = [proj.weight.grad for proj in model.cscm.zero_out]
    assert any(g is not None and g.abs().max() > 0 for g in grads)
    opt.step()
    assert any(proj.weight.abs().max() > 0 for proj in model.cscm.zero_out)
