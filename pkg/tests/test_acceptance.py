"""End-to-end acceptance checks.

Each test prints one ``criterion N PASS|FAIL`` line (run with ``-s`` or read
test_output.txt) and then asserts the same condition. The lines are
also collected into an "acceptance criteria" section of the terminal summary.
"""

import copy
import dataclasses

import numpy as np
import pytest
import torch

from foodfuse.diffusion import SamplerConfig, add_noise, build_schedule, cfg_combine, ddim_step
from foodfuse.evaluation import evaluate, perceptual_distance, psnr
from foodfuse.forge import ForgeConfig, build_dataset, forge_records, load_manifest, load_split, outside_region
from foodfuse.images import to_array, to_tensor
from foodfuse.model import CompositionModel, ModelConfig
from foodfuse.numerics import RngStream, grad_check
from foodfuse.training import TrainConfig, Trainer, loss, make_batch, moving_average

from gradutil import perturb_zero_params, sampled_param_grad_check, swapped_params
from test_numerics import PRIMITIVES, rand

SCHED = build_schedule()
SAMPLER = SamplerConfig()  # 30 steps, guidance 1.5, eta 0, seed 0
TOY = TrainConfig(batch_size=8, learning_rate=5e-4, early_stop_patience=None, epochs=100_000)


@pytest.fixture
def report(acceptance_log):
    def emit(n, ok, detail):
        line = f"criterion {n} {'PASS' if ok else 'FAIL'}: {detail}"
        print("\n" + line)
        acceptance_log.append(line)
        return ok
    return emit


# 1 -------------------------------------------------------------------------
def test_gradients_match_central_differences(toy_splits, report):
    worst_prim = {name: grad_check(f, rand(*shape, seed=7)) for name, (f, shape) in PRIMITIVES.items()}
    model = CompositionModel(ModelConfig()).double()
    assert model.cfg.unet.levels == 2
    perturb_zero_params(model, seed=0)
    batch = make_batch(toy_splits["train"][:2])
    batch = dataclasses.replace(batch, **{k: v.double() for k, v in vars(batch).items()})

    def full_loss(params):
        with swapped_params(model, params):
            return loss(batch, model, model.schedule, RngStream(0, ("acc1",)), TOY)

    assert model.codec.encode(batch.ground_truth).shape[-2:] == (16, 16)
    # Roundoff in a float64 central difference is about 1e-16 * |loss| / h. The error
    # floor of 1e-8 then needs h >= 1e-4 to resolve near-zero attention gradients.
    worst_loss = sampled_param_grad_check(model, full_loss, n_coords=64, seed=2, h=3e-4)
    worst = max(max(worst_prim.values()), worst_loss)
    ok = report(1, worst < 1e-4, f"max rel err primitives {max(worst_prim.values()):.2e}, full loss {worst_loss:.2e}")
    assert ok


# 2 -------------------------------------------------------------------------
def test_untrained_control_branch_is_exact_noop(report):
    model = CompositionModel(ModelConfig()).eval()
    s = RngStream(0, ("acc2",))
    equal = 0
    with torch.no_grad():
        for i in range(10):
            z = s.child("z", i).normal((10, 48, 16, 16))
            bg = s.child("bg", i).normal((10, 48, 16, 16))
            ctx = s.child("c", i).normal((10, 16, 128))
            t = torch.randint(0, 1000, (10,), generator=s.child("t", i).torch())
            a = model.predict_noise(z, t, ctx, bg, use_cscm=True)
            b = model.predict_noise(z, t, ctx, bg, use_cscm=False)
            equal += int(sum(torch.equal(a[j], b[j]) for j in range(10)))
    ok = report(2, equal == 100, f"{equal}/100 inputs bit-identical with the branch on and off")
    assert ok


# 3 -------------------------------------------------------------------------
def test_ddim_determinism_and_inversion(report):
    model = CompositionModel(ModelConfig()).eval()
    fg = torch.rand(1, 3, 64, 64, generator=torch.Generator().manual_seed(0))
    bg = torch.rand(1, 3, 64, 64, generator=torch.Generator().manual_seed(1))
    sampler = dataclasses.replace(SAMPLER, steps=10)
    same = torch.equal(model.compose(fg, bg, sampler), model.compose(fg, bg, sampler))
    z0 = RngStream(0, ("acc3", "z0")).normal((2, 48, 16, 16), torch.float64)
    eps = RngStream(0, ("acc3", "eps")).normal((2, 48, 16, 16), torch.float64)
    err = max((ddim_step(add_noise(z0, t, eps, SCHED), eps, t, -1, SCHED) - z0).abs().max().item()
              for t in (1, 250, 500, 750, 999))
    ok = report(3, same and err < 1e-5, f"repeat sampling bit-identical={same}, max inversion error {err:.2e}")
    assert ok


# 4 -------------------------------------------------------------------------
def test_forward_noise_variance(report):
    s = RngStream(0, ("acc4",))
    var = {}
    for t in (1, SCHED.T // 2, SCHED.T - 1):
        z0 = s.child("z0", t).normal((100_000,), torch.float64)
        eps = s.child("eps", t).normal((100_000,), torch.float64)
        var[t] = add_noise(z0, t, eps, SCHED).var().item()
    ok = report(4, all(0.9 <= v <= 1.1 for v in var.values()),
                ", ".join(f"Var(z_{t})={v:.4f}" for t, v in var.items()))
    assert ok


# 5 -------------------------------------------------------------------------
def test_stub_loss_baselines(toy_splits, report):
    model = CompositionModel(ModelConfig())
    batch = make_batch(toy_splits["train"])
    rng = RngStream(0, ("acc5",))
    elements = batch.ground_truth.shape[0] * 48 * 16 * 16
    exact = loss(batch, model, model.schedule, rng, TOY, predictor=lambda d: d.eps).item()
    zero = loss(batch, model, model.schedule, rng, TOY, predictor=lambda d: torch.zeros_like(d.eps)).item()
    ok = report(5, exact == 0.0 and 0.9 <= zero <= 1.1 and elements >= 10_000,
                f"loss(eps)={exact}, loss(0)={zero:.4f} over {elements} elements")
    assert ok


# 6 and 7 share one training run ---------------------------------------------
@pytest.fixture(scope="module")
def toy_run(toy_splits):
    train, val = toy_splits["train"], toy_splits["val"]
    assert len(train) == 8
    model = CompositionModel(ModelConfig())
    untrained = copy.deepcopy(model).eval()
    trainer = Trainer(model, train, val, TOY)
    trainer.run(200)
    return {"model": model, "untrained": untrained, "trainer": trainer,
            "state_200": copy.deepcopy(model.state_dict()), "train": train}


def test_toy_training_reduces_loss_and_freeze_keeps_trunk(toy_run, report):
    losses = [r.train_loss for r in toy_run["trainer"].curve]
    ma = moving_average(losses, 10)
    ratio = ma[-1] / ma[0]
    # continue briefly from the 200-step (pre-trained) state with the trunk frozen
    frozen = CompositionModel(ModelConfig())
    frozen.load_state_dict(toy_run["state_200"])
    before = {g: frozen.group_digest(g) for g in frozen.groups()}
    Trainer(frozen, toy_run["train"], [], dataclasses.replace(TOY, freeze_trunk=True)).run(20)
    after = {g: frozen.group_digest(g) for g in frozen.groups()}
    kept = all(before[g] == after[g] for g in ("unet_trunk", "latent_codec"))
    moved = all(before[g] != after[g] for g in ("fusion_module", "cscm"))
    ok = report(6, len(losses) == 200 and ratio <= 0.7 and kept and moved,
                f"10-step average {ma[0]:.4f} -> {ma[-1]:.4f} (ratio {ratio:.3f}); "
                f"frozen hashes unchanged={kept}, trainable groups moved={moved}")
    assert ok


@pytest.mark.slow
def test_composition_beats_untrained_baseline(toy_run, toy_splits, report):
    toy_run["trainer"].run(2000)
    model, base = toy_run["model"].eval(), toy_run["untrained"]
    rec = toy_run["train"][0]

    def compose_psnr(m, r):
        out = m.compose(to_tensor(r.foreground), to_tensor(r.background), SAMPLER)
        return psnr(to_array(out), r.ground_truth)

    trained_db, base_db = compose_psnr(model, rec), compose_psnr(base, rec)
    test = toy_splits["test"]
    trained_test = evaluate(model, test, SAMPLER)[0].psnr
    base_test = evaluate(base, test, SAMPLER)[0].psnr
    ok = report(7, trained_db >= base_db + 3.0 and trained_test > base_test,
                f"training triplet {trained_db:.2f} dB vs untrained {base_db:.2f} dB; "
                f"test mean {trained_test:.2f} dB vs untrained {base_test:.2f} dB")
    assert ok


# 8 -------------------------------------------------------------------------
def test_forge_contracts(tmp_path, report):
    cfg = ForgeConfig(triplet_count=100, seed=11)
    a = build_dataset(cfg, tmp_path / "a")
    build_dataset(cfg, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    identical = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    identical = identical and files == sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    counts = [sum(e["split"] == s for e in load_manifest(tmp_path / "a")) for s in ("train", "val", "test")]
    records = [r for s in ("train", "val", "test") for r in load_split(tmp_path / "a", s)]
    worst_outside = max(float(np.abs(r.ground_truth - r.background)[outside_region(r.mask, cfg.shadow_margin)].mean())
                        for r in records)
    plain = forge_records(dataclasses.replace(cfg, shadow_enabled=False)).records
    exact = all(np.array_equal(r.ground_truth, r.mask * r.foreground + (1 - r.mask) * r.background) for r in plain)
    ok = report(8, identical and counts == [80, 10, 10] and len(records) == 100 and worst_outside < 2 / 255 and exact,
                f"rebuild identical={identical}, split {counts}, worst outside mean {worst_outside * 255:.3f}/255, "
                f"shadows-off exact composite on {len(plain)} records={exact}")
    assert a.accepted == 100
    assert ok


# 9 -------------------------------------------------------------------------
def test_guidance_contract(report):
    model = CompositionModel(ModelConfig()).eval()
    g = torch.Generator().manual_seed(5)
    fg, bg = torch.rand(1, 3, 64, 64, generator=g), torch.rand(1, 3, 64, 64, generator=g)
    sampler = SamplerConfig(steps=10, guidance_scale=1.0, seed=3)
    identity = torch.equal(model.compose(fg, bg, sampler), model.compose(fg, bg, sampler, conditional_only=True))
    s = RngStream(0, ("acc9",))
    endpoints = True
    for i in range(20):
        c, u = s.child("c", i).normal((2, 48, 16, 16)), s.child("u", i).normal((2, 48, 16, 16))
        endpoints &= torch.equal(cfg_combine(c, u, 1.0), c) and torch.equal(cfg_combine(c, u, 0.0), u)
    ok = report(9, identity and endpoints, f"guidance 1.0 == conditional-only: {identity}; exact at s in {{0,1}}: {endpoints}")
    assert ok


# 10 ------------------------------------------------------------------------
def test_metric_correctness(report):
    a = np.zeros((5, 5, 3))
    b = a.copy()
    b[0, 0] = 0.5  # 3 of 75 values off by 0.5: MSE is 0.25 / 25 = 0.01 exactly
    at_001 = psnr(a, b)
    sweep = [psnr(a, np.full_like(a, np.sqrt(m))) for m in np.geomspace(1e-6, 1.0, 30)]
    monotone = all(x > y for x, y in zip(sweep, sweep[1:]))
    enc = CompositionModel(ModelConfig()).fusion.encoder.eval()
    rng = np.random.default_rng(0)
    identity = symmetric = True
    for _ in range(100):
        x, y = rng.random((64, 64, 3)), rng.random((64, 64, 3))
        identity &= perceptual_distance(x, x, enc) == 0.0
        symmetric &= perceptual_distance(x, y, enc) == perceptual_distance(y, x, enc)
    ok = report(10, at_001 == 20.0 and monotone and identity and symmetric,
                f"PSNR(MSE=0.01)={at_001!r} dB, monotone={monotone}, d(x,x)=0: {identity}, symmetric: {symmetric}")
    assert ok
