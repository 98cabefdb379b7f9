"""Noise-prediction training of the composition model."""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import numerics as nx
from .augment import AugmentConfig, augment_foreground, resized_crop, sample_crop
from .diffusion import Schedule, add_noise
from .forge import TripletRecord
from .images import to_tensor
from .numerics import NumericalError, RngStream, Tensor

log = logging.getLogger(__name__)

TRAINABLE = ("fusion_module", "cross_attention_projections", "cscm", "null_embeddings")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 12
    learning_rate: float = 5e-5
    adam_beta1: float = 0.5
    adam_beta2: float = 0.99
    epochs: int = 300
    max_steps: int | None = None
    condition_dropout_prob: float = 0.1
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    early_stop_patience: int | None = 20
    freeze_trunk: bool = False
    use_cscm: bool = True
    use_fusion: bool = True
    val_draws: int = 4
    codec_steps: int = 1500

    def validate(self) -> None:
        if not 0.0 <= self.condition_dropout_prob <= 1.0 or not 0.0 <= self.augment.apply_prob <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        if self.batch_size < 1 or self.epochs < 1 or self.learning_rate <= 0 or self.val_draws < 1:
            raise ValueError("batch_size, epochs, learning_rate and val_draws must be positive")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ValueError("Adam betas must lie in [0, 1)")


@dataclass
class Batch:
    ground_truth: Tensor
    foreground: Tensor
    background: Tensor

    def __len__(self) -> int:
        return self.ground_truth.shape[0]


def make_batch(records: Sequence[TripletRecord], augment: AugmentConfig | None = None,
               stream: RngStream | None = None) -> Batch:
    """Stack records into tensors, optionally augmenting each with its own keyed stream."""
    gts, fgs, bgs = [], [], []
    for i, rec in enumerate(records):
        fg, gt, bg = rec.foreground, rec.ground_truth, rec.background
        if augment is not None and stream is not None:
            s = stream.child(i)
            fg, _ = augment_foreground(fg, rec.mask, s.child("fg"), augment)
            crop = sample_crop(s.child("bg"), augment)
            size = bg.shape[0]
            bg, gt = resized_crop(bg, *crop, size), resized_crop(gt, *crop, size)
        gts.append(gt)
        fgs.append(fg)
        bgs.append(bg)
    return Batch(to_tensor(gts), to_tensor(fgs), to_tensor(bgs))


@dataclass
class NoisingDraw:
    z0: Tensor
    z_t: Tensor
    t: Tensor
    eps: Tensor
    ctx: Tensor
    bg_latent: Tensor


def draw_noising(batch: Batch, model, sched: Schedule, rng: RngStream, cfg: TrainConfig) -> NoisingDraw:
    if len(batch) == 0:
        raise ValueError("loss: empty batch")
    if not (batch.ground_truth.shape == batch.foreground.shape == batch.background.shape):
        raise nx.ShapeError("loss", batch.ground_truth.shape, batch.foreground.shape, batch.background.shape)
    z0 = model.codec.encode(batch.ground_truth)
    b = z0.shape[0]
    t = torch.randint(0, sched.T, (b,), generator=rng.child("t").torch())
    eps = rng.child("eps").normal(z0.shape, z0.dtype)
    z_t = add_noise(z0, t, eps, sched)
    ctx = model.context(batch.foreground, batch.background, cfg.use_fusion)
    keep = torch.rand(b, generator=rng.child("drop").torch()) >= cfg.condition_dropout_prob
    ctx = torch.where(keep[:, None, None], ctx, model.null_context(b))
    return NoisingDraw(z0, z_t, t, eps, ctx, model.codec.encode(batch.background))


def loss(batch: Batch, model, sched: Schedule, rng: RngStream, cfg: TrainConfig,
         predictor: Callable[[NoisingDraw], Tensor] | None = None) -> Tensor:
    """Mean squared error between the drawn noise and its prediction.

    ``predictor`` replaces the model's noise prediction (it receives the
    full noising draw), which lets tests plug in exact or null stubs.
    """
    d = draw_noising(batch, model, sched, rng, cfg)
    if predictor is None:
        pred = model.predict_noise(d.z_t, d.t, d.ctx, d.bg_latent, cfg.use_cscm)
    else:
        pred = predictor(d)
    value = nx.mse(pred, d.eps)
    if not torch.isfinite(value):
        raise NumericalError(
            f"loss: non-finite value; timesteps={d.t.tolist()} "
            f"max|pred|={pred.detach().abs().max().item():.3g} max|z_t|={d.z_t.abs().max().item():.3g}"
        )
    return value


class TrainingAborted(NumericalError):
    def __init__(self, message: str, step: int):
        super().__init__(message)
        self.step = step


def configure_trainable(model, cfg: TrainConfig) -> list[str]:
    """Set ``requires_grad`` per group; returns the names of trainable groups."""
    groups = list(TRAINABLE) + ([] if cfg.freeze_trunk else ["unet_trunk"])
    for name, params in model.groups().items():
        for p in params.values():
            p.requires_grad_(name in groups)
    return groups


@dataclass
class CurveRow:
    step: int
    train_loss: float
    val_loss: float | None = None


class Trainer:
    """Owns the optimizer and loop state; ``run`` can be called repeatedly to continue."""

    def __init__(self, model, train: Sequence[TripletRecord], val: Sequence[TripletRecord], cfg: TrainConfig,
                 optimizer_state: dict | None = None, step: int = 0, epoch: int = 0):
        if not train:
            raise ValueError("training split is empty")
        self.model = model
        self.train_records = list(train)
        self.val_records = list(val)
        self.cfg = cfg
        self.sched = model.schedule
        self.groups = configure_trainable(model, cfg)
        self.named = {n: p for n, p in model.named_parameters() if p.requires_grad}
        self.opt = torch.optim.Adam(self.named.values(), lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2))
        if optimizer_state:
            self.load_optimizer_state(optimizer_state)
        self.step = step
        self.epoch = epoch
        self.curve: list[CurveRow] = []
        self.best_val = math.inf
        self.best_step = -1
        self.best_state: dict[str, Tensor] | None = None
        self.bad_epochs = 0
        self.stopped_early = False
        self._queue: list[list[int]] = []
        self._val_batch = make_batch(self.val_records) if self.val_records else None

    # -- optimizer state, keyed by parameter name for the checkpoint container
    def optimizer_state(self) -> dict:
        state = {"step": {}, "exp_avg": {}, "exp_avg_sq": {}}
        for name, p in self.named.items():
            s = self.opt.state.get(p)
            if s:
                state["step"][name] = int(s["step"])
                state["exp_avg"][name] = s["exp_avg"].detach().clone()
                state["exp_avg_sq"][name] = s["exp_avg_sq"].detach().clone()
        return state

    def load_optimizer_state(self, state: dict) -> None:
        for name, p in self.named.items():
            if name in state.get("exp_avg", {}):
                self.opt.state[p] = {
                    "step": torch.tensor(float(state["step"][name])),
                    "exp_avg": state["exp_avg"][name].to(p.dtype).clone(),
                    "exp_avg_sq": state["exp_avg_sq"][name].to(p.dtype).clone(),
                }

    def _next_indices(self) -> list[int] | None:
        if not self._queue:
            if self.epoch >= self.cfg.epochs:
                return None
            n = len(self.train_records)
            perm = RngStream(self.cfg.seed, ("epoch", self.epoch)).numpy().permutation(n).tolist()
            bs = min(self.cfg.batch_size, n)
            self._queue = [perm[i:i + bs] for i in range(0, n, bs)]
        return self._queue.pop(0)

    def train_step(self, indices: Sequence[int]) -> float:
        stream = RngStream(self.cfg.seed, ("step", self.step))
        batch = make_batch([self.train_records[i] for i in indices], self.cfg.augment, stream.child("augment"))
        self.model.train()
        value = loss(batch, self.model, self.sched, stream.child("noise"), self.cfg)
        self.opt.zero_grad(set_to_none=True)
        value.backward()
        for name, p in self.named.items():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise TrainingAborted(f"non-finite gradient in {name} at step {self.step}", self.step)
        self.opt.step()
        self.step += 1
        return value.item()

    @torch.no_grad()
    def validate(self) -> float | None:
        if self._val_batch is None:
            return None
        self.model.eval()
        cfg = TrainConfig(**{**self.cfg.__dict__, "condition_dropout_prob": 0.0})
        total = 0.0
        for k in range(self.cfg.val_draws):
            total += loss(self._val_batch, self.model, self.sched, RngStream(self.cfg.seed, ("val", k)), cfg).item()
        return total / self.cfg.val_draws

    def _end_epoch(self) -> None:
        self.epoch += 1
        val = self.validate()
        if self.curve:
            self.curve[-1].val_loss = val
        if val is None:
            return
        if val < self.best_val:
            self.best_val, self.best_step, self.bad_epochs = val, self.step, 0
            self.best_state = {k: v.detach().clone() for k, v in self.model.state_dict().items()}
        else:
            self.bad_epochs += 1
            patience = self.cfg.early_stop_patience
            if patience is not None and self.bad_epochs >= patience:
                self.stopped_early = True

    def run(self, max_steps: int | None = None) -> list[CurveRow]:
        """Train until ``max_steps`` total steps, the epoch budget, or early stopping."""
        limit = max_steps if max_steps is not None else self.cfg.max_steps
        while not self.stopped_early and (limit is None or self.step < limit):
            indices = self._next_indices()
            if indices is None:
                break
            value = self.train_step(indices)
            self.curve.append(CurveRow(self.step, value))
            if not self._queue:
                self._end_epoch()
            if self.step % 50 == 0:
                log.info("step %d loss %.4f", self.step, value)
        return self.curve

    def finalize(self) -> None:
        """Restore the weights with the best validation loss seen, if any."""
        if self.best_state is not None:
            self.model.load_state_dict(self.best_state)


def write_curve(path: str | Path, rows: Sequence[CurveRow]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "train_loss", "val_loss"])
        for r in rows:
            w.writerow([r.step, repr(r.train_loss), "" if r.val_loss is None else repr(r.val_loss)])


def moving_average(values: Sequence[float], window: int = 10) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([v.mean()])
    return np.convolve(v, np.ones(window) / window, mode="valid")
