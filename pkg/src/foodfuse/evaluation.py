"""Composite-quality metrics and the evaluation harness.

PSNR is exact. The perceptual distance is a proxy for LPIPS computed with
the model's own fusion encoder; reports label it as such.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from collections.abc import Sequence

import numpy as np
import torch

from .diffusion import SamplerConfig
from .forge import TripletRecord
from .images import Image, contact_sheet, save_png, to_array, to_tensor
from .numerics import ShapeError

PSNR_CAP = 100.0
PERCEPTUAL_LABEL = "feature-distance proxy (own fusion encoder), not LPIPS"


def psnr(a: Image, b: Image, cap: float = PSNR_CAP) -> float:
    if a.shape != b.shape:
        raise ShapeError("psnr", a.shape, b.shape)
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


@torch.no_grad()
def perceptual_distance(a: Image, b: Image, encoder) -> float:
    """Mean over encoder taps of the token-averaged L2 distance between unit-normalized features."""
    if a.shape != b.shape:
        raise ShapeError("perceptual_distance", a.shape, b.shape)
    fa = encoder(to_tensor(a), 0).per_tap()
    fb = encoder(to_tensor(b), 0).per_tap()
    per_tap = []
    for x, y in zip(fa, fb):
        x = x / (x.norm(dim=-1, keepdim=True) + 1e-10)
        y = y / (y.norm(dim=-1, keepdim=True) + 1e-10)
        per_tap.append((x - y).norm(dim=-1).mean().item())
    return float(np.mean(per_tap))


@dataclass
class MetricReport:
    samples: list[dict]
    psnr: float
    perceptual: float
    count: int
    config_digest: str
    checkpoint_digest: str
    flags: dict = field(default_factory=dict)
    perceptual_label: str = PERCEPTUAL_LABEL

    def aggregate(self) -> dict:
        out = asdict(self)
        out.pop("samples")
        return out


def evaluate(model, records: Sequence[TripletRecord], sampler: SamplerConfig, no_cscm: bool = False,
             no_fusion: bool = False, oracle: bool = False, checkpoint_digest: str = "",
             batch_size: int = 8) -> tuple[MetricReport, list[Image]]:
    """Compose every record and compare against its ground truth.

    ``oracle`` skips the model and scores the ground truth against itself.
    """
    composites: list[Image] = []
    model.eval()
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        if oracle:
            composites += [r.ground_truth.copy() for r in chunk]
            continue
        fg = to_tensor([r.foreground for r in chunk])
        bg = to_tensor([r.background for r in chunk])
        out = model.compose(fg, bg, sampler, use_cscm=not no_cscm, use_fusion=not no_fusion)
        composites += [to_array(img) for img in out]
    samples = []
    for rec, comp in zip(records, composites):
        samples.append({
            "id": rec.id,
            "psnr": psnr(comp, rec.ground_truth),
            "perceptual_proxy": perceptual_distance(comp, rec.ground_truth, model.fusion.encoder),
        })
    report = MetricReport(
        samples=samples,
        psnr=float(np.mean([s["psnr"] for s in samples])) if samples else float("nan"),
        perceptual=float(np.mean([s["perceptual_proxy"] for s in samples])) if samples else float("nan"),
        count=len(samples),
        config_digest=model.cfg.digest(),
        checkpoint_digest=checkpoint_digest,
        flags={"no_cscm": no_cscm, "no_fusion": no_fusion, "oracle": oracle,
               "steps": sampler.steps, "guidance_scale": sampler.guidance_scale, "seed": sampler.seed},
    )
    return report, composites


def write_report(report: MetricReport, out_dir: str | Path, records: Sequence[TripletRecord],
                 composites: Sequence[Image], sheet_rows: int = 8) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "per_sample.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "psnr_db", "perceptual_proxy"])
        for s in report.samples:
            w.writerow([s["id"], repr(s["psnr"]), repr(s["perceptual_proxy"])])
    (out / "aggregate.json").write_text(json.dumps(report.aggregate(), indent=2) + "\n", encoding="utf-8")
    rows = [[r.foreground, r.background, c, r.ground_truth] for r, c in list(zip(records, composites))[:sheet_rows]]
    if rows:
        save_png(out / "contact_sheet.png", contact_sheet(rows))
