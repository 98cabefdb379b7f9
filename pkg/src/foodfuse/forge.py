"""Procedural triplet dataset.

Stages, each a deterministic stand-in for a generative or segmentation
model:

1. scene synthesis (clean ground truth with an exact mask)
2. foreground acquisition (mask cut-out over a neutral canvas)
3. foreground views (2-D affine + perspective warps instead of a 3-D model)
4. background generation (harmonic fill plus matched texture noise instead
   of diffusion inpainting)
5. quality filtering (heuristic score instead of a learned scorer)

Every record draws from its own :class:`RngStream`, so output depends only
on ``(seed, scene index)`` and never on worker count.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.linalg import spsolve

from .images import Image, load_png, quantize, save_png
from .numerics import RngStream

IMAGE_NAMES = ("foreground", "mask", "background", "ground_truth")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ForgeConfig:
    image_size: int = 64
    triplet_count: int = 100
    shadow_enabled: bool = True
    shadow_margin: int = 4
    views_per_foreground: int = 2
    quality_threshold: float = 0.5
    min_frac: float = 0.05
    max_frac: float = 0.6
    canvas: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def validate(self) -> None:
        if self.image_size < 16:
            raise ValueError("forge.image_size must be at least 16")
        if self.triplet_count < 1 or self.views_per_foreground < 1:
            raise ValueError("forge.triplet_count and forge.views_per_foreground must be positive")
        if not 0.0 < self.min_frac < self.max_frac < 1.0:
            raise ValueError("forge.min_frac/max_frac must satisfy 0 < min < max < 1")
        if not 0.0 <= self.quality_threshold <= 1.0:
            raise ValueError("forge.quality_threshold must lie in [0, 1]")


@dataclass
class TripletRecord:
    id: str
    foreground: Image
    mask: Image
    background: Image
    ground_truth: Image
    view_params: dict = field(default_factory=dict)
    quality_score: float = 0.0
    seed: int = 0
    split: str = ""


# ---------------------------------------------------------------------------
# scene synthesis

_PLATE_COLORS = [(0.95, 0.95, 0.93), (0.86, 0.90, 0.95), (0.20, 0.22, 0.25), (0.93, 0.86, 0.76)]
_FOOD_PALETTES = [
    [(0.85, 0.55, 0.15), (0.60, 0.30, 0.08)],   # fried
    [(0.30, 0.62, 0.20), (0.80, 0.15, 0.10)],   # salad with tomato
    [(0.92, 0.85, 0.60), (0.55, 0.25, 0.15)],   # noodles with beef
    [(0.75, 0.12, 0.12), (0.95, 0.75, 0.30)],   # curry
    [(0.96, 0.94, 0.88), (0.35, 0.55, 0.25)],   # rice with greens
]


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    coarse = rng.normal(size=(cells, cells))
    return ndimage.zoom(coarse, size / cells, order=3, mode="grid-wrap", grid_mode=True)[:size, :size]


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    top, bottom = rng.uniform(0.35, 0.95, 3), rng.uniform(0.25, 0.85, 3)
    img = top * (1 - yy[..., None]) + bottom * yy[..., None]
    tile = rng.integers(4, 9)
    img += 0.03 * (((np.floor(xx * tile) + np.floor(yy * tile)) % 2)[..., None] - 0.5)
    horizon = rng.uniform(0.25, 0.45)
    table = rng.uniform(0.3, 0.8, 3)
    if rng.random() < 0.5:
        # wood grain
        freq = rng.uniform(12, 30)
        grain = np.sin(2 * np.pi * (yy * freq + 0.3 * np.sin(2 * np.pi * xx * rng.uniform(1, 3))))
        band = table + 0.06 * grain[..., None]
    else:
        # checked tablecloth
        cells = rng.integers(5, 10)
        check = ((np.floor(xx * cells) + np.floor(yy * cells)) % 2)[..., None]
        band = table * (0.8 + 0.2 * check)
    band = band + 0.02 * _smooth_noise(rng, size, 8)[..., None]
    img = np.where((yy > horizon)[..., None], band, img)
    return np.clip(img, 0.0, 1.0)


def _blob(rng: np.random.Generator, size: int, cx: float, cy: float, radius: float) -> np.ndarray:
    """Smooth closed curve r(theta) = r0 (1 + sum a_k cos(k theta + phi_k)), filled."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    theta = np.arctan2(yy - cy, xx - cx)
    r = np.hypot(xx - cx, yy - cy)
    boundary = np.ones_like(theta)
    for k in range(2, 5):
        boundary += rng.uniform(0.0, 0.12) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    return r <= radius * boundary


def _layer(rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Foreground RGB layer and boolean mask: 1-3 plated dishes."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    layer = np.zeros((size, size, 3))
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(rng.integers(1, 4)):
        a = rng.uniform(0.12, 0.28) * size
        b = a * rng.uniform(0.6, 0.9)
        cx, cy = rng.uniform(a, size - a), rng.uniform(size * 0.35, size - b * 0.8)
        plate = ((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2 <= 1.0
        rim = plate & (((xx - cx) / (0.82 * a)) ** 2 + ((yy - cy) / (0.82 * b)) ** 2 > 1.0)
        pc = np.array(_PLATE_COLORS[rng.integers(len(_PLATE_COLORS))])
        layer[plate] = pc
        layer[rim] = pc * 0.85
        food = _blob(rng, size, cx, cy - 0.1 * b, 0.55 * b) & plate
        base, accent = (np.array(c) for c in _FOOD_PALETTES[rng.integers(len(_FOOD_PALETTES))])
        tex = _smooth_noise(rng, size, 16)
        spots = (tex > 0.9)[..., None]
        shade = (1.0 + 0.12 * tex)[..., None]
        food_rgb = np.where(spots, accent, base * shade)
        layer[food] = np.clip(food_rgb[food], 0.0, 1.0)
        mask |= plate
    return layer, mask


def _shadow(mask: np.ndarray, margin: int) -> np.ndarray:
    """Darkening factor in (0, 1]; differs from 1 only within ``margin`` pixels of the mask."""
    soft = ndimage.gaussian_filter(np.roll(mask.astype(float), (margin // 2, margin // 2), axis=(0, 1)), margin / 2)
    zone = ndimage.binary_dilation(mask, iterations=margin) & ~mask
    return 1.0 - 0.45 * np.where(zone, np.clip(soft * 1.5, 0, 1), 0.0)


def render(background: np.ndarray, layer: Image, mask: Image, shadow_margin: int | None) -> Image:
    """Hard-mask composite of ``layer`` over ``background``, optionally with a soft shadow."""
    m = mask[..., 0] > 0.5
    base = background * _shadow(m, shadow_margin)[..., None] if shadow_margin else background
    return quantize(np.where(m[..., None], layer, base))


def synthesize_scene(seed: int, size: int = 64, min_frac: float = 0.05, max_frac: float = 0.6,
                     shadow_margin: int | None = 4) -> tuple[Image, Image]:
    """Clean ground truth and its exact binary mask (``HxWx1``)."""
    bg, layer, mask = _scene_parts(RngStream(seed, ("scene",)), size, min_frac, max_frac)
    return render(bg, layer, mask, shadow_margin), mask


def _scene_parts(stream: RngStream, size: int, min_frac: float, max_frac: float):
    for attempt in range(1000):
        rng = stream.child(attempt).numpy()
        bg = quantize(_background(rng, size))
        layer, m = _layer(rng, size)
        if min_frac <= m.mean() <= max_frac:
            return bg, quantize(layer), m[..., None].astype(np.float64)
    raise RuntimeError("scene synthesis could not meet the mask-fraction bounds")


# ---------------------------------------------------------------------------
# foreground acquisition and views


def acquire_foreground(ground_truth: Image, mask: Image, canvas: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> Image:
    m = mask[..., 0] > 0.5
    if not m.any():
        raise ValueError("acquire_foreground: mask is empty")
    return np.where(m[..., None], ground_truth, np.asarray(canvas, dtype=np.float64))


IDENTITY_VIEW = {"rotation_deg": 0.0, "scale": 1.0, "shear": 0.0, "perspective_x": 0.0,
                 "perspective_y": 0.0, "translate_x": 0.0, "translate_y": 0.0}


def view_matrix(params: dict, size: int) -> np.ndarray:
    """Forward homography (output <- input) about the image center, in pixel units."""
    c = size / 2.0
    th = math.radians(params["rotation_deg"])
    s = params["scale"]
    center = np.array([[1, 0, c + params["translate_x"] * size], [0, 1, c + params["translate_y"] * size], [0, 0, 1.0]])
    rot = np.array([[math.cos(th), -math.sin(th), 0], [math.sin(th), math.cos(th), 0], [0, 0, 1.0]])
    shear = np.array([[1, params["shear"], 0], [0, 1, 0], [0, 0, 1.0]])
    scale = np.array([[s, 0, 0], [0, s, 0], [0, 0, 1.0]])
    persp = np.array([[1, 0, 0], [0, 1, 0], [params["perspective_x"] / size, params["perspective_y"] / size, 1.0]])
    uncenter = np.array([[1, 0, -c], [0, 1, -c], [0, 0, 1.0]])
    return center @ persp @ rot @ shear @ scale @ uncenter


def warp(image: Image, params: dict, fill: float | tuple[float, ...] = 0.0) -> Image:
    """Apply a view warp with bilinear resampling; the same operator serves images and masks."""
    if params == IDENTITY_VIEW:
        return image.copy()
    h, w, ch = image.shape
    inv = np.linalg.inv(view_matrix(params, h))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = inv @ np.stack([xx.ravel(), yy.ravel(), np.ones(h * w)])
    sx, sy = pts[0] / pts[2], pts[1] / pts[2]
    fills = np.broadcast_to(np.asarray(fill, dtype=np.float64), (ch,))
    out = np.empty_like(image)
    for c in range(ch):
        out[..., c] = ndimage.map_coordinates(image[..., c], [sy, sx], order=1, mode="constant",
                                              cval=float(fills[c])).reshape(h, w)
    return out


def sample_view_params(rng: np.random.Generator) -> dict:
    return {
        "rotation_deg": float(rng.uniform(-30.0, 30.0)),
        "scale": float(rng.uniform(0.7, 1.3)),
        "shear": float(rng.uniform(-0.15, 0.15)),
        "perspective_x": float(rng.uniform(-0.15, 0.15)),
        "perspective_y": float(rng.uniform(-0.15, 0.15)),
        "translate_x": float(rng.uniform(-0.1, 0.1)),
        "translate_y": float(rng.uniform(-0.1, 0.1)),
    }


def warp_pair(foreground: Image, mask: Image, params: dict,
              canvas: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> tuple[Image, Image]:
    m = (warp(mask, params, 0.0) >= 0.5).astype(np.float64)
    fg = quantize(warp(foreground, params, canvas))
    return np.where(m > 0.5, fg, np.asarray(canvas)), m


def generate_views(foreground: Image, mask: Image, n: int, seed: int | RngStream, min_frac: float = 0.05,
                   max_frac: float = 0.6, canvas: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> list[tuple[Image, Image, dict]]:
    if n < 1:
        raise ValueError("generate_views: n must be at least 1")
    stream = seed if isinstance(seed, RngStream) else RngStream(seed, ("views",))
    views = []
    for k in range(n):
        for attempt in range(100):
            params = sample_view_params(stream.child(k, attempt).numpy())
            fg, m = warp_pair(foreground, mask, params, canvas)
            if min_frac <= m.mean() <= max_frac:
                views.append((fg, m, params))
                break
        else:
            raise RuntimeError(f"generate_views: view {k} fell outside the mask-fraction bounds 100 times")
    return views


# ---------------------------------------------------------------------------
# background generation


def _harmonic_fill(image: np.ndarray, region: np.ndarray) -> np.ndarray:
    """Solve Laplace's equation inside ``region`` with the surrounding pixels as boundary values."""
    h, w = region.shape
    idx = -np.ones((h, w), dtype=np.int64)
    ys, xs = np.nonzero(region)
    idx[ys, xs] = np.arange(len(ys))
    n = len(ys)
    rows, cols, vals = [], [], []
    rhs = np.zeros((n, image.shape[2]))
    degree = np.zeros(n)
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ny, nx_ = ys + dy, xs + dx
        inside = (ny >= 0) & (ny < h) & (nx_ >= 0) & (nx_ < w)
        degree += inside
        ny, nx_, src = ny[inside], nx_[inside], np.nonzero(inside)[0]
        nbr = idx[ny, nx_]
        unknown = nbr >= 0
        rows += list(src[unknown])
        cols += list(nbr[unknown])
        vals += [-1.0] * int(unknown.sum())
        np.add.at(rhs, src[~unknown], image[ny[~unknown], nx_[~unknown]])
    rows += list(range(n))
    cols += list(range(n))
    vals += list(degree)
    lap = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
    solution = spsolve(lap.tocsc(), rhs)
    out = image.copy()
    out[ys, xs] = solution.reshape(n, -1)
    return out


def generate_background(ground_truth: Image, mask: Image, seed: int = 0, margin: int = 0) -> Image:
    """Repaint the (dilated) mask region from its surroundings; pixels outside are copied verbatim."""
    m = mask[..., 0] > 0.5
    if not m.any():
        return ground_truth.copy()
    region = ndimage.binary_dilation(m, iterations=margin) if margin else m
    if region.all():
        raise ValueError("generate_background: mask covers the entire image")
    filled = _harmonic_fill(ground_truth, region)
    ring = ndimage.binary_dilation(region, iterations=3) & ~region
    local = ground_truth[ring]
    contrast = local.std(axis=0)
    rng = RngStream(seed, ("inpaint",)).numpy()
    h, w = m.shape
    noise = ndimage.gaussian_filter(rng.normal(size=(h, w, 3)), (0.7, 0.7, 0))
    noise /= noise.std() + 1e-12
    textured = filled + 0.5 * contrast * noise
    lo, hi = local.min(axis=0), local.max(axis=0)
    textured = np.clip(textured, lo, hi)
    return np.where(region[..., None], quantize(textured), ground_truth)


# ---------------------------------------------------------------------------
# quality scoring


def outside_region(mask: Image, margin: int) -> np.ndarray:
    m = mask[..., 0] > 0.5
    return ~(ndimage.binary_dilation(m, iterations=margin) if margin else m)


def quality_terms(record: TripletRecord, margin: int = 4, min_frac: float = 0.05, max_frac: float = 0.6,
                  seam_max: float = 0.2) -> dict[str, float]:
    m = record.mask[..., 0] > 0.5
    frac = float(m.mean())
    outside = outside_region(record.mask, margin)
    if outside.any():
        agreement = float(np.abs(record.ground_truth - record.background)[outside].mean())
    else:
        agreement = 1.0
    region = ~outside
    inner = region & ~ndimage.binary_erosion(region)
    outer = ndimage.binary_dilation(region) & ~region
    seam = abs(float(record.background[inner].mean() - record.background[outer].mean())) if inner.any() and outer.any() else 0.0
    return {
        "fraction": 1.0 if min_frac <= frac <= max_frac else 0.0,
        "seam": float(np.clip(1.0 - seam / seam_max, 0.0, 1.0)),
        "agreement": float(np.clip(1.0 - agreement / (2.0 / 255.0), 0.0, 1.0)),
    }


QUALITY_WEIGHTS = {"fraction": 1.0, "seam": 1.0, "agreement": 0.5}


def quality_score(record: TripletRecord, margin: int = 4, min_frac: float = 0.05, max_frac: float = 0.6) -> float:
    """Weighted product of mask-fraction, seam-contrast and outside-mask agreement terms, in [0, 1]."""
    terms = quality_terms(record, margin, min_frac, max_frac)
    score = 1.0
    for name, value in terms.items():
        score *= value ** QUALITY_WEIGHTS[name]
    return float(score)


# ---------------------------------------------------------------------------
# dataset assembly


def record_id(root_seed: int, scene: int, view: int) -> str:
    return hashlib.blake2b(f"{root_seed}:{scene}:{view}".encode(), digest_size=6).hexdigest()


def forge_scene(cfg: ForgeConfig, scene: int) -> list[TripletRecord]:
    stream = RngStream(cfg.seed, ("scene", scene))
    margin = cfg.shadow_margin if cfg.shadow_enabled else None
    bg, layer, mask = _scene_parts(stream, cfg.image_size, cfg.min_frac, cfg.max_frac)
    gt = render(bg, layer, mask, margin)
    fg = acquire_foreground(gt, mask, cfg.canvas)
    views = [(fg, mask, dict(IDENTITY_VIEW))]
    if cfg.views_per_foreground > 1:
        views += generate_views(fg, mask, cfg.views_per_foreground - 1, stream.child("views"),
                                cfg.min_frac, cfg.max_frac, cfg.canvas)
    records = []
    for v, (fg_v, m_v, params) in enumerate(views):
        gt_v = render(bg, fg_v, m_v, margin)
        rec = TripletRecord(
            id=record_id(cfg.seed, scene, v),
            foreground=acquire_foreground(gt_v, m_v, cfg.canvas),
            mask=m_v,
            background=generate_background(gt_v, m_v, seed=stream.child("bg", v).seed, margin=margin or 0),
            ground_truth=gt_v,
            view_params=params,
            seed=stream.seed,
        )
        rec.quality_score = quality_score(rec, cfg.shadow_margin, cfg.min_frac, cfg.max_frac)
        records.append(rec)
    return records


def assign_splits(ids: list[str]) -> dict[str, str]:
    """80/10/10 split by rank of a hash of each id."""
    order = sorted(ids, key=lambda i: hashlib.sha256(i.encode()).hexdigest())
    n = len(order)
    n_train, n_val = round(0.8 * n), round(0.1 * n)
    out = {}
    for rank, rid in enumerate(order):
        out[rid] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return out


@dataclass
class ForgeSummary:
    accepted: int
    rejected: int
    splits: dict[str, int]
    records: list[TripletRecord]


def forge_records(cfg: ForgeConfig, workers: int = 1) -> ForgeSummary:
    cfg.validate()
    accepted: list[TripletRecord] = []
    rejected = 0
    scene = 0
    chunk = max(1, workers) * 4
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        while len(accepted) < cfg.triplet_count:
            for recs in pool.map(lambda s: forge_scene(cfg, s), range(scene, scene + chunk)):
                for rec in recs:
                    if len(accepted) >= cfg.triplet_count:
                        break
                    if rec.quality_score >= cfg.quality_threshold:
                        accepted.append(rec)
                    else:
                        rejected += 1
            scene += chunk
    splits = assign_splits([r.id for r in accepted])
    for r in accepted:
        r.split = splits[r.id]
    counts = {s: sum(r.split == s for r in accepted) for s in SPLITS}
    return ForgeSummary(len(accepted), rejected, counts, accepted)


def record_paths(rec: TripletRecord) -> dict[str, str]:
    return {name: f"{rec.split}/{rec.id}/{name}.png" for name in IMAGE_NAMES}


def manifest_entry(rec: TripletRecord) -> dict:
    return {
        "id": rec.id,
        "split": rec.split,
        "paths": record_paths(rec),
        "view_params": rec.view_params,
        "quality_score": rec.quality_score,
        "seed": rec.seed,
    }


def build_dataset(cfg: ForgeConfig, out_dir: str | Path, workers: int = 1) -> ForgeSummary:
    """Forge ``cfg.triplet_count`` accepted records and write images plus ``manifest.json``."""
    root = Path(out_dir)
    summary = forge_records(cfg, workers)
    for rec in summary.records:
        for name, rel in record_paths(rec).items():
            path = root / rel
            try:
                save_png(path, getattr(rec, name))
            except OSError as exc:
                raise OSError(f"failed to write {path}: {exc}") from exc
    entries = [manifest_entry(r) for r in sorted(summary.records, key=lambda r: (SPLITS.index(r.split), r.id))]
    manifest = root / "manifest.json"
    try:
        manifest.write_text(json.dumps(entries, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"failed to write {manifest}: {exc}") from exc
    return summary


def load_manifest(root: str | Path) -> list[dict]:
    path = Path(root) / "manifest.json"
    return json.loads(path.read_text(encoding="utf-8"))


def load_split(root: str | Path, split: str) -> list[TripletRecord]:
    root = Path(root)
    records = []
    for entry in load_manifest(root):
        if entry["split"] != split:
            continue
        p = entry["paths"]
        records.append(TripletRecord(
            id=entry["id"],
            foreground=load_png(root / p["foreground"]),
            mask=load_png(root / p["mask"], gray=True),
            background=load_png(root / p["background"]),
            ground_truth=load_png(root / p["ground_truth"]),
            view_params=entry["view_params"],
            quality_score=entry["quality_score"],
            seed=entry["seed"],
            split=split,
        ))
    return records
