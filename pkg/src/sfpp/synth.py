"""Synthetic tracking world.

Sequences show textured rectangles and ellipses drifting over a smooth
background.  Object 0 is the target and is painted last, so it is never
occluded; the others are distractors drawn from the same texture bank.
Everything is a pure function of the seeds involved.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Sequence as Seq, Tuple

import numpy as np
from PIL import Image

from .codec import BBox


@dataclass
class Dynamics:
    translation_sigma: float = 1.5   # px, per-frame velocity noise
    velocity_damping: float = 0.85
    scale_sigma: float = 0.02        # per-frame step of log(sqrt(w*h))
    ratio_sigma: float = 0.02        # per-frame step of log(w/h)
    distractors: int = 2


@dataclass
class WorldConfig:
    frame_size: int = 256
    length: int = 60
    min_size: float = 40.0
    max_size: float = 96.0
    n_textures: int = 8
    texture_seed: int = 1234
    noise_sigma: float = 3.0
    dynamics: Dynamics = field(default_factory=Dynamics)
    # pair sampling
    template_size: int = 64
    search_size: int = 128
    context: float = 0.5
    max_interval: int = 20
    max_shift: float = 24.0
    scale_range: float = 0.15
    neg_ratio: float = 0.1


@dataclass
class ObjectState:
    box: BBox
    texture: int
    ellipse: bool


@dataclass
class Sequence:
    frames: List[np.ndarray]           # uint8 [3, H, W]
    gt: List[BBox]
    seed: int
    dynamics: Dynamics
    objects: List[List[ObjectState]] = field(default_factory=list)  # per frame, target first
    texture_ids: List[int] = field(default_factory=list)  # target first; used when objects are absent

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def target_texture(self) -> int:
        if self.objects:
            return self.objects[0][0].texture
        return self.texture_ids[0] if self.texture_ids else -1

    @property
    def textures(self) -> set:
        if self.objects:
            return {o.texture for o in self.objects[0]}
        return set(self.texture_ids)

    def target_mask(self, index: int) -> np.ndarray:
        H, W = self.frames[index].shape[1:]
        obj = self.objects[index][0]
        return _shape_mask(obj.box, obj.ellipse, H, W)[0]


def make_texture_bank(n: int, seed: int, grid: int = 6) -> np.ndarray:
    """``n`` colour grids of shape [3, grid, grid] with values in [0, 255]."""
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 255, size=(n, 3, grid, grid))


def _bilinear_grid(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample [C, H, W] at the outer product of index coords ``ys`` x ``xs``
    (both already clipped to the valid range)."""
    H, W = img.shape[1:]
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = img[:, y0[:, None], x0[None, :]]
    b = img[:, y0[:, None], x1[None, :]]
    c = img[:, y1[:, None], x0[None, :]]
    d = img[:, y1[:, None], x1[None, :]]
    top = a * (1 - fx) + b * fx
    bot = c * (1 - fx) + d * fx
    return top * (1 - fy) + bot * fy


def _shape_mask(box: BBox, ellipse: bool, H: int, W: int):
    """Pixels whose centre lies in the shape, plus the bounding slice."""
    ys = np.arange(H) + 0.5
    xs = np.arange(W) + 0.5
    if ellipse:
        nx = (xs[None, :] - box.cx) / (box.w / 2)
        ny = (ys[:, None] - box.cy) / (box.h / 2)
        mask = nx ** 2 + ny ** 2 <= 1.0
    else:
        mask = ((xs[None, :] >= box.x0) & (xs[None, :] <= box.x1)
                & (ys[:, None] >= box.y0) & (ys[:, None] <= box.y1))
    return mask, (xs, ys)


def _render(states: List[ObjectState], background: np.ndarray, bank: np.ndarray,
            rng: np.random.Generator, noise_sigma: float) -> np.ndarray:
    img = background.copy()
    H, W = img.shape[1:]
    g = bank.shape[-1]
    for obj in reversed(states):  # distractors first, target (index 0) last
        mask, (xs, ys) = _shape_mask(obj.box, obj.ellipse, H, W)
        rows = np.nonzero(mask.any(axis=1))[0]
        cols = np.nonzero(mask.any(axis=0))[0]
        if rows.size == 0 or cols.size == 0:
            continue
        r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
        u = np.clip((xs[c0:c1] - obj.box.x0) / obj.box.w * (g - 1), 0, g - 1)
        v = np.clip((ys[r0:r1] - obj.box.y0) / obj.box.h * (g - 1), 0, g - 1)
        tex = _bilinear_grid(bank[obj.texture], v, u)
        sub = mask[r0:r1, c0:c1]
        img[:, r0:r1, c0:c1] = np.where(sub[None], tex, img[:, r0:r1, c0:c1])
    if noise_sigma > 0:
        img = img + rng.normal(0, noise_sigma, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


class _Walker:
    """Bounded random walk of one box: damped velocity for the centre,
    geometric steps for size and aspect ratio, reflected at the bounds."""

    def __init__(self, rng, cfg: WorldConfig, dyn: Dynamics):
        self.rng, self.cfg, self.dyn = rng, cfg, dyn
        lo, hi = math.log(cfg.min_size), math.log(cfg.max_size)
        self.log_w = rng.uniform(lo, lo + 0.6 * (hi - lo))
        self.log_h = float(np.clip(self.log_w + rng.normal(0, 0.2), lo, hi))
        w, h = math.exp(self.log_w), math.exp(self.log_h)
        F = cfg.frame_size
        self.cx = rng.uniform(w / 2, F - w / 2)
        self.cy = rng.uniform(h / 2, F - h / 2)
        self.vx = self.vy = 0.0

    def box(self) -> BBox:
        return BBox.from_center(self.cx, self.cy, math.exp(self.log_w), math.exp(self.log_h))

    def step(self) -> None:
        rng, dyn, cfg = self.rng, self.dyn, self.cfg
        ds = rng.normal(0, dyn.scale_sigma) if dyn.scale_sigma > 0 else 0.0
        dr = rng.normal(0, dyn.ratio_sigma) if dyn.ratio_sigma > 0 else 0.0
        lo, hi = math.log(cfg.min_size), math.log(cfg.max_size)
        for sign in (1.0, -1.0):
            lw = self.log_w + sign * (ds + dr / 2)
            lh = self.log_h + sign * (ds - dr / 2)
            if lo <= lw <= hi and lo <= lh <= hi:
                self.log_w, self.log_h = lw, lh
                break
        w, h = math.exp(self.log_w), math.exp(self.log_h)
        F = cfg.frame_size
        if dyn.translation_sigma > 0:
            self.vx = dyn.velocity_damping * self.vx + rng.normal(0, dyn.translation_sigma)
            self.vy = dyn.velocity_damping * self.vy + rng.normal(0, dyn.translation_sigma)
        self.cx, self.vx = _reflect(self.cx + self.vx, self.vx, w / 2, F - w / 2)
        self.cy, self.vy = _reflect(self.cy + self.vy, self.vy, h / 2, F - h / 2)


def _reflect(x: float, v: float, lo: float, hi: float) -> Tuple[float, float]:
    if x < lo:
        return min(2 * lo - x, hi), -v
    if x > hi:
        return max(2 * hi - x, lo), -v
    return x, v


def gen_sequence(seed: int, length: int = 60, dynamics: Optional[Dynamics] = None,
                 cfg: Optional[WorldConfig] = None) -> Sequence:
    """Render one deterministic sequence."""
    if length < 2:
        raise ValueError("sequence length must be >= 2")
    cfg = cfg or WorldConfig()
    dyn = dynamics or cfg.dynamics
    bank = make_texture_bank(cfg.n_textures, cfg.texture_seed)
    rng = np.random.default_rng(seed)
    F = cfg.frame_size

    n_obj = 1 + dyn.distractors
    if n_obj > cfg.n_textures:
        raise ValueError("more objects than textures in the bank")
    textures = rng.permutation(cfg.n_textures)[:n_obj]
    shapes = rng.random(n_obj) < 0.5
    walkers = [_Walker(rng, cfg, dyn) for _ in range(n_obj)]

    low = rng.uniform(60, 190, size=(3, 5, 5))
    coords = np.linspace(0, 4, F)
    background = _bilinear_grid(low, coords, coords)

    frames, gt, objects = [], [], []
    for t in range(length):
        if t > 0:
            for wk in walkers:
                wk.step()
        states = [ObjectState(wk.box(), int(tx), bool(el))
                  for wk, tx, el in zip(walkers, textures, shapes)]
        frames.append(_render(states, background, bank, rng, cfg.noise_sigma))
        gt.append(states[0].box)
        objects.append(states)
    return Sequence(frames, gt, seed, dyn, objects)


# ----------------------------------------------------------------- cropping


@dataclass(frozen=True)
class CropTransform:
    """patch = (frame - origin) * scale, in continuous pixel coordinates."""
    origin_x: float
    origin_y: float
    scale: float

    def to_patch(self, box: BBox) -> BBox:
        s = self.scale
        return BBox((box.x0 - self.origin_x) * s, (box.y0 - self.origin_y) * s,
                    (box.x1 - self.origin_x) * s, (box.y1 - self.origin_y) * s)

    def to_frame(self, box: BBox) -> BBox:
        s = self.scale
        return BBox(box.x0 / s + self.origin_x, box.y0 / s + self.origin_y,
                    box.x1 / s + self.origin_x, box.y1 / s + self.origin_y)

    def point_to_frame(self, x: float, y: float) -> Tuple[float, float]:
        return x / self.scale + self.origin_x, y / self.scale + self.origin_y


def context_side(box: BBox, context: float) -> float:
    pad = context * (box.w + box.h)
    return math.sqrt((box.w + pad) * (box.h + pad))


def crop_square(frame: np.ndarray, cx: float, cy: float, side: float, out_size: int,
                fill: Optional[np.ndarray] = None) -> Tuple[np.ndarray, CropTransform]:
    """Resample the square of ``side`` px centred at (cx, cy) to ``out_size``.

    Samples falling outside the frame take ``fill`` (default: channel mean).
    """
    if out_size <= 0 or side <= 0:
        raise ValueError("crop needs positive side and out_size")
    img = frame.astype(np.float32)
    C, H, W = img.shape
    if fill is None:
        fill = img.reshape(C, -1).mean(axis=1)
    scale = out_size / side
    tf = CropTransform(cx - side / 2, cy - side / 2, scale)
    centers = (np.arange(out_size) + 0.5) / scale - 0.5
    xs = tf.origin_x + centers
    ys = tf.origin_y + centers
    in_x = (xs >= 0) & (xs <= W - 1)
    in_y = (ys >= 0) & (ys <= H - 1)
    patch = _bilinear_grid(img, np.clip(ys, 0, H - 1), np.clip(xs, 0, W - 1))
    inside = in_y[:, None] & in_x[None, :]
    patch = np.where(inside[None], patch, np.asarray(fill, dtype=np.float32)[:, None, None])
    return patch.astype(np.float32), tf


def crop_patch(frame: np.ndarray, center_box: BBox, out_size: int, context: float = 0.5,
               scale_factor: float = 1.0) -> Tuple[np.ndarray, CropTransform]:
    """Square context crop around ``center_box``.

    The side is ``sqrt((w + p)(h + p)) * scale_factor`` with
    ``p = context * (w + h)``.
    """
    if not (center_box.w > 0 and center_box.h > 0):
        raise ValueError("degenerate crop box")
    side = context_side(center_box, context) * scale_factor
    return crop_square(frame, center_box.cx, center_box.cy, side, out_size)


def normalize_patch(patch: np.ndarray) -> np.ndarray:
    """Pixel-valued patch to network input range."""
    return (patch.astype(np.float32) - 127.5) / 64.0


# ---------------------------------------------------------------- pairs


@dataclass
class TrainingPair:
    template_patch: np.ndarray
    search_patch: np.ndarray
    gt_in_search: Optional[BBox]
    is_negative: bool
    search_transform: Optional[CropTransform] = None
    shift: Tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0
    # source of the search crop, kept so augmentation can re-crop
    _frame: Optional[np.ndarray] = field(default=None, repr=False)
    _center: Optional[Tuple[float, float, float]] = field(default=None, repr=False)
    _gt_frame: Optional[BBox] = field(default=None, repr=False)

    def __post_init__(self):
        if (self.gt_in_search is None) != self.is_negative:
            raise ValueError("gt_in_search must be present exactly for positive pairs")

    def save(self, path: str) -> None:
        gt = np.array(self.gt_in_search.as_tuple() if self.gt_in_search else [np.nan] * 4)
        np.savez(path, template=self.template_patch, search=self.search_patch, gt=gt,
                 negative=np.array(self.is_negative))

    @classmethod
    def load(cls, path: str) -> "TrainingPair":
        with np.load(path) as z:
            neg = bool(z["negative"])
            gt = None if neg else BBox(*map(float, z["gt"]))
            return cls(z["template"], z["search"], gt, neg)


def _search_crop(frame, cx, cy, side, gt_frame, cfg: WorldConfig):
    patch, tf = crop_square(frame, cx, cy, side, cfg.search_size)
    gt = tf.to_patch(gt_frame) if gt_frame is not None else None
    return patch, tf, gt


def augment(pair: TrainingPair, rng: np.random.Generator, max_shift: float, scale_range: float,
            cfg: Optional[WorldConfig] = None) -> TrainingPair:
    """Re-crop the search patch with a uniform shift (patch px) and scale.

    The crop side is multiplied by ``f ~ U[1 - scale_range, 1 + scale_range]``
    and its centre moved by ``(dx, dy) ~ U[-max_shift, max_shift]^2`` patch
    pixels, so the object appears displaced by about ``(-dx, -dy)``.
    """
    if max_shift == 0 and scale_range == 0:
        return pair
    if pair._frame is None:
        raise ValueError("pair carries no source frame; cannot re-crop")
    cfg = cfg or WorldConfig()
    dx, dy = rng.uniform(-max_shift, max_shift, size=2) if max_shift > 0 else (0.0, 0.0)
    f = rng.uniform(1 - scale_range, 1 + scale_range) if scale_range > 0 else 1.0
    cx, cy, side = pair._center
    px_per_patch = side / cfg.search_size
    ncx, ncy, nside = cx + dx * px_per_patch, cy + dy * px_per_patch, side * f
    patch, tf, gt = _search_crop(pair._frame, ncx, ncy, nside, pair._gt_frame, cfg)
    return replace(pair, search_patch=patch, search_transform=tf, gt_in_search=gt,
                   shift=(float(dx), float(dy)), scale=float(f), _center=(ncx, ncy, nside))


def sample_pair(seq: Sequence, max_interval: int, rng: np.random.Generator,
                cfg: Optional[WorldConfig] = None, max_shift: Optional[float] = None,
                scale_range: Optional[float] = None) -> TrainingPair:
    """Template from frame i, search from frame j, 0 < |i - j| <= max_interval."""
    cfg = cfg or WorldConfig()
    L = len(seq)
    if L < 2:
        raise ValueError("need at least two frames")
    m = max(1, int(max_interval))
    i = int(rng.integers(L))
    choices = [j for j in range(max(0, i - m), min(L, i + m + 1)) if j != i]
    j = int(choices[rng.integers(len(choices))])
    z, _ = crop_patch(seq.frames[i], seq.gt[i], cfg.template_size, cfg.context)
    side = context_side(seq.gt[j], cfg.context) * cfg.search_size / cfg.template_size
    g = seq.gt[j]
    x, tf, gt = _search_crop(seq.frames[j], g.cx, g.cy, side, g, cfg)
    pair = TrainingPair(z, x, gt, False, tf, _frame=seq.frames[j], _center=(g.cx, g.cy, side), _gt_frame=g)
    pair.frame_gap = j - i  # type: ignore[attr-defined]
    ms = cfg.max_shift if max_shift is None else max_shift
    sr = cfg.scale_range if scale_range is None else scale_range
    return augment(pair, rng, ms, sr, cfg)


def make_negative_pair(seq_a: Sequence, seq_b: Sequence, rng: np.random.Generator,
                       cfg: Optional[WorldConfig] = None, max_shift: Optional[float] = None,
                       scale_range: Optional[float] = None) -> TrainingPair:
    """Template of A's target, search patch from B where A's texture is absent."""
    cfg = cfg or WorldConfig()
    if seq_a.target_texture in seq_b.textures:
        raise ValueError("sequence B shows the texture of A's target")
    i = int(rng.integers(len(seq_a)))
    j = int(rng.integers(len(seq_b)))
    z, _ = crop_patch(seq_a.frames[i], seq_a.gt[i], cfg.template_size, cfg.context)
    g = seq_b.gt[j]
    side = context_side(g, cfg.context) * cfg.search_size / cfg.template_size
    x, tf, _ = _search_crop(seq_b.frames[j], g.cx, g.cy, side, None, cfg)
    pair = TrainingPair(z, x, None, True, tf, _frame=seq_b.frames[j], _center=(g.cx, g.cy, side))
    ms = cfg.max_shift if max_shift is None else max_shift
    sr = cfg.scale_range if scale_range is None else scale_range
    return augment(pair, rng, ms, sr, cfg)


class PairSampler:
    """Mixes positive pairs and negative pairs at ``cfg.neg_ratio``."""

    def __init__(self, sequences: Seq[Sequence], cfg: WorldConfig, seed: int = 0):
        if not sequences:
            raise ValueError("no sequences")
        self.sequences = list(sequences)
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        self._partners = [
            [k for k, b in enumerate(self.sequences) if a.target_texture not in b.textures]
            for a in self.sequences
        ]

    def sample(self) -> TrainingPair:
        rng = self.rng
        a = int(rng.integers(len(self.sequences)))
        if rng.random() < self.cfg.neg_ratio and self._partners[a]:
            b = self._partners[a][int(rng.integers(len(self._partners[a])))]
            return make_negative_pair(self.sequences[a], self.sequences[b], rng, self.cfg)
        return sample_pair(self.sequences[a], self.cfg.max_interval, rng, self.cfg)

    def batch(self, n: int) -> List[TrainingPair]:
        return [self.sample() for _ in range(n)]


def make_world(seed: int, n_sequences: int, cfg: Optional[WorldConfig] = None) -> List[Sequence]:
    cfg = cfg or WorldConfig()
    return [gen_sequence(seed * 100003 + k, cfg.length, cfg.dynamics, cfg) for k in range(n_sequences)]


# ------------------------------------------------------------ statistics


def scale_ratio_stats(seqs, bins: int = 20) -> dict:
    """Relative-scale ``(w_t h_t) / (w_{t-1} h_{t-1})`` and ``w/h`` histograms."""
    if isinstance(seqs, Sequence):
        seqs = [seqs]
    rel, ratio = [], []
    for s in seqs:
        if len(s) < 2:
            raise ValueError("need sequences of length >= 2")
        areas = np.array([b.area for b in s.gt])
        rel.extend(areas[1:] / areas[:-1])
        ratio.extend(b.w / b.h for b in s.gt)
    rel, ratio = np.asarray(rel), np.asarray(ratio)
    qs = (0.05, 0.25, 0.5, 0.75, 0.95)

    def hist(v):
        lo, hi = float(v.min()), float(v.max())
        if hi - lo < 1e-12:
            lo, hi = lo - 0.5, hi + 0.5
        counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
        return counts, edges

    return {
        "relative_scale": rel,
        "ratio": ratio,
        "scale_hist": hist(rel),
        "ratio_hist": hist(ratio),
        "scale_quantiles": dict(zip(qs, np.quantile(rel, qs))),
        "ratio_quantiles": dict(zip(qs, np.quantile(ratio, qs))),
    }


def write_stats_csv(stats: dict, path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quantity", "bin_lo", "bin_hi", "count"])
        for key, name in (("scale_hist", "relative_scale"), ("ratio_hist", "ratio")):
            counts, edges = stats[key]
            for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                w.writerow([name, f"{lo:.6f}", f"{hi:.6f}", int(c)])
        for key, name in (("scale_quantiles", "relative_scale"), ("ratio_quantiles", "ratio")):
            for q, v in stats[key].items():
                w.writerow([f"{name}_q{q:g}", "", "", f"{v:.6f}"])


# ----------------------------------------------------------- persistence


def save_sequence(seq: Sequence, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    for k, f in enumerate(seq.frames):
        Image.fromarray(np.ascontiguousarray(f.transpose(1, 2, 0)), "RGB").save(
            os.path.join(directory, f"{k:05d}.ppm"))
    with open(os.path.join(directory, "groundtruth.csv"), "w", newline="") as fh:
        for k, b in enumerate(seq.gt):
            fh.write(f"{k},{b.x0:.3f},{b.y0:.3f},{b.x1:.3f},{b.y1:.3f}\n")
    meta = {"seed": seq.seed, "textures": [seq.target_texture] + sorted(seq.textures - {seq.target_texture}),
            "dynamics": asdict(seq.dynamics)}
    with open(os.path.join(directory, "meta.json"), "w") as fh:
        json.dump(meta, fh, sort_keys=True)


def read_groundtruth(path: str) -> List[BBox]:
    boxes = []
    with open(path) as fh:
        for row in csv.reader(fh):
            if not row or not row[0].strip().lstrip("-").isdigit():
                continue
            boxes.append(BBox(*(float(v) for v in row[1:5])))
    return boxes


def load_sequence(directory: str) -> Sequence:
    gt_path = os.path.join(directory, "groundtruth.csv")
    if not os.path.exists(gt_path):
        raise FileNotFoundError(gt_path)
    gt = read_groundtruth(gt_path)
    frames = []
    for k in range(len(gt)):
        with Image.open(os.path.join(directory, f"{k:05d}.ppm")) as im:
            frames.append(np.asarray(im.convert("RGB")).transpose(2, 0, 1).copy())
    seed, textures, dyn = -1, [], Dynamics()
    meta_path = os.path.join(directory, "meta.json")
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            meta = json.load(fh)
        seed, textures, dyn = int(meta["seed"]), list(meta["textures"]), Dynamics(**meta["dynamics"])
    return Sequence(frames, gt, seed=seed, dynamics=dyn, texture_ids=textures)


def world_config_dict(cfg: WorldConfig) -> dict:
    return asdict(cfg)
