"""Online tracker: crop, forward, penalty / cosine window / argmax, size
smoothing, and the per-sequence driver.

The tracker talks to a *predictor*, anything with ``geometry``,
``template(patch)`` and ``heads(z, patch, **ctx)``.  :class:`ModelPredictor`
adapts a :class:`~sfpp.model.SiamModel`; tests plug in oracle stubs.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import List, Optional, Sequence as Seq

import numpy as np
from PIL import Image

from . import anchors as anc
from .autograd import Tensor
from .codec import BBox, decode_grid
from .model import HeadOutput, SiamModel
from .synth import Sequence, context_side, crop_patch, crop_square, normalize_patch

WINDOW_MODES = ("standard_hann", "paper_literal")
PENALTY_MODES = ("normalized", "paper_literal")
SIZE_DEFS = ("padded_sqrt", "area")
MIN_BOX = 2.0


@dataclass
class PostprocConfig:
    penalty_k: float = 0.04
    window_influence: float = 0.3
    size_lr: float = 0.4
    window_mode: str = "standard_hann"
    penalty_mode: str = "normalized"
    size_def: str = "padded_sqrt"
    use_quality: bool = True

    def validate(self) -> None:
        if self.penalty_k < 0:
            raise ValueError("penalty_k must be >= 0")
        if not 0 <= self.window_influence <= 1:
            raise ValueError("window_influence must lie in [0, 1]")
        if not 0 <= self.size_lr <= 1:
            raise ValueError("size_lr must lie in [0, 1]")
        if self.window_mode not in WINDOW_MODES:
            raise ValueError(f"window_mode must be one of {WINDOW_MODES}")
        if self.penalty_mode not in PENALTY_MODES:
            raise ValueError(f"penalty_mode must be one of {PENALTY_MODES}")
        if self.size_def not in SIZE_DEFS:
            raise ValueError(f"size_def must be one of {SIZE_DEFS}")


@dataclass
class TrackGeometry:
    template_size: int
    search_size: int
    stride: int
    N: int
    offset: float
    context: float = 0.5
    head_kind: str = "pixel"
    activation: str = "exp"
    anchors: Optional[np.ndarray] = None   # [K, N, N, 4] for the anchor head


class ModelPredictor:
    def __init__(self, model: SiamModel, context: float = 0.5):
        self.model = model
        cfg = model.cfg
        grid = None
        if cfg.head_kind == "anchor":
            grid = anc.anchor_grid(anc.AnchorConfig(cfg.anchor_ratios, cfg.anchor_scales, cfg.total_stride),
                                   model.N, model.offset)
        self.geometry = TrackGeometry(cfg.template_size, cfg.search_size, cfg.total_stride,
                                      model.N, model.offset, context, cfg.head_kind,
                                      cfg.reg_activation, grid)

    def template(self, patch: np.ndarray):
        return self.model.embed(Tensor(normalize_patch(patch)), "template")

    def heads(self, z, patch: np.ndarray, **_ctx) -> HeadOutput:
        return self.model.forward_heads(z, self.model.embed(Tensor(normalize_patch(patch)), "search"))


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def fuse_scores(cls_prob: np.ndarray, quality_prob: Optional[np.ndarray]) -> np.ndarray:
    if quality_prob is None:
        return np.asarray(cls_prob, dtype=np.float64)
    return np.asarray(cls_prob, dtype=np.float64) * np.asarray(quality_prob, dtype=np.float64)


def _size(w, h, size_def: str):
    if size_def == "area":
        return w * h
    pad = (w + h) / 2
    return np.sqrt((w + pad) * (h + pad))


def _change(r):
    return np.maximum(r, 1.0 / r)


def penalty_map(boxes: np.ndarray, prev_wh, k: float, cfg: PostprocConfig = PostprocConfig()) -> np.ndarray:
    """Scale/ratio-change penalty per cell.

    ``boxes`` is [N, N, 4] corner form in the same units as ``prev_wh``.
    normalized: exp(-k (change_r * change_s - 1)), 1 when nothing changes.
    paper_literal: exp(k * change_r * change_s), as printed.
    """
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    pw, ph = prev_wh
    valid = (w > 0) & (h > 0)
    ws, hs = np.where(valid, w, 1.0), np.where(valid, h, 1.0)
    r_c = _change((ws / hs) / (pw / ph))
    s_c = _change(_size(ws, hs, cfg.size_def) / _size(pw, ph, cfg.size_def))
    if cfg.penalty_mode == "paper_literal":
        p = np.exp(k * r_c * s_c)
    else:
        p = np.exp(-k * (r_c * s_c - 1.0))
    return np.where(valid, p, 0.0)


def window_map(N: int, mode: str = "standard_hann") -> np.ndarray:
    if N < 3:
        raise ValueError("window needs N >= 3")
    if mode == "standard_hann":
        n = np.arange(N)
        h = 0.5 - 0.5 * np.cos(2 * np.pi * n / (N - 1))
        return np.outer(h, h)
    if mode == "paper_literal":
        denom = (N - 1) / 2 - 1
        if denom == 0:
            raise ValueError("paper_literal window is undefined for N = 3")
        c = (N - 1) / 2
        yy, xx = np.mgrid[0:N, 0:N]
        dist = np.hypot(xx - c, yy - c)
        return 0.5 - 0.5 * np.cos(2 * np.pi * dist / denom)
    raise ValueError(f"unknown window mode {mode!r}")


def blend_window(scores: np.ndarray, window: np.ndarray, influence: float) -> np.ndarray:
    return scores * (1.0 - influence) + window * influence


@dataclass
class Selection:
    row: int
    col: int
    box_patch: BBox          # B_curr in patch coordinates
    penalized: np.ndarray    # s-bar
    blended: np.ndarray      # s-tilde
    penalty: np.ndarray
    lost: bool
    rate: float              # alpha'


def select(scores: np.ndarray, boxes: np.ndarray, prev_wh_patch, cfg: PostprocConfig,
           window: Optional[np.ndarray] = None) -> Selection:
    """Penalty, window blend and argmax (first maximum in row-major order on ties)."""
    N = scores.shape[-1]
    p = penalty_map(boxes, prev_wh_patch, cfg.penalty_k, cfg)
    sbar = scores * p
    win = window if window is not None else window_map(N, cfg.window_mode)
    stil = blend_window(sbar, win, cfg.window_influence)
    flat = int(np.argmax(stil))
    r, c = divmod(flat, N)
    lost = not stil.max() > 0
    rate = float(np.clip(sbar[r, c] * cfg.size_lr, 0.0, 1.0))
    x0, y0, x1, y1 = boxes[r, c]
    if not (x1 > x0 and y1 > y0):
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        x0, y0, x1, y1 = cx - MIN_BOX / 2, cy - MIN_BOX / 2, cx + MIN_BOX / 2, cy + MIN_BOX / 2
    return Selection(r, c, BBox(x0, y0, x1, y1), sbar, stil, p, lost, rate)


@dataclass
class TrackerState:
    prev_box: BBox
    template_feats: object
    frame_index: int = 0


@dataclass
class FrameTelemetry:
    frame: int
    max_score: float
    sel_row: int
    sel_col: int
    penalty: float
    selected_score: float
    lost: bool
    anchor_box: Optional[BBox] = None
    scores: Optional[np.ndarray] = None


class Tracker:
    def __init__(self, predictor, cfg: PostprocConfig = PostprocConfig(), keep_maps: bool = False):
        cfg.validate()
        self.predictor = predictor
        self.cfg = cfg
        self.geo: TrackGeometry = predictor.geometry
        self.window = window_map(self.geo.N, cfg.window_mode)
        self.keep_maps = keep_maps
        self.state: Optional[TrackerState] = None
        self._frame_hw = (0, 0)

    def init(self, frame: np.ndarray, box: BBox) -> TrackerState:
        if not (box.w > 0 and box.h > 0):
            raise ValueError("initial box is degenerate")
        geo = self.geo
        patch, _ = crop_patch(frame, box, geo.template_size, geo.context)
        self.state = TrackerState(box, self.predictor.template(patch), 0)
        self._frame_hw = frame.shape[1:]
        return self.state

    def _candidates(self, head: HeadOutput):
        """Fused scores [N, N], boxes [N, N, 4] in patch px, winning anchor boxes or None."""
        geo = self.geo
        if geo.head_kind == "anchor":
            probs = sigmoid(head.cls.data)
            score, idx = anc.maxout_score(probs)
            decoded = anc.decode_grid(geo.anchors, head.reg.data.astype(np.float64))
            pick = idx[None, :, :, None]
            boxes = np.take_along_axis(decoded, pick, axis=0)[0]
            anchor_boxes = np.take_along_axis(geo.anchors, pick, axis=0)[0]
            return score, boxes, anchor_boxes
        cls_p = sigmoid(head.cls.data)
        q_p = sigmoid(head.quality.data) if (self.cfg.use_quality and head.quality is not None) else None
        raw = head.reg.data.astype(np.float64)
        if geo.activation == "softplus":
            dist = geo.stride * np.logaddexp(0, raw)
        else:
            dist = geo.stride * np.exp(np.clip(raw, -30, 30))
        return fuse_scores(cls_p, q_p), decode_grid(dist, geo.stride, geo.offset), None

    def track(self, frame: np.ndarray, frame_index: Optional[int] = None):
        if self.state is None:
            raise RuntimeError("call init() first")
        geo, st = self.geo, self.state
        prev = st.prev_box
        side = context_side(prev, geo.context) * geo.search_size / geo.template_size
        patch, tf = crop_square(frame, prev.cx, prev.cy, side, geo.search_size)
        idx = st.frame_index + 1 if frame_index is None else frame_index
        head = self.predictor.heads(st.template_feats, patch, transform=tf, frame_index=idx)
        scores, boxes, anchor_boxes = self._candidates(head)
        prev_wh = (prev.w * tf.scale, prev.h * tf.scale)
        sel = select(scores, boxes, prev_wh, self.cfg, self.window)

        H, W = frame.shape[1:]
        if sel.lost:
            new_box = prev
        else:
            cur = tf.to_frame(sel.box_patch)
            a = sel.rate
            w = (1 - a) * prev.w + a * cur.w
            h = (1 - a) * prev.h + a * cur.h
            # keep the centre inside both the search footprint and the frame
            x_lo, y_lo = max(tf.origin_x, 0.0), max(tf.origin_y, 0.0)
            x_hi = min(tf.origin_x + side, float(W))
            y_hi = min(tf.origin_y + side, float(H))
            cx = min(max(cur.cx, x_lo), x_hi)
            cy = min(max(cur.cy, y_lo), y_hi)
            w = min(max(w, MIN_BOX), float(W))
            h = min(max(h, MIN_BOX), float(H))
            new_box = BBox.from_center(cx, cy, w, h)
        tel = FrameTelemetry(
            frame=idx,
            max_score=float(scores.max()),
            sel_row=sel.row,
            sel_col=sel.col,
            penalty=float(sel.penalty[sel.row, sel.col]),
            selected_score=float(sel.penalized[sel.row, sel.col]),
            lost=sel.lost,
            anchor_box=(tf.to_frame(BBox(*anchor_boxes[sel.row, sel.col]))
                        if anchor_boxes is not None else None),
            scores=scores if self.keep_maps else None,
        )
        self.state = TrackerState(new_box, st.template_feats, idx)
        return new_box, tel


@dataclass
class TrackResult:
    boxes: List[BBox]
    telemetry: List[FrameTelemetry] = field(default_factory=list)


def track_sequence(predictor, seq: Sequence, cfg: PostprocConfig = PostprocConfig(),
                   keep_maps: bool = False) -> TrackResult:
    """Initialise on frame 0 with its ground truth, then track every later frame."""
    tr = Tracker(predictor, cfg, keep_maps)
    tr.init(seq.frames[0], seq.gt[0])
    boxes = [seq.gt[0]]
    tele = []
    for t in range(1, len(seq)):
        box, tel = tr.track(seq.frames[t], frame_index=t)
        boxes.append(box)
        tele.append(tel)
    return TrackResult(boxes, tele)


def write_results_csv(path: str, result: TrackResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "x0", "y0", "x1", "y1", "max_score", "sel_row", "sel_col"])
        b0 = result.boxes[0]
        w.writerow([0, *(f"{v:.3f}" for v in b0), "1.000000", -1, -1])
        for b, t in zip(result.boxes[1:], result.telemetry):
            w.writerow([t.frame, *(f"{v:.3f}" for v in b), f"{t.max_score:.6f}", t.sel_row, t.sel_col])


def read_results_csv(path: str) -> List[BBox]:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return [BBox(float(r["x0"]), float(r["y0"]), float(r["x1"]), float(r["y1"])) for r in rows]


def dump_score_map(directory: str, frame: int, scores: np.ndarray) -> None:
    """Raw CSV plus a min-max normalised 8-bit PGM of one score map."""
    os.makedirs(directory, exist_ok=True)
    np.savetxt(os.path.join(directory, f"score_{frame:05d}.csv"), scores, delimiter=",", fmt="%.6f")
    lo, hi = float(scores.min()), float(scores.max())
    norm = np.zeros_like(scores) if hi - lo < 1e-12 else (scores - lo) / (hi - lo)
    Image.fromarray(np.rint(norm * 255).astype(np.uint8), "L").save(
        os.path.join(directory, f"score_{frame:05d}.pgm"))
