"""Anchor-based comparison head: anchor layout, offset coding, label
assignment, its training loss, and per-cell maxout scoring."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .codec import BBox, grid_pixels, iou_arrays
from .losses import LossConfig, LossReport, focal_loss

POS_IOU = 0.6
NEG_IOU = 0.3


@dataclass
class AnchorConfig:
    ratios: List[float] = field(default_factory=lambda: [0.5, 1.0, 2.0])
    scales: List[float] = field(default_factory=lambda: [4.0])
    stride: int = 8

    @property
    def K(self) -> int:
        return len(self.ratios) * len(self.scales)


def anchor_grid(cfg: AnchorConfig, N: int, offset: float = 0.0) -> np.ndarray:
    """Corner-form anchors, shape [K, N, N, 4].

    Anchor size is ``stride * scale`` on a side (before the ratio split);
    ratio is width / height.
    """
    px = grid_pixels(N, cfg.stride, offset)
    out = np.zeros((cfg.K, N, N, 4))
    k = 0
    for scale in cfg.scales:
        size = cfg.stride * scale
        for r in cfg.ratios:
            w, h = size * math.sqrt(r), size / math.sqrt(r)
            out[k, :, :, 0] = px[None, :] - w / 2
            out[k, :, :, 1] = px[:, None] - h / 2
            out[k, :, :, 2] = px[None, :] + w / 2
            out[k, :, :, 3] = px[:, None] + h / 2
            k += 1
    return out


def anchor_decode(anchor: BBox, offsets) -> BBox:
    dx, dy, dw, dh = (float(v) for v in offsets)
    with np.errstate(over="raise"):
        try:
            w = anchor.w * float(np.exp(dw))
            h = anchor.h * float(np.exp(dh))
        except FloatingPointError as exc:
            raise ag.NonFiniteError(f"anchor_decode overflow for offsets {offsets}") from exc
    cx = anchor.cx + dx * anchor.w
    cy = anchor.cy + dy * anchor.h
    return BBox.from_center(cx, cy, w, h)


def encode_offsets(anchor: BBox, box: BBox) -> Tuple[float, float, float, float]:
    return ((box.cx - anchor.cx) / anchor.w, (box.cy - anchor.cy) / anchor.h,
            math.log(box.w / anchor.w), math.log(box.h / anchor.h))


def decode_grid(anchors: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """Vectorised decode: anchors [K, N, N, 4], offsets [K, 4, N, N] -> [K, N, N, 4]."""
    aw = anchors[..., 2] - anchors[..., 0]
    ah = anchors[..., 3] - anchors[..., 1]
    acx = anchors[..., 0] + aw / 2
    acy = anchors[..., 1] + ah / 2
    dx, dy, dw, dh = np.moveaxis(offsets, 1, 0)
    cx, cy = acx + dx * aw, acy + dy * ah
    w, h = aw * np.exp(np.clip(dw, -10, 10)), ah * np.exp(np.clip(dh, -10, 10))
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


@dataclass
class AnchorTargets:
    labels: np.ndarray   # [K, N, N]: 1 positive, 0 negative, -1 ignored
    offsets: np.ndarray  # [K, 4, N, N]
    n_pos: int


def anchor_targets(gt: BBox | None, anchors: np.ndarray) -> AnchorTargets:
    """IoU-threshold assignment; the best-matching anchor is always positive."""
    K, N = anchors.shape[:2]
    if gt is None:
        return AnchorTargets(np.zeros((K, N, N)), np.zeros((K, 4, N, N)), 0)
    g = np.array(gt.as_tuple())
    ious = iou_arrays(anchors, g)
    labels = np.full((K, N, N), -1.0)
    labels[ious <= NEG_IOU] = 0.0
    labels[ious >= POS_IOU] = 1.0
    if ious.max() > 0:
        labels[np.unravel_index(np.argmax(ious), ious.shape)] = 1.0
    aw = anchors[..., 2] - anchors[..., 0]
    ah = anchors[..., 3] - anchors[..., 1]
    acx = anchors[..., 0] + aw / 2
    acy = anchors[..., 1] + ah / 2
    offs = np.stack([(gt.cx - acx) / aw, (gt.cy - acy) / ah,
                     np.log(gt.w / aw), np.log(gt.h / ah)], axis=1)
    offs = np.where((labels == 1)[:, None], offs, 0.0)
    return AnchorTargets(labels, offs, int((labels == 1).sum()))


def smooth_l1_loss(pred: Tensor, target, mask, beta: float = 1.0 / 9, weight=None) -> Tensor:
    """Masked sum of smooth-L1 over the offset axis ([.., K, 4, N, N])."""
    d = pred.data.astype(np.float64) - np.asarray(target, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    w = m if weight is None else m * weight
    w4 = np.expand_dims(w, -3)
    a = np.abs(d)
    cell = np.where(a < beta, 0.5 * d * d / beta, a - 0.5 * beta)
    grad = np.where(a < beta, d / beta, np.sign(d)) * w4
    total = np.asarray(np.sum(cell * w4), dtype=pred.data.dtype)
    return ag.record_op(total, (pred,), lambda g: ((g * grad).astype(pred.data.dtype),), "smooth_l1")


def anchor_loss(cls_logits: Tensor, reg: Tensor, targets: List[AnchorTargets], cfg: LossConfig = LossConfig()):
    """Focal loss over non-ignored anchors plus smooth-L1 on positives, both / N_pos."""
    labels = np.stack([t.labels for t in targets])
    offs = np.stack([t.offsets for t in targets])
    n_pos = np.array([t.n_pos for t in targets])
    B = len(targets)
    norm = (1.0 / (np.maximum(n_pos, cfg.n_pos_floor) * B))[:, None, None, None]
    care = (labels >= 0).astype(np.float64)
    pos = (labels == 1).astype(np.float64)
    cls_t = focal_loss(cls_logits, pos, cfg.focal_gamma, cfg.focal_alpha, weight=care * norm)
    reg_t = smooth_l1_loss(reg, offs, pos, weight=norm)
    total = ag.add(cls_t, ag.scale(reg_t, cfg.lambda_weight))
    return total, LossReport(total.item(), cls_t.item(), 0.0, reg_t.item(), int(n_pos.sum()))


def maxout_score(per_anchor_scores: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-cell maximum over the anchor axis and the index that wins."""
    s = np.asarray(per_anchor_scores)
    if s.ndim != 3 or s.shape[0] < 1:
        raise ValueError(f"expected [K, N, N] scores, got {s.shape}")
    idx = s.argmax(axis=0)
    return np.take_along_axis(s, idx[None], axis=0)[0], idx
