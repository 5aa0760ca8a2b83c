"""Per-pixel label assignment and box coding on the score grid.

A score cell ``(x, y)`` (column, row) looks at the search-patch pixel
``offset + s//2 + x*s`` horizontally and likewise vertically.  ``offset`` is
zero in the bare formula; the model supplies the value that centres its
grid in the search patch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Tuple

import numpy as np

EDGE_FLOOR = 1e-6


@dataclass(frozen=True)
class BBox:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        for name in ("x0", "y0", "x1", "y1"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BBox":
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)

    @property
    def w(self) -> float:
        return self.x1 - self.x0

    @property
    def h(self) -> float:
        return self.y1 - self.y0

    @property
    def cx(self) -> float:
        return (self.x0 + self.x1) / 2

    @property
    def cy(self) -> float:
        return (self.y0 + self.y1) / 2

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)

    def __iter__(self) -> Iterator[float]:
        return iter(self.as_tuple())


@dataclass
class TargetMaps:
    cls_star: np.ndarray      # [N, N] in {0, 1}
    quality_star: np.ndarray  # [N, N] PSS targets (zero on negatives)
    reg_star: np.ndarray      # [4, N, N] (l*, t*, r*, b*)
    n_pos: int


def map_feature_to_image(x: int, y: int, s: int, offset: float = 0.0) -> Tuple[float, float]:
    half = s // 2
    return offset + half + x * s, offset + half + y * s


def grid_pixels(N: int, s: int, offset: float = 0.0) -> np.ndarray:
    """Pixel coordinate of each grid index along one axis."""
    return offset + s // 2 + s * np.arange(N, dtype=np.float64)


def pss(l, t, r, b):
    """Prior spatial score; works on scalars or arrays."""
    l, t, r, b = (np.asarray(v, dtype=np.float64) for v in (l, t, r, b))
    if np.any(l <= 0) or np.any(t <= 0) or np.any(r <= 0) or np.any(b <= 0):
        raise ValueError("pss needs strictly positive distances")
    val = np.sqrt(np.minimum(l, r) / np.maximum(l, r) * np.minimum(t, b) / np.maximum(t, b))
    return float(val) if val.ndim == 0 else val


def iou(a: BBox, b: BBox) -> float:
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU of corner-form boxes stacked on the last axis (x0, y0, x1, y1)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    area_a = np.clip(a[..., 2] - a[..., 0], 0, None) * np.clip(a[..., 3] - a[..., 1], 0, None)
    area_b = np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)
    union = area_a + area_b - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
    return out


def assign_and_encode(gt: BBox, N: int, s: int, offset: float = 0.0,
                      center_radius: float | None = None) -> TargetMaps:
    """Label cells whose mapped pixel falls in ``gt`` (edges inclusive).

    ``center_radius`` (in strides) optionally shrinks the positive region to
    cells within that distance of the box centre; ``None`` keeps plain box
    membership.
    """
    px = grid_pixels(N, s, offset)
    PX = px[None, :]
    PY = px[:, None]
    l = np.broadcast_to(PX - gt.x0, (N, N))
    t = np.broadcast_to(PY - gt.y0, (N, N))
    r = np.broadcast_to(gt.x1 - PX, (N, N))
    b = np.broadcast_to(gt.y1 - PY, (N, N))
    pos = (l >= 0) & (t >= 0) & (r >= 0) & (b >= 0)
    if center_radius is not None:
        rad = center_radius * s
        pos &= (np.abs(PX - gt.cx) <= rad) & (np.abs(PY - gt.cy) <= rad)
    reg = np.stack([l, t, r, b]).astype(np.float64)
    reg = np.where(pos[None], reg, 0.0)
    q = np.zeros((N, N))
    if pos.any():
        clamped = np.maximum(reg[:, pos], EDGE_FLOOR)
        q[pos] = pss(*clamped)
    return TargetMaps(pos.astype(np.float64), q, reg, int(pos.sum()))


def decode_box(x: int, y: int, dists, s: int, offset: float = 0.0) -> BBox:
    l, t, r, b = (float(v) for v in dists)
    px, py = map_feature_to_image(x, y, s, offset)
    return BBox(px - l, py - t, px + r, py + b)


def decode_grid(dists: np.ndarray, s: int, offset: float = 0.0) -> np.ndarray:
    """All cells at once: [4, N, N] distances -> [N, N, 4] corner boxes."""
    N = dists.shape[-1]
    px = grid_pixels(N, s, offset)
    PX, PY = px[None, :], px[:, None]
    l, t, r, b = dists
    return np.stack([PX - l, PY - t, PX + r, PY + b], axis=-1)


def distance_iou(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """IoU of two boxes sharing an anchor point, from their (l, t, r, b) distances."""
    pl, pt, pr, pb = pred
    tl, tt, tr, tb = target
    inter = (np.minimum(pl, tl) + np.minimum(pr, tr)) * (np.minimum(pt, tt) + np.minimum(pb, tb))
    union = (pl + pr) * (pt + pb) + (tl + tr) * (tt + tb) - inter
    return inter / union


def is_center_cell(gt: BBox, N: int, s: int, offset: float = 0.0) -> np.ndarray:
    px = grid_pixels(N, s, offset)
    return (np.isclose(px[None, :], gt.cx) & np.isclose(px[:, None], gt.cy))


def clip_box(box: BBox, w: float, h: float, min_size: float = 2.0) -> BBox:
    cx = min(max(box.cx, 0.0), w)
    cy = min(max(box.cy, 0.0), h)
    bw = min(max(box.w, min_size), w)
    bh = min(max(box.h, min_size), h)
    return BBox.from_center(cx, cy, bw, bh)


def box_center_error(a: BBox, b: BBox) -> float:
    return math.hypot(a.cx - b.cx, a.cy - b.cy)
