"""Training objective: focal classification, masked BCE quality and masked
IoU regression terms, each normalised by the number of positive cells.

The three per-cell losses are fused tape ops with closed-form gradients.
Each takes an optional ``weight`` array broadcastable to the per-cell loss;
batching uses it to apply a per-sample ``1 / N_pos`` factor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .codec import TargetMaps, distance_iou
from .model import HeadOutput, decode_distances

IOU_FLOOR = 1e-6


@dataclass
class LossConfig:
    lambda_weight: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    n_pos_floor: int = 1

    def validate(self) -> None:
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")
        if not 0 < self.focal_alpha < 1:
            raise ValueError("focal_alpha must lie in (0, 1)")
        if self.lambda_weight < 0:
            raise ValueError("lambda_weight must be >= 0")
        if self.n_pos_floor < 1:
            raise ValueError("n_pos_floor must be >= 1")


@dataclass
class LossReport:
    total: float
    cls_term: float
    quality_term: float
    reg_term: float
    n_pos: int
    iou_clamped: int = 0


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _weighted(values: np.ndarray, weight) -> np.ndarray:
    return values if weight is None else values * weight


def focal_loss(logits: Tensor, cls_star, gamma: float = 2.0, alpha: float = 0.25, weight=None) -> Tensor:
    """Sum over cells of -a_t (1 - p_t)^gamma log p_t with p = sigmoid(logit)."""
    x = logits.data.astype(np.float64)
    y = np.asarray(cls_star, dtype=np.float64)
    if y.shape != x.shape:
        raise ag.ShapeError(f"focal_loss: labels {y.shape} vs logits {x.shape}")
    p = _sigmoid(x)
    log_p = -_softplus(-x)
    log_1mp = -_softplus(x)
    pos = y > 0.5
    q = np.where(pos, 1.0 - p, p)          # 1 - p_t
    log_pt = np.where(pos, log_p, log_1mp)
    a_t = np.where(pos, alpha, 1.0 - alpha)
    qg = q ** gamma
    cell = -a_t * qg * log_pt
    # d/dx, positives: a (1-p)^g [g p log p - (1-p)];  negatives: (1-a) p^g [p - g (1-p) log(1-p)]
    dpos = alpha * qg * (gamma * p * log_p - (1.0 - p))
    dneg = (1.0 - alpha) * qg * (p - gamma * (1.0 - p) * log_1mp)
    dcell = np.where(pos, dpos, dneg)
    w = 1.0 if weight is None else np.asarray(weight, dtype=np.float64)
    total = np.asarray(np.sum(cell * w), dtype=logits.data.dtype)
    return ag.record_op(total, (logits,),
                        lambda g: ((g * dcell * w).astype(logits.data.dtype),), "focal_loss")


def bce_loss(logits: Tensor, quality_star, mask, weight=None) -> Tensor:
    """Masked sum of -[q* log q + (1 - q*) log(1 - q)], q = sigmoid(logit)."""
    x = logits.data.astype(np.float64)
    t = np.asarray(quality_star, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if t.shape != x.shape or m.shape != x.shape:
        raise ag.ShapeError(f"bce_loss: shapes {x.shape}, {t.shape}, {m.shape}")
    cell = _softplus(x) - t * x
    w = m if weight is None else m * weight
    total = np.asarray(np.sum(cell * w), dtype=logits.data.dtype)
    grad = (_sigmoid(x) - t) * w
    return ag.record_op(total, (logits,), lambda g: ((g * grad).astype(logits.data.dtype),), "bce_loss")


def iou_loss(pred_distances: Tensor, reg_star, mask, weight=None, report: Optional[dict] = None) -> Tensor:
    """Masked sum of -ln IoU between predicted and target (l, t, r, b) boxes.

    Both boxes hang off the same cell pixel, so the IoU is computed straight
    from the distances.  IoU below ``IOU_FLOOR`` is capped (zero gradient)
    and counted in ``report["iou_clamped"]``.
    """
    d = pred_distances.data.astype(np.float64)
    t = np.asarray(reg_star, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    if d.shape != t.shape or d.shape[:-3] + d.shape[-2:] != m.shape:
        raise ag.ShapeError(f"iou_loss: shapes {d.shape}, {t.shape}, {m.shape}")
    w = m if weight is None else m * weight
    active = w != 0
    # move the (l, t, r, b) axis to the front
    P = np.moveaxis(d, -3, 0)
    T = np.moveaxis(t, -3, 0)
    pl, pt, pr, pb = P
    tl, tt, tr, tb = T
    mw_l, mw_r = pl <= tl, pr <= tr
    mh_t, mh_b = pt <= tt, pb <= tb
    wi = np.where(mw_l, pl, tl) + np.where(mw_r, pr, tr)
    hi = np.where(mh_t, pt, tt) + np.where(mh_b, pb, tb)
    inter = wi * hi
    union = (pl + pr) * (pt + pb) + (tl + tr) * (tt + tb) - inter
    safe_union = np.where(active, union, 1.0)
    ratio = np.where(active, inter / safe_union, 1.0)
    clamped = active & (ratio < IOU_FLOOR)
    cell = -np.log(np.maximum(ratio, IOU_FLOOR))
    total = np.asarray(np.sum(cell * w), dtype=pred_distances.data.dtype)
    if report is not None:
        report["iou_clamped"] = report.get("iou_clamped", 0) + int(clamped.sum())

    def vjp(g):
        safe_inter = np.where(active & ~clamped, inter, 1.0)
        # dL/dd = dU/dd / U - dI/dd / I, with dU/dd = dA_pred/dd - dI/dd
        dI = [hi * mw_l, wi * mh_t, hi * mw_r, wi * mh_b]
        dA = [pt + pb, pl + pr, pt + pb, pl + pr]
        grads = [(dA[k] - dI[k]) / safe_union - dI[k] / safe_inter for k in range(4)]
        G = np.stack(grads) * (w * ~clamped) * g
        return (np.moveaxis(G, 0, -3).astype(pred_distances.data.dtype),)

    return ag.record_op(total, (pred_distances,), vjp, "iou_loss")


def stack_targets(items: Sequence[TargetMaps]) -> TargetMaps:
    """Batch per-sample targets; ``n_pos`` becomes an int array."""
    return TargetMaps(
        np.stack([t.cls_star for t in items]),
        np.stack([t.quality_star for t in items]),
        np.stack([t.reg_star for t in items]),
        np.array([t.n_pos for t in items]),
    )


def iou_quality_target(pred_distances, reg_star, cls_star) -> np.ndarray:
    """IoU between predicted and target boxes on positive cells, zero elsewhere.
    Computed on plain arrays, so no gradient reaches the regression branch."""
    with np.errstate(invalid="ignore", divide="ignore"):
        q = np.nan_to_num(distance_iou(np.moveaxis(np.asarray(pred_distances, dtype=np.float64), -3, 0),
                                       np.moveaxis(np.asarray(reg_star, dtype=np.float64), -3, 0)))
    return np.where(np.asarray(cls_star) > 0, q, 0.0)


def total_loss(head: HeadOutput, targets: TargetMaps, cfg: LossConfig = LossConfig(),
               stride: int = 8, quality_mode: str = "pss", activation: str = "exp",
               quality_target: Optional[np.ndarray] = None):
    """Normalised objective.  Returns (scalar tensor, LossReport).

    Batched heads ([B, N, N] maps) average the per-sample objectives.  In
    ``"iou"`` mode the quality target comes from the detached predicted
    distances unless ``quality_target`` pins it.
    """
    cls_star = np.asarray(targets.cls_star, dtype=np.float64)
    batched = head.cls.ndim == 3
    n_pos = np.atleast_1d(np.asarray(targets.n_pos))
    B = len(n_pos)
    if batched != (cls_star.ndim == 3) or (batched and head.cls.shape[0] != B):
        raise ag.ShapeError("total_loss: head and targets disagree on batching")
    norm = 1.0 / (np.maximum(n_pos, cfg.n_pos_floor) * B)
    cell_w = norm[:, None, None] if batched else float(norm[0])

    cls_t = focal_loss(head.cls, cls_star, cfg.focal_gamma, cfg.focal_alpha, weight=cell_w)
    dist = decode_distances(head.reg, stride, activation)
    info: dict = {}
    reg_t = iou_loss(dist, targets.reg_star, cls_star, weight=cell_w, report=info)

    if quality_mode == "none" or head.quality is None:
        q_t = None
    else:
        if quality_target is not None:
            q_star = np.asarray(quality_target, dtype=np.float64)
        elif quality_mode == "iou":
            q_star = iou_quality_target(dist.data, targets.reg_star, cls_star)
        else:
            q_star = targets.quality_star
        q_t = bce_loss(head.quality, q_star, cls_star, weight=cell_w)

    lam = cfg.lambda_weight
    extra = reg_t if q_t is None else ag.add(q_t, reg_t)
    total = ag.add(cls_t, ag.scale(extra, lam))
    rep = LossReport(
        total=total.item(),
        cls_term=cls_t.item(),
        quality_term=0.0 if q_t is None else q_t.item(),
        reg_term=reg_t.item(),
        n_pos=int(n_pos.sum()),
        iou_clamped=info.get("iou_clamped", 0),
    )
    return total, rep
