"""Finite-difference battery over every differentiable op and the full
training objective, run on random float64 instances."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor, finite_diff_check, precision
from .codec import BBox, assign_and_encode
from .losses import (LossConfig, bce_loss, focal_loss, iou_loss, iou_quality_target, stack_targets,
                     total_loss)
from .model import ModelConfig, decode_distances, init_model

TOL = 1e-4


@dataclass
class OpCheck:
    op: str
    instances: int
    max_rel_err: float
    passed: bool


def _away_from_zero(rng, shape, margin=0.05):
    """Random values whose magnitude exceeds ``margin`` so relu and max-pool
    kinks are not straddled by the difference step."""
    v = rng.normal(size=shape)
    return np.where(np.abs(v) < margin, np.sign(v + 1e-12) * margin, v)


def _case_conv(rng):
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = rng.normal(size=(2, 3, 7, 7))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    r = rng.normal(size=ag.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).shape)
    which = rng.integers(3)
    args = [x, w, b]

    def f(t):
        a = [Tensor(v) for v in args]
        a[which] = t
        return ag.sum_all(ag.mul(ag.conv2d(a[0], a[1], a[2], stride, pad), Tensor(r)))

    return f, args[which]


def _case_xcorr(rng):
    z = rng.normal(size=(2, 3, 3, 3))
    x = rng.normal(size=(2, 3, 6, 6))
    r = rng.normal(size=(2, 3, 4, 4))
    on_template = bool(rng.integers(2))

    def f(t):
        out = ag.xcorr_depthwise(t, Tensor(x)) if on_template else ag.xcorr_depthwise(Tensor(z), t)
        return ag.sum_all(ag.mul(out, Tensor(r)))

    return f, (z if on_template else x)


def _case_elementwise(rng):
    x = _away_from_zero(rng, (3, 5))
    y = rng.normal(size=(3, 5))
    r = rng.normal(size=(3, 5))

    def f(t):
        h = ag.relu(ag.add(ag.mul(t, Tensor(y)), ag.scale(t, 0.5)))
        h = ag.add(h, ag.exp(ag.scale(t, 0.3)))
        return ag.sum_all(ag.mul(h, Tensor(r)))

    return f, x


def _case_pool(rng):
    x = rng.permutation(64).reshape(1, 4, 4, 4).astype(np.float64) / 10.0
    r = rng.normal(size=(1, 4, 2, 2))
    return (lambda t: ag.sum_all(ag.mul(ag.max_pool2d(t, 2, 2), Tensor(r)))), x


def _case_focal(rng):
    logits = rng.normal(size=(2, 5, 5)) * 2
    star = (rng.random((2, 5, 5)) < 0.3).astype(np.float64)
    w = rng.random((2, 5, 5))
    return (lambda t: focal_loss(t, star, 2.0, 0.25, weight=w)), logits


def _case_bce(rng):
    logits = rng.normal(size=(2, 5, 5)) * 2
    q = rng.random((2, 5, 5))
    mask = (rng.random((2, 5, 5)) < 0.5).astype(np.float64)
    return (lambda t: bce_loss(t, q, mask)), logits


def _case_iou(rng):
    pred = rng.uniform(2, 20, size=(2, 4, 4, 4))
    star = rng.uniform(2, 20, size=(2, 4, 4, 4))
    # keep pred away from star so no min() switches under the step
    pred = np.where(np.abs(pred - star) < 0.1, pred + 0.5, pred)
    mask = (rng.random((2, 4, 4)) < 0.6).astype(np.float64)
    return (lambda t: iou_loss(t, star, mask)), pred


GRAD_MODEL = ModelConfig(backbone_channels=[2, 2, 2, 2], head_channels=2, template_size=32,
                         search_size=64, head_tower_depth=1)


def _case_objective(rng, quality_mode="pss"):
    """Full objective as a function of one randomly chosen parameter tensor."""
    cfg = ModelConfig(**{**GRAD_MODEL.__dict__, "quality_mode": quality_mode})
    model = init_model(cfg, int(rng.integers(1 << 30)))
    model.astype(np.float64)
    for p in model.params.values():
        fan_in = int(np.prod(p.data.shape[1:])) if p.data.ndim > 1 else 10
        p.data = rng.normal(scale=1.0 / np.sqrt(fan_in), size=p.data.shape)
    z = rng.normal(size=(2, 3, 32, 32))
    x = rng.normal(size=(2, 3, 64, 64))
    N, off = model.N, model.offset
    targets = []
    for _ in range(2):
        cx, cy = rng.uniform(20, 44, size=2)
        w, h = rng.uniform(12, 30, size=2)
        targets.append(assign_and_encode(BBox.from_center(cx, cy, w, h), N, 8, off))
    tm = stack_targets(targets)
    names = [n for n in model.names() if n.endswith(".weight")]
    name = names[int(rng.integers(len(names)))]
    orig = model.params[name]
    q_fixed = None
    if quality_mode == "iou":
        # the IoU target is a stop-gradient quantity; freeze it at the base point
        head = model(Tensor(z), Tensor(x))
        q_fixed = iou_quality_target(decode_distances(head.reg, 8).data, tm.reg_star, tm.cls_star)

    def f(t):
        model.params[name] = t
        try:
            head = model(Tensor(z), Tensor(x))
            loss, _ = total_loss(head, tm, LossConfig(), 8, quality_mode, "exp", quality_target=q_fixed)
        finally:
            model.params[name] = orig
        return loss

    return f, orig.data.copy()


# op -> (instance builder, central-difference steps).  Smooth closed-form
# losses are round-off limited and take a larger step; whole-network cases
# carry relu / max-pool / min() kinks, so they also try smaller steps.
CASES: Dict[str, Tuple[Callable, float]] = {
    "conv2d": (_case_conv, 1e-5),
    "xcorr_depthwise": (_case_xcorr, 1e-5),
    "elementwise": (_case_elementwise, 1e-5),
    "max_pool2d": (_case_pool, 1e-5),
    "focal_loss": (_case_focal, 1e-4),
    "bce_loss": (_case_bce, 1e-4),
    "iou_loss": (_case_iou, 1e-5),
    "objective_pss": (lambda rng: _case_objective(rng, "pss"), (1e-5, 2e-6)),
    "objective_iou": (lambda rng: _case_objective(rng, "iou"), (1e-5, 2e-6)),
}


def run_gradcheck(instances: int = 20, seed: int = 0, tol: float = TOL, ops=None) -> List[OpCheck]:
    rng = np.random.default_rng(seed)
    out = []
    for op in ops or CASES:
        build, eps = CASES[op]
        worst, ok = 0.0, True
        for _ in range(instances):
            with precision(np.float64):
                f, x = build(rng)
            rep = finite_diff_check(f, x, eps=eps, tol=tol)
            worst = max(worst, rep.max_rel_err)
            ok &= rep.passed
        out.append(OpCheck(op, instances, worst, bool(ok)))
    return out
