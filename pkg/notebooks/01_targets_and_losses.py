# Per-pixel targets, the prior spatial score and the losses, by hand.
#
# Run: python3 notebooks/01_targets_and_losses.py

import math

import numpy as np

from sfpp.autograd import Tensor, finite_diff_check, precision
from sfpp.codec import BBox, assign_and_encode, decode_box, pss
from sfpp.losses import focal_loss, iou_loss

# A 5x5 score map with stride 8 and no offset. Cell (x, y) looks at pixel
# (4 + 8x, 4 + 8y), so cell (1, 1) sits at (12, 12).
gt = BBox(4, 6, 20, 18)
t = assign_and_encode(gt, N=5, s=8)
print("positive cells:\n", t.cls_star.astype(int))
print("distances at (1,1):", t.reg_star[:, 1, 1])          # l, t, r, b = 8, 6, 8, 6
print("decoded back:", decode_box(1, 1, t.reg_star[:, 1, 1], 8).as_tuple())

# The quality target is 1 at the exact centre and drops toward the edges.
print("pss(1,2,3,2) =", round(pss(1, 2, 3, 2), 5))          # sqrt(1/3)
print("pss(1,1,4,4) =", pss(1, 1, 4, 4))                    # 0.25
big = assign_and_encode(BBox.from_center(44, 44, 60, 40), N=11, s=8)
np.set_printoptions(precision=2, suppress=True)
print("quality map over a larger box:\n", big.quality_star)

# Focal loss on a single positive with logit 0: 0.25 * 0.5^2 * ln 2.
f = focal_loss(Tensor(np.zeros((1, 1))), np.ones((1, 1)), 2.0, 0.25).item()
print("focal:", round(f, 5), "by hand:", round(0.25 * 0.25 * math.log(2), 5))

# IoU loss: doubling every distance quarters the IoU, so the loss is ln 4.
d = np.array([2.0, 3.0, 4.0, 5.0]).reshape(4, 1, 1)
print("iou loss:", iou_loss(Tensor(2 * d), d, np.ones((1, 1))).item(), "ln4:", math.log(4))

# Gradients of the IoU loss checked against central differences in float64.
with precision(np.float64):
    pred = np.abs(np.random.default_rng(0).normal(size=(4, 3, 3))) + 1.0
    mask = np.ones((3, 3))
    rep = finite_diff_check(lambda p: iou_loss(p, d.repeat(3, 1).repeat(3, 2), mask), pred)
print("iou loss gradient max rel err:", f"{rep.max_rel_err:.1e}", "passed:", rep.passed)
