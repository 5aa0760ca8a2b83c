# The synthetic world: textured shapes drifting over a noisy background,
# with exact ground truth boxes and training pairs cut from them.
#
# Run: python3 notebooks/02_synthetic_world.py

import numpy as np

from sfpp.codec import assign_and_encode
from sfpp.synth import PairSampler, WorldConfig, gen_sequence, make_world, scale_ratio_stats

world = WorldConfig()
seq = gen_sequence(3, length=40, cfg=world)
print("frames:", len(seq), "frame shape:", seq.frames[0].shape)
for t in (0, 10, 20, 39):
    b = seq.gt[t]
    print(f"t={t:2d} centre=({b.cx:6.1f},{b.cy:6.1f}) size={b.w:5.1f}x{b.h:5.1f}")

# Size changes between neighbouring frames are small and centred on 1.
stats = scale_ratio_stats(make_world(7, 10, world))
print("relative scale median:", round(float(np.median(stats["relative_scale"])), 3))

# Training pairs: template crop, search crop, and the target maps.
sampler = PairSampler(make_world(7, 6, world), world, seed=0)
rng_pairs = [sampler.sample() for _ in range(200)]
neg = sum(p.is_negative for p in rng_pairs)
print(f"negative pairs: {neg}/200 (target ratio {world.neg_ratio})")
pos = next(p for p in rng_pairs if not p.is_negative)
print("template", pos.template_patch.shape, "search", pos.search_patch.shape)
t = assign_and_encode(pos.gt_in_search, N=9, s=8, offset=28.0)
print("positives on the 9x9 grid:", t.n_pos)
print(t.cls_star.astype(int))
