# Train a small tracker for a minute, then follow a held-out sequence and
# compare the fused score against classification alone.
#
# Run: python3 notebooks/03_train_and_track.py   (about 1 minute on one core)

import numpy as np

from sfpp.evaluation import evaluate_model, outcome_split, score_histograms
from sfpp.model import ModelConfig, init_model
from sfpp.synth import PairSampler, WorldConfig, make_world
from sfpp.tracker import PostprocConfig
from sfpp.train import TrainConfig, train

world = WorldConfig()
train_seqs = make_world(7, 30, world)
test_seqs = make_world(1234, 6, world)

model = init_model(ModelConfig(), 0)
before, _ = evaluate_model(model, test_seqs)
print("untrained AO:", round(before.AO, 3))

cfg = TrainConfig(total_epochs=3, warmup_epochs=1, pairs_per_epoch=800)
log = train(model, PairSampler(train_seqs, world, 0), cfg)
totals = np.array([s.report.total for s in log])
print("loss first 20 steps:", totals[:20].mean().round(3), "last 20:", totals[-20:].mean().round(3))

fused, results = evaluate_model(model, test_seqs)
cls_only, _ = evaluate_model(model, test_seqs, PostprocConfig(use_quality=False))
print("AO fused:", round(fused.AO, 3), "SR@0.5:", round(fused.SR50, 3))
print("AO cls only:", round(cls_only.AO, 3))

# How well does the max score separate frames that still overlap the target
# from frames that lost it?
hist = score_histograms(*outcome_split(results, test_seqs))
print("mean max score, success:", round(hist.mean_success, 3), "failure:", round(hist.mean_failure, 3))
print("KS:", round(hist.ks, 3))
