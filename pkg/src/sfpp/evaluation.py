"""Overlap metrics, success/failure score histograms, the anchor-vs-gt IoU
analysis and the ablation driver that trains and compares head variants."""

from __future__ import annotations

import csv
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence as Seq

import numpy as np
from scipy.stats import ks_2samp

from .codec import BBox, box_center_error, iou
from .losses import LossConfig
from .model import ModelConfig, init_model
from .synth import PairSampler, Sequence, WorldConfig, make_world
from .tracker import ModelPredictor, PostprocConfig, TrackResult, track_sequence
from .train import TrainConfig, train

HIST_BINS = 20
PRECISION_PX = 20.0


@dataclass
class EvalReport:
    AO: float
    SR50: float
    SR75: float
    precision20: float
    failures: int
    accuracy: float
    n_frames: int
    ious: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    center_errors: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    def summary(self) -> Dict[str, float]:
        return {"AO": self.AO, "SR@0.5": self.SR50, "SR@0.75": self.SR75,
                "precision@20px": self.precision20, "failures": self.failures,
                "accuracy": self.accuracy, "frames": self.n_frames}


def _report(ious: np.ndarray, errs: np.ndarray) -> EvalReport:
    n = len(ious)
    if n == 0:
        return EvalReport(0.0, 0.0, 0.0, 0.0, 0, 0.0, 0, ious, errs)
    ok = ious > 0
    return EvalReport(
        AO=float(ious.mean()),
        SR50=float(np.mean(ious >= 0.5)),
        SR75=float(np.mean(ious >= 0.75)),
        precision20=float(np.mean(errs <= PRECISION_PX)),
        failures=int(n - ok.sum()),
        accuracy=float(ious[ok].mean()) if ok.any() else 0.0,
        n_frames=n,
        ious=ious,
        center_errors=errs,
    )


def frame_ious(pred: Seq[BBox], gt: Seq[BBox]) -> np.ndarray:
    if len(pred) != len(gt):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(gt)} ground-truth boxes")
    return np.array([iou(p, g) for p, g in zip(pred, gt)], dtype=np.float64)


def eval_sequence(pred: Seq[BBox], gt: Seq[BBox], skip_first: bool = True) -> EvalReport:
    """Metrics over one sequence.  Frame 0 is the given initialisation and
    is left out unless ``skip_first`` is False."""
    ious = frame_ious(pred, gt)
    errs = np.array([box_center_error(p, g) for p, g in zip(pred, gt)], dtype=np.float64)
    k = 1 if skip_first else 0
    return _report(ious[k:], errs[k:])


def aggregate(reports: Seq[EvalReport]) -> EvalReport:
    """Pool frames of several sequences (frame-weighted means)."""
    if not reports:
        return _report(np.zeros(0), np.zeros(0))
    return _report(np.concatenate([r.ious for r in reports]),
                   np.concatenate([r.center_errors for r in reports]))


def ks_statistic(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        return float("nan")
    return float(ks_2samp(a, b).statistic)


@dataclass
class ScoreHistogram:
    edges: np.ndarray
    success: np.ndarray
    failure: np.ndarray
    ks: float
    degenerate: bool
    mean_success: float
    mean_failure: float


def score_histograms(success_scores, failure_scores, bins: int = HIST_BINS) -> ScoreHistogram:
    """Histograms of max score over [0, 1] split by outcome, plus the KS
    statistic.  ``degenerate`` is set when either class is empty (KS is nan)."""
    s = np.asarray(success_scores, dtype=np.float64)
    f = np.asarray(failure_scores, dtype=np.float64)
    edges = np.linspace(0.0, 1.0, bins + 1)
    hs = np.histogram(np.clip(s, 0, 1), edges)[0]
    hf = np.histogram(np.clip(f, 0, 1), edges)[0]
    degenerate = s.size == 0 or f.size == 0
    return ScoreHistogram(edges, hs, hf, ks_statistic(s, f), degenerate,
                          float(s.mean()) if s.size else float("nan"),
                          float(f.mean()) if f.size else float("nan"))


def write_histogram_csv(path: str, hist: ScoreHistogram, note: str = "") -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# bins={len(hist.edges) - 1} uniform over [0,1]; ks={hist.ks:.6f}"
                 f"; degenerate={int(hist.degenerate)}{'; ' + note if note else ''}\n")
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count_success", "count_failure"])
        for lo, hi, a, b in zip(hist.edges[:-1], hist.edges[1:], hist.success, hist.failure):
            w.writerow([f"{lo:.3f}", f"{hi:.3f}", int(a), int(b)])


def outcome_split(results: Seq[TrackResult], seqs: Seq[Sequence]):
    """Max scores of tracked frames split into success (IoU > 0) and failure."""
    succ, fail = [], []
    for res, seq in zip(results, seqs):
        for box, tel in zip(res.boxes[1:], res.telemetry):
            (succ if iou(box, seq.gt[tel.frame]) > 0 else fail).append(tel.max_score)
    return np.array(succ), np.array(fail)


@dataclass
class AnchorIouAnalysis:
    pred_vs_gt: ScoreHistogram     # IoU(pred, gt) split by outcome
    anchor_vs_gt: ScoreHistogram   # IoU(winning anchor, gt) split by outcome
    pred_vs_anchor_mean: float
    mean_pred_gt: float
    mean_anchor_gt: float


def anchor_iou_analysis(pred: Seq[BBox], anchors: Seq[BBox], gt: Seq[BBox],
                        bins: int = HIST_BINS) -> AnchorIouAnalysis:
    """Compare how the predicted box overlaps the ground truth against how
    the anchor it was regressed from does, per outcome class."""
    if not (len(pred) == len(anchors) == len(gt)):
        raise ValueError("pred, anchors and gt must have equal length")
    pg = np.array([iou(p, g) for p, g in zip(pred, gt)])
    ag_ = np.array([iou(a, g) for a, g in zip(anchors, gt)])
    pa = np.array([iou(p, a) for p, a in zip(pred, anchors)])
    ok = pg > 0
    edges = np.linspace(0.0, 1.0, bins + 1)

    def split(v):
        return ScoreHistogram(edges, np.histogram(v[ok], edges)[0], np.histogram(v[~ok], edges)[0],
                              ks_statistic(v[ok], v[~ok]), not ok.any() or ok.all(),
                              float(v[ok].mean()) if ok.any() else float("nan"),
                              float(v[~ok].mean()) if (~ok).any() else float("nan"))

    return AnchorIouAnalysis(split(pg), split(ag_), float(pa.mean()) if pa.size else float("nan"),
                             float(pg.mean()) if pg.size else float("nan"),
                             float(ag_.mean()) if ag_.size else float("nan"))


def anchor_telemetry(results: Seq[TrackResult], seqs: Seq[Sequence]):
    pred, anc, gt = [], [], []
    for res, seq in zip(results, seqs):
        for box, tel in zip(res.boxes[1:], res.telemetry):
            if tel.anchor_box is not None:
                pred.append(box)
                anc.append(tel.anchor_box)
                gt.append(seq.gt[tel.frame])
    return pred, anc, gt


def write_summary(path: str, values: Dict[str, object]) -> None:
    """Flat ``key=value`` file, one entry per line, in insertion order."""
    with open(path, "w") as fh:
        for k, v in values.items():
            fh.write(f"{k}={_fmt(v)}\n")


def read_summary(path: str) -> Dict[str, str]:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                k, _, v = line.partition("=")
                out[k] = v
    return out


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6f}"
    return str(v)


def _track_one(args):
    predictor, seq, cfg = args
    return track_sequence(predictor, seq, cfg)


def track_many(predictor, seqs: Seq[Sequence], cfg: PostprocConfig = PostprocConfig(),
               jobs: int = 1) -> List[TrackResult]:
    """Track each sequence independently; results keep the input order."""
    if jobs <= 1 or len(seqs) <= 1:
        return [track_sequence(predictor, s, cfg) for s in seqs]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_track_one, [(predictor, s, cfg) for s in seqs]))


def evaluate_model(model, seqs: Seq[Sequence], cfg: PostprocConfig = PostprocConfig(), jobs: int = 1):
    results = track_many(ModelPredictor(model), seqs, cfg, jobs)
    report = aggregate([eval_sequence(r.boxes, s.gt) for r, s in zip(results, seqs)])
    return report, results


# ----------------------------------------------------------------------------------------------
# ablation


@dataclass
class AblationSetup:
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    postproc: PostprocConfig = field(default_factory=PostprocConfig)
    train_sequences: int = 60
    test_sequences: int = 20
    world_seed: int = 7
    test_seed: int = 1234
    model_seed: int = 0


@dataclass
class VariantResult:
    name: str
    report: EvalReport
    hist: ScoreHistogram
    results: List[TrackResult] = field(repr=False, default_factory=list)
    anchor: Optional[AnchorIouAnalysis] = None
    model: object = field(repr=False, default=None)


VARIANTS = {
    "pixel_pss": dict(head_kind="pixel", quality_mode="pss"),
    "pixel_iou": dict(head_kind="pixel", quality_mode="iou"),
    "pixel_none": dict(head_kind="pixel", quality_mode="none"),
    "anchor_maxout": dict(head_kind="anchor", quality_mode="none"),
}


def run_variant(name: str, setup: AblationSetup, train_seqs=None, test_seqs=None,
                jobs: int = 1, use_quality: bool = True) -> VariantResult:
    """Train one head variant from the shared seeds and evaluate it held-out."""
    if train_seqs is None:
        train_seqs = make_world(setup.world_seed, setup.train_sequences, setup.world)
    if test_seqs is None:
        test_seqs = make_world(setup.test_seed, setup.test_sequences, setup.world)
    mcfg = replace(setup.model, **VARIANTS[name])
    model = init_model(mcfg, setup.model_seed)
    sampler = PairSampler(train_seqs, setup.world, setup.train.seed)
    train(model, sampler, setup.train, setup.loss)
    return evaluate_variant(name, model, test_seqs, setup.postproc, jobs, use_quality)


def evaluate_variant(name: str, model, test_seqs, postproc: PostprocConfig = PostprocConfig(),
                     jobs: int = 1, use_quality: bool = True) -> VariantResult:
    pp = replace(postproc, use_quality=use_quality)
    report, results = evaluate_model(model, test_seqs, pp, jobs)
    hist = score_histograms(*outcome_split(results, test_seqs))
    anchor = None
    if model.cfg.head_kind == "anchor":
        anchor = anchor_iou_analysis(*anchor_telemetry(results, test_seqs))
    return VariantResult(name, report, hist, results, anchor, model)


def ablation_table(rows: Seq[VariantResult]) -> List[Dict[str, object]]:
    out = []
    for r in rows:
        d = {"variant": r.name}
        d.update(r.report.summary())
        d["ks_success_failure"] = r.hist.ks
        d["mean_score_success"] = r.hist.mean_success
        d["mean_score_failure"] = r.hist.mean_failure
        out.append(d)
    return out


def write_table_csv(path: str, table: Seq[Dict[str, object]]) -> None:
    if not table:
        raise ValueError("empty table")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(table[0].keys()))
        w.writeheader()
        for row in table:
            w.writerow({k: _fmt(v) for k, v in row.items()})


def write_variant_artifacts(directory: str, res: VariantResult) -> None:
    os.makedirs(directory, exist_ok=True)
    write_histogram_csv(os.path.join(directory, f"{res.name}_score_hist.csv"), res.hist,
                        "success = IoU > 0")
    if res.anchor is not None:
        write_histogram_csv(os.path.join(directory, f"{res.name}_iou_pred_gt.csv"), res.anchor.pred_vs_gt,
                            "IoU(pred, gt)")
        write_histogram_csv(os.path.join(directory, f"{res.name}_iou_anchor_gt.csv"), res.anchor.anchor_vs_gt,
                            "IoU(anchor, gt)")
