"""Optimisation harness: warmup + cosine schedule, momentum SGD, the epoch
loop over sampled pairs, prefix freezing and binary checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import autograd as ag
from .anchors import AnchorConfig, anchor_grid, anchor_loss, anchor_targets
from .codec import TargetMaps, assign_and_encode
from .losses import LossConfig, LossReport, stack_targets, total_loss
from .model import ModelConfig, SiamModel
from .synth import PairSampler, TrainingPair, WorldConfig, normalize_patch

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    base_lr: float = 2e-3
    warmup_start_lr: float = 1e-7
    warmup_epochs: int = 1
    total_epochs: int = 6
    pairs_per_epoch: int = 2000
    momentum: float = 0.9
    batch_size: int = 8
    weight_decay: float = 0.0
    seed: int = 0
    freeze: List[str] = field(default_factory=list)

    def validate(self) -> None:
        if self.total_epochs > 0 and not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("warmup_epochs must be smaller than total_epochs")
        if self.base_lr <= 0 or self.warmup_start_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1 or self.pairs_per_epoch < self.batch_size:
            raise ValueError("pairs_per_epoch must hold at least one batch")

    @property
    def steps_per_epoch(self) -> int:
        return self.pairs_per_epoch // self.batch_size

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from ``warmup_start_lr`` to ``base_lr``, then cosine to 0."""
    W, T = cfg.warmup_steps, cfg.total_steps
    if step < W:
        return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * step / W
    progress = (step - W) / max(T - W, 1)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def sgd_momentum_step(params: Dict[str, ag.Tensor], grads: Dict[str, np.ndarray],
                      velocity: Dict[str, np.ndarray], lr: float, momentum: float = 0.9,
                      weight_decay: float = 0.0) -> None:
    """v <- momentum * v + g;  p <- p - lr * v.  In place; nothing moves if any grad is non-finite."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise ag.NonFiniteError(f"non-finite gradient for {name}; step aborted")
    for name, g in grads.items():
        p = params[name]
        if weight_decay:
            g = g + weight_decay * p.data
        v = velocity.get(name)
        v = g.astype(p.data.dtype) if v is None else momentum * v + g
        velocity[name] = v.astype(p.data.dtype)
        p.data = (p.data - lr * velocity[name]).astype(p.data.dtype)


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, dump_path: Optional[str] = None):
        super().__init__(message)
        self.dump_path = dump_path


def make_targets(pairs: Sequence[TrainingPair], model: SiamModel):
    cfg = model.cfg
    N, s, off = model.N, cfg.total_stride, model.offset
    if cfg.head_kind == "anchor":
        anchors = anchor_grid(AnchorConfig(cfg.anchor_ratios, cfg.anchor_scales, s), N, off)
        return [anchor_targets(p.gt_in_search, anchors) for p in pairs]
    out = []
    for p in pairs:
        if p.gt_in_search is None:
            out.append(TargetMaps(np.zeros((N, N)), np.zeros((N, N)), np.zeros((4, N, N)), 0))
        else:
            out.append(assign_and_encode(p.gt_in_search, N, s, off))
    return out


def batch_inputs(pairs: Sequence[TrainingPair]):
    z = np.stack([normalize_patch(p.template_patch) for p in pairs])
    x = np.stack([normalize_patch(p.search_patch) for p in pairs])
    return ag.Tensor(z), ag.Tensor(x)


def batch_loss(model: SiamModel, pairs: Sequence[TrainingPair], loss_cfg: LossConfig):
    z, x = batch_inputs(pairs)
    targets = make_targets(pairs, model)
    head = model(z, x)
    if model.cfg.head_kind == "anchor":
        return anchor_loss(head.cls, head.reg, targets, loss_cfg)
    return total_loss(head, stack_targets(targets), loss_cfg, model.cfg.total_stride,
                      model.cfg.quality_mode, model.cfg.reg_activation)


def is_frozen(name: str, prefixes: Sequence[str]) -> bool:
    return any(name.startswith(p) for p in prefixes)


@dataclass
class StepLog:
    step: int
    lr: float
    report: LossReport


def train(model: SiamModel, sampler: PairSampler, train_cfg: TrainConfig,
          loss_cfg: LossConfig = LossConfig(), log_path: Optional[str] = None,
          dump_dir: Optional[str] = None, velocity: Optional[Dict[str, np.ndarray]] = None,
          on_step: Optional[Callable[[StepLog], None]] = None) -> List[StepLog]:
    """Run the schedule; mutates ``model`` in place and returns the loss log."""
    train_cfg.validate()
    loss_cfg.validate()
    velocity = {} if velocity is None else velocity
    trainable = {n: p for n, p in model.params.items() if not is_frozen(n, train_cfg.freeze)}
    history: List[StepLog] = []
    fh = open(log_path, "w", newline="") if log_path else None
    writer = csv.writer(fh) if fh else None
    if writer:
        writer.writerow(["step", "lr", "total", "cls", "quality", "reg", "n_pos"])
    try:
        for step in range(train_cfg.total_steps):
            pairs = sampler.batch(train_cfg.batch_size)
            lr = lr_at(step, train_cfg)
            with ag.GradTape() as tape:
                try:
                    loss, rep = batch_loss(model, pairs, loss_cfg)
                except ag.NonFiniteError as exc:
                    raise TrainingDiverged(f"step {step}: {exc}", _dump(dump_dir, step, pairs)) from exc
            if not math.isfinite(rep.total):
                raise TrainingDiverged(f"step {step}: loss is {rep.total}", _dump(dump_dir, step, pairs))
            grads = ag.backward(tape, loss)
            named = {n: grads[p] for n, p in trainable.items() if p in grads}
            try:
                sgd_momentum_step(trainable, named, velocity, lr, train_cfg.momentum, train_cfg.weight_decay)
            except ag.NonFiniteError as exc:
                raise TrainingDiverged(f"step {step}: {exc}", _dump(dump_dir, step, pairs)) from exc
            entry = StepLog(step, lr, rep)
            history.append(entry)
            if writer:
                writer.writerow([step, f"{lr:.9g}", f"{rep.total:.6f}", f"{rep.cls_term:.6f}",
                                 f"{rep.quality_term:.6f}", f"{rep.reg_term:.6f}", rep.n_pos])
            if on_step:
                on_step(entry)
            if step % 100 == 0:
                log.info("step %d lr %.2e loss %.4f (cls %.4f q %.4f reg %.4f)", step, lr,
                         rep.total, rep.cls_term, rep.quality_term, rep.reg_term)
    finally:
        if fh:
            fh.close()
    return history


def _dump(dump_dir: Optional[str], step: int, pairs: Sequence[TrainingPair]) -> Optional[str]:
    if not dump_dir:
        return None
    os.makedirs(dump_dir, exist_ok=True)
    path = os.path.join(dump_dir, f"diverged_step{step}.npz")
    gts = np.array([p.gt_in_search.as_tuple() if p.gt_in_search else [np.nan] * 4 for p in pairs])
    np.savez(path, template=np.stack([p.template_patch for p in pairs]),
             search=np.stack([p.search_patch for p in pairs]), gt=gts)
    return path


# ------------------------------------------------------------- checkpoints

MAGIC = b"SFPP"
VERSION = 1
_CONFIG_ENTRY = "__config_json__"
_STEP_ENTRY = "__step__"
_VEL_PREFIX = "velocity/"


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Checkpoint:
    version: int
    config: dict
    params: Dict[str, np.ndarray]
    velocity: Dict[str, np.ndarray]
    step: int


def save_checkpoint(path: str, model: SiamModel, velocity: Optional[Dict[str, np.ndarray]] = None,
                    step: int = 0, config: Optional[dict] = None) -> None:
    """Write the ``SFPP`` v1 format.

    Config echo and step counter ride along as ordinary float32 entries
    (config as UTF-8 bytes, one byte per element).
    """
    cfg = config if config is not None else {"model": asdict(model.cfg)}
    blob = json.dumps(cfg, sort_keys=True).encode("utf-8")
    entries = [(n, p.data) for n, p in model.params.items()]
    entries += [(_VEL_PREFIX + n, v) for n, v in sorted((velocity or {}).items())]
    entries.append((_STEP_ENTRY, np.array(float(step))))
    entries.append((_CONFIG_ENTRY, np.frombuffer(blob, dtype=np.uint8)))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(entries)))
        for name, arr in entries:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"truncated while reading {what}", pos)
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic, not an SFPP checkpoint", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})", 4)
    params, vel = {}, {}
    step, config = 0, {}
    for _ in range(count):
        start = pos
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("entry name is not UTF-8", start + 2) from exc
        (rank,) = struct.unpack("<B", take(1, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(4 * n, f"data of {name}"), dtype="<f4").reshape(dims).astype(np.float32)
        if name == _STEP_ENTRY:
            step = int(arr)
        elif name == _CONFIG_ENTRY:
            try:
                config = json.loads(arr.astype(np.uint8).tobytes().decode("utf-8"))
            except ValueError as exc:
                raise CheckpointError("config entry is not valid JSON", start) from exc
        elif name.startswith(_VEL_PREFIX):
            vel[name[len(_VEL_PREFIX):]] = arr
        else:
            params[name] = arr
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes", pos)
    return Checkpoint(version, config, params, vel, step)


def model_from_checkpoint(ckpt: Checkpoint) -> SiamModel:
    from .model import init_model
    mc = dict(ckpt.config.get("model", {}))
    cfg = ModelConfig(**mc) if mc else ModelConfig()
    model = init_model(cfg, seed=0)
    model.load_state_dict(ckpt.params)
    return model


def make_sampler(sequences, world_cfg: WorldConfig, seed: int) -> PairSampler:
    return PairSampler(sequences, world_cfg, seed=seed)
