"""Desk-scale anchor-free siamese tracker built on a small numpy autograd core."""

__version__ = "0.1.0"

from .codec import BBox, TargetMaps, assign_and_encode, decode_box, iou, pss
from .config import RunConfig, load_config
from .evaluation import EvalReport, eval_sequence
from .losses import LossConfig, total_loss
from .model import HeadOutput, ModelConfig, SiamModel, init_model
from .synth import Sequence, WorldConfig, gen_sequence, make_world
from .tracker import PostprocConfig, Tracker, track_sequence
from .train import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = [
    "BBox", "TargetMaps", "assign_and_encode", "decode_box", "iou", "pss",
    "RunConfig", "load_config", "EvalReport", "eval_sequence", "LossConfig", "total_loss",
    "HeadOutput", "ModelConfig", "SiamModel", "init_model", "Sequence", "WorldConfig",
    "gen_sequence", "make_world", "PostprocConfig", "Tracker", "track_sequence",
    "TrainConfig", "load_checkpoint", "save_checkpoint", "train",
]
