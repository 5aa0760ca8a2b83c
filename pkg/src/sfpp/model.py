"""Siamese network: shared backbone, per-task adjust layers, depthwise
correlation, head towers and the 1x1 output convolutions.

Two head flavours share the same trunk.  ``"pixel"`` predicts one score,
one quality logit and four distances per cell.  ``"anchor"`` predicts K
scores and K offset quadruples per cell, one per pre-set anchor; it exists
only as the comparison baseline for the ambiguity study.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor

QUALITY_MODES = ("pss", "iou", "none")
HEAD_KINDS = ("pixel", "anchor")
REG_ACTIVATIONS = ("exp", "softplus")


@dataclass
class ModelConfig:
    backbone_channels: List[int] = field(default_factory=lambda: [16, 32, 32, 32])
    head_channels: int = 32
    total_stride: int = 8
    template_size: int = 64
    search_size: int = 128
    head_tower_depth: int = 2
    crop_border: int = 0
    quality_mode: str = "pss"
    head_kind: str = "pixel"
    anchor_ratios: List[float] = field(default_factory=lambda: [0.5, 1.0, 2.0])
    anchor_scales: List[float] = field(default_factory=lambda: [4.0])
    reg_activation: str = "exp"
    init_std: float = 0.01
    backbone_init: str = "he"

    def validate(self) -> None:
        if len(self.backbone_channels) != 4:
            raise ValueError("backbone_channels needs 4 entries (conv1..conv4)")
        if self.total_stride != 8:
            raise ValueError("the backbone is fixed at total stride 8")
        if self.head_tower_depth not in (1, 2, 3):
            raise ValueError(f"head_tower_depth must be 1..3, got {self.head_tower_depth}")
        if self.quality_mode not in QUALITY_MODES:
            raise ValueError(f"quality_mode must be one of {QUALITY_MODES}")
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"head_kind must be one of {HEAD_KINDS}")
        if self.reg_activation not in REG_ACTIVATIONS:
            raise ValueError(f"reg_activation must be one of {REG_ACTIVATIONS}")
        if self.backbone_init not in ("he", "gaussian"):
            raise ValueError("backbone_init must be 'he' or 'gaussian'")
        if self.crop_border < 0:
            raise ValueError("crop_border must be >= 0")

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_ratios) * len(self.anchor_scales)


def _backbone_size(size: int) -> int:
    size = ag.conv_output_size(size, 3, 2, 1)   # conv1
    size = ag.conv_output_size(size, 2, 2, 0)   # pool
    size = ag.conv_output_size(size, 3, 2, 1)   # conv3 (conv2/conv4 keep size)
    return size


def feature_sizes(cfg: ModelConfig) -> Tuple[int, int]:
    """Spatial extent of template and search features after the border crop."""
    zt = _backbone_size(cfg.template_size) - 2 * cfg.crop_border
    xs = _backbone_size(cfg.search_size) - 2 * cfg.crop_border
    return zt, xs


def score_size(cfg: ModelConfig) -> int:
    zt, xs = feature_sizes(cfg)
    return xs - zt + 1


def score_offset(cfg: ModelConfig) -> float:
    """Shift that puts the centre of the score grid on the search-patch centre."""
    N = score_size(cfg)
    s = cfg.total_stride
    return cfg.search_size / 2 - s // 2 - s * (N - 1) / 2


@dataclass
class HeadOutput:
    cls: Tensor      # [(B,) N, N] logits, or [(B,) K, N, N] for the anchor head
    quality: Optional[Tensor]  # [(B,) N, N] logits; None when the branch is absent
    reg: Tensor      # [(B,) 4, N, N] raw, or [(B,) K, 4, N, N] anchor offsets

    @property
    def N(self) -> int:
        return self.cls.shape[-1]


class SiamModel:
    """Parameter container plus the forward pass.

    ``params`` maps dotted names to leaf tensors.  The backbone entries are
    used by both branches, so weight sharing is by construction.
    """

    def __init__(self, cfg: ModelConfig, params: Dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    # -- bookkeeping
    def names(self) -> List[str]:
        return list(self.params)

    def num_parameters(self, prefix: str = "") -> int:
        return sum(p.size for n, p in self.params.items() if n.startswith(prefix))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)}")
        for n, p in self.params.items():
            arr = np.asarray(state[n])
            if arr.shape != p.shape:
                raise ValueError(f"{n}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def astype(self, dtype) -> "SiamModel":
        params = {n: Tensor(p.data.astype(dtype), requires_grad=True, name=n, dtype=dtype)
                  for n, p in self.params.items()}
        return SiamModel(self.cfg, params)

    @property
    def N(self) -> int:
        return score_size(self.cfg)

    @property
    def offset(self) -> float:
        return score_offset(self.cfg)

    # -- forward
    def _conv(self, x: Tensor, name: str, stride: int = 1, pad: int = 1) -> Tensor:
        return ag.conv2d(x, self.params[name + ".weight"], self.params[name + ".bias"], stride, pad)

    def backbone(self, x: Tensor) -> Tensor:
        x = ag.relu(self._conv(x, "backbone.conv1", stride=2))
        x = ag.max_pool2d(x, 2, 2)
        x = ag.relu(self._conv(x, "backbone.conv2"))
        x = ag.relu(self._conv(x, "backbone.conv3", stride=2))
        x = ag.relu(self._conv(x, "backbone.conv4"))
        return ag.crop_border(x, self.cfg.crop_border)

    def _adjust(self, feat: Tensor, task: str) -> Tensor:
        x = ag.relu(self._conv(feat, f"neck.{task}.0"))
        return self._conv(x, f"neck.{task}.1")

    def embed(self, patch: Tensor, branch: str) -> Tuple[Tensor, Tensor]:
        """Features (cls-task, reg-task) of a template or search patch."""
        want = {"template": self.cfg.template_size, "search": self.cfg.search_size}
        if branch not in want:
            raise ValueError(f"branch must be 'template' or 'search', got {branch!r}")
        H, W = patch.shape[-2:]
        if (H, W) != (want[branch], want[branch]) or patch.shape[-3] != 3:
            raise ag.ShapeError(
                f"{branch} patch must be 3x{want[branch]}x{want[branch]}, got {patch.shape}")
        feat = self.backbone(patch)
        return self._adjust(feat, "cls"), self._adjust(feat, "reg")

    def _tower(self, x: Tensor, task: str) -> Tensor:
        for i in range(self.cfg.head_tower_depth):
            x = ag.relu(self._conv(x, f"head.{task}_tower.{i}"))
        return x

    def forward_heads(self, z_feats: Tuple[Tensor, Tensor], x_feats: Tuple[Tensor, Tensor]) -> HeadOutput:
        zc, zr = z_feats
        xc, xr = x_feats
        area = float(zc.shape[-1] * zc.shape[-2])
        corr_cls = ag.scale(ag.xcorr_depthwise(zc, xc), 1.0 / area)
        corr_reg = ag.scale(ag.xcorr_depthwise(zr, xr), 1.0 / area)
        tc = self._tower(corr_cls, "cls")
        tr = self._tower(corr_reg, "reg")
        cls = self._conv(tc, "head.cls_out", pad=0)
        reg = self._conv(tr, "head.reg_out", pad=0)
        lead = cls.shape[:-3]
        N = cls.shape[-1]
        if self.cfg.head_kind == "anchor":
            K = self.cfg.num_anchors
            return HeadOutput(cls, None, ag.reshape(reg, lead + (K, 4, N, N)))
        cls = ag.reshape(cls, lead + (N, N))
        quality = None
        if self.cfg.quality_mode != "none":
            quality = ag.reshape(self._conv(tc, "head.quality_out", pad=0), lead + (N, N))
        return HeadOutput(cls, quality, reg)

    def __call__(self, template: Tensor, search: Tensor) -> HeadOutput:
        return self.forward_heads(self.embed(template, "template"), self.embed(search, "search"))

    def distances(self, reg_raw: Tensor) -> Tensor:
        return decode_distances(reg_raw, self.cfg.total_stride, self.cfg.reg_activation)


def decode_distances(reg_raw: Tensor, s: int, activation: str = "exp") -> Tensor:
    """Raw regression outputs to strictly positive pixel distances."""
    if activation == "exp":
        return ag.scale(ag.exp(reg_raw), float(s))
    if activation == "softplus":
        return ag.scale(softplus(reg_raw), float(s))
    raise ValueError(f"unknown activation {activation!r}")


def softplus(x: Tensor) -> Tensor:
    d = x.data
    out = np.logaddexp(0, d).astype(d.dtype)
    sig = 0.5 * (1 + np.tanh(0.5 * d))
    return ag.record_op(out, (x,), lambda g: (g * sig,), "softplus")


def _layer_specs(cfg: ModelConfig) -> List[Tuple[str, Tuple[int, int, int, int], str]]:
    c1, c2, c3, c4 = cfg.backbone_channels
    hc = cfg.head_channels
    specs = [
        ("backbone.conv1", (c1, 3, 3, 3), "trunk"),
        ("backbone.conv2", (c2, c1, 3, 3), "trunk"),
        ("backbone.conv3", (c3, c2, 3, 3), "trunk"),
        ("backbone.conv4", (c4, c3, 3, 3), "trunk"),
    ]
    for task in ("cls", "reg"):
        specs.append((f"neck.{task}.0", (hc, c4, 3, 3), "trunk"))
        specs.append((f"neck.{task}.1", (hc, hc, 3, 3), "trunk"))
    for task in ("cls", "reg"):
        for i in range(cfg.head_tower_depth):
            specs.append((f"head.{task}_tower.{i}", (hc, hc, 3, 3), "head"))
    if cfg.head_kind == "anchor":
        K = cfg.num_anchors
        specs.append(("head.cls_out", (K, hc, 1, 1), "head"))
        specs.append(("head.reg_out", (4 * K, hc, 1, 1), "head"))
    else:
        specs.append(("head.cls_out", (1, hc, 1, 1), "head"))
        if cfg.quality_mode != "none":
            specs.append(("head.quality_out", (1, hc, 1, 1), "head"))
        specs.append(("head.reg_out", (4, hc, 1, 1), "head"))
    return specs


def init_model(cfg: ModelConfig, seed: int = 0) -> SiamModel:
    """Deterministic init: head layers ~ N(0, init_std), zero biases.

    Backbone and adjust layers play the part of pretrained weights; with
    ``backbone_init="he"`` they get He-normal weights instead of the plain
    Gaussian so a from-scratch trunk is trainable.
    """
    cfg.validate()
    N = score_size(cfg)
    if N < 3:
        raise ValueError(f"config yields a {N}x{N} score map; need N >= 3")
    rng = np.random.default_rng(seed)
    dtype = ag.default_dtype()
    params: Dict[str, Tensor] = {}
    for name, shape, group in _layer_specs(cfg):
        if group == "trunk" and cfg.backbone_init == "he":
            std = math.sqrt(2.0 / (shape[1] * shape[2] * shape[3]))
        else:
            std = cfg.init_std
        w = rng.normal(0.0, std, size=shape)
        params[name + ".weight"] = Tensor(w, requires_grad=True, name=name + ".weight", dtype=dtype)
        params[name + ".bias"] = Tensor(np.zeros(shape[0]), requires_grad=True, name=name + ".bias", dtype=dtype)
    return SiamModel(cfg, params)


def config_dict(cfg: ModelConfig) -> dict:
    return asdict(cfg)
