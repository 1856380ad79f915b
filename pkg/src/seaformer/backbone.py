"""Backbone variants: shared stem, context branch, fusion and task heads.

Variants T/S/B/L are described by a per-stage layer table (regular conv,
MobileNet block, or a run of attention layers) at scales H/2 .. H/64. The
segmentation model fuses the last two context-stage features into the shared
1/8-scale stream and finishes with a two-conv light head; the classification
model pools the final stage into a linear layer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .attention import (SeaLayerParams, build_sea_layer_params, default_config,
                        seaformer_layer)
from .nn import (ConvBn, LinearParams, MobileNetBlockParams, MobileNetBlockSpec,
                 conv_bn, global_avg_pool, init_conv_bn, init_linear,
                 init_mobilenet_block, linear, mobilenet_block, named_tensors)
from .tensor import ConfigurationError, DimensionError, MacCounter, Tensor

FUSION_MODES = ("sigmoid_mul", "sigmoid_add", "mul", "add")


@dataclass(frozen=True)
class ConvEntry:
    kernel: int
    out_channels: int
    stride: int


@dataclass(frozen=True)
class MbEntry:
    kernel: int
    expansion: int
    out_channels: int
    stride: int


@dataclass(frozen=True)
class SeaEntry:
    n_layers: int
    heads: int


@dataclass
class VariantSpec:
    name: str
    stages: list  # six lists of entries
    fusion_dims: tuple

    def stage_channels(self):
        chans, current = [], None
        for stage in self.stages:
            for entry in stage:
                if isinstance(entry, (ConvEntry, MbEntry)):
                    current = entry.out_channels
            chans.append(current)
        return chans

    def to_json(self):
        def encode(entry):
            if isinstance(entry, ConvEntry):
                return ["Conv", entry.kernel, entry.out_channels, entry.stride]
            if isinstance(entry, MbEntry):
                return ["MB", entry.kernel, entry.expansion, entry.out_channels, entry.stride]
            return ["Sea", entry.n_layers, entry.heads]

        return json.dumps({"name": self.name,
                           "stages": [[encode(e) for e in st] for st in self.stages],
                           "fusion_dims": list(self.fusion_dims)}, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)

        def decode(item):
            tag = item[0]
            if tag == "Conv":
                return ConvEntry(*item[1:])
            if tag == "MB":
                return MbEntry(*item[1:])
            if tag == "Sea":
                return SeaEntry(*item[1:])
            raise ConfigurationError(f"unknown stage entry tag {tag!r}")

        return cls(name=raw["name"],
                   stages=[[decode(e) for e in st] for st in raw["stages"]],
                   fusion_dims=tuple(raw["fusion_dims"]))


def _spec(name, stages, fusion_dims):
    return VariantSpec(name=name, stages=stages, fusion_dims=fusion_dims)


VARIANTS = {
    "T": _spec("T", [
        [ConvEntry(3, 16, 2), MbEntry(3, 1, 16, 1)],
        [MbEntry(3, 4, 16, 2), MbEntry(3, 3, 16, 1)],
        [MbEntry(5, 3, 32, 2), MbEntry(5, 3, 32, 1)],
        [MbEntry(3, 3, 64, 2), MbEntry(3, 3, 64, 1)],
        [MbEntry(5, 3, 128, 2), SeaEntry(2, 4)],
        [MbEntry(3, 6, 160, 2), SeaEntry(2, 4)],
    ], (88, 104)),
    "S": _spec("S", [
        [ConvEntry(3, 16, 2), MbEntry(3, 1, 16, 1)],
        [MbEntry(3, 4, 24, 2), MbEntry(3, 3, 24, 1)],
        [MbEntry(5, 3, 48, 2), MbEntry(5, 3, 48, 1)],
        [MbEntry(3, 3, 96, 2), MbEntry(3, 3, 96, 1)],
        [MbEntry(5, 4, 160, 2), SeaEntry(3, 6)],
        [MbEntry(3, 6, 192, 2), SeaEntry(3, 6)],
    ], (104, 120)),
    "B": _spec("B", [
        [ConvEntry(3, 16, 2), MbEntry(3, 1, 16, 1)],
        [MbEntry(3, 4, 32, 2), MbEntry(3, 3, 32, 1)],
        [MbEntry(5, 3, 64, 2), MbEntry(5, 3, 64, 1)],
        [MbEntry(3, 3, 128, 2), MbEntry(3, 3, 128, 1)],
        [MbEntry(5, 4, 192, 2), SeaEntry(4, 8)],
        [MbEntry(3, 6, 256, 2), SeaEntry(4, 8)],
    ], (128, 160)),
    "L": _spec("L", [
        [ConvEntry(3, 32, 2), MbEntry(3, 3, 32, 1)],
        [MbEntry(3, 4, 64, 2), MbEntry(3, 4, 64, 1)],
        [MbEntry(5, 4, 128, 2), MbEntry(5, 4, 128, 1)],
        [MbEntry(3, 4, 192, 2), MbEntry(3, 4, 192, 1), SeaEntry(3, 8)],
        [MbEntry(5, 4, 256, 2), SeaEntry(3, 8)],
        [MbEntry(3, 6, 320, 2), SeaEntry(3, 8)],
    ], (168, 200)),
}


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class StageParams:
    blocks: list = field(default_factory=list)  # ConvBn | MobileNetBlockParams | SeaLayerParams


@dataclass
class FusionParams:
    spatial: ConvBn
    context: ConvBn
    mode: str = "sigmoid_mul"

    def __post_init__(self):
        if self.mode not in FUSION_MODES:
            raise ConfigurationError(f"fusion mode must be one of {FUSION_MODES}")


@dataclass
class HeadParams:
    conv1: ConvBn  # hidden width = last fusion dim
    conv2: ConvBn  # to num_classes


@dataclass
class SegModel:
    spec: VariantSpec
    num_classes: int
    stages: list
    fusion1: FusionParams
    fusion2: FusionParams
    head: HeadParams


@dataclass
class ClsModel:
    spec: VariantSpec
    num_classes: int
    stages: list
    classifier: LinearParams


def _build_stage(rng, stage_entries, in_channels, dtype, sea_overrides=None):
    blocks, current = [], in_channels
    for entry in stage_entries:
        if isinstance(entry, ConvEntry):
            blocks.append(init_conv_bn(rng, current, entry.out_channels, entry.kernel,
                                       stride=entry.stride, dtype=dtype))
            current = entry.out_channels
        elif isinstance(entry, MbEntry):
            spec = MobileNetBlockSpec(entry.kernel, entry.expansion,
                                      entry.out_channels, entry.stride)
            blocks.append(init_mobilenet_block(rng, current, spec, dtype=dtype))
            current = entry.out_channels
        elif isinstance(entry, SeaEntry):
            cfg = default_config(current, entry.heads, **(sea_overrides or {}))
            for _ in range(entry.n_layers):
                blocks.append(build_sea_layer_params(cfg, rng, dtype=dtype))
        else:
            raise ConfigurationError(f"unknown stage entry {entry!r}")
    return StageParams(blocks), current


def build_variant(name, num_classes, task="seg", seed=42, dtype=np.float64,
                  sea_overrides=None, fusion_mode="sigmoid_mul", spec=None):
    """Deterministically initialize one variant for segmentation or classification."""
    if spec is None:
        if name not in VARIANTS:
            raise ConfigurationError(
                f"unknown variant {name!r}; valid names: {sorted(VARIANTS)}")
        spec = VARIANTS[name]
    if task not in ("seg", "cls"):
        raise ConfigurationError(f"task must be 'seg' or 'cls', got {task!r}")
    rng = np.random.default_rng(seed)
    stages, current = [], 3
    for entries in spec.stages:
        stage, current = _build_stage(rng, entries, current, dtype, sea_overrides)
        stages.append(stage)
    chans = spec.stage_channels()
    if task == "cls":
        classifier = init_linear(rng, chans[5], num_classes, dtype=dtype)
        return ClsModel(spec, num_classes, stages, classifier)
    m1, m2 = spec.fusion_dims
    fusion1 = FusionParams(init_conv_bn(rng, chans[2], m1, 1, dtype=dtype),
                           init_conv_bn(rng, chans[4], m1, 1, dtype=dtype), fusion_mode)
    fusion2 = FusionParams(init_conv_bn(rng, m1, m2, 1, dtype=dtype),
                           init_conv_bn(rng, chans[5], m2, 1, dtype=dtype), fusion_mode)
    head = HeadParams(init_conv_bn(rng, m2, m2, 1, dtype=dtype),
                      init_conv_bn(rng, m2, num_classes, 1, dtype=dtype))
    return SegModel(spec, num_classes, stages, fusion1, fusion2, head)


# ---------------------------------------------------------------------------
# forward passes


def run_stage(x, stage):
    for block in stage.blocks:
        if isinstance(block, ConvBn):
            x = conv_bn(x, block, T.relu6)
        elif isinstance(block, MobileNetBlockParams):
            x = mobilenet_block(x, block)
        elif isinstance(block, SeaLayerParams):
            x = seaformer_layer(x, block)
        else:
            raise ConfigurationError(f"unknown block {type(block).__name__}")
    return x


def stem_forward(x, model):
    """Stages at scales H/2..H/8; the output is the shared feature map."""
    if x.rank != 3 or x.shape[0] != 3:
        raise DimensionError(f"expected a (3, H, W) image, got {x.shape}")
    if x.shape[1] % 8 or x.shape[2] % 8:
        raise DimensionError(f"input dims {x.shape[1]}x{x.shape[2]} must divide by 8")
    for stage in model.stages[:3]:
        x = run_stage(x, stage)
    return x


def context_branch_forward(x_s, model):
    """Stages at scales H/16, H/32, H/64; returns all three stage outputs."""
    c4 = run_stage(x_s, model.stages[3])
    c5 = run_stage(c4, model.stages[4])
    c6 = run_stage(c5, model.stages[5])
    return c4, c5, c6


def fusion_block(spatial_f, context_f, params):
    """Inject low-resolution semantics into the high-resolution stream."""
    local = conv_bn(spatial_f, params.spatial)
    semantics = conv_bn(context_f, params.context)
    if params.mode in ("sigmoid_mul", "sigmoid_add"):
        semantics = T.sigmoid(semantics)
    semantics = nn.bilinear_resize(semantics, local.shape[1], local.shape[2])
    if params.mode in ("sigmoid_mul", "mul"):
        return T.mul(local, semantics)
    return T.add(local, semantics)


def _check_seg_input(x):
    if x.rank != 3 or x.shape[0] != 3:
        raise DimensionError(f"expected a (3, H, W) image, got {x.shape}")
    if x.shape[1] % 64 or x.shape[2] % 64:
        raise DimensionError(f"input dims {x.shape[1]}x{x.shape[2]} must divide by 64")


def seg_features(model, x):
    """Forward pass keeping every distillation-relevant intermediate."""
    _check_seg_input(x)
    x_s = stem_forward(x, model)
    c4, c5, c6 = context_branch_forward(x_s, model)
    fused = fusion_block(x_s, c5, model.fusion1)
    fused = fusion_block(fused, c6, model.fusion2)
    hidden = conv_bn(fused, model.head.conv1, T.relu6)
    logits = conv_bn(hidden, model.head.conv2)
    return {"x_s": x_s, "c4": c4, "c5": c5, "c6": c6, "fused": fused, "logits": logits}


def head_forward(model, fused):
    hidden = conv_bn(fused, model.head.conv1, T.relu6)
    return conv_bn(hidden, model.head.conv2)


def seg_forward(model, x):
    """Class logits at 1/8 scale."""
    return seg_features(model, x)["logits"]


def cls_forward(model, x):
    """Global-pooled final stage through a linear classifier."""
    if x.rank != 3 or x.shape[0] != 3:
        raise DimensionError(f"expected a (3, H, W) image, got {x.shape}")
    if x.shape[1] % 8 or x.shape[2] % 8:
        raise DimensionError(f"input dims {x.shape[1]}x{x.shape[2]} must divide by 8")
    h = x
    for stage in model.stages:
        h = run_stage(h, stage)
    return linear(global_avg_pool(h), model.classifier)


# ---------------------------------------------------------------------------
# parameter / MAC breakdowns


def parameter_breakdown(model):
    parts = {f"stage{i + 1}": nn.parameter_count(stage)
             for i, stage in enumerate(model.stages)}
    if isinstance(model, SegModel):
        parts["fusion"] = nn.parameter_count(model.fusion1) + nn.parameter_count(model.fusion2)
        parts["head"] = nn.parameter_count(model.head)
    else:
        parts["classifier"] = nn.parameter_count(model.classifier)
    parts["total"] = sum(parts.values())
    return parts


def mac_breakdown(model, size):
    """Exact per-stage MAC counts at ``size`` x ``size`` input (no arithmetic runs)."""
    parts = {}
    x = Tensor._stub((3, size, size), np.float64)

    def counted(label, fn):
        with MacCounter() as c:
            out = fn()
        parts[label] = c.macs
        return out

    for i in range(3):
        x = counted(f"stage{i + 1}", lambda s=model.stages[i], xx=x: run_stage(xx, s))
    x_s = x
    feats = [x_s]
    for i in range(3, 6):
        feats.append(counted(f"stage{i + 1}",
                             lambda s=model.stages[i], xx=feats[-1]: run_stage(xx, s)))
    if isinstance(model, SegModel):
        fused = counted("fusion", lambda: fusion_block(
            fusion_block(x_s, feats[2], model.fusion1), feats[3], model.fusion2))
        counted("head", lambda: head_forward(model, fused))
    else:
        counted("classifier", lambda: linear(global_avg_pool(feats[3]), model.classifier))
    parts["total"] = sum(parts.values())
    return parts


def model_named_tensors(model, trainable_only=True):
    return dict(named_tensors(model, trainable_only=trainable_only))
