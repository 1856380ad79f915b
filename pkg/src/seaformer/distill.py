"""Multi-resolution distillation: upsample/alignment modules and the four-part loss.

A full-resolution teacher guides a half-resolution student. Student stage
features are upsampled by a lightweight gated module before alignment, and
the loss is the unweighted sum of the student's cross-entropy, a cross-model
cross-entropy through the teacher's head, a negative-cosine feature term,
and a KL term between output logits.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .backbone import head_forward, seg_features
from .nn import (ConvBn, MobileNetBlockParams, MobileNetBlockSpec, avg_pool2d,
                 bilinear_resize, conv_bn, init_conv_bn, init_mobilenet_block,
                 mobilenet_block)
from .tensor import ConfigurationError, DimensionError, Tensor

IGNORE_INDEX = 255
UPSAMPLE_VARIANTS = ("mobilenet", "bilinear", "conv")
LOSS_NAMES = ("cls", "cross", "feat", "out")
ALIGN_STAGES = ("c4", "c5", "c6")
_ALIGN_GATES = {"c4": "x_s", "c5": "c4", "c6": "c5"}


# ---------------------------------------------------------------------------
# upsample module


@dataclass
class UpsampleModuleParams:
    """Gated 2x upsampler: sigmoid gate from the high-res feature, MobileNet
    main path with bilinear doubling, MobileNet refinement after gating."""

    gate: ConvBn
    main: MobileNetBlockParams
    refine: MobileNetBlockParams


@dataclass
class ConvUpsampleParams:
    gate: ConvBn
    main: ConvBn
    refine: ConvBn


def build_upsample_params(rng, c_low, c_gate, variant="mobilenet", dtype=np.float64):
    if variant == "bilinear":
        return None
    gate = init_conv_bn(rng, c_gate, c_low, 1, dtype=dtype)
    if variant == "mobilenet":
        spec = MobileNetBlockSpec(kernel=5, expansion=4, out_channels=c_low, stride=1)
        return UpsampleModuleParams(gate=gate,
                                    main=init_mobilenet_block(rng, c_low, spec, dtype=dtype),
                                    refine=init_mobilenet_block(rng, c_low, spec, dtype=dtype))
    if variant == "conv":
        return ConvUpsampleParams(gate=gate,
                                  main=init_conv_bn(rng, c_low, c_low, 3, dtype=dtype),
                                  refine=init_conv_bn(rng, c_low, c_low, 3, dtype=dtype))
    raise ConfigurationError(f"upsample variant must be one of {UPSAMPLE_VARIANTS}")


def upsample_module(low, gate, params):
    """MobileNet-based gated 2x upsampling; output matches the gate's dims."""
    c, h, w = low.shape
    if gate.shape[1] != 2 * h or gate.shape[2] != 2 * w:
        raise ConfigurationError(
            f"gate dims {gate.shape[1:]} must be exactly double the low-res dims {(h, w)}")
    weights = T.sigmoid(conv_bn(gate, params.gate))
    main = bilinear_resize(mobilenet_block(low, params.main), 2 * h, 2 * w)
    return mobilenet_block(T.mul(weights, main), params.refine)


def upsample_feature(low, gate, params, variant="mobilenet"):
    """Selector over the upsampling strategies (ablation harness)."""
    c, h, w = low.shape
    if variant == "bilinear":
        return bilinear_resize(low, 2 * h, 2 * w)
    if variant == "mobilenet":
        return upsample_module(low, gate, params)
    if variant == "conv":
        if gate.shape[1] != 2 * h or gate.shape[2] != 2 * w:
            raise ConfigurationError(
                f"gate dims {gate.shape[1:]} must be exactly double the low-res dims {(h, w)}")
        weights = T.sigmoid(conv_bn(gate, params.gate))
        main = bilinear_resize(T.relu6(conv_bn(low, params.main)), 2 * h, 2 * w)
        return T.relu6(conv_bn(T.mul(weights, main), params.refine))
    raise ConfigurationError(f"upsample variant must be one of {UPSAMPLE_VARIANTS}")


# ---------------------------------------------------------------------------
# losses


def feature_similarity_loss(f_student, f_teacher):
    """Mean over positions of the negative cosine between channel vectors.

    Positions where either vector has zero norm contribute 0.
    """
    if f_student.shape != f_teacher.shape:
        raise DimensionError(
            f"feature shapes differ: {f_student.shape} vs {f_teacher.shape}")
    num = T.reduce_sum(T.mul(f_student, f_teacher), axis=0)
    n_s = T.sqrt(T.reduce_sum(T.mul(f_student, f_student), axis=0))
    n_t = T.sqrt(T.reduce_sum(T.mul(f_teacher, f_teacher), axis=0))
    den = T.mul(n_s, n_t)
    valid = Tensor._wrap((den.data > 0).astype(den.dtype))
    safe_den = T.add(T.mul(den, valid), Tensor._wrap(1.0 - valid.data))
    cos = T.mul(T.div(num, safe_den), valid)
    return T.neg(T.reduce_mean(cos))


def output_similarity_loss(student_logits, teacher_logits, temperature=1.0):
    """Mean positionwise KL(teacher || student) over the class axis."""
    if student_logits.shape != teacher_logits.shape:
        raise DimensionError(
            f"logit shapes differ: {student_logits.shape} vs {teacher_logits.shape}")
    if temperature != 1.0:
        student_logits = T.mul(student_logits, 1.0 / temperature)
        teacher_logits = T.mul(teacher_logits, 1.0 / temperature)
    log_t = T.log_softmax(teacher_logits, axis=0)
    log_s = T.log_softmax(student_logits, axis=0)
    p_t = T.softmax(teacher_logits, axis=0)
    kl = T.reduce_sum(T.mul(p_t, T.sub(log_t, log_s)), axis=0)
    return T.reduce_mean(kl)


def cross_entropy_loss(logits, labels, ignore_index=IGNORE_INDEX):
    """Mean -log p(true class) over non-ignored positions of an (K, H, W) map."""
    labels = np.asarray(labels)
    if logits.rank != 3 or labels.shape != logits.shape[1:]:
        raise DimensionError(
            f"labels shape {labels.shape} does not match logits {logits.shape}")
    k = logits.shape[0]
    valid = labels != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        warnings.warn("cross_entropy_loss: every position is ignored; loss defined as 0")
        return T.zeros((1,), logits.dtype)
    if labels[valid].min() < 0 or labels[valid].max() >= k:
        raise ValueError(f"labels must lie in [0, {k}) or equal {ignore_index}")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    hh, ww = np.nonzero(valid)
    onehot[labels[valid].astype(np.intp), hh, ww] = 1.0
    log_p = T.log_softmax(logits, axis=0)
    picked = T.reduce_sum(T.mul(log_p, Tensor._wrap(onehot)))
    return T.mul(picked, -1.0 / n_valid)


# ---------------------------------------------------------------------------
# full distillation step


@dataclass
class DistillLossReport:
    l_cls: float
    l_cross: float
    l_feat: float
    l_out: float
    total: float

    def to_json_dict(self):
        return {"l_cls": self.l_cls, "l_cross": self.l_cross, "l_feat": self.l_feat,
                "l_out": self.l_out, "total": self.total}


def build_aligners(spec, seed=0, variant="mobilenet", dtype=np.float64):
    """One upsample module per aligned context stage, gated by the previous stage."""
    rng = np.random.default_rng(seed)
    chans = spec.stage_channels()
    by_stage = {"x_s": chans[2], "c4": chans[3], "c5": chans[4], "c6": chans[5]}
    return {stage: build_upsample_params(rng, by_stage[stage], by_stage[_ALIGN_GATES[stage]],
                                         variant=variant, dtype=dtype)
            for stage in ALIGN_STAGES}


def distill_losses(teacher, student, x_full, labels, aligners=None,
                   upsample_variant="mobilenet", halve_student=True,
                   losses=LOSS_NAMES, temperature=1.0, aligner_seed=0):
    """The four loss terms as tensors (differentiable through an active tape)."""
    unknown = set(losses) - set(LOSS_NAMES)
    if unknown:
        raise ConfigurationError(f"unknown loss toggles {sorted(unknown)}")
    labels = np.asarray(labels)
    if halve_student:
        if x_full.shape[1] % 128 or x_full.shape[2] % 128:
            raise DimensionError(
                f"input dims {x_full.shape[1:]} must divide by 128 for a halved student")
        x_student = avg_pool2d(x_full, 2, 2)
        if aligners is None:
            aligners = build_aligners(student.spec, seed=aligner_seed,
                                      variant=upsample_variant, dtype=x_full.dtype)
    else:
        x_student = x_full

    t_feats = seg_features(teacher, x_full)
    s_feats = seg_features(student, x_student)

    zero = T.zeros((1,), x_full.dtype)
    terms = {"cls": zero, "cross": zero, "feat": zero, "out": zero}

    if "cls" in losses:
        own_labels = labels[::2, ::2] if halve_student else labels
        terms["cls"] = cross_entropy_loss(s_feats["logits"], own_labels)

    if "feat" in losses:
        parts = []
        for stage in ALIGN_STAGES:
            feat = s_feats[stage]
            if halve_student:
                gate = s_feats[_ALIGN_GATES[stage]]
                feat = upsample_feature(feat, gate, aligners[stage], upsample_variant)
            parts.append(feature_similarity_loss(feat, t_feats[stage]))
        acc = parts[0]
        for p in parts[1:]:
            acc = T.add(acc, p)
        terms["feat"] = T.mul(acc, 1.0 / len(parts))

    if "out" in losses:
        s_logits = s_feats["logits"]
        if halve_student:
            s_logits = bilinear_resize(s_logits, 2 * s_logits.shape[1], 2 * s_logits.shape[2])
        terms["out"] = output_similarity_loss(s_logits, t_feats["logits"], temperature)

    if "cross" in losses:
        fused = s_feats["fused"]
        if halve_student:
            fused = bilinear_resize(fused, 2 * fused.shape[1], 2 * fused.shape[2])
        terms["cross"] = cross_entropy_loss(head_forward(teacher, fused), labels)

    total = T.add(T.add(T.add(terms["cls"], terms["cross"]), terms["feat"]), terms["out"])
    return terms, total


def distill_step(teacher, student, x_full, labels, **kwargs):
    """Run one distillation evaluation; returns the four-part loss report."""
    terms, _ = distill_losses(teacher, student, x_full, labels, **kwargs)
    l_cls = terms["cls"].item()
    l_cross = terms["cross"].item()
    l_feat = terms["feat"].item()
    l_out = terms["out"].item()
    return DistillLossReport(l_cls=l_cls, l_cross=l_cross, l_feat=l_feat, l_out=l_out,
                             total=l_cls + l_cross + l_feat + l_out)
