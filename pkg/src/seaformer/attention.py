"""Squeeze-enhanced axial attention, its baselines, and the transformer layer.

The semantic branch squeezes the feature map onto its two axes (by mean/max
pooling or a learned, softmax-normalized mask), runs positional-aware
attention along each squeezed axis, and expands the axial results back over
the map (broadcast, or weighted by a learned restoration mask). A
convolution-based detail-enhancement kernel gates the projected semantic
output to recover local detail. Baseline attentions (global / window / axial)
are provided for complexity comparisons.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from . import tensor as T
from .nn import ConvBn, Conv2dParams, conv2d, conv_bn, init_bn, init_conv, init_conv_bn
from .tensor import ConfigurationError, DimensionError, MacCounter, Tensor

SQUEEZE_MODES = ("mean_pool", "max_pool", "adaptive")
ENHANCE_MODES = ("mul", "add", "off")
ENHANCE_INPUTS = ("concat_qkv", "conv_x", "upconv_x")
HORIZONTAL, VERTICAL = "horizontal", "vertical"


@dataclass
class AttentionConfig:
    """Channel/head/positional geometry of one attention block.

    ``c`` is the block's channel count, ``c_qk``/``c_v`` the query-key and
    value widths (``c_qk`` is exactly half of ``c_v`` under variant
    defaults), ``l`` the positional table length.
    """

    c: int
    c_qk: int
    c_v: int
    heads: int
    l: int = 16
    squeeze_mode: str = "adaptive"
    enhance_mode: str = "mul"
    enhance_input: str = "concat_qkv"

    def __post_init__(self):
        if min(self.c, self.c_qk, self.c_v, self.heads) < 1:
            raise ConfigurationError("channel and head counts must be positive")
        if self.c_qk % self.heads or self.c_v % self.heads:
            raise ConfigurationError(
                f"c_qk={self.c_qk} and c_v={self.c_v} must divide heads={self.heads}")
        if self.l < 2:
            raise ConfigurationError("positional table length must be >= 2")
        if self.squeeze_mode not in SQUEEZE_MODES:
            raise ConfigurationError(f"squeeze_mode must be one of {SQUEEZE_MODES}")
        if self.enhance_mode not in ENHANCE_MODES:
            raise ConfigurationError(f"enhance_mode must be one of {ENHANCE_MODES}")
        if self.enhance_input not in ENHANCE_INPUTS:
            raise ConfigurationError(f"enhance_input must be one of {ENHANCE_INPUTS}")

    @property
    def enhance_source_channels(self):
        if self.enhance_input == "conv_x":
            return self.c
        return 2 * self.c_qk + self.c_v

    def to_json(self):
        return json.dumps({
            "c": self.c, "c_qk": self.c_qk, "c_v": self.c_v, "heads": self.heads,
            "l": self.l, "squeeze_mode": self.squeeze_mode,
            "enhance_mode": self.enhance_mode, "enhance_input": self.enhance_input,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def default_config(channels, heads, **overrides):
    """Variant-default widths: c_qk = heads*round(1.25*c/heads), c_v = 2*c_qk.

    Keeps c_qk exactly half of c_v while staying divisible by any head count.
    """
    d_qk = max(1, round(1.25 * channels / heads))
    c_qk = heads * d_qk
    return AttentionConfig(c=channels, c_qk=c_qk, c_v=2 * c_qk, heads=heads, **overrides)


# ---------------------------------------------------------------------------
# parameter records


@dataclass
class SqueezeMask:
    horizontal: ConvBn  # logits whose softmax over W weighs each row's squeeze
    vertical: ConvBn    # softmax over H per column


@dataclass
class ExpandMask:
    horizontal: ConvBn  # raw multiplicative restoration weights, no normalization
    vertical: ConvBn


@dataclass
class PositionEmbedding:
    """Learnable (l, c_qk) tables, linearly resampled to the live axis length."""

    b_q_h: Tensor
    b_k_h: Tensor
    b_q_v: Tensor
    b_k_v: Tensor

    def tables(self, axis):
        if axis == HORIZONTAL:
            return self.b_q_h, self.b_k_h
        return self.b_q_v, self.b_k_v


@dataclass
class EnhanceParams:
    source_proj: Conv2dParams | None  # conv_x / upconv_x only; concat shares q,k,v
    depthwise: ConvBn
    pointwise: Conv2dParams
    pointwise_bn: nn.BatchNormParams


@dataclass
class SeaAttentionParams:
    cfg: AttentionConfig
    to_q: Conv2dParams
    to_k: Conv2dParams
    to_v: Conv2dParams
    pos: PositionEmbedding | None
    out_proj: Conv2dParams
    squeeze_mask: SqueezeMask | None = None
    expand_mask: ExpandMask | None = None
    enhance: EnhanceParams | None = None


@dataclass
class FeedForwardParams:
    expand: ConvBn
    depthwise: ConvBn
    project: ConvBn


@dataclass
class SeaLayerParams:
    attn: SeaAttentionParams
    ffn: FeedForwardParams


def build_position_embedding(cfg, rng, dtype=np.float64):
    lim = math.sqrt(6.0 / cfg.c_qk)

    def table():
        return Tensor._wrap(rng.uniform(-lim, lim, size=(cfg.l, cfg.c_qk)).astype(dtype))

    return PositionEmbedding(table(), table(), table(), table())


def build_enhance_params(cfg, rng, dtype=np.float64):
    src = cfg.enhance_source_channels
    source_proj = None
    if cfg.enhance_input in ("conv_x", "upconv_x"):
        source_proj = init_conv(rng, cfg.c, src, 1, dtype=dtype)
    return EnhanceParams(
        source_proj=source_proj,
        depthwise=init_conv_bn(rng, src, src, 3, groups=src, dtype=dtype),
        pointwise=init_conv(rng, src, cfg.c, 1, dtype=dtype),
        pointwise_bn=init_bn(cfg.c, dtype))


def build_sea_params(cfg, rng, dtype=np.float64):
    squeeze_mask = expand_mask = None
    if cfg.squeeze_mode == "adaptive":
        squeeze_mask = SqueezeMask(init_conv_bn(rng, cfg.c, 1, 1, dtype=dtype),
                                   init_conv_bn(rng, cfg.c, 1, 1, dtype=dtype))
        expand_mask = ExpandMask(init_conv_bn(rng, cfg.c, 1, 1, dtype=dtype),
                                 init_conv_bn(rng, cfg.c, 1, 1, dtype=dtype))
    enhance = None
    if cfg.enhance_mode != "off":
        enhance = build_enhance_params(cfg, rng, dtype)
    return SeaAttentionParams(
        cfg=cfg,
        to_q=init_conv(rng, cfg.c, cfg.c_qk, 1, dtype=dtype),
        to_k=init_conv(rng, cfg.c, cfg.c_qk, 1, dtype=dtype),
        to_v=init_conv(rng, cfg.c, cfg.c_v, 1, dtype=dtype),
        pos=build_position_embedding(cfg, rng, dtype),
        out_proj=init_conv(rng, cfg.c_v, cfg.c, 1, dtype=dtype),
        squeeze_mask=squeeze_mask,
        expand_mask=expand_mask,
        enhance=enhance)


FFN_EXPANSION = 2


def build_sea_layer_params(cfg, rng, dtype=np.float64):
    hidden = FFN_EXPANSION * cfg.c
    ffn = FeedForwardParams(
        expand=init_conv_bn(rng, cfg.c, hidden, 1, dtype=dtype),
        depthwise=init_conv_bn(rng, hidden, hidden, 3, groups=hidden, dtype=dtype),
        project=init_conv_bn(rng, hidden, cfg.c, 1, dtype=dtype))
    return SeaLayerParams(attn=build_sea_params(cfg, rng, dtype), ffn=ffn)


# ---------------------------------------------------------------------------
# squeeze / expand


def _squeeze_axis_index(axis):
    if axis == HORIZONTAL:
        return 2  # reduce over W, keep H
    if axis == VERTICAL:
        return 1
    raise ValueError(f"axis must be {HORIZONTAL!r} or {VERTICAL!r}, got {axis!r}")


def squeeze_mask_weights(x, mask, axis):
    """Softmax-normalized squeeze weights of shape (1, H, W) for one axis."""
    head = mask.horizontal if axis == HORIZONTAL else mask.vertical
    logits = conv_bn(x, head)
    return T.softmax(logits, axis=_squeeze_axis_index(axis))


def squeeze_axis(x, axis, mode, mask=None, _weights=None):
    """Collapse a (C, H, W) map onto one axis -> (axis_len, C) sequence.

    ``mean_pool``/``max_pool`` reduce directly; ``adaptive`` weighs positions
    with a learned mask normalized to sum to one along the squeezed axis.
    """
    reduce_over = _squeeze_axis_index(axis)
    if mode == "mean_pool":
        pooled = T.reduce_mean(x, axis=reduce_over)
    elif mode == "max_pool":
        pooled = T.reduce_max(x, axis=reduce_over)
    elif mode == "adaptive":
        weights = _weights
        if weights is None:
            if mask is None:
                raise ConfigurationError("adaptive squeeze needs a SqueezeMask")
            weights = squeeze_mask_weights(x, mask, axis)
        pooled = T.reduce_sum(T.mul(x, weights), axis=reduce_over)
    else:
        raise ConfigurationError(f"unknown squeeze mode {mode!r}")
    return T.permute(pooled, (1, 0))  # (axis_len, C)


def expand_mask_weights(x, mask, axis):
    head = mask.horizontal if axis == HORIZONTAL else mask.vertical
    return conv_bn(x, head)  # raw weights, applied multiplicatively


def expand_axis(y_ax, target, axis, mode="broadcast", mask=None, x=None, _weights=None):
    """Restore an (axis_len, C) sequence to a (C, H, W) map."""
    h, w = target
    axis_len = h if axis == HORIZONTAL else w
    if y_ax.shape[0] != axis_len:
        raise DimensionError(
            f"axial length {y_ax.shape[0]} does not match target {target} along {axis}")
    c = y_ax.shape[1]
    planes = T.permute(y_ax, (1, 0))  # (C, axis_len)
    if axis == HORIZONTAL:
        spread = T.broadcast_to(T.reshape(planes, (c, h, 1)), (c, h, w))
    else:
        spread = T.broadcast_to(T.reshape(planes, (c, 1, w)), (c, h, w))
    if mode == "broadcast":
        return spread
    if mode == "adaptive":
        weights = _weights
        if weights is None:
            if mask is None or x is None:
                raise ConfigurationError("adaptive expand needs an ExpandMask and the input map")
            weights = expand_mask_weights(x, mask, axis)
        return T.mul(spread, weights)
    raise ConfigurationError(f"unknown expand mode {mode!r}")


# ---------------------------------------------------------------------------
# axial attention along a squeezed sequence


def _split_heads(seq, heads):
    n, c = seq.shape
    return T.permute(T.reshape(seq, (n, heads, c // heads)), (1, 0, 2))


def _merge_heads(seq_h):
    heads, n, d = seq_h.shape
    return T.reshape(T.permute(seq_h, (1, 0, 2)), (n, heads * d))


def axial_attend(q_ax, k_ax, v_ax, heads, pos_q=None, pos_k=None, return_weights=False):
    """Multi-head attention over one axial sequence.

    Inputs are (n, c_qk)/(n, c_v) sequences; optional positional tables are
    linearly resampled to length n and added to q/k before the logits.
    """
    n = q_ax.shape[0]
    if k_ax.shape[0] != n or v_ax.shape[0] != n:
        raise DimensionError(
            f"sequence lengths differ: q={q_ax.shape}, k={k_ax.shape}, v={v_ax.shape}")
    c_qk, c_v = q_ax.shape[1], v_ax.shape[1]
    if c_qk % heads or c_v % heads:
        raise DimensionError(f"c_qk={c_qk}, c_v={c_v} must divide heads={heads}")
    if pos_q is not None:
        q_ax = T.add(q_ax, T.interp_linear(pos_q, n))
    if pos_k is not None:
        k_ax = T.add(k_ax, T.interp_linear(pos_k, n))
    qh = _split_heads(q_ax, heads)
    kh = _split_heads(k_ax, heads)
    vh = _split_heads(v_ax, heads)
    scale = 1.0 / math.sqrt(c_qk // heads)
    logits = T.mul(T.matmul(qh, T.permute(kh, (0, 2, 1))), scale)
    weights = T.softmax(logits, axis=2)
    out = _merge_heads(T.matmul(weights, vh))
    if return_weights:
        return out, weights
    return out


# ---------------------------------------------------------------------------
# detail enhancement


def detail_enhancement(x, q, k, v, cfg, params):
    """Convolutional gate weights in (0, 1), shape (C, H, W)."""
    if cfg.enhance_input == "concat_qkv":
        source = T.concat([q, k, v], axis=0)
    else:
        source = conv2d(x, params.source_proj)
    h = conv_bn(source, params.depthwise)
    h = conv2d(h, params.pointwise)
    h = T.relu6(h)
    h = nn.batchnorm_infer(h, params.pointwise_bn)
    return T.sigmoid(h)


# ---------------------------------------------------------------------------
# the assembled block


def _sea_mechanism(x, q, k, v, params):
    """Everything after the q/k/v projections: squeeze, attend, expand, gate."""
    cfg = params.cfg
    _, h, w = x.shape
    adaptive = cfg.squeeze_mode == "adaptive"
    expand_mode = "adaptive" if adaptive else "broadcast"

    axial = {}
    for axis in (HORIZONTAL, VERTICAL):
        sq_w = (squeeze_mask_weights(x, params.squeeze_mask, axis) if adaptive else None)
        q_ax = squeeze_axis(q, axis, cfg.squeeze_mode, _weights=sq_w)
        k_ax = squeeze_axis(k, axis, cfg.squeeze_mode, _weights=sq_w)
        v_ax = squeeze_axis(v, axis, cfg.squeeze_mode, _weights=sq_w)
        pos_q, pos_k = params.pos.tables(axis) if params.pos is not None else (None, None)
        attended = axial_attend(q_ax, k_ax, v_ax, cfg.heads, pos_q, pos_k)
        ex_w = (expand_mask_weights(x, params.expand_mask, axis) if adaptive else None)
        axial[axis] = expand_axis(attended, (h, w), axis, expand_mode, _weights=ex_w)

    semantic = T.add(axial[HORIZONTAL], axial[VERTICAL])
    out = conv2d(semantic, params.out_proj)
    if cfg.enhance_mode != "off":
        gate = detail_enhancement(x, q, k, v, cfg, params.enhance)
        out = T.mul(out, gate) if cfg.enhance_mode == "mul" else T.add(out, gate)
    return out


def sea_semantic_branch(x, params):
    """Expanded sum of both axial attentions, before the output projection."""
    cfg = params.cfg
    _, h, w = x.shape
    q, k, v = conv2d(x, params.to_q), conv2d(x, params.to_k), conv2d(x, params.to_v)
    adaptive = cfg.squeeze_mode == "adaptive"
    expand_mode = "adaptive" if adaptive else "broadcast"
    parts = []
    for axis in (HORIZONTAL, VERTICAL):
        sq_w = (squeeze_mask_weights(x, params.squeeze_mask, axis) if adaptive else None)
        seq = [squeeze_axis(t, axis, cfg.squeeze_mode, _weights=sq_w) for t in (q, k, v)]
        pos_q, pos_k = params.pos.tables(axis) if params.pos is not None else (None, None)
        attended = axial_attend(seq[0], seq[1], seq[2], cfg.heads, pos_q, pos_k)
        ex_w = (expand_mask_weights(x, params.expand_mask, axis) if adaptive else None)
        parts.append(expand_axis(attended, (h, w), axis, expand_mode, _weights=ex_w))
    return T.add(parts[0], parts[1])


def sea_attention_forward(x, params):
    """Full squeeze-enhanced axial attention block, (C, H, W) -> (C, H, W)."""
    cfg = params.cfg
    if x.rank != 3 or x.shape[0] != cfg.c:
        raise DimensionError(f"expected ({cfg.c}, H, W) input, got {x.shape}")
    q = conv2d(x, params.to_q)
    k = conv2d(x, params.to_k)
    v = conv2d(x, params.to_v)
    return _sea_mechanism(x, q, k, v, params)


def seaformer_layer(x, params):
    """Residual attention + residual convolutional feed-forward."""
    x = T.add(x, sea_attention_forward(x, params.attn))
    h = conv_bn(x, params.ffn.expand, T.relu6)
    h = conv_bn(h, params.ffn.depthwise, T.relu6)
    h = conv_bn(h, params.ffn.project)
    return T.add(x, h)


# ---------------------------------------------------------------------------
# baseline attentions (single head)


@dataclass
class BaselineParams:
    to_q: Conv2dParams
    to_k: Conv2dParams
    to_v: Conv2dParams


def build_baseline_params(channels, c_qk, c_v, rng, dtype=np.float64):
    return BaselineParams(init_conv(rng, channels, c_qk, 1, dtype=dtype),
                          init_conv(rng, channels, c_qk, 1, dtype=dtype),
                          init_conv(rng, channels, c_v, 1, dtype=dtype))


def _attend_sequences(q, k, v, scale):
    # q: (..., n, d_qk), k: (..., n, d_qk), v: (..., n, d_v)
    logits = T.mul(T.matmul(q, T.permute(k, tuple(range(q.rank - 2)) + (q.rank - 1, q.rank - 2))),
                   scale)
    return T.matmul(T.softmax(logits, axis=q.rank - 1), v)


def _baseline_mechanism(q, k, v, kind, window):
    c_qk, h, w = q.shape
    c_v = v.shape[0]
    scale = 1.0 / math.sqrt(c_qk)
    if kind == "global":
        qs = T.permute(T.reshape(q, (c_qk, h * w)), (1, 0))
        ks = T.permute(T.reshape(k, (c_qk, h * w)), (1, 0))
        vs = T.permute(T.reshape(v, (c_v, h * w)), (1, 0))
        out = _attend_sequences(qs, ks, vs, scale)
        return T.reshape(T.permute(out, (1, 0)), (c_v, h, w))
    if kind == "window":
        m = window
        if h % m or w % m:
            raise ConfigurationError(f"window size {m} must divide H={h} and W={w}")
        nh, nw = h // m, w // m

        def tiles(t):
            c = t.shape[0]
            t = T.reshape(t, (c, nh, m, nw, m))
            t = T.permute(t, (1, 3, 2, 4, 0))          # (nh, nw, m, m, c)
            return T.reshape(t, (nh * nw, m * m, c))

        out = _attend_sequences(tiles(q), tiles(k), tiles(v), scale)
        out = T.reshape(out, (nh, nw, m, m, c_v))
        out = T.permute(out, (4, 0, 2, 1, 3))          # (c, nh, m, nw, m)
        return T.reshape(out, (c_v, h, w))
    if kind == "axial":
        def rows(t):
            return T.permute(t, (1, 2, 0))             # (H, W, c)

        def cols(t):
            return T.permute(t, (2, 1, 0))             # (W, H, c)

        row_out = _attend_sequences(rows(q), rows(k), rows(v), scale)
        col_out = _attend_sequences(cols(q), cols(k), cols(v), scale)
        return T.add(T.permute(row_out, (2, 0, 1)), T.permute(col_out, (2, 1, 0)))
    raise ConfigurationError(f"unknown baseline kind {kind!r}")


def baseline_attention(x, params, kind, window=4):
    """Dense attention over all positions, per m x m tile, or per row+column."""
    q = conv2d(x, params.to_q)
    k = conv2d(x, params.to_k)
    v = conv2d(x, params.to_v)
    return _baseline_mechanism(q, k, v, kind, window)


# ---------------------------------------------------------------------------
# benchmark probes: the attention mechanism with projections precomputed


ATTENTION_KINDS = ("sea", "global", "window", "axial")


def attention_probe(kind, channels, size, seed=0, window=4, dtype=np.float64, real=False):
    """Build a zero-argument closure running one attention mechanism at ``size``.

    The q/k/v projections are computed once outside the closure so that the
    measured cost is the mechanism itself (squeeze/attend/expand, masks,
    enhancement and output projection for SEA; the tile/row/dense attention
    for baselines). With ``real=False`` inputs are shape-only stubs suitable
    for MAC counting; with ``real=True`` everything is materialized for
    wall-clock timing.
    """
    if kind not in ATTENTION_KINDS:
        raise ConfigurationError(f"attention kind must be one of {ATTENTION_KINDS}")
    rng = np.random.default_rng(seed)
    h = w = int(size)

    def make_input():
        if real:
            return Tensor._wrap(rng.standard_normal((channels, h, w)).astype(dtype))
        return Tensor._stub((channels, h, w), np.dtype(dtype))

    x = make_input()
    if kind == "sea":
        cfg = default_config(channels, heads=4)
        params = build_sea_params(cfg, rng, dtype)
        if real:
            q = conv2d(x, params.to_q)
            k = conv2d(x, params.to_k)
            v = conv2d(x, params.to_v)
        else:
            with MacCounter():
                q = conv2d(x, params.to_q)
                k = conv2d(x, params.to_k)
                v = conv2d(x, params.to_v)
        return lambda: _sea_mechanism(x, q, k, v, params)

    cfg = default_config(channels, heads=1)
    params = build_baseline_params(channels, cfg.c_qk, cfg.c_v, rng, dtype)
    if real:
        q = conv2d(x, params.to_q)
        k = conv2d(x, params.to_k)
        v = conv2d(x, params.to_v)
    else:
        with MacCounter():
            q = conv2d(x, params.to_q)
            k = conv2d(x, params.to_k)
            v = conv2d(x, params.to_v)
    return lambda: _baseline_mechanism(q, k, v, kind, window)


def ablation_config(base, squeeze=None, enhance_mode=None, enhance_input=None):
    """Clone a config with one ablation axis changed (harness convenience)."""
    kw = {}
    if squeeze is not None:
        kw["squeeze_mode"] = squeeze
    if enhance_mode is not None:
        kw["enhance_mode"] = enhance_mode
    if enhance_input is not None:
        kw["enhance_input"] = enhance_input
    return replace(base, **kw)
