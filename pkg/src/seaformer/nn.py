"""Convolution, normalization, resizing and MobileNet-style blocks.

All ops work on single images laid out channels-first (C, H, W), are pure,
and participate in taping and MAC accounting through the tensor primitives.
Weights are plain Tensors inside small dataclass parameter records; records
are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ConfigurationError, DimensionError, Tensor


# ---------------------------------------------------------------------------
# parameter records


@dataclass
class Conv2dParams:
    weight: Tensor  # (C_out, C_in // groups, k, k)
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.weight.rank != 4:
            raise ConfigurationError(f"conv weight must be rank 4, got {self.weight.shape}")
        cout, _, kh, kw = self.weight.shape
        if kh != kw or kh % 2 == 0:
            raise ConfigurationError(f"kernel must be square and odd, got {kh}x{kw}")
        if cout % self.groups:
            raise ConfigurationError(f"C_out {cout} not divisible by groups {self.groups}")
        if self.bias is not None and self.bias.shape != (cout,):
            raise ConfigurationError(f"bias shape {self.bias.shape} != ({cout},)")

    @property
    def kernel(self):
        return self.weight.shape[2]


@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    eps: float = 1e-5

    _buffers = ("running_mean", "running_var")

    def __post_init__(self):
        c = self.gamma.shape
        if not (self.beta.shape == c and self.running_mean.shape == c
                and self.running_var.shape == c):
            raise ConfigurationError("batchnorm parameter shapes disagree")
        if self.eps <= 0:
            raise ConfigurationError("eps must be positive")
        if np.any(self.running_var.data < 0):
            raise ConfigurationError("running_var must be non-negative")


@dataclass
class ConvBn:
    conv: Conv2dParams
    bn: BatchNormParams


@dataclass
class MobileNetBlockSpec:
    kernel: int
    expansion: float
    out_channels: int
    stride: int

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ConfigurationError(f"stride must be 1 or 2, got {self.stride}")
        if self.expansion < 1:
            raise ConfigurationError("expansion must be >= 1")


@dataclass
class MobileNetBlockParams:
    spec: MobileNetBlockSpec
    expand: ConvBn | None  # absent when expansion == 1
    depthwise: ConvBn
    project: ConvBn

    @property
    def in_channels(self):
        src = self.expand.conv if self.expand is not None else self.depthwise.conv
        return src.weight.shape[1] * src.groups if self.expand is None else src.weight.shape[1]


@dataclass
class LinearParams:
    weight: Tensor  # (in, out)
    bias: Tensor


# ---------------------------------------------------------------------------
# weight initialization: uniform +-sqrt(6 / fan_in) from a seeded generator


def _uniform(rng, shape, fan_in, dtype):
    lim = float(np.sqrt(6.0 / fan_in))
    return Tensor._wrap(rng.uniform(-lim, lim, size=shape).astype(dtype))


def init_conv(rng, c_in, c_out, kernel, stride=1, groups=1, bias=False,
              dtype=np.float64, padding=None):
    if c_in % groups or c_out % groups:
        raise ConfigurationError(f"channels ({c_in}->{c_out}) not divisible by groups {groups}")
    fan_in = (c_in // groups) * kernel * kernel
    weight = _uniform(rng, (c_out, c_in // groups, kernel, kernel), fan_in, dtype)
    b = _uniform(rng, (c_out,), fan_in, dtype) if bias else None
    if padding is None:
        padding = kernel // 2
    return Conv2dParams(weight, b, stride=stride, padding=padding, groups=groups)


def init_bn(channels, dtype=np.float64, eps=1e-5):
    return BatchNormParams(
        gamma=T.ones((channels,), dtype), beta=T.zeros((channels,), dtype),
        running_mean=T.zeros((channels,), dtype), running_var=T.ones((channels,), dtype),
        eps=eps)


def init_conv_bn(rng, c_in, c_out, kernel, stride=1, groups=1, dtype=np.float64, padding=None):
    return ConvBn(init_conv(rng, c_in, c_out, kernel, stride, groups, dtype=dtype,
                            padding=padding),
                  init_bn(c_out, dtype))


def init_linear(rng, n_in, n_out, dtype=np.float64):
    return LinearParams(_uniform(rng, (n_in, n_out), n_in, dtype),
                        T.zeros((n_out,), dtype))


def init_mobilenet_block(rng, c_in, spec, dtype=np.float64):
    hidden = int(round(spec.expansion * c_in))
    expand = None
    if hidden != c_in or spec.expansion != 1:
        expand = init_conv_bn(rng, c_in, hidden, 1, dtype=dtype)
    depthwise = init_conv_bn(rng, hidden, hidden, spec.kernel, stride=spec.stride,
                             groups=hidden, dtype=dtype)
    project = init_conv_bn(rng, hidden, spec.out_channels, 1, dtype=dtype)
    return MobileNetBlockParams(spec, expand, depthwise, project)


# ---------------------------------------------------------------------------
# named-tensor walker (parameter enumeration for gradcheck / counting / io)


def named_tensors(obj, prefix="", trainable_only=True):
    """Yield (dotted name, Tensor) pairs from nested parameter records."""
    if obj is None:
        return
    if isinstance(obj, Tensor):
        yield prefix, obj
        return
    if dataclasses.is_dataclass(obj):
        buffers = getattr(type(obj), "_buffers", ())
        for field in dataclasses.fields(obj):
            if trainable_only and field.name in buffers:
                continue
            value = getattr(obj, field.name)
            if isinstance(value, (Tensor, list, tuple, dict)) or dataclasses.is_dataclass(value):
                sub = f"{prefix}.{field.name}" if prefix else field.name
                yield from named_tensors(value, sub, trainable_only)
        return
    if isinstance(obj, (list, tuple)):
        for i, value in enumerate(obj):
            yield from named_tensors(value, f"{prefix}.{i}" if prefix else str(i), trainable_only)
        return
    if isinstance(obj, dict):
        for key, value in obj.items():
            yield from named_tensors(value, f"{prefix}.{key}" if prefix else str(key), trainable_only)


def parameter_count(obj):
    return sum(t.size for _, t in named_tensors(obj, trainable_only=True))


# ---------------------------------------------------------------------------
# forward ops


def conv2d(x, p):
    """2-D convolution (cross-correlation) with groups; MACs = H'W'·C_out·C_in/g·k²."""
    if x.rank != 3:
        raise DimensionError(f"conv2d expects (C, H, W), got {x.shape}")
    c_in, h, w = x.shape
    c_out, cpg, k, _ = p.weight.shape
    if cpg * p.groups != c_in:
        raise ConfigurationError(
            f"conv weight expects {cpg * p.groups} input channels (groups={p.groups}), got {c_in}")
    ho = (h + 2 * p.padding - k) // p.stride + 1
    wo = (w + 2 * p.padding - k) // p.stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"kernel {k} does not fit input {h}x{w} with padding {p.padding}")

    ctr = T._counter()
    if ctr is not None:
        ctr.add(ho * wo * c_out * cpg * k * k)
        return Tensor._stub((c_out, ho, wo), x.dtype)

    g = p.groups
    pointwise = k == 1 and p.stride == 1 and p.padding == 0
    if pointwise:
        cols = x.data.reshape(g, cpg, h * w)
    else:
        xp = (np.pad(x.data, ((0, 0), (p.padding, p.padding), (p.padding, p.padding)))
              if p.padding else x.data)
        s0, s1, s2 = xp.strides
        windows = np.lib.stride_tricks.as_strided(
            xp, shape=(c_in, k, k, ho, wo),
            strides=(s0, s1, s2, s1 * p.stride, s2 * p.stride), writeable=False)
        cols = np.ascontiguousarray(windows).reshape(g, cpg * k * k, ho * wo)
    wmat = p.weight.data.reshape(g, c_out // g, cpg * k * k)
    out_d = np.matmul(wmat, cols).reshape(c_out, ho, wo)
    if p.bias is not None:
        out_d = out_d + p.bias.data[:, None, None]
    out = Tensor._wrap(out_d)

    if T._tape() is not None:
        inputs = (x, p.weight) if p.bias is None else (x, p.weight, p.bias)

        def vjp(grad, cols=cols, wmat=wmat, shape_in=(c_in, h, w), p=p,
                dims=(g, c_out, cpg, k, ho, wo), has_bias=p.bias is not None,
                pointwise=pointwise):
            g_, c_out_, cpg_, k_, ho_, wo_ = dims
            gout = grad.reshape(g_, c_out_ // g_, ho_ * wo_)
            gw = np.matmul(gout, cols.swapaxes(1, 2)).reshape(c_out_, cpg_, k_, k_)
            gcols = np.matmul(wmat.swapaxes(1, 2), gout)
            if pointwise:
                gx = gcols.reshape(shape_in)
            else:
                gcols = gcols.reshape(c_in, k_, k_, ho_, wo_)
                gxp = np.zeros((c_in, shape_in[1] + 2 * p.padding,
                                shape_in[2] + 2 * p.padding), dtype=grad.dtype)
                for ki in range(k_):
                    for kj in range(k_):
                        gxp[:, ki:ki + p.stride * ho_:p.stride,
                            kj:kj + p.stride * wo_:p.stride] += gcols[:, ki, kj]
                gx = gxp[:, p.padding:p.padding + shape_in[1],
                         p.padding:p.padding + shape_in[2]]
            if has_bias:
                return gx, gw, grad.sum(axis=(1, 2))
            return gx, gw

        T._record(out, inputs, vjp)
    return out


def batchnorm_infer(x, p):
    """Inference-mode batchnorm as a composition of primitives (autodiff for free)."""
    if x.rank != 3 or x.shape[0] != p.gamma.shape[0]:
        raise DimensionError(
            f"batchnorm expects (C={p.gamma.shape[0]}, H, W), got {x.shape}")
    c = p.gamma.shape[0]
    inv_std = T.div(p.gamma, T.sqrt(T.add(p.running_var, p.eps)))
    scale = T.reshape(inv_std, (c, 1, 1))
    shift = T.reshape(p.beta, (c, 1, 1))
    mean = T.reshape(p.running_mean, (c, 1, 1))
    return T.add(T.mul(T.sub(x, mean), scale), shift)


def conv_bn(x, block, act=None):
    out = batchnorm_infer(conv2d(x, block.conv), block.bn)
    return act(out) if act is not None else out


def bilinear_resize(x, out_h, out_w):
    """Half-pixel bilinear resize with edge clamping; identity when sizes match."""
    if x.rank != 3:
        raise DimensionError(f"bilinear_resize expects (C, H, W), got {x.shape}")
    c, h, w = x.shape
    out_h, out_w = int(out_h), int(out_w)
    if out_h < 1 or out_w < 1:
        raise DimensionError("output dims must be >= 1")
    if out_h == h and out_w == w:
        return T.add(x, 0.0)  # exact passthrough, still taped

    ctr = T._counter()
    if ctr is not None:
        ctr.add(4 * c * out_h * out_w)
        return Tensor._stub((c, out_h, out_w), x.dtype)

    i0, i1, ti = T._interp_coords(h, out_h)
    j0, j1, tj = T._interp_coords(w, out_w)
    ti = ti.astype(x.dtype)[:, None]
    tj = tj.astype(x.dtype)[None, :]
    w00 = (1 - ti) * (1 - tj)
    w01 = (1 - ti) * tj
    w10 = ti * (1 - tj)
    w11 = ti * tj
    xd = x.data
    out_d = (w00 * xd[:, i0[:, None], j0[None, :]] + w01 * xd[:, i0[:, None], j1[None, :]]
             + w10 * xd[:, i1[:, None], j0[None, :]] + w11 * xd[:, i1[:, None], j1[None, :]])
    out = Tensor._wrap(out_d)

    if T._tape() is not None:
        def vjp(g, idx=(i0, i1, j0, j1), wts=(w00, w01, w10, w11), shape_in=(c, h, w)):
            i0_, i1_, j0_, j1_ = idx
            gx = np.zeros(shape_in, dtype=g.dtype)
            ci = np.arange(shape_in[0])[:, None, None]
            np.add.at(gx, (ci, i0_[None, :, None], j0_[None, None, :]), wts[0] * g)
            np.add.at(gx, (ci, i0_[None, :, None], j1_[None, None, :]), wts[1] * g)
            np.add.at(gx, (ci, i1_[None, :, None], j0_[None, None, :]), wts[2] * g)
            np.add.at(gx, (ci, i1_[None, :, None], j1_[None, None, :]), wts[3] * g)
            return (gx,)

        T._record(out, (x,), vjp)
    return out


def avg_pool2d(x, kernel, stride):
    if x.rank != 3:
        raise DimensionError(f"avg_pool2d expects (C, H, W), got {x.shape}")
    c, h, w = x.shape
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"window {kernel} does not fit input {h}x{w}")

    ctr = T._counter()
    if ctr is not None:
        ctr.add(c * ho * wo)
        return Tensor._stub((c, ho, wo), x.dtype)

    s0, s1, s2 = x.data.strides
    windows = np.lib.stride_tricks.as_strided(
        x.data, shape=(c, ho, wo, kernel, kernel),
        strides=(s0, s1 * stride, s2 * stride, s1, s2), writeable=False)
    out = Tensor._wrap(windows.mean(axis=(3, 4)))

    if T._tape() is not None:
        def vjp(g, dims=(c, h, w, kernel, stride, ho, wo)):
            c_, h_, w_, k_, s_, ho_, wo_ = dims
            gx = np.zeros((c_, h_, w_), dtype=g.dtype)
            spread = g / (k_ * k_)
            for ki in range(k_):
                for kj in range(k_):
                    gx[:, ki:ki + s_ * ho_:s_, kj:kj + s_ * wo_:s_] += spread
            return (gx,)

        T._record(out, (x,), vjp)
    return out


def mobilenet_block(x, params, act=T.relu6):
    """Inverted residual: expand 1x1 -> depthwise kxk -> project 1x1.

    The residual connection is active iff stride == 1 and the block preserves
    its channel count.
    """
    spec = params.spec
    c_in = x.shape[0]
    h = x
    if params.expand is not None:
        h = conv_bn(h, params.expand, act)
    h = conv_bn(h, params.depthwise, act)
    h = conv_bn(h, params.project)
    if spec.stride == 1 and c_in == spec.out_channels:
        h = T.add(x, h)
    return h


def linear(x, p):
    """(n_in,) vector through a dense layer -> (n_out,)."""
    row = T.reshape(x, (1, x.size))
    out = T.add(T.matmul(row, p.weight), T.reshape(p.bias, (1, p.bias.size)))
    return T.reshape(out, (p.bias.size,))


def global_avg_pool(x):
    return T.reduce_mean(x, axis=(1, 2))
