"""Finite-difference gradient suites and exact-equivalence oracle checks.

Shared by the command-line `gradcheck` / `oracle-check` commands and the
acceptance tests. Every suite is deterministic given its seed.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import attention as attn
from . import distill as D
from . import nn
from . import tensor as T
from .analysis import gradcheck
from .nn import named_tensors
from .tensor import Tensor

GRADCHECK_SCOPES = ("ops", "sea", "layer", "distill")


def _rand(rng, shape, scale=1.0):
    return Tensor._wrap(rng.standard_normal(shape) * scale)


def _randomize_bn(obj, rng):
    """Move every batchnorm in a parameter tree off its identity statistics.

    Identity batchnorm lets relu6's exact zeros propagate (a fully clipped
    channel convolves to exactly 0), parking later relu6 inputs exactly on
    the kink where central differences are ill-posed. Generic statistics
    keep the gradcheck at a differentiable point.
    """
    import dataclasses

    if dataclasses.is_dataclass(obj):
        if isinstance(obj, nn.BatchNormParams):
            c = obj.gamma.shape[0]
            obj.gamma = Tensor._wrap(0.7 + 0.6 * rng.random(c))
            obj.beta = Tensor._wrap(0.4 * rng.standard_normal(c))
            obj.running_mean = Tensor._wrap(0.2 * rng.standard_normal(c))
            obj.running_var = Tensor._wrap(0.5 + rng.random(c))
            return
        for field in dataclasses.fields(obj):
            _randomize_bn(getattr(obj, field.name), rng)
    elif isinstance(obj, (list, tuple)):
        for item in obj:
            _randomize_bn(item, rng)
    elif isinstance(obj, dict):
        for item in obj.values():
            _randomize_bn(item, rng)


def _weighted_sum(out, w_const):
    return T.reduce_sum(T.mul(out, w_const))


# ---------------------------------------------------------------------------
# primitive-op cases


def _op_cases(rng):
    """Yield (name, loss_fn, leaves); each loss closure re-reads its leaves."""
    cases = []

    def case(name, leaves, builder):
        w = {}

        def loss():
            out = builder()
            key = out.shape
            if key not in w:
                w[key] = Tensor._wrap(rng.standard_normal(key))
            return _weighted_sum(out, w[key])

        cases.append((name, loss, leaves))

    a = _rand(rng, (3, 4))
    b = _rand(rng, (4, 2))
    case("matmul", [("a", a), ("b", b)], lambda: T.matmul(a, b))

    ab = _rand(rng, (2, 3, 4))
    bb = _rand(rng, (2, 4, 2))
    case("matmul_batched", [("a", ab), ("b", bb)], lambda: T.matmul(ab, bb))

    x_sm = _rand(rng, (2, 5))
    case("softmax", [("x", x_sm)], lambda: T.softmax(x_sm, axis=1))
    case("log_softmax", [("x", x_sm)], lambda: T.log_softmax(x_sm, axis=0))

    xp = _rand(rng, (2, 3, 4))
    case("permute", [("x", xp)], lambda: T.permute(xp, (2, 0, 1)))
    case("reshape", [("x", xp)], lambda: T.reshape(xp, (6, 4)))
    case("broadcast_to", [("x", x_sm)], lambda: T.broadcast_to(x_sm, (3, 2, 5)))

    e1 = _rand(rng, (2, 3))
    e2 = _rand(rng, (1, 3))
    case("add_broadcast", [("a", e1), ("b", e2)], lambda: T.add(e1, e2))
    case("mul", [("a", e1), ("b", e2)], lambda: T.mul(e1, e2))
    denom = Tensor._wrap(np.sign(rng.standard_normal((2, 3))) * (0.5 + rng.random((2, 3))))
    case("div", [("a", e1), ("b", denom)], lambda: T.div(e1, denom))

    xe = _rand(rng, (3, 4))
    case("sigmoid", [("x", xe)], lambda: T.sigmoid(xe))
    case("relu6", [("x", xe)], lambda: T.relu6(xe))
    case("exp", [("x", xe)], lambda: T.exp(xe))
    pos = Tensor._wrap(0.5 + rng.random((3, 4)))
    case("log", [("x", pos)], lambda: T.log(pos))
    case("sqrt", [("x", pos)], lambda: T.sqrt(pos))

    case("reduce_sum", [("x", xp)], lambda: T.reduce_sum(xp, axis=1))
    case("reduce_mean", [("x", xp)], lambda: T.reduce_mean(xp, axis=(0, 2)))
    case("reduce_max", [("x", xp)], lambda: T.reduce_max(xp, axis=2))

    c1 = _rand(rng, (2, 3))
    c2 = _rand(rng, (4, 3))
    case("concat", [("a", c1), ("b", c2)], lambda: T.concat([c1, c2], axis=0))

    table = _rand(rng, (5, 3))
    case("interp_linear", [("table", table)], lambda: T.interp_linear(table, 7))

    conv_rng = np.random.default_rng(rng.integers(2**32))
    xc = _rand(rng, (2, 5, 5), 0.7)
    pc = nn.init_conv(conv_rng, 2, 3, 3, stride=1, bias=True)
    case("conv2d", [("x", xc), ("w", pc.weight), ("bias", pc.bias)],
         lambda: nn.conv2d(xc, pc))

    xd = _rand(rng, (4, 5, 5), 0.7)
    pd = nn.init_conv(conv_rng, 4, 4, 3, groups=4)
    case("conv2d_depthwise", [("x", xd), ("w", pd.weight)], lambda: nn.conv2d(xd, pd))

    pg = nn.init_conv(conv_rng, 4, 6, 3, stride=2, groups=2)
    case("conv2d_grouped_strided", [("x", xd), ("w", pg.weight)], lambda: nn.conv2d(xd, pg))

    xb = _rand(rng, (3, 4, 4))
    bn = nn.init_bn(3)
    bn = replace(bn, gamma=_rand(rng, (3,), 0.5), beta=_rand(rng, (3,), 0.5),
                 running_mean=_rand(rng, (3,), 0.3),
                 running_var=Tensor._wrap(0.5 + rng.random(3)))
    case("batchnorm_infer", [("x", xb), ("gamma", bn.gamma), ("beta", bn.beta)],
         lambda: nn.batchnorm_infer(xb, bn))

    xr = _rand(rng, (2, 4, 4))
    case("bilinear_up", [("x", xr)], lambda: nn.bilinear_resize(xr, 6, 7))
    case("bilinear_down", [("x", xr)], lambda: nn.bilinear_resize(xr, 3, 3))
    case("avg_pool2d", [("x", xr)], lambda: nn.avg_pool2d(xr, 2, 2))

    spec = nn.MobileNetBlockSpec(kernel=3, expansion=2, out_channels=4, stride=1)
    mb = nn.init_mobilenet_block(conv_rng, 4, spec)
    _randomize_bn(mb, conv_rng)
    xm = _rand(rng, (4, 5, 5), 0.6)
    mb_leaves = [("x", xm)] + list(named_tensors(mb, "mb"))
    case("mobilenet_block", mb_leaves, lambda: nn.mobilenet_block(xm, mb))

    return cases


def _toy_sea(rng, squeeze_mode="adaptive", randomize_bn=False):
    cfg = attn.default_config(6, heads=2, l=3, squeeze_mode=squeeze_mode,
                              enhance_mode="mul", enhance_input="concat_qkv")
    params = attn.build_sea_params(cfg, rng)
    if randomize_bn:
        _randomize_bn(params, rng)
    x = _rand(rng, (6, 4, 3), 0.6)
    return cfg, params, x


def _sea_cases(rng):
    _, params, x = _toy_sea(rng, randomize_bn=True)
    leaves = [("x", x)] + list(named_tensors(params, "sea"))
    w = Tensor._wrap(rng.standard_normal(x.shape))
    return [("sea_attention", lambda: _weighted_sum(attn.sea_attention_forward(x, params), w),
             leaves)]


def _layer_cases(rng):
    cfg = attn.default_config(6, heads=2, l=3)
    params = attn.build_sea_layer_params(cfg, rng)
    _randomize_bn(params, rng)
    x = _rand(rng, (6, 4, 3), 0.6)
    leaves = [("x", x)] + list(named_tensors(params, "layer"))
    return [("seaformer_layer",
             lambda: T.reduce_sum(attn.seaformer_layer(x, params)), leaves)]


def _distill_cases(rng):
    c, k = 4, 3
    conv_rng = np.random.default_rng(rng.integers(2**32))
    x = _rand(rng, (3, 4, 4), 0.6)
    conv1 = nn.init_conv_bn(conv_rng, 3, c, 3)
    to_logits = nn.init_conv(conv_rng, c, k, 1)
    up = D.build_upsample_params(conv_rng, c, c, variant="mobilenet")
    _randomize_bn(conv1, conv_rng)
    _randomize_bn(up, conv_rng)
    teacher_head = nn.init_conv(conv_rng, c, k, 1)
    f_teacher = _rand(rng, (c, 8, 8))
    t_logits = _rand(rng, (k, 8, 8))
    labels_small = rng.integers(0, k, size=(4, 4))
    labels_small[0, 0] = D.IGNORE_INDEX
    labels_big = rng.integers(0, k, size=(8, 8))

    def total_loss():
        h = T.relu6(nn.conv_bn(x, conv1))
        logits_s = nn.conv2d(h, to_logits)
        gate = nn.bilinear_resize(h, 8, 8)
        upsampled = D.upsample_module(h, gate, up)
        l_feat = D.feature_similarity_loss(upsampled, f_teacher)
        l_out = D.output_similarity_loss(nn.bilinear_resize(logits_s, 8, 8), t_logits)
        l_cls = D.cross_entropy_loss(logits_s, labels_small)
        l_cross = D.cross_entropy_loss(nn.conv2d(upsampled, teacher_head), labels_big)
        return T.add(T.add(T.add(l_cls, l_cross), l_feat), l_out)

    leaves = ([("x", x)] + list(named_tensors(conv1, "conv1"))
              + list(named_tensors(to_logits, "to_logits"))
              + list(named_tensors(up, "upsample")))
    return [("distill_total", total_loss, leaves)]


_SCOPE_BUILDERS = {"ops": _op_cases, "sea": _sea_cases,
                   "layer": _layer_cases, "distill": _distill_cases}
_SCOPE_THRESHOLDS = {"ops": 1e-5, "sea": 1e-5, "layer": 1e-5, "distill": 1e-4}


def gradcheck_scope(scope, seed=0, n_seeds=20, threshold=None):
    """Run one scope's cases over ``n_seeds`` seeds.

    Returns (passed, rows) where each row aggregates one case's worst relative
    error across seeds.
    """
    if scope not in _SCOPE_BUILDERS:
        raise ValueError(f"scope must be one of {GRADCHECK_SCOPES}")
    threshold = threshold if threshold is not None else _SCOPE_THRESHOLDS[scope]
    worst = {}
    for s in range(n_seeds):
        rng = np.random.default_rng(seed + s)
        for name, loss_fn, leaves in _SCOPE_BUILDERS[scope](rng):
            report = gradcheck(loss_fn, leaves, threshold=threshold)
            prev = worst.get(name, 0.0)
            worst[name] = max(prev, report.max_rel_error)
    rows = [{"check": name, "seeds": n_seeds, "threshold": threshold,
             "max_rel_error": err, "pass": bool(err < threshold)}
            for name, err in worst.items()]
    return all(r["pass"] for r in rows), rows


# ---------------------------------------------------------------------------
# oracle equivalences


def _uniform_logit_mask(channels):
    """Squeeze mask whose logits are identically zero (softmax == uniform)."""
    mask = attn.SqueezeMask(
        nn.ConvBn(nn.Conv2dParams(T.zeros((1, channels, 1, 1)), padding=0), nn.init_bn(1)),
        nn.ConvBn(nn.Conv2dParams(T.zeros((1, channels, 1, 1)), padding=0), nn.init_bn(1)))
    return mask


def check_adaptive_equals_mean(seed=0, n_seeds=10, tol=1e-9):
    """Adaptive squeeze with uniform mask logits == mean pooling."""
    worst = 0.0
    for s in range(n_seeds):
        rng = np.random.default_rng(seed + s)
        h, w = rng.integers(2, 9), rng.integers(2, 9)
        x = _rand(rng, (5, int(h), int(w)))
        mask = _uniform_logit_mask(5)
        for axis in (attn.HORIZONTAL, attn.VERTICAL):
            ad = attn.squeeze_axis(x, axis, "adaptive", mask=mask)
            mp = attn.squeeze_axis(x, axis, "mean_pool")
            worst = max(worst, float(np.abs(ad.data - mp.data).max()))
    return {"check": "adaptive_uniform_equals_mean_pool", "max_abs_diff": worst,
            "tol": tol, "pass": bool(worst <= tol)}


def check_window_equals_global(seed=0, size=6, tol=1e-10):
    """Window attention with m == H == W reproduces global attention."""
    rng = np.random.default_rng(seed)
    params = attn.build_baseline_params(8, 8, 16, rng)
    x = _rand(rng, (8, size, size))
    g = attn.baseline_attention(x, params, "global")
    wnd = attn.baseline_attention(x, params, "window", window=size)
    diff = float(np.abs(g.data - wnd.data).max())
    return {"check": "window_full_tile_equals_global", "max_abs_diff": diff,
            "tol": tol, "pass": bool(diff <= tol)}


def check_zero_pos_tables(seed=0):
    """Positional path with zeroed tables is bitwise the non-positional path."""
    rng = np.random.default_rng(seed)
    cfg, params, x = _toy_sea(rng)
    zero = T.zeros((cfg.l, cfg.c_qk))
    zeroed = replace(params, pos=attn.PositionEmbedding(zero, zero, zero, zero))
    without = replace(params, pos=None)
    a = attn.sea_attention_forward(x, zeroed)
    b = attn.sea_attention_forward(x, without)
    identical = bool(np.array_equal(a.data, b.data))
    return {"check": "zeroed_pos_tables_bitwise", "max_abs_diff": 0.0 if identical else
            float(np.abs(a.data - b.data).max()), "tol": 0.0, "pass": identical}


def check_single_position(seed=0, tol=1e-12):
    """At H = W = 1 the semantic branch is exactly twice the value projection."""
    rng = np.random.default_rng(seed)
    cfg = attn.default_config(8, heads=2, l=4, squeeze_mode="mean_pool")
    params = attn.build_sea_params(cfg, rng)
    x = _rand(rng, (8, 1, 1))
    semantic = attn.sea_semantic_branch(x, params)
    v = nn.conv2d(x, params.to_v)
    diff = float(np.abs(semantic.data - 2.0 * v.data).max())
    return {"check": "single_position_semantic_is_2v", "max_abs_diff": diff,
            "tol": tol, "pass": bool(diff <= tol)}


def oracle_checks(seed=0):
    rows = [check_adaptive_equals_mean(seed), check_window_equals_global(seed),
            check_zero_pos_tables(seed), check_single_position(seed)]
    return all(r["pass"] for r in rows), rows
