"""Cost accounting, scaling fits, the finite-difference oracle, and micro-timing."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError, MacCounter, Tape, Tensor, backward


class InsufficientDataError(ValueError):
    """Too few rows to fit a scaling law."""


class OracleError(RuntimeError):
    """The finite-difference oracle hit a non-finite function value."""


def count_macs(forward_closure):
    """Run a closure under a fresh counter; returns the exact integer MAC total.

    Under the counter every library op skips arithmetic and propagates shapes,
    so counting is deterministic and cheap at any size.
    """
    with MacCounter() as counter:
        forward_closure()
    return counter.macs


# ---------------------------------------------------------------------------
# scaling fits


@dataclass
class CostRow:
    label: str
    h: int
    w: int
    c: int
    macs: int
    wall_ns: int = 0


@dataclass
class ScalingFit:
    slope: float
    intercept: float
    residual: float  # RMS of log-space residuals


@dataclass
class CostReport:
    rows: list[CostRow] = field(default_factory=list)
    fit: ScalingFit | None = None

    def fit_rows(self):
        self.fit = fit_scaling([(r.h, r.w, r.macs) for r in self.rows])
        return self.fit

    def to_csv(self):
        lines = ["label,h,w,c,macs,wall_ns"]
        lines += [f"{r.label},{r.h},{r.w},{r.c},{r.macs},{r.wall_ns}" for r in self.rows]
        return "\n".join(lines) + "\n"

    def to_json_dict(self):
        out = {"rows": [vars(r) for r in self.rows]}
        if self.fit is not None:
            out["fit"] = {"slope": self.fit.slope, "intercept": self.fit.intercept,
                          "residual": self.fit.residual}
        return out


def fit_scaling(rows):
    """Ordinary least squares of log(macs) against log(h*w).

    ``rows`` holds (h, w, macs) triples; needs at least 3 rows with distinct
    areas.
    """
    if len(rows) < 3:
        raise InsufficientDataError(f"need >= 3 rows to fit, got {len(rows)}")
    areas = [h * w for h, w, _ in rows]
    if len(set(areas)) < 3:
        raise InsufficientDataError("need >= 3 distinct areas to fit")
    x = np.log([float(a) for a in areas])
    y = np.log([float(m) for _, _, m in rows])
    xm, ym = x.mean(), y.mean()
    slope = float(((x - xm) * (y - ym)).sum() / ((x - xm) ** 2).sum())
    intercept = float(ym - slope * xm)
    resid = y - (slope * x + intercept)
    return ScalingFit(slope, intercept, float(np.sqrt((resid ** 2).mean())))


# ---------------------------------------------------------------------------
# finite differences


def default_step(values):
    return 1e-6 * (1.0 + np.abs(values))


def numerical_gradient(scalar_fn, x, h_rule=default_step):
    """Central-difference gradient of a pure scalar function at ``x`` (64-bit)."""
    base = x.data.astype(np.float64, copy=True)
    steps = h_rule(base)
    flat = base.reshape(-1)
    hflat = steps.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        h = hflat[i]
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        f_plus = float(scalar_fn(Tensor._wrap(bumped.reshape(base.shape))))
        bumped[i] = flat[i] - h
        f_minus = float(scalar_fn(Tensor._wrap(bumped.reshape(base.shape))))
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise OracleError(f"non-finite function value while perturbing element {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return Tensor._wrap(grad.reshape(base.shape))


FD_NOISE_ATOL = 2e-8


def relative_error(analytic, numeric):
    """|a - n| / max(|a|, |n|, 1e-8), guarded at the oracle's resolution.

    Central differences at h ~ 1e-6 on float64 intermediates of unit scale
    cannot resolve differences below roughly eps*|f|/(2h) ~ 1e-9. Elements
    whose absolute disagreement sits under ``FD_NOISE_ATOL`` therefore count
    as matching: this covers structurally dead parameters (a bias feeding a
    softmax has an exactly-zero gradient while the oracle returns roundoff
    noise) and tiny-magnitude gradients agreeing to nine-plus digits. A real
    backward-rule bug disagrees by the order of the gradient itself, far
    above this floor.
    """
    a = analytic.data if isinstance(analytic, Tensor) else np.asarray(analytic)
    n = numeric.data if isinstance(numeric, Tensor) else np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    rel = np.abs(a - n) / denom
    rel[np.abs(a - n) < FD_NOISE_ATOL] = 0.0
    return rel


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    argmax: tuple
    passed: bool


@dataclass
class GradCheckReport:
    threshold: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self):
        return all(e.passed for e in self.entries)

    @property
    def max_rel_error(self):
        return max((e.max_rel_error for e in self.entries), default=0.0)


def gradcheck(loss_fn, leaves, threshold=1e-5):
    """Compare taped gradients of ``loss_fn()`` against central differences.

    ``leaves`` is a list of (name, Tensor); the loss closure must re-read each
    leaf on every call. Leaf data is perturbed in place for the numeric side
    and restored afterwards.
    """
    tape = Tape()
    with tape:
        tape.watch(*(t for _, t in leaves))
        loss = loss_fn()
    grads = backward(tape, Tensor([1.0]))

    report = GradCheckReport(threshold=threshold)
    for name, leaf in leaves:
        analytic = grads[leaf]

        def probe(candidate, leaf=leaf):
            saved = leaf.data
            leaf.data = candidate.data.astype(saved.dtype, copy=False)
            try:
                return loss_fn().item()
            finally:
                leaf.data = saved

        numeric = numerical_gradient(probe, leaf)
        rel = relative_error(analytic, numeric)
        worst = int(np.argmax(rel))
        max_rel = float(rel.reshape(-1)[worst])
        report.entries.append(GradCheckEntry(
            name=name, max_rel_error=max_rel,
            argmax=tuple(np.unravel_index(worst, rel.shape)),
            passed=max_rel < threshold))
    del loss
    return report


# ---------------------------------------------------------------------------
# wall-clock micro-timing


def time_kernel(forward_closure, warmup=3, iters=5):
    """Min/median/mean wall time in ns over ``iters`` runs after warmup."""
    if iters < 3:
        raise ValueError(f"iters must be >= 3, got {iters}")
    for _ in range(warmup):
        forward_closure()
    samples = []
    for _ in range(iters):
        t0 = time.perf_counter_ns()
        forward_closure()
        samples.append(time.perf_counter_ns() - t0)
    samples.sort()
    n = len(samples)
    median = samples[n // 2] if n % 2 else (samples[n // 2 - 1] + samples[n // 2]) // 2
    return {"min_ns": samples[0], "median_ns": median,
            "mean_ns": sum(samples) // n, "iters": iters}
