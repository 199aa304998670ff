"""Central finite-difference gradient checks for every layer and a tiny U-Net.

A check reduces an op to a scalar ``L = sum(W * op(inputs))`` with a fixed
random weight tensor ``W`` (``W = 1`` recovers the plain sum; random weights
keep ops such as batch norm, whose plain output sum is constant, from
passing vacuously) and compares the analytic gradient with
``(L(x + h) - L(x - h)) / 2h`` element by element.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import layers as L
from .layers import ConvParams, RunningStats
from .metrics import bce_loss
from .rng import GRADCHECK, make_rng

LossAndGrad = Callable[[dict], tuple[float, dict]]

DEFAULT_H = 1e-5
# relative errors are taken against max(|analytic|, |numeric|, REL_FLOOR)
REL_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    name: str
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)
    failure: str | None = None
    seconds: float = 0.0

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.failure is None and self.max_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.failure})" if self.failure else ""
        return f"{status}  {self.name:<18} max rel err {self.max_error:.3e}  tol {self.tolerance:g}{extra}"


def finite_diff_check(
    loss_and_grad: LossAndGrad,
    point: dict[str, np.ndarray],
    tolerance: float = 1e-4,
    h: float = DEFAULT_H,
    name: str = "op",
) -> GradCheckReport:
    """Compare analytic gradients against central differences at ``point``.

    ``loss_and_grad(arrays)`` must return ``(scalar_loss, {name: grad})`` for
    every key of ``point``. Arrays in ``point`` are perturbed in place and
    restored. The report holds the per-array maximum relative error.
    """
    start = time.perf_counter()
    report = GradCheckReport(name, tolerance)
    try:
        _compare(loss_and_grad, point, h, report)
    except Exception as exc:  # noqa: BLE001 - a crashing op is a failed check
        report.failure = f"{type(exc).__name__}: {exc}"
    report.seconds = time.perf_counter() - start
    return report


def _compare(loss_and_grad, point, h, report):
    _, analytic = loss_and_grad(point)
    for key, arr in point.items():
        g = np.asarray(analytic[key], dtype=np.float64)
        if g.shape != arr.shape:
            report.failure = f"{key}: gradient shape {g.shape} != {arr.shape}"
            return
        bad = np.argwhere(~np.isfinite(g))
        if len(bad):
            report.failure = f"{key}: non-finite analytic gradient at index {tuple(bad[0])}"
            return
        numeric = np.empty_like(g)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            try:
                flat[i] = orig + h
                lp, _ = loss_and_grad(point)
                flat[i] = orig - h
                lm, _ = loss_and_grad(point)
            finally:
                flat[i] = orig
            numeric.flat[i] = (lp - lm) / (2 * h)
        denom = np.maximum(np.maximum(np.abs(g), np.abs(numeric)), REL_FLOOR)
        report.errors[key] = float(np.max(np.abs(g - numeric) / denom))


def weighted_sum(forward: Callable, backward: Callable, weight: np.ndarray | None = None) -> LossAndGrad:
    """Adapt ``forward(**arrays) -> (out, ctx)`` / ``backward(g, ctx) -> {name: grad}``."""

    def f(arrays):
        out, ctx = forward(**arrays)
        w = np.ones_like(out) if weight is None else weight
        return float(np.sum(out * w)), backward(w.astype(out.dtype), ctx)

    return f


# -- the suite ---------------------------------------------------------------


def _away_from_zero(rng, shape, gap=1e-3):
    x = rng.uniform(-1, 1, size=shape)
    return np.where(np.abs(x) < gap, np.copysign(gap + np.abs(x), x), x)


def _distinct_values(rng, shape):
    # a shuffled grid of spacing 2/n keeps every pooling window far from a tie
    n = int(np.prod(shape))
    return (rng.permutation(n) * (2.0 / n) - 1.0).reshape(shape)


def _layer_cases(rng):
    """Yield ``(name, loss_and_grad, point, h)`` for each layer op."""
    u = lambda *s: rng.uniform(-1, 1, size=s)  # noqa: E731

    def conv_fwd(x, kernel, bias):
        return L.conv2d_forward(x, ConvParams(kernel, bias, 1, "same"))

    def conv_bwd(g, ctx):
        dx, dk, db = L.conv2d_backward(g, ctx)
        return dict(x=dx, kernel=dk, bias=db)

    yield ("conv2d", weighted_sum(conv_fwd, conv_bwd, u(1, 4, 8, 8)),
           dict(x=u(1, 3, 8, 8), kernel=u(4, 3, 3, 3), bias=u(4)), DEFAULT_H)

    def convt_fwd(x, kernel, bias):
        return L.conv_transpose2d_forward(x, ConvParams(kernel, bias, 2, "valid"))

    def convt_bwd(g, ctx):
        dx, dk, db = L.conv_transpose2d_backward(g, ctx)
        return dict(x=dx, kernel=dk, bias=db)

    yield ("conv_transpose2d", weighted_sum(convt_fwd, convt_bwd, u(1, 4, 8, 8)),
           dict(x=u(1, 8, 4, 4), kernel=u(4, 8, 2, 2), bias=u(4)), DEFAULT_H)

    yield ("maxpool2d",
           weighted_sum(lambda x: L.maxpool2d_forward(x, 2),
                        lambda g, c: dict(x=L.maxpool2d_backward(g, c)), u(1, 2, 4, 4)),
           dict(x=_distinct_values(rng, (1, 2, 8, 8))), 1e-6)

    def bn_fwd(x, gamma, beta):
        return L.batchnorm2d_forward(x, gamma, beta, RunningStats.fresh(3, np.float64), "train")

    def bn_bwd(g, ctx):
        dx, dg, db = L.batchnorm2d_backward(g, ctx)
        return dict(x=dx, gamma=dg, beta=db)

    yield ("batchnorm2d", weighted_sum(bn_fwd, bn_bwd, u(4, 3, 5, 5)),
           dict(x=u(4, 3, 5, 5), gamma=u(3), beta=u(3)), DEFAULT_H)

    yield ("relu",
           weighted_sum(L.relu_forward, lambda g, c: dict(x=L.relu_backward(g, c)), u(2, 3, 4, 4)),
           dict(x=_away_from_zero(rng, (2, 3, 4, 4))), DEFAULT_H)

    yield ("sigmoid",
           weighted_sum(L.sigmoid_forward, lambda g, c: dict(x=L.sigmoid_backward(g, c)), u(2, 3, 4, 4)),
           dict(x=u(2, 3, 4, 4) * 4), DEFAULT_H)

    mask_seed = int(rng.integers(2**31))

    def drop_fwd(x):
        # a fresh generator per call fixes the mask across perturbations
        return L.dropout_forward(x, 0.3, "train", make_rng(mask_seed))

    yield ("dropout",
           weighted_sum(drop_fwd, lambda g, c: dict(x=L.dropout_backward(g, c)), u(2, 3, 4, 4)),
           dict(x=u(2, 3, 4, 4)), DEFAULT_H)

    def cat_bwd(g, ctx):
        da, db = L.concat_backward(g, ctx)
        return dict(a=da, b=db)

    yield ("concat", weighted_sum(L.concat_channels, cat_bwd, u(1, 5, 4, 4)),
           dict(a=u(1, 2, 4, 4), b=u(1, 3, 4, 4)), DEFAULT_H)


def _unet_case(rng):
    """Depth-1 U-Net + BCE loss over all parameters, dropout mask fixed."""
    from . import unet

    cfg = unet.UNetConfig(depth=1, base_filters=2, in_channels=2, n_classes=2,
                          dropout_rate=0.07, use_batchnorm=True, input_size=8)
    model = unet.build_unet(cfg, seed=int(rng.integers(2**31)), dtype=np.float64)
    # non-trivial gamma/beta/bias so no block sits at a symmetric point
    for name, p in model.params.items():
        if not name.endswith(".kernel"):
            p += rng.uniform(-0.3, 0.3, size=p.shape)
    x = rng.uniform(-1, 1, size=(1, 2, 8, 8))
    y = (rng.random((1, 2, 8, 8)) < 0.5).astype(np.float64)
    mask_seed = int(rng.integers(2**31))

    def loss_and_grad(arrays):
        probs, ctx = unet.forward(model, x, "train", make_rng(mask_seed))
        loss, gp = bce_loss(probs, y)
        return loss, unet.backward(model, ctx, gp)

    return "unet_depth1_bce", loss_and_grad, model.params, DEFAULT_H


LAYER_OPS = ("conv2d", "conv_transpose2d", "maxpool2d", "batchnorm2d",
             "relu", "sigmoid", "dropout", "concat")


def run_suite(seed: int = 0, layer_tol: float = 1e-4, model_tol: float = 1e-3,
              backward_scale: dict[str, float] | None = None) -> list[GradCheckReport]:
    """Check every layer op and the composed depth-1 model at f64.

    ``backward_scale`` multiplies the analytic gradients of the named checks;
    it exists so a deliberately corrupted backward can be shown to fail.
    """
    scales = backward_scale or {}
    rng = make_rng(seed, GRADCHECK)
    reports = []
    for case_name, fn, point, h in _layer_cases(rng):
        if case_name in scales:
            fn = _rescaled(fn, scales[case_name])
        reports.append(finite_diff_check(fn, point, layer_tol, h, case_name))
    name, fn, point, h = _unet_case(rng)
    if name in scales:
        fn = _rescaled(fn, scales[name])
    reports.append(finite_diff_check(fn, point, model_tol, h, name))
    return reports


def _rescaled(fn: LossAndGrad, scale: float) -> LossAndGrad:
    def g(arrays):
        loss, grads = fn(arrays)
        return loss, {k: v * scale for k, v in grads.items()}

    return g
