"""Layer primitives with hand-written backward passes.

Every op follows the same convention: ``*_forward`` returns ``(out, ctx)``
and the matching ``*_backward(grad_out, ctx)`` returns the gradients of the
op's inputs. Tensors are numpy arrays in NCHW layout; f64 is used for
gradient checking and f32 for training. Ops preserve the input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
MODES = ("train", "eval")


class ShapeError(ValueError):
    """Raised when tensor shapes violate an op's contract."""


@dataclass
class Context:
    """Values saved by a forward call for its paired backward call."""

    op: str
    saved: dict[str, Any] = field(default_factory=dict)

    def expect(self, op: str) -> dict[str, Any]:
        if self.op != op:
            raise ValueError(f"{op} backward received a context from {self.op}")
        return self.saved


@dataclass
class ConvParams:
    """Kernel of shape (out_channels, in_channels, kH, kW) plus bias (out_channels,)."""

    kernel: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ShapeError(f"kernel must be rank 4, got shape {self.kernel.shape}")
        out_ch, _, kh, kw = self.kernel.shape
        if kh < 1 or kw < 1:
            raise ShapeError(f"kernel spatial dims must be >= 1, got {kh}x{kw}")
        if self.bias.shape != (out_ch,):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match out_channels {out_ch}"
            )
        if int(self.stride) != self.stride or self.stride < 1:
            raise ValueError(f"stride must be a positive integer, got {self.stride}")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")


@dataclass
class RunningStats:
    """Batch-norm running mean/variance. ``count`` is the number of train-mode updates."""

    mean: np.ndarray
    var: np.ndarray
    count: int = 0

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype), 0)


def _check_nchw(x: np.ndarray, name: str = "input") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be NCHW (rank 4), got shape {x.shape}")


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


# -- convolution -------------------------------------------------------------


def _same_padding(k: int) -> tuple[int, int]:
    total = k - 1
    return total // 2, total - total // 2


def conv2d_forward(x: np.ndarray, params: ConvParams):
    """2-D cross-correlation (no kernel flip) with zero padding.

    ``same`` padding pads ``k - 1`` zeros split as evenly as possible
    (extra zero at the bottom/right), so stride 1 preserves H and W.
    Computed as one GEMM over the im2col matrix, which is kept for backward.
    """
    _check_nchw(x)
    kernel, bias, s = params.kernel, params.bias, int(params.stride)
    out_ch, in_ch, kh, kw = kernel.shape
    n, c, h, w = x.shape
    if c != in_ch:
        raise ShapeError(f"input channel dim is {c} but kernel expects {in_ch} in_channels")
    if params.padding == "same":
        (pt, pb), (pl, pr) = _same_padding(kh), _same_padding(kw)
    else:
        pt = pb = pl = pr = 0
        if h < kh:
            raise ShapeError(f"input height {h} is smaller than kernel height {kh}")
        if w < kw:
            raise ShapeError(f"input width {w} is smaller than kernel width {kw}")
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if pt + pb + pl + pr else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    ho, wo = win.shape[2:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ kernel.reshape(out_ch, -1).T + bias
    out = np.ascontiguousarray(out.reshape(n, ho, wo, out_ch).transpose(0, 3, 1, 2))
    ctx = Context(
        "conv2d",
        dict(cols=cols, kernel=kernel, stride=s, pad=(pt, pl), xp_shape=xp.shape,
             x_shape=x.shape, out_shape=out.shape),
    )
    return out, ctx


def conv2d_backward(grad_out: np.ndarray, ctx: Context):
    """Returns ``(grad_input, grad_kernel, grad_bias)``."""
    sv = ctx.expect("conv2d")
    cols, kernel, s = sv["cols"], sv["kernel"], sv["stride"]
    if grad_out.shape != sv["out_shape"]:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output {sv['out_shape']}")
    n, out_ch, ho, wo = grad_out.shape
    _, c, kh, kw = kernel.shape
    g = grad_out.transpose(1, 0, 2, 3).reshape(out_ch, -1)  # O x (N Ho Wo)
    grad_bias = g.sum(axis=1)
    grad_kernel = (g @ cols).reshape(kernel.shape)
    # rows ordered (kh, kw, C) so every kernel tap is a contiguous C x N x Ho x Wo block
    dcols = kernel.transpose(2, 3, 1, 0).reshape(kh * kw * c, out_ch) @ g
    dcols = dcols.reshape(kh, kw, c, n, ho, wo)
    _, _, hp, wp = sv["xp_shape"]
    dxp = np.zeros((c, n, hp, wp), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[i, j]
    pt, pl = sv["pad"]
    h, w = sv["x_shape"][2:]
    grad_input = np.ascontiguousarray(dxp[:, :, pt : pt + h, pl : pl + w].transpose(1, 0, 2, 3))
    return grad_input, grad_kernel, grad_bias


def conv_transpose2d_forward(x: np.ndarray, params: ConvParams):
    """Transposed convolution without padding: out size is ``(H - 1) * stride + kH``.

    The kernel uses the same (out_channels, in_channels, kH, kW) layout as
    :func:`conv2d_forward`. With kernel 2 and stride 2, H and W double.
    """
    _check_nchw(x)
    if params.padding != "valid":
        raise ValueError("conv_transpose2d supports only padding='valid'")
    kernel, bias, s = params.kernel, params.bias, int(params.stride)
    out_ch, in_ch, kh, kw = kernel.shape
    n, c, h, w = x.shape
    if c != in_ch:
        raise ShapeError(f"input channel dim is {c} but kernel expects {in_ch} in_channels")
    ho, wo = (h - 1) * s + kh, (w - 1) * s + kw
    y = np.tensordot(x, kernel, axes=([1], [1]))  # N H W O kh kw
    y = y.transpose(0, 3, 1, 2, 4, 5)
    out = np.zeros((n, out_ch, ho, wo), dtype=np.result_type(x, kernel))
    for a in range(kh):
        for b in range(kw):
            out[:, :, a : a + s * h : s, b : b + s * w : s] += y[..., a, b]
    out += bias[None, :, None, None]
    return out, Context("conv_transpose2d", dict(x=x, kernel=kernel, stride=s))


def conv_transpose2d_backward(grad_out: np.ndarray, ctx: Context):
    """Returns ``(grad_input, grad_kernel, grad_bias)``."""
    sv = ctx.expect("conv_transpose2d")
    x, kernel, s = sv["x"], sv["kernel"], sv["stride"]
    n, c, h, w = x.shape
    out_ch, _, kh, kw = kernel.shape
    expected = (n, out_ch, (h - 1) * s + kh, (w - 1) * s + kw)
    if grad_out.shape != expected:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output {expected}")
    gathered = np.empty((n, out_ch, h, w, kh, kw), dtype=grad_out.dtype)
    for a in range(kh):
        for b in range(kw):
            gathered[..., a, b] = grad_out[:, :, a : a + s * h : s, b : b + s * w : s]
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    grad_input = np.tensordot(gathered, kernel, axes=([1, 4, 5], [0, 2, 3]))
    grad_input = np.ascontiguousarray(grad_input.transpose(0, 3, 1, 2))
    grad_kernel = np.tensordot(x, gathered, axes=([0, 2, 3], [0, 2, 3]))  # C O kh kw
    grad_kernel = np.ascontiguousarray(grad_kernel.transpose(1, 0, 2, 3))
    return grad_input, grad_kernel, grad_bias


# -- pooling -----------------------------------------------------------------


def maxpool2d_forward(x: np.ndarray, window: int = 2):
    """Non-overlapping max pool. Ties go to the first element in row-major window order."""
    _check_nchw(x)
    n, c, h, w = x.shape
    k = int(window)
    if h % k or w % k:
        raise ShapeError(f"spatial dims ({h}, {w}) must be multiples of the pool window {k}")
    ho, wo = h // k, w // k
    win = x.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, Context("maxpool2d", dict(idx=idx, window=k, x_shape=x.shape))


def maxpool2d_backward(grad_out: np.ndarray, ctx: Context) -> np.ndarray:
    sv = ctx.expect("maxpool2d")
    idx, k = sv["idx"], sv["window"]
    if grad_out.shape != idx.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match pooled shape {idx.shape}")
    n, c, h, w = sv["x_shape"]
    ho, wo = idx.shape[2:]
    dwin = np.zeros((n, c, ho, wo, k * k), dtype=grad_out.dtype)
    np.put_along_axis(dwin, idx[..., None], grad_out[..., None], axis=-1)
    return dwin.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


# -- normalization -----------------------------------------------------------


def batchnorm2d_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    stats: RunningStats,
    mode: str,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
):
    """Per-channel batch norm over (N, H, W).

    Train mode normalizes with the (biased) batch statistics and folds them
    into ``stats`` in place: ``running = momentum * running + (1 - momentum) * batch``.
    Eval mode normalizes with ``stats`` and refuses to run before any update.
    """
    _check_nchw(x)
    _check_mode(mode)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match channel dim {c}"
        )
    if mode == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        stats.mean[...] = momentum * stats.mean + (1 - momentum) * mean
        stats.var[...] = momentum * stats.var + (1 - momentum) * var
        stats.count += 1
    else:
        if stats.count == 0:
            raise RuntimeError("batch-norm running statistics are uninitialized; train first")
        mean, var = stats.mean.astype(x.dtype), stats.var.astype(x.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return out, Context("batchnorm2d", dict(xhat=xhat, inv_std=inv_std, gamma=gamma, mode=mode))


def batchnorm2d_backward(grad_out: np.ndarray, ctx: Context):
    """Returns ``(grad_input, grad_gamma, grad_beta)``."""
    sv = ctx.expect("batchnorm2d")
    xhat, inv_std, gamma = sv["xhat"], sv["inv_std"], sv["gamma"]
    if grad_out.shape != xhat.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match input {xhat.shape}")
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    dxhat = grad_out * gamma[None, :, None, None]
    if sv["mode"] == "eval":
        return dxhat * inv_std[None, :, None, None], grad_gamma, grad_beta
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    sum_d = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
    sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    grad_input = (inv_std / m)[None, :, None, None] * (m * dxhat - sum_d - xhat * sum_dx)
    return grad_input, grad_gamma, grad_beta


# -- activations and regularization -----------------------------------------


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0), Context("relu", dict(x=x))


def relu_backward(grad_out: np.ndarray, ctx: Context) -> np.ndarray:
    x = ctx.expect("relu")["x"]
    return grad_out * (x > 0)


def sigmoid_forward(x: np.ndarray):
    """Logistic function, branching on sign so ``exp`` never overflows.

    The result is clipped into the open interval (0, 1) of the dtype, so even
    inputs like +/-1e9 map strictly inside it.
    """
    out = np.empty_like(x)
    pos = x >= 0
    with np.errstate(under="ignore"):
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ez = np.exp(x[~pos])
        out[~pos] = ez / (1.0 + ez)
    info = np.finfo(out.dtype)
    np.clip(out, info.tiny, 1.0 - info.epsneg, out=out)
    return out, Context("sigmoid", dict(out=out))


def sigmoid_backward(grad_out: np.ndarray, ctx: Context) -> np.ndarray:
    s = ctx.expect("sigmoid")["out"]
    return grad_out * s * (1.0 - s)


def dropout_forward(x: np.ndarray, rate: float, mode: str, rng: np.random.Generator | None):
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` at train time.

    Eval mode, and rate 0, are exact identities and draw nothing from ``rng``.
    """
    _check_mode(mode)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must satisfy 0 <= rate < 1, got {rate}")
    if mode == "eval" or rate == 0.0:
        return x.copy(), Context("dropout", dict(mask=None))
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return x * mask, Context("dropout", dict(mask=mask))


def dropout_backward(grad_out: np.ndarray, ctx: Context) -> np.ndarray:
    mask = ctx.expect("dropout")["mask"]
    return grad_out.copy() if mask is None else grad_out * mask


def concat_channels(a: np.ndarray, b: np.ndarray):
    """Concatenate along C with ``a``'s channels first."""
    _check_nchw(a, "a")
    _check_nchw(b, "b")
    for axis, name in ((0, "N"), (2, "H"), (3, "W")):
        if a.shape[axis] != b.shape[axis]:
            raise ShapeError(f"concat mismatch on {name}: {a.shape[axis]} vs {b.shape[axis]}")
    return np.concatenate([a, b], axis=1), Context("concat", dict(split=a.shape[1]))


def concat_backward(grad_out: np.ndarray, ctx: Context):
    """Returns ``(grad_a, grad_b)``."""
    k = ctx.expect("concat")["split"]
    return grad_out[:, :k].copy(), grad_out[:, k:].copy()
