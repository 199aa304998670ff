"""U-Net built from the primitives in :mod:`landseg.layers`.

Layout for ``depth`` levels with ``base_filters = b``::

    enc{i}       Conv2dBlock -> b * 2**i channels, then maxpool(2), dropout
    bottleneck   Conv2dBlock -> b * 2**depth channels
    dec{i}       convT(2, stride 2) -> concat(upsampled, enc{i} output) -> dropout
                 -> Conv2dBlock -> b * 2**i channels          (i = depth-1 .. 0)
    head         1x1 conv -> n_classes channels, sigmoid

A Conv2dBlock is (3x3 same conv -> batch norm -> ReLU) twice. Parameter names
follow ``enc{i}.conv{1,2}.{kernel,bias}``, ``enc{i}.bn{1,2}.{gamma,beta}``,
``bottleneck.*``, ``dec{i}.up.{kernel,bias}``, ``dec{i}.conv{1,2}.*``,
``dec{i}.bn{1,2}.*`` and ``head.{kernel,bias}``. Batch-norm running
statistics are keyed by their layer prefix (``enc0.bn1`` ...).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import layers as L
from .layers import ConvParams, Context, RunningStats, ShapeError
from .rng import INIT, make_rng


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_filters: int = 16
    in_channels: int = 4
    n_classes: int = 4
    dropout_rate: float = 0.07
    use_batchnorm: bool = True
    input_size: int = 64

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_filters < 1:
            raise ValueError(f"base_filters must be >= 1, got {self.base_filters}")
        if self.in_channels < 1 or self.n_classes < 1:
            raise ValueError("in_channels and n_classes must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must satisfy 0 <= rate < 1, got {self.dropout_rate}")
        if self.input_size < 1 or self.input_size % (2**self.depth):
            raise ValueError(
                f"input_size {self.input_size} must be a positive multiple of "
                f"2**depth = {2**self.depth}"
            )

    def channels(self, level: int) -> int:
        """Channel count at encoder ``level``; ``level == depth`` is the bottleneck."""
        return self.base_filters * 2**level

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class UNetModel:
    config: UNetConfig
    params: dict[str, np.ndarray]
    bn_stats: dict[str, RunningStats]

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


def _block_specs(prefix: str, cin: int, cout: int, use_bn: bool):
    specs = []
    for k, c_in in ((1, cin), (2, cout)):
        specs.append((f"{prefix}.conv{k}.kernel", (cout, c_in, 3, 3), "he"))
        specs.append((f"{prefix}.conv{k}.bias", (cout,), "zeros"))
        if use_bn:
            specs.append((f"{prefix}.bn{k}.gamma", (cout,), "ones"))
            specs.append((f"{prefix}.bn{k}.beta", (cout,), "zeros"))
    return specs


def parameter_specs(config: UNetConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Canonical ``(name, shape, init)`` list; a pure function of the config."""
    bn = config.use_batchnorm
    specs = []
    cin = config.in_channels
    for i in range(config.depth):
        specs += _block_specs(f"enc{i}", cin, config.channels(i), bn)
        cin = config.channels(i)
    specs += _block_specs("bottleneck", cin, config.channels(config.depth), bn)
    for i in reversed(range(config.depth)):
        c = config.channels(i)
        # transposed conv: fan-in per output pixel is in_channels (kernel == stride)
        specs.append((f"dec{i}.up.kernel", (c, config.channels(i + 1), 2, 2), "he_t"))
        specs.append((f"dec{i}.up.bias", (c,), "zeros"))
        specs += _block_specs(f"dec{i}", 2 * c, c, bn)
    specs.append(("head.kernel", (config.n_classes, config.channels(0), 1, 1), "he"))
    specs.append(("head.bias", (config.n_classes,), "zeros"))
    return specs


def bn_layers(config: UNetConfig) -> list[tuple[str, int]]:
    """``(prefix, channels)`` of every batch-norm layer, in canonical order."""
    if not config.use_batchnorm:
        return []
    out = []
    for name, shape, _ in parameter_specs(config):
        if name.endswith(".gamma"):
            out.append((name[: -len(".gamma")], shape[0]))
    return out


def build_unet(config: UNetConfig, seed: int = 0, dtype=np.float32) -> UNetModel:
    """Create a model with He-uniform kernels, zero biases, unit gamma, zero beta.

    Draws are made in f64 from the ``(seed, INIT)`` stream in canonical
    parameter order and then cast, so f32 and f64 builds share values.
    """
    config.validate()
    rng = make_rng(seed, INIT)
    params = {}
    for name, shape, init in parameter_specs(config):
        if init == "he":
            fan_in = shape[1] * shape[2] * shape[3]
        elif init == "he_t":
            fan_in = shape[1]
        if init in ("he", "he_t"):
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        elif init == "ones":
            params[name] = np.ones(shape, dtype)
        else:
            params[name] = np.zeros(shape, dtype)
    stats = {prefix: RunningStats.fresh(c, dtype) for prefix, c in bn_layers(config)}
    return UNetModel(config, params, stats)


# -- blocks ------------------------------------------------------------------


def conv2d_block(x: np.ndarray, prefix: str, model: UNetModel, mode: str):
    """(3x3 same conv -> batch norm -> ReLU) x 2 using the ``prefix`` parameters."""
    p = model.params
    steps = []
    for k in (1, 2):
        conv = ConvParams(p[f"{prefix}.conv{k}.kernel"], p[f"{prefix}.conv{k}.bias"], 1, "same")
        x, c = L.conv2d_forward(x, conv)
        steps.append((f"{prefix}.conv{k}", c))
        if model.config.use_batchnorm:
            bn = f"{prefix}.bn{k}"
            x, c = L.batchnorm2d_forward(
                x, p[f"{bn}.gamma"], p[f"{bn}.beta"], model.bn_stats[bn], mode
            )
            steps.append((bn, c))
        x, c = L.relu_forward(x)
        steps.append(("relu", c))
    return x, Context("conv2d_block", dict(prefix=prefix, steps=steps))


def conv2d_block_backward(grad: np.ndarray, ctx: Context, grads: dict) -> np.ndarray:
    """Backprop through a block, writing parameter gradients into ``grads``."""
    for name, c in reversed(ctx.expect("conv2d_block")["steps"]):
        if c.op == "relu":
            grad = L.relu_backward(grad, c)
        elif c.op == "batchnorm2d":
            grad, grads[f"{name}.gamma"], grads[f"{name}.beta"] = L.batchnorm2d_backward(grad, c)
        else:
            grad, grads[f"{name}.kernel"], grads[f"{name}.bias"] = L.conv2d_backward(grad, c)
    return grad


# -- full network ------------------------------------------------------------


def _check_input(model: UNetModel, x: np.ndarray) -> None:
    cfg = model.config
    if x.ndim != 4:
        raise ShapeError(f"batch must be NCHW (rank 4), got shape {x.shape}")
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(f"batch has {x.shape[1]} channels, model expects {cfg.in_channels}")
    mult = 2**cfg.depth
    for dim, size in zip("HW", x.shape[2:]):
        if size < mult or size % mult:
            raise ShapeError(f"batch {dim} = {size} must be a positive multiple of {mult}")


def forward(model: UNetModel, batch: np.ndarray, mode: str = "eval", rng=None):
    """Run the network; returns per-class sigmoid probabilities and a context.

    ``rng`` drives the dropout masks in train mode. Spatial sizes may be any
    multiple of ``2**depth``; the training tile size is ``config.input_size``.
    """
    _check_input(model, batch)
    cfg, p = model.config, model.params
    x = batch.astype(model.dtype, copy=False)
    rate = cfg.dropout_rate
    skips, enc, dec = [], [], {}
    for i in range(cfg.depth):
        x, cb = conv2d_block(x, f"enc{i}", model, mode)
        skips.append(x)
        x, cp = L.maxpool2d_forward(x, 2)
        x, cd = L.dropout_forward(x, rate, mode, rng)
        enc.append((cb, cp, cd))
    x, cbot = conv2d_block(x, "bottleneck", model, mode)
    skip_shapes = {}
    for i in reversed(range(cfg.depth)):
        up = ConvParams(p[f"dec{i}.up.kernel"], p[f"dec{i}.up.bias"], 2, "valid")
        x, cu = L.conv_transpose2d_forward(x, up)
        skip_shapes[i] = (x.shape, skips[i].shape)
        x, cc = L.concat_channels(x, skips[i])
        x, cd = L.dropout_forward(x, rate, mode, rng)
        x, cb = conv2d_block(x, f"dec{i}", model, mode)
        dec[i] = (cu, cc, cd, cb)
    logits, chead = L.conv2d_forward(x, ConvParams(p["head.kernel"], p["head.bias"], 1, "same"))
    probs, cs = L.sigmoid_forward(logits)
    ctx = Context(
        "unet",
        dict(config=cfg, enc=enc, bottleneck=cbot, dec=dec, head=chead, sigmoid=cs,
             skip_shapes=skip_shapes, out_shape=probs.shape),
    )
    return probs, ctx


def backward(model: UNetModel, ctx: Context, grad_probs: np.ndarray, return_input_grad=False):
    """Gradients of a scalar loss w.r.t. every parameter, given ``d loss / d probs``.

    Encoder outputs feed both the pooling path and a skip connection; their
    two gradient contributions are summed.
    """
    sv = ctx.expect("unet")
    if sv["config"] != model.config:
        raise ValueError("context was produced by a model with a different config")
    if grad_probs.shape != sv["out_shape"]:
        raise ShapeError(f"grad_probs shape {grad_probs.shape} != output shape {sv['out_shape']}")
    depth = model.config.depth
    grads: dict[str, np.ndarray] = {}
    g = L.sigmoid_backward(grad_probs.astype(model.dtype, copy=False), sv["sigmoid"])
    g, grads["head.kernel"], grads["head.bias"] = L.conv2d_backward(g, sv["head"])
    skip_grads = {}
    for i in range(depth):
        cu, cc, cd, cb = sv["dec"][i]
        g = conv2d_block_backward(g, cb, grads)
        g = L.dropout_backward(g, cd)
        g, skip_grads[i] = L.concat_backward(g, cc)
        g, grads[f"dec{i}.up.kernel"], grads[f"dec{i}.up.bias"] = L.conv_transpose2d_backward(g, cu)
    g = conv2d_block_backward(g, sv["bottleneck"], grads)
    for i in reversed(range(depth)):
        cb, cp, cd = sv["enc"][i]
        g = L.dropout_backward(g, cd)
        g = L.maxpool2d_backward(g, cp)
        g = g + skip_grads[i]
        g = conv2d_block_backward(g, cb, grads)
    ordered = {name: grads[name] for name in model.params}
    if return_input_grad:
        return ordered, g
    return ordered


def encode_bottleneck(model: UNetModel, image: np.ndarray) -> np.ndarray:
    """Eval-mode encoder + bottleneck, globally average-pooled per channel.

    ``image`` is CHW or 1xCxHxW. Returns a vector of length ``base * 2**depth``.
    """
    x = image[None] if image.ndim == 3 else image
    if x.shape[0] != 1:
        raise ShapeError(f"encode_bottleneck takes a single image, got batch of {x.shape[0]}")
    _check_input(model, x)
    x = x.astype(model.dtype, copy=False)
    for i in range(model.config.depth):
        x, _ = conv2d_block(x, f"enc{i}", model, "eval")
        x, _ = L.maxpool2d_forward(x, 2)
    x, _ = conv2d_block(x, "bottleneck", model, "eval")
    return x.mean(axis=(0, 2, 3))
