"""Binary checkpoint format.

Layout (little-endian)::

    b"UNETCKPT"  u32 version
    u32 header_len, header_len bytes of UTF-8 JSON  {config, adam, metadata}
    u32 tensor_count, then per tensor:
        u16 name_len, name bytes, u8 dtype code, u8 rank, rank x u32 dims, raw values
    32-byte SHA-256 of every preceding byte

Tensors: model parameters under their canonical names, batch-norm running
statistics as ``{layer}.running_mean`` / ``.running_var`` / ``.count``, and,
when optimizer state is included, ``adam.m.{name}`` / ``adam.v.{name}``.
Serialization is canonical, so save -> load -> save reproduces the bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import write_bytes_atomic
from .layers import RunningStats
from .optim import AdamState
from .unet import UNetConfig, UNetModel, bn_layers, parameter_specs

MAGIC = b"UNETCKPT"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
CODES = {dt: code for code, dt in DTYPES.items()}


class CheckpointError(ValueError):
    """The file is not a readable checkpoint."""


@dataclass
class Checkpoint:
    model: UNetModel
    adam: AdamState | None = None
    metadata: dict = field(default_factory=dict)


def _tensor_record(name: str, arr: np.ndarray) -> bytes:
    dt = np.asarray(arr).dtype.newbyteorder("<")
    if dt not in CODES:
        raise TypeError(f"unsupported dtype {arr.dtype} for {name}")
    arr = np.asarray(arr, dtype=dt, order="C")
    key = name.encode()
    head = struct.pack("<H", len(key)) + key + struct.pack("<BB", CODES[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def _tensors(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    model = ckpt.model
    out = list(model.params.items())
    for prefix, _ in bn_layers(model.config):
        st = model.bn_stats[prefix]
        out += [
            (f"{prefix}.running_mean", st.mean),
            (f"{prefix}.running_var", st.var),
            (f"{prefix}.count", np.array(st.count, dtype=np.int64)),
        ]
    if ckpt.adam is not None:
        out += [(f"adam.m.{k}", ckpt.adam.m[k]) for k in model.params]
        out += [(f"adam.v.{k}", ckpt.adam.v[k]) for k in model.params]
    return out


def dumps(ckpt: Checkpoint) -> bytes:
    adam = None
    if ckpt.adam is not None:
        a = ckpt.adam
        adam = dict(alpha=a.alpha, beta1=a.beta1, beta2=a.beta2, epsilon=a.epsilon, t=a.t)
    header = json.dumps(
        {"config": ckpt.model.config.to_dict(), "adam": adam, "metadata": ckpt.metadata},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    tensors = _tensors(ckpt)
    body = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(header)), header,
            struct.pack("<I", len(tensors))]
    body += [_tensor_record(name, arr) for name, arr in tensors]
    blob = b"".join(body)
    return blob + hashlib.sha256(blob).digest()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data: bytes) -> Checkpoint:
    """Parse and validate a checkpoint; raises :class:`CheckpointError` on any defect."""
    if len(data) < len(MAGIC) + 4 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic: not a UNETCKPT checkpoint")
    (version,) = struct.unpack_from("<I", data, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if len(data) < len(MAGIC) + 4 + 32:
        raise CheckpointError("checkpoint is truncated")
    blob, digest = data[:-32], data[-32:]
    if hashlib.sha256(blob).digest() != digest:
        raise CheckpointError("checksum mismatch: checkpoint is corrupt or truncated")

    r = _Reader(blob)
    r.take(len(MAGIC) + 4)
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen).decode())
        config = UNetConfig(**header["config"])
    except (ValueError, TypeError, KeyError) as exc:
        raise CheckpointError(f"invalid checkpoint header: {exc}") from exc
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        code, rank = r.unpack("<BB")
        if code not in DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for tensor {name}")
        dims = r.unpack(f"<{rank}I")
        dt = DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(dims)
        tensors[name] = arr.astype(dt.newbyteorder("="))
    if r.pos != len(blob):
        raise CheckpointError("trailing bytes after the last tensor record")

    params = {}
    for name, shape, _ in parameter_specs(config):
        if name not in tensors:
            raise CheckpointError(f"missing parameter {name}")
        if tensors[name].shape != shape:
            raise CheckpointError(
                f"parameter {name} has shape {tensors[name].shape}, config implies {shape}"
            )
        params[name] = tensors.pop(name)
    stats = {}
    for prefix, c in bn_layers(config):
        try:
            mean = tensors.pop(f"{prefix}.running_mean")
            var = tensors.pop(f"{prefix}.running_var")
            cnt = tensors.pop(f"{prefix}.count")
        except KeyError as exc:
            raise CheckpointError(f"missing running statistics for {prefix}") from exc
        if mean.shape != (c,) or var.shape != (c,) or cnt.shape != ():
            raise CheckpointError(f"running statistics for {prefix} do not have {c} channels")
        stats[prefix] = RunningStats(mean, var, int(cnt))
    adam = None
    if header.get("adam") is not None:
        adam = AdamState(**header["adam"])
        for k in params:
            try:
                adam.m[k] = tensors.pop(f"adam.m.{k}")
                adam.v[k] = tensors.pop(f"adam.v.{k}")
            except KeyError as exc:
                raise CheckpointError(f"missing optimizer state for {k}") from exc
    if tensors:
        raise CheckpointError(f"unexpected tensors in checkpoint: {sorted(tensors)[:5]}")
    return Checkpoint(UNetModel(config, params, stats), adam, header.get("metadata") or {})


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    write_bytes_atomic(Path(path), dumps(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return loads(Path(path).read_bytes())


def model_fingerprint(model: UNetModel) -> bytes:
    """SHA-256 over the config, parameters and running statistics only."""
    return hashlib.sha256(dumps(Checkpoint(model))).digest()
