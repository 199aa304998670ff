"""Content-based retrieval over binary hashes of bottleneck features.

Each image is described by the eval-mode, globally average-pooled
bottleneck of a trained U-Net. Dimension ``d`` is binarized as
``v[d] > threshold[d]`` where the threshold is the corpus median, and
images are ranked by Hamming distance (ties by ascending id).

Index file (little-endian)::

    b"TSEGIDX1"  u32 version  32-byte model fingerprint
    u32 bits, bits x f32 thresholds
    u32 entry_count, then per entry: u32 id_len, id bytes, ceil(bits / 8) packed bit bytes
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .checkpoint import model_fingerprint
from .data import write_bytes_atomic
from .unet import UNetModel, encode_bottleneck

MAGIC = b"TSEGIDX1"
VERSION = 1


class IndexFormatError(ValueError):
    pass


class StaleIndexError(ValueError):
    """The index was built with a different model than the one supplied."""


@dataclass
class HashIndex:
    bits: int
    thresholds: np.ndarray  # (bits,) float32
    ids: list[str]
    codes: np.ndarray  # (entries, bits) uint8 in {0, 1}
    fingerprint: bytes

    def __len__(self) -> int:
        return len(self.ids)

    def __eq__(self, other) -> bool:
        if not isinstance(other, HashIndex):
            return NotImplemented
        return (self.bits == other.bits and self.ids == other.ids
                and self.fingerprint == other.fingerprint
                and np.array_equal(self.thresholds, other.thresholds)
                and np.array_equal(self.codes, other.codes))


def compute_thresholds(descriptors: np.ndarray) -> np.ndarray:
    """Per-dimension median of an (M, D) corpus, M >= 2, as float32."""
    d = np.asarray(descriptors)
    if d.ndim != 2 or d.shape[0] == 0:
        raise ValueError("descriptor corpus is empty")
    if d.shape[0] < 2:
        raise ValueError(f"need at least 2 descriptors to set thresholds, got {d.shape[0]}")
    return np.median(d.astype(np.float64), axis=0).astype(np.float32)


def hash_descriptor(v: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float32)
    if v.shape != thresholds.shape:
        raise ValueError(f"descriptor length {v.shape} != threshold length {thresholds.shape}")
    return (v > thresholds).astype(np.uint8)


def hamming(a: np.ndarray, b: np.ndarray) -> int:
    return int(np.count_nonzero(np.asarray(a) != np.asarray(b)))


def describe(model: UNetModel, image: np.ndarray) -> np.ndarray:
    return encode_bottleneck(model, image).astype(np.float32)


def build_index(model: UNetModel, images: Iterable[tuple[str, np.ndarray]]) -> HashIndex:
    """Describe every ``(id, C x H x W image)``, set median thresholds, hash."""
    items = list(images)
    if not items:
        raise ValueError("cannot build an index from an empty image set")
    ids = [str(i) for i, _ in items]
    if len(set(ids)) != len(ids):
        raise ValueError("image ids must be unique")
    desc = np.stack([describe(model, img) for _, img in items])
    thr = compute_thresholds(desc)
    codes = (desc > thr).astype(np.uint8)
    return HashIndex(thr.size, thr, ids, codes, model_fingerprint(model))


def query(index: HashIndex, model: UNetModel, image: np.ndarray, k: int) -> list[tuple[str, int]]:
    """Top ``min(k, len(index))`` entries as ``(id, hamming distance)``."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if model_fingerprint(model) != index.fingerprint:
        raise StaleIndexError("index was built with a different model checkpoint; rebuild it")
    code = hash_descriptor(describe(model, image), index.thresholds)
    dist = np.count_nonzero(index.codes != code[None], axis=1)
    order = sorted(range(len(index)), key=lambda i: (int(dist[i]), index.ids[i]))
    return [(index.ids[i], int(dist[i])) for i in order[:k]]


def majority_class_precision(index: HashIndex, model: UNetModel, images: dict[str, np.ndarray],
                             majority: dict[str, int], k: int = 5) -> float:
    """Mean fraction of each query's k nearest *other* entries sharing its majority class."""
    scores = []
    for qid, img in images.items():
        hits = [i for i, _ in query(index, model, img, k + 1) if i != qid][:k]
        scores.append(np.mean([majority[i] == majority[qid] for i in hits]))
    return float(np.mean(scores))


# -- persistence -------------------------------------------------------------


def dumps(index: HashIndex) -> bytes:
    if len(index.fingerprint) != 32:
        raise ValueError("fingerprint must be 32 bytes")
    parts = [MAGIC, struct.pack("<I", VERSION), index.fingerprint, struct.pack("<I", index.bits),
             index.thresholds.astype("<f4").tobytes(), struct.pack("<I", len(index))]
    for id_, code in zip(index.ids, index.codes):
        key = id_.encode()
        parts += [struct.pack("<I", len(key)), key, np.packbits(code).tobytes()]
    return b"".join(parts)


def loads(data: bytes) -> HashIndex:
    """Parse an index file, rejecting bad magic, unknown versions and truncation."""
    if data[:8] != MAGIC:
        raise IndexFormatError("bad magic: not a TSEGIDX1 index file")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise IndexFormatError("index file is truncated")
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise IndexFormatError(f"unsupported index version {version} (expected {VERSION})")
    fingerprint = take(32)
    (bits,) = struct.unpack("<I", take(4))
    thresholds = np.frombuffer(take(4 * bits), dtype="<f4").astype(np.float32)
    (count,) = struct.unpack("<I", take(4))
    nbytes = (bits + 7) // 8
    ids, codes = [], np.zeros((count, bits), dtype=np.uint8)
    for e in range(count):
        (klen,) = struct.unpack("<I", take(4))
        ids.append(take(klen).decode())
        codes[e] = np.unpackbits(np.frombuffer(take(nbytes), dtype=np.uint8))[:bits]
    if pos != len(data):
        raise IndexFormatError("trailing bytes after the last index entry")
    return HashIndex(bits, thresholds, ids, codes, fingerprint)


def save_index(path, index: HashIndex) -> None:
    write_bytes_atomic(Path(path), dumps(index))


def load_index(path) -> HashIndex:
    return loads(Path(path).read_bytes())
