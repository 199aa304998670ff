"""Procedural landform tiles: height map, class mask and a shaded RGB rendering.

Each tile is a pure function of ``(seed, size)``. Heights come from
multi-octave value noise over an integer-hashed lattice; classes follow
fixed height bands; the RGB landform image is the class palette color,
hill-shaded from the height gradient and perturbed by per-pixel texture.
Both the height map and the image are snapped to the 8-bit grid at
generation time, so what is written to PNG is exactly what was generated.
"""

from __future__ import annotations

import io
import json
import os
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .rng import TEXTURE, make_rng

WATER, FOREST, SAND, MOUNTAIN = 0, 1, 2, 3
CLASS_NAMES = ("water", "forest", "sand", "mountain")
N_CLASSES = 4
PALETTE = {
    WATER: (60, 100, 200),
    FOREST: (34, 139, 34),
    SAND: (237, 201, 81),
    MOUNTAIN: (255, 218, 185),
}
PALETTE_ARRAY = np.array([PALETTE[c] for c in range(N_CLASSES)], dtype=np.uint8)

# lower bounds (inclusive) of the sand, forest and mountain height bands
SAND_FROM, FOREST_FROM, MOUNTAIN_FROM = 0.30, 0.40, 0.70

CELL = 64.0  # lattice spacing of the coarsest octave, in pixels
OCTAVES = 4
PERSISTENCE = 0.5
CONTRAST = 2.0
TEXTURE_AMPLITUDE = 0.08
MAX_DEPTH = 3  # tile sizes must be multiples of 2**MAX_DEPTH

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; uint64 arithmetic wraps modulo 2**64
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def _lattice(seed: int, octave: int, ix: np.ndarray, iy: np.ndarray) -> np.ndarray:
    """Uniform [0, 1) value at integer lattice points, hashed from all four keys."""
    with np.errstate(over="ignore"):
        h = _mix(np.full(ix.shape, seed, dtype=np.uint64) * _GOLDEN + np.uint64(octave))
        h = _mix(h ^ ix.astype(np.int64).view(np.uint64))
        h = _mix(h ^ (iy.astype(np.int64).view(np.uint64) * _GOLDEN))
    return (h >> np.uint64(11)).astype(np.float64) * 2.0**-53


def _fade(t):
    return t * t * t * (t * (t * 6 - 15) + 10)


def value_noise(seed: int, x, y, octaves: int = OCTAVES, persistence: float = PERSISTENCE,
                contrast: float = CONTRAST):
    """Multi-octave value noise in [0, 1].

    ``x`` and ``y`` are broadcastable coordinates in lattice units of the
    first octave; octave ``o`` samples at ``2**o`` times the frequency with
    weight ``persistence**o``. The normalized sum is stretched by
    ``contrast`` about 0.5 and clipped to [0, 1]; octave averaging otherwise
    piles nearly all mass into the middle height band. Scalars in, scalar out.
    """
    if octaves < 1:
        raise ValueError(f"octaves must be >= 1, got {octaves}")
    x, y = np.broadcast_arrays(np.asarray(x, np.float64), np.asarray(y, np.float64))
    total = np.zeros(x.shape)
    norm = 0.0
    amp = 1.0
    for o in range(octaves):
        fx, fy = x * 2.0**o, y * 2.0**o
        x0, y0 = np.floor(fx), np.floor(fy)
        tx, ty = _fade(fx - x0), _fade(fy - y0)
        ix, iy = x0.astype(np.int64), y0.astype(np.int64)
        v00 = _lattice(seed, o, ix, iy)
        v10 = _lattice(seed, o, ix + 1, iy)
        v01 = _lattice(seed, o, ix, iy + 1)
        v11 = _lattice(seed, o, ix + 1, iy + 1)
        top = v00 + tx * (v10 - v00)
        bot = v01 + tx * (v11 - v01)
        total += amp * (top + ty * (bot - top))
        norm += amp
        amp *= persistence
    out = np.clip(0.5 + contrast * (total / norm - 0.5), 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def classify_height(h):
    """Height band -> class id. Bands are half-open with inclusive lower bounds.

    ``[0, .30)`` water, ``[.30, .40)`` sand, ``[.40, .70)`` forest, ``[.70, 1]`` mountain.
    """
    arr = np.asarray(h, dtype=np.float64)
    if np.any(~((arr >= 0.0) & (arr <= 1.0))):
        bad = arr[~((arr >= 0.0) & (arr <= 1.0))].flat[0]
        raise ValueError(f"height must lie in [0, 1], got {bad}")
    cls = np.full(arr.shape, WATER, dtype=np.uint8)
    cls[arr >= SAND_FROM] = SAND
    cls[arr >= FOREST_FROM] = FOREST
    cls[arr >= MOUNTAIN_FROM] = MOUNTAIN
    return int(cls) if cls.ndim == 0 else cls


@dataclass
class TileTriplet:
    landform: np.ndarray  # 3 x S x S, float32 in [0, 1]
    height: np.ndarray  # 1 x S x S, float32 in [0, 1]
    mask: np.ndarray  # S x S, uint8 class ids

    @property
    def size(self) -> int:
        return self.mask.shape[0]

    def model_input(self, use_height: bool = True) -> np.ndarray:
        """Stack RGB (+ height) into a C x S x S float32 array."""
        if use_height:
            return np.concatenate([self.landform, self.height], axis=0)
        return self.landform.copy()


def _check_size(size: int) -> None:
    mult = 2**MAX_DEPTH
    if size < mult or size % mult:
        raise ValueError(f"tile size {size} must be a positive multiple of {mult}")


_LIGHT = np.array([-1.0, -1.0, 1.5]) / np.linalg.norm([-1.0, -1.0, 1.5])


def hillshade(height: np.ndarray, relief: float = 12.0) -> np.ndarray:
    """Lambertian shading of the height field lit from the north-west, in [0, 1].

    A flat field shades to ``_LIGHT[2]``.
    """
    dy, dx = np.gradient(height * relief)
    normal = np.stack([-dx, -dy, np.ones_like(height)])
    normal /= np.linalg.norm(normal, axis=0)
    return np.clip(np.tensordot(_LIGHT, normal, axes=1), 0.0, 1.0)


def generate_tile(seed: int, size: int = 64) -> TileTriplet:
    _check_size(size)
    coords = np.arange(size, dtype=np.float64) / CELL
    height = value_noise(seed, coords[None, :], coords[:, None])
    height = np.round(height * 255.0) / 255.0
    mask = classify_height(height)

    shade = 1.0 + 0.6 * (hillshade(height) - _LIGHT[2])
    color = PALETTE_ARRAY[mask].astype(np.float64).transpose(2, 0, 1) / 255.0
    texture = make_rng(seed, TEXTURE).uniform(
        -TEXTURE_AMPLITUDE, TEXTURE_AMPLITUDE, size=(3, size, size)
    )
    img = np.clip(color * shade[None] + texture, 0.0, 1.0)
    img = np.round(img * 255.0) / 255.0
    return TileTriplet(img.astype(np.float32), height[None].astype(np.float32), mask)


# -- image encoding ----------------------------------------------------------


def _png_bytes(arr: np.ndarray, mode: str) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def _read_png(data: bytes | os.PathLike | str) -> np.ndarray:
    src = io.BytesIO(data) if isinstance(data, (bytes, bytearray)) else data
    with Image.open(src) as im:
        return np.array(im)


def encode_mask(mask: np.ndarray) -> bytes:
    """Class-id mask -> single-channel 8-bit PNG whose pixel values are the ids."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if mask.size and (mask.min() < 0 or mask.max() >= N_CLASSES):
        bad = np.argwhere((mask < 0) | (mask >= N_CLASSES))[0]
        raise ValueError(f"invalid class id {mask[tuple(bad)]} at (row, col) {tuple(bad)}")
    return _png_bytes(mask.astype(np.uint8), "L")


def decode_mask(data) -> np.ndarray:
    arr = _read_png(data)
    if arr.ndim != 2:
        raise ValueError(f"mask image must be single-channel, got shape {arr.shape}")
    bad = np.argwhere(arr >= N_CLASSES)
    if len(bad):
        r, c = bad[0]
        raise ValueError(f"unknown mask pixel value {arr[r, c]} at (row, col) ({r}, {c})")
    return arr.astype(np.uint8)


def render_mask(mask: np.ndarray) -> np.ndarray:
    """Class-id mask -> H x W x 3 uint8 palette rendering."""
    return PALETTE_ARRAY[np.asarray(mask)]


def encode_rgb_mask(mask: np.ndarray) -> bytes:
    return _png_bytes(render_mask(mask), "RGB")


def encode_image(img: np.ndarray) -> bytes:
    """3 x H x W float image in [0, 1] -> 8-bit RGB PNG."""
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    return _png_bytes(q.transpose(1, 2, 0), "RGB")


def decode_image(data) -> np.ndarray:
    arr = _read_png(data)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an RGB image, got shape {arr.shape}")
    return (arr.transpose(2, 0, 1).astype(np.float32)) / 255.0


def encode_height(height: np.ndarray) -> bytes:
    """1 x H x W float heights in [0, 1] -> 8-bit grayscale PNG."""
    q = np.round(np.clip(height[0], 0.0, 1.0) * 255.0).astype(np.uint8)
    return _png_bytes(q, "L")


def decode_height(data) -> np.ndarray:
    arr = _read_png(data)
    if arr.ndim != 2:
        raise ValueError(f"height image must be single-channel, got shape {arr.shape}")
    return arr[None].astype(np.float32) / 255.0


# -- dataset on disk ---------------------------------------------------------

MANIFEST = "manifest.json"
SPLITS = ("train", "val")
KINDS = ("landform", "height", "mask")


def write_bytes_atomic(path: Path, data: bytes) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def split_counts(n_tiles: int, split_fraction: float) -> tuple[int, int]:
    n_train = int(round(n_tiles * split_fraction))
    return n_train, n_tiles - n_train


def tile_path(root, split: str, kind: str, tile_id: int) -> Path:
    return Path(root) / split / kind / f"{tile_id:05d}.png"


def write_dataset(n_tiles: int, seed: int, size: int, split_fraction: float, root,
                  overwrite: bool = False) -> dict:
    """Generate ``n_tiles`` tiles under ``root`` and return the manifest.

    Tile ``i`` is ``generate_tile(seed + i, size)``; ids ``0 .. n_train-1``
    form the train split and the rest the validation split. Layout is
    ``root/{train,val}/{landform,height,mask}/{id:05}.png`` plus
    ``root/manifest.json``, which is written last.
    """
    if n_tiles < 1:
        raise ValueError(f"n_tiles must be >= 1, got {n_tiles}")
    if not 0.0 < split_fraction < 1.0:
        raise ValueError(f"split_fraction must lie in (0, 1), got {split_fraction}")
    _check_size(size)
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        if not overwrite:
            raise FileExistsError(f"{root} is not empty; pass overwrite to replace it")
        for name in (*SPLITS, MANIFEST):
            target = root / name
            if target.is_dir():
                shutil.rmtree(target)
            elif target.exists():
                target.unlink()
    n_train, _ = split_counts(n_tiles, split_fraction)
    ids = {"train": list(range(n_train)), "val": list(range(n_train, n_tiles))}
    for split in SPLITS:
        for kind in KINDS:
            (root / split / kind).mkdir(parents=True, exist_ok=True)
    for split, split_ids in ids.items():
        for i in split_ids:
            tile = generate_tile(seed + i, size)
            write_bytes_atomic(tile_path(root, split, "landform", i), encode_image(tile.landform))
            write_bytes_atomic(tile_path(root, split, "height", i), encode_height(tile.height))
            write_bytes_atomic(tile_path(root, split, "mask", i), encode_mask(tile.mask))
    manifest = {
        "format": "landseg-dataset",
        "version": 1,
        "generator": {
            "seed": seed,
            "size": size,
            "n_tiles": n_tiles,
            "split_fraction": split_fraction,
            "cell": CELL,
            "octaves": OCTAVES,
            "persistence": PERSISTENCE,
            "contrast": CONTRAST,
            "texture_amplitude": TEXTURE_AMPLITUDE,
            "bands": {"sand": SAND_FROM, "forest": FOREST_FROM, "mountain": MOUNTAIN_FROM},
        },
        "classes": {str(c): {"name": CLASS_NAMES[c], "rgb": list(PALETTE[c])} for c in range(N_CLASSES)},
        "splits": ids,
    }
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    write_bytes_atomic(root / MANIFEST, text.encode())
    return manifest


def read_manifest(root) -> dict:
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"no {MANIFEST} under {root}")
    return json.loads(path.read_text())


def load_tile(root, split: str, tile_id: int) -> TileTriplet:
    return TileTriplet(
        decode_image(tile_path(root, split, "landform", tile_id)),
        decode_height(tile_path(root, split, "height", tile_id)),
        decode_mask(tile_path(root, split, "mask", tile_id)),
    )


def load_split(root, split: str, use_height: bool = True):
    """Load a whole split as ``(ids, inputs N x C x S x S float32, masks N x S x S uint8)``.

    Raises if the manifest lists tiles that are missing on disk.
    """
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
    ids = read_manifest(root)["splits"][split]
    if not ids:
        raise ValueError(f"split {split!r} under {root} is empty")
    tiles = [load_tile(root, split, i) for i in ids]
    x = np.stack([t.model_input(use_height) for t in tiles])
    y = np.stack([t.mask for t in tiles])
    return list(ids), x, y
