"""Contrast enhancement, resizing and [-1, 1] normalization of radiographs.

The pipeline order is fixed: CLAHE at native resolution, then bilinear
resize, then normalization. Masks follow the resize with nearest-neighbour
sampling so they stay one-hot.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from cxrseg.core import GrayImage, LabelMask, NormalizedImage, decode_argmax, one_hot_encode


@dataclass(frozen=True)
class ClaheConfig:
    clip_limit: float = 2.0
    tile_grid: tuple[int, int] = (8, 8)
    bins: int = 256

    def __post_init__(self):
        object.__setattr__(self, "tile_grid", tuple(int(t) for t in self.tile_grid))
        if not self.clip_limit > 0:
            raise ValueError("clip_limit must be positive")
        if len(self.tile_grid) != 2 or min(self.tile_grid) < 1:
            raise ValueError("tile_grid must be two positive integers")
        if self.bins < 2:
            raise ValueError("bins must be at least 2")


@dataclass(frozen=True)
class PreprocessConfig:
    clahe: ClaheConfig = field(default_factory=ClaheConfig)
    target_size: int = 512
    enabled: bool = True
    invert_jsrt: bool = True

    def __post_init__(self):
        if isinstance(self.clahe, dict):
            object.__setattr__(self, "clahe", ClaheConfig(**self.clahe))
        if self.target_size <= 0:
            raise ValueError("target_size must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# histogram equalization


def _bin_index(pixels: np.ndarray, bit_depth: int, bins: int) -> np.ndarray:
    return (pixels.astype(np.int64) * bins) >> bit_depth


def equalization_lut(hist: np.ndarray, max_value: int) -> np.ndarray:
    """Map each histogram bin to an output level via the normalized CDF.

    The lowest occupied bin goes to 0 and the highest to ``max_value``. A
    histogram with a single occupied bin has no spread to equalize and maps
    bins linearly onto the output range instead.
    """
    hist = np.asarray(hist, dtype=np.float64)
    bins = hist.size
    cdf = np.cumsum(hist)
    total = cdf[-1]
    cdf_min = cdf[np.argmax(hist > 0)]
    if total - cdf_min <= 0:
        return np.rint(np.arange(bins) * (max_value / (bins - 1))).astype(np.int64)
    lut = np.rint((cdf - cdf_min) / (total - cdf_min) * max_value)
    return np.clip(lut, 0, max_value).astype(np.int64)


def global_hist_eq(img: GrayImage, bins: int = 256) -> GrayImage:
    index = _bin_index(img.pixels, img.bit_depth, bins)
    hist = np.bincount(index.ravel(), minlength=bins)
    lut = equalization_lut(hist, img.max_value)
    return GrayImage(lut[index], img.bit_depth)


def clip_histogram(hist: np.ndarray, clip: float, max_iter: int = 1000) -> np.ndarray:
    """Clip bins at ``clip`` and hand the excess back out evenly.

    Redistribution repeats while at least one count of excess remains; the
    final fractional remainder fills bins in order starting from bin 0. If
    the clip level cannot hold the histogram mass at all, the result is flat.
    """
    h = np.asarray(hist, dtype=np.float64).copy()
    bins = h.size
    total = h.sum()
    if clip * bins <= total:
        return np.full(bins, total / bins)
    excess = np.maximum(h - clip, 0.0).sum()
    h = np.minimum(h, clip)
    for _ in range(max_iter):
        if excess < 1.0:
            break
        h += excess / bins
        excess = np.maximum(h - clip, 0.0).sum()
        h = np.minimum(h, clip)
    if excess > 0:
        room = clip - h
        before = np.concatenate(([0.0], np.cumsum(room)[:-1]))
        h += np.clip(excess - before, 0.0, room)
    return h


def _tile_edges(length: int, tiles: int) -> np.ndarray:
    return (np.arange(tiles + 1) * length) // tiles


def clahe_tile_histograms(img: GrayImage, cfg: ClaheConfig) -> tuple[np.ndarray, np.ndarray]:
    """Raw and clipped per-tile histograms, each of shape [rows, cols, bins]."""
    rows, cols = cfg.tile_grid
    if img.height < rows or img.width < cols:
        raise ValueError(f"tile grid {cfg.tile_grid} larger than image {img.height}x{img.width}")
    index = _bin_index(img.pixels, img.bit_depth, cfg.bins)
    ye, xe = _tile_edges(img.height, rows), _tile_edges(img.width, cols)
    raw = np.zeros((rows, cols, cfg.bins))
    clipped = np.zeros_like(raw)
    for r in range(rows):
        for c in range(cols):
            tile = index[ye[r]:ye[r + 1], xe[c]:xe[c + 1]]
            hist = np.bincount(tile.ravel(), minlength=cfg.bins)
            raw[r, c] = hist
            clipped[r, c] = clip_histogram(hist, cfg.clip_limit * tile.size / cfg.bins)
    return raw, clipped


def _interp_axis(length: int, edges: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Tile centres; positions outside the outermost centres clamp to the edge tile.
    centres = (edges[:-1] + edges[1:] - 1) / 2.0
    pos = np.arange(length, dtype=np.float64)
    hi = np.clip(np.searchsorted(centres, pos, side="right"), 0, len(centres) - 1)
    lo = np.clip(hi - 1, 0, len(centres) - 1)
    last = len(centres) - 1
    lo = np.where(pos <= centres[0], 0, np.where(pos >= centres[-1], last, lo))
    hi = np.where(pos >= centres[-1], last, hi)
    span = centres[hi] - centres[lo]
    w = np.where(span > 0, (pos - centres[lo]) / np.where(span > 0, span, 1.0), 0.0)
    return lo, hi, w


def clahe(img: GrayImage, cfg: ClaheConfig = ClaheConfig()) -> GrayImage:
    """Contrast-limited adaptive histogram equalization.

    Each tile's histogram is clipped at ``clip_limit`` times the mean bin
    height, equalized, and the four mappings surrounding a pixel are blended
    bilinearly by distance to the tile centres.
    """
    _, clipped = clahe_tile_histograms(img, cfg)
    rows, cols = cfg.tile_grid
    luts = np.stack([
        np.stack([equalization_lut(clipped[r, c], img.max_value) for c in range(cols)])
        for r in range(rows)
    ]).astype(np.float64)

    index = _bin_index(img.pixels, img.bit_depth, cfg.bins)
    r0, r1, wr = _interp_axis(img.height, _tile_edges(img.height, rows))
    c0, c1, wc = _interp_axis(img.width, _tile_edges(img.width, cols))
    r0, r1, wr = r0[:, None], r1[:, None], wr[:, None]
    out = ((1 - wr) * ((1 - wc) * luts[r0, c0, index] + wc * luts[r0, c1, index])
           + wr * ((1 - wc) * luts[r1, c0, index] + wc * luts[r1, c1, index]))
    out = np.clip(np.rint(out), 0, img.max_value).astype(np.int64)
    return GrayImage(out, img.bit_depth)


# ---------------------------------------------------------------------------
# geometry and intensity mapping


def _bilinear_axis(src_len: int, dst_len: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Half-pixel centres: output sample i sits at (i + 0.5) * src/dst - 0.5.
    pos = (np.arange(dst_len) + 0.5) * (src_len / dst_len) - 0.5
    pos = np.clip(pos, 0, src_len - 1)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, src_len - 1)
    return i0, i1, pos - i0


def _bilinear(values: np.ndarray, height: int, width: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    y0, y1, wy = _bilinear_axis(values.shape[0], height)
    x0, x1, wx = _bilinear_axis(values.shape[1], width)
    rows = values[y0] * (1 - wy)[:, None] + values[y1] * wy[:, None]
    return rows[:, x0] * (1 - wx) + rows[:, x1] * wx


def resize_image(img: GrayImage | NormalizedImage, size: int | tuple[int, int]):
    """Bilinear resize to ``size`` (square) or ``(height, width)``."""
    height, width = (size, size) if isinstance(size, int) else size
    if height <= 0 or width <= 0:
        raise ValueError("size must be positive")
    if isinstance(img, GrayImage):
        out = _bilinear(img.pixels, height, width)
        return GrayImage(np.clip(np.rint(out), 0, img.max_value).astype(np.int64), img.bit_depth)
    out = _bilinear(img.values, height, width)
    return NormalizedImage(np.clip(out, -1.0, 1.0))


def _nearest_axis(src_len: int, dst_len: int) -> np.ndarray:
    return np.minimum(((np.arange(dst_len) + 0.5) * src_len / dst_len).astype(np.int64), src_len - 1)


def resize_labels(index_map: np.ndarray, size: int | tuple[int, int]) -> np.ndarray:
    height, width = (size, size) if isinstance(size, int) else size
    if height <= 0 or width <= 0:
        raise ValueError("size must be positive")
    index_map = np.asarray(index_map)
    return index_map[_nearest_axis(index_map.shape[0], height)][:, _nearest_axis(index_map.shape[1], width)]


def resize_mask(mask: LabelMask, size: int | tuple[int, int]) -> LabelMask:
    """Nearest-neighbour resize; the result stays one-hot."""
    return one_hot_encode(resize_labels(decode_argmax(mask), size), mask.channels)


def normalize(img: GrayImage) -> NormalizedImage:
    values = 2.0 * img.pixels.astype(np.float64) / img.max_value - 1.0
    return NormalizedImage(np.clip(values, -1.0, 1.0))


def preprocess_image(img: GrayImage, cfg: PreprocessConfig = PreprocessConfig()) -> NormalizedImage:
    if cfg.enabled:
        img = clahe(img, cfg.clahe)
    return normalize(resize_image(img, cfg.target_size))


def preprocess_pair(img: GrayImage, mask: LabelMask,
                    cfg: PreprocessConfig = PreprocessConfig()) -> tuple[NormalizedImage, LabelMask]:
    return preprocess_image(img, cfg), resize_mask(mask, cfg.target_size)


# ---------------------------------------------------------------------------
# on-disk array cache
#
# File layout (little-endian):
#   bytes 0-3   magic b"CXRA"
#   bytes 4-5   format version, uint16
#   byte  6     dtype code (see _DTYPES)
#   byte  7     number of dimensions n
#   next 4*n    dimensions, uint32 each
#   remainder   row-major array data

ARRAY_MAGIC = b"CXRA"
ARRAY_VERSION = 1
_DTYPES = {1: np.dtype("<u1"), 2: np.dtype("<u2"), 3: np.dtype("<f4"), 4: np.dtype("<i8"), 5: np.dtype("<f8")}
_CODES = {dt: code for code, dt in _DTYPES.items()}


class CacheFormatError(ValueError):
    pass


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_array(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder("<") if array.dtype.byteorder == ">" else array.dtype
    if dtype not in _CODES:
        raise CacheFormatError(f"unsupported dtype {array.dtype}")
    header = ARRAY_MAGIC + struct.pack("<HBB", ARRAY_VERSION, _CODES[dtype], array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + np.ascontiguousarray(array, dtype=dtype).tobytes()


def decode_array(payload: bytes) -> np.ndarray:
    if len(payload) < 8 or payload[:4] != ARRAY_MAGIC:
        raise CacheFormatError("bad magic")
    version, code, ndim = struct.unpack_from("<HBB", payload, 4)
    if version != ARRAY_VERSION or code not in _DTYPES:
        raise CacheFormatError(f"unsupported version {version} or dtype code {code}")
    shape = struct.unpack_from(f"<{ndim}I", payload, 8)
    offset = 8 + 4 * ndim
    dtype = _DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(payload) - offset != expected:
        raise CacheFormatError("truncated array data")
    return np.frombuffer(payload, dtype=dtype, offset=offset).reshape(shape).copy()


def write_array(path: str | Path, array: np.ndarray) -> None:
    _atomic_write(Path(path), encode_array(array))


def read_array(path: str | Path) -> np.ndarray:
    return decode_array(Path(path).read_bytes())


class PreprocessCache:
    """Preprocessed (image, label map) pairs keyed by input bytes and config."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)

    @staticmethod
    def key(paths: Sequence[str | Path], cfg: PreprocessConfig, extra: str = "") -> str:
        digest = hashlib.sha256()
        digest.update(json.dumps(cfg.to_dict(), sort_keys=True).encode())
        digest.update(extra.encode())
        for p in paths:
            digest.update(Path(p).read_bytes())
        return digest.hexdigest()

    def _paths(self, key: str) -> tuple[Path, Path]:
        base = self.directory / key[:2]
        return base / f"{key}.image.bin", base / f"{key}.labels.bin"

    def get(self, key: str) -> tuple[np.ndarray, np.ndarray] | None:
        image_path, label_path = self._paths(key)
        if not (image_path.exists() and label_path.exists()):
            return None
        try:
            return read_array(image_path), read_array(label_path)
        except CacheFormatError:
            return None

    def put(self, key: str, image: np.ndarray, labels: np.ndarray) -> None:
        image_path, label_path = self._paths(key)
        write_array(label_path, labels.astype(np.uint8))
        write_array(image_path, image.astype(np.float32))
