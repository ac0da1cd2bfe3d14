"""Reading the JSRT, Montgomery and Shenzhen corpora into samples and manifests.

Expected on-disk layout for each dataset directory::

    <dataset>/images/<stem>.<ext>
    <dataset>/masks/<structure>/<stem>.<ext>

where ``<structure>`` is one of ``left_lung``, ``right_lung``, ``heart`` or
``lung``. JSRT images are headerless ``.img``/``.raw`` files; every other
image and every mask is read through Pillow (PNG, GIF, BMP, TIFF...).
"""

from __future__ import annotations

import enum
import json
import logging
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from cxrseg.core import (
    BACKGROUND,
    HEART,
    LEFT_LUNG,
    LUNG,
    RIGHT_LUNG,
    ClassScheme,
    EncodingError,
    GrayImage,
    LabelMask,
    one_hot_encode,
)

log = logging.getLogger(__name__)

JSRT_SIZE = 2048
JSRT_BIT_DEPTH = 12
JSRT_MAX = (1 << JSRT_BIT_DEPTH) - 1
RAW_SUFFIXES = {".img", ".raw"}

# Published corpus sizes; used only to warn about incomplete downloads.
EXPECTED_COUNTS = {"JSRT": 247, "MONTGOMERY": 138, "SHENZHEN": 662}

# Overlapping structures resolve to the first entry in this list.
STRUCTURE_PRIORITY = (HEART, LEFT_LUNG, RIGHT_LUNG, LUNG)

SPLITS = ("train", "val", "test")
PROTOCOLS = ("JSRT-only", "ALL", "ALL-eval-JSRT")
MANIFEST_FORMAT = "cxrseg-manifest"


class FormatError(ValueError):
    """An image or mask file could not be decoded."""


class CorruptDataError(ValueError):
    """A file decoded but holds values outside its declared range."""


class LayoutError(ValueError):
    """A dataset directory does not follow the expected layout."""


class ProtocolError(ValueError):
    """A split protocol cannot be satisfied by the manifest."""


class DatasetWarning(UserWarning):
    pass


class DatasetId(str, enum.Enum):
    JSRT = "JSRT"
    MONTGOMERY = "MONTGOMERY"
    SHENZHEN = "SHENZHEN"

    @classmethod
    def parse(cls, value: "str | DatasetId") -> "DatasetId":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown dataset {value!r}; choose from {[d.value for d in cls]}") from None


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    dataset: DatasetId
    image_path: str
    mask_paths: Mapping[str, str]
    split: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "dataset", DatasetId.parse(self.dataset))
        object.__setattr__(self, "mask_paths", dict(sorted(self.mask_paths.items())))
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.dataset is not DatasetId.JSRT and HEART in self.mask_paths:
            raise ValueError(f"{self.sample_id}: only JSRT provides heart masks")

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "dataset": self.dataset.value,
            "image_path": self.image_path,
            "mask_paths": dict(self.mask_paths),
            "split": self.split,
        }

    @classmethod
    def from_json(cls, data: Mapping) -> "SampleRecord":
        return cls(
            sample_id=data["sample_id"],
            dataset=data["dataset"],
            image_path=data["image_path"],
            mask_paths=data["mask_paths"],
            split=data.get("split", "train"),
        )


@dataclass(frozen=True)
class Manifest:
    records: tuple[SampleRecord, ...]
    class_scheme: ClassScheme
    seed: int = 42
    protocol: str | None = None

    def __post_init__(self):
        records = tuple(self.records)
        object.__setattr__(self, "records", records)
        ids = [r.sample_id for r in records]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest sample_ids must be unique")

    def subset(self, split: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == split]

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.records:
            out[r.dataset.value] = out.get(r.dataset.value, 0) + 1
        return out


# ---------------------------------------------------------------------------
# image and mask loading


def load_jsrt_image(path: str | Path, invert: bool = True) -> GrayImage:
    """Read a headerless 2048x2048 big-endian 16-bit JSRT file.

    Raw JSRT files store dense tissue as dark values, so by default the
    intensities are flipped (``v -> 4095 - v``) to match the usual display.
    """
    path = Path(path)
    expected = JSRT_SIZE * JSRT_SIZE * 2
    size = path.stat().st_size
    if size != expected:
        raise FormatError(f"{path}: expected {expected} bytes of raw JSRT data, found {size}")
    pixels = np.fromfile(path, dtype=">u2").reshape(JSRT_SIZE, JSRT_SIZE)
    if pixels.max() > JSRT_MAX:
        raise CorruptDataError(f"{path}: sample value {int(pixels.max())} exceeds 12-bit range")
    pixels = pixels.astype(np.uint16)
    if invert:
        pixels = JSRT_MAX - pixels
    return GrayImage(pixels, JSRT_BIT_DEPTH)


def save_jsrt_image(image: GrayImage, path: str | Path, invert: bool = True) -> None:
    """Write a GrayImage back in the raw JSRT layout (inverse of load_jsrt_image)."""
    if image.pixels.shape != (JSRT_SIZE, JSRT_SIZE) or image.bit_depth != JSRT_BIT_DEPTH:
        raise FormatError("raw JSRT files hold 2048x2048 12-bit images only")
    pixels = image.pixels.astype(np.uint16)
    if invert:
        pixels = JSRT_MAX - pixels
    pixels.astype(">u2").tofile(Path(path))


def _luminance(rgb: np.ndarray) -> np.ndarray:
    weights = np.array([0.299, 0.587, 0.114])
    return np.rint(rgb[..., :3].astype(np.float64) @ weights)


def load_png_image(path: str | Path) -> GrayImage:
    """Read an 8- or 16-bit grayscale raster; colour input is reduced to luminance."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "P":
                im = im.convert("RGBA" if "transparency" in im.info else "RGB")
                mode = im.mode
            array = np.asarray(im)
    except (OSError, SyntaxError, ValueError) as exc:
        raise FormatError(f"{path}: cannot read image ({exc})") from exc

    if mode in ("RGB", "RGBA", "CMYK", "YCbCr", "LA"):
        warnings.warn(f"{path}: {mode} image converted to grayscale by luminance", DatasetWarning, stacklevel=2)
        if mode == "LA":
            array = array[..., 0]
        else:
            if mode in ("CMYK", "YCbCr"):
                with Image.open(path) as im:
                    array = np.asarray(im.convert("RGB"))
            array = _luminance(array)
        return GrayImage(array.astype(np.uint8), 8)
    if mode == "1":
        return GrayImage(array.astype(np.uint8) * 255, 8)
    if mode == "L":
        return GrayImage(array.astype(np.uint8), 8)
    if mode.startswith("I"):
        array = array.astype(np.int64)
        if array.min() < 0 or array.max() > 65535:
            raise CorruptDataError(f"{path}: values outside 16-bit range")
        return GrayImage(array.astype(np.uint16), 16)
    raise FormatError(f"{path}: unsupported image mode {mode}")


def load_image(path: str | Path, invert_jsrt: bool = True) -> GrayImage:
    path = Path(path)
    if path.suffix.lower() in RAW_SUFFIXES:
        return load_jsrt_image(path, invert=invert_jsrt)
    return load_png_image(path)


def load_binary_mask(path: str | Path) -> np.ndarray:
    """Any nonzero pixel counts as foreground."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            array = np.asarray(im.convert("L") if im.mode not in ("1", "L", "I", "I;16") else im)
    except (OSError, SyntaxError, ValueError) as exc:
        raise FormatError(f"{path}: cannot read mask ({exc})") from exc
    return np.asarray(array) > 0


def assemble_mask(structure_masks: Mapping[str, np.ndarray], scheme: ClassScheme,
                  shape: tuple[int, int] | None = None) -> LabelMask:
    """Combine binary structure masks into a one-hot LabelMask.

    Pixels outside every structure are background. Where structures overlap
    the pixel goes to the highest-priority one (heart, left lung, right lung).
    ``shape`` is only needed when ``structure_masks`` is empty.
    """
    shapes = {np.shape(m) for m in structure_masks.values()}
    if len(shapes) > 1:
        raise ValueError(f"structure masks differ in shape: {sorted(shapes)}")
    if shapes:
        (shape,) = shapes
    elif shape is None:
        raise ValueError("shape is required when no structure masks are given")
    if len(shape) != 2:
        raise ValueError(f"structure masks must be 2-D, got shape {shape}")
    for name in structure_masks:
        if name == BACKGROUND or name not in scheme.classes:
            raise EncodingError(f"structure {name!r} is not a foreground class of scheme {scheme.classes}")

    index = np.full(shape, scheme.background_index, dtype=np.int64)
    for name in reversed(STRUCTURE_PRIORITY):
        if name in structure_masks:
            index[np.asarray(structure_masks[name], dtype=bool)] = scheme.index(name)
    return one_hot_encode(index, scheme)


def required_structures(scheme: ClassScheme, available: Iterable[str]) -> tuple[str, ...] | None:
    """Mask structures to read for ``scheme``, or None if ``available`` cannot satisfy it.

    The single-class lung scheme accepts either a ``lung`` mask or a
    left/right pair, which is unioned on load.
    """
    available = set(available)
    if scheme.classes == (BACKGROUND, LUNG):
        if LUNG in available:
            return (LUNG,)
        if {LEFT_LUNG, RIGHT_LUNG} <= available:
            return (LEFT_LUNG, RIGHT_LUNG)
        return None
    needed = tuple(c for c in scheme.classes if c != BACKGROUND)
    return needed if set(needed) <= available else None


def load_sample(record: SampleRecord, scheme: ClassScheme, invert_jsrt: bool = True) -> tuple[GrayImage, LabelMask]:
    image = load_image(record.image_path, invert_jsrt=invert_jsrt)
    masks = {name: load_binary_mask(p) for name, p in record.mask_paths.items()}
    if scheme.classes == (BACKGROUND, LUNG) and LUNG not in masks:
        parts = [masks.pop(n) for n in (LEFT_LUNG, RIGHT_LUNG) if n in masks]
        if parts:
            if len({p.shape for p in parts}) > 1:
                raise ValueError(f"{record.sample_id}: left/right lung masks differ in shape")
            masks[LUNG] = np.logical_or.reduce(parts)
    masks = {k: v for k, v in masks.items() if k in scheme.classes}
    return image, assemble_mask(masks, scheme)


# ---------------------------------------------------------------------------
# manifests


def _index_by_stem(directory: Path) -> dict[str, Path]:
    files = {}
    for p in sorted(directory.iterdir()):
        if p.is_file() and not p.name.startswith("."):
            files.setdefault(p.stem, p)
    return files


def scan_dataset(dataset: DatasetId | str, directory: str | Path, scheme: ClassScheme) -> list[SampleRecord]:
    dataset = DatasetId.parse(dataset)
    directory = Path(directory)
    image_dir = directory / "images"
    if not image_dir.is_dir():
        raise LayoutError(f"{directory}: missing images/ directory")
    images = _index_by_stem(image_dir)
    if not images:
        raise LayoutError(f"{image_dir}: no images found")

    mask_root = directory / "masks"
    available = sorted(p.name for p in mask_root.iterdir() if p.is_dir()) if mask_root.is_dir() else []
    if dataset is not DatasetId.JSRT and HEART in available:
        available.remove(HEART)
        warnings.warn(f"{dataset.value}: heart masks are only used for JSRT; ignored", DatasetWarning, stacklevel=2)
    structures = required_structures(scheme, available)
    if structures is None:
        raise LayoutError(
            f"{directory}: mask structures {available} cannot provide scheme {scheme.classes}"
        )
    masks = {s: _index_by_stem(mask_root / s) for s in structures}

    records = []
    for stem, image_path in images.items():
        missing = [s for s in structures if stem not in masks[s]]
        if missing:
            warnings.warn(f"{dataset.value}/{stem}: no {', '.join(missing)} mask; skipped", DatasetWarning, stacklevel=2)
            continue
        records.append(SampleRecord(
            sample_id=f"{dataset.value.lower()}/{stem}",
            dataset=dataset,
            image_path=str(image_path),
            mask_paths={s: str(masks[s][stem]) for s in structures},
        ))
    return records


def build_manifest(roots: Mapping[DatasetId | str, str | Path], scheme: ClassScheme, seed: int = 42) -> Manifest:
    """Scan each dataset directory and collect every image that has masks."""
    if not roots:
        raise LayoutError("no dataset directories given")
    records: list[SampleRecord] = []
    for dataset, directory in sorted(roots.items(), key=lambda kv: DatasetId.parse(kv[0]).value):
        dataset = DatasetId.parse(dataset)
        found = scan_dataset(dataset, directory, scheme)
        expected = EXPECTED_COUNTS[dataset.value]
        if len(found) != expected:
            warnings.warn(
                f"{dataset.value}: {len(found)} usable records, published corpus has {expected}",
                DatasetWarning, stacklevel=2,
            )
        log.info("%s: %d records", dataset.value, len(found))
        records.extend(found)
    if not records:
        raise LayoutError("no usable records found")
    return Manifest(tuple(records), scheme, seed)


def _partition(records: Sequence[SampleRecord], fractions: Sequence[float], seed: int, stream: int) -> list[SampleRecord]:
    ordered = sorted(records, key=lambda r: r.sample_id)
    n = len(ordered)
    perm = np.random.default_rng([seed, stream]).permutation(n)
    n_train = math.floor(fractions[0] * n + 1e-9)
    n_val = min(math.floor(fractions[1] * n + 1e-9), n - n_train)
    if fractions[2] == 0:
        # nothing may reach test: rounding leftovers go to val
        n_val = n - n_train
    out = []
    for rank, i in enumerate(perm):
        split = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
        out.append(replace(ordered[i], split=split))
    return out


def split_manifest(manifest: Manifest, protocol: str, fractions: Sequence[float] = (0.7, 0.1, 0.2),
                   seed: int | None = None) -> Manifest:
    """Assign train/val/test splits under one of the evaluation protocols.

    Splitting is stratified per dataset. Counts are ``floor(f * n)`` for
    train and val, with the remainder going to test. ``ALL-eval-JSRT``
    keeps every non-JSRT record in train/val so that the test split holds
    JSRT images only.
    """
    if protocol not in PROTOCOLS:
        raise ProtocolError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-6:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    seed = manifest.seed if seed is None else seed

    by_dataset: dict[DatasetId, list[SampleRecord]] = {}
    for r in manifest.records:
        by_dataset.setdefault(r.dataset, []).append(r)
    if protocol != "ALL" and DatasetId.JSRT not in by_dataset:
        raise ProtocolError(f"protocol {protocol} needs JSRT records")

    out: list[SampleRecord] = []
    for stream, dataset in enumerate(DatasetId):
        group = by_dataset.get(dataset)
        if not group:
            continue
        if protocol == "JSRT-only" and dataset is not DatasetId.JSRT:
            continue
        if protocol == "ALL-eval-JSRT" and dataset is not DatasetId.JSRT:
            fit = fractions[0] + fractions[1]
            if fit <= 0:
                raise ProtocolError("ALL-eval-JSRT needs a non-zero train or val fraction")
            out.extend(_partition(group, (fractions[0] / fit, fractions[1] / fit, 0.0), seed, stream))
        else:
            out.extend(_partition(group, fractions, seed, stream))
    out.sort(key=lambda r: (r.dataset.value, r.sample_id))
    return Manifest(tuple(out), manifest.class_scheme, seed, protocol)


def write_manifest(manifest: Manifest, path: str | Path) -> None:
    """JSON lines: one header object, then one SampleRecord per line."""
    header = {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "class_scheme": manifest.class_scheme.name,
        "seed": manifest.seed,
        "protocol": manifest.protocol,
    }
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(r.to_json(), sort_keys=True) for r in manifest.records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path: str | Path) -> Manifest:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise LayoutError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    if header.get("format") != MANIFEST_FORMAT:
        raise LayoutError(f"{path}: not a manifest file")
    records = tuple(SampleRecord.from_json(json.loads(ln)) for ln in lines[1:])
    return Manifest(records, ClassScheme.from_name(header["class_scheme"]), header["seed"], header.get("protocol"))


def dataset_roots(data_root: str | Path, datasets: Iterable[str] | None = None) -> dict[DatasetId, Path]:
    """Find ``<data_root>/<dataset>`` directories, matching names case-insensitively."""
    data_root = Path(data_root)
    if not data_root.is_dir():
        raise LayoutError(f"{data_root}: not a directory")
    entries = {p.name.upper(): p for p in data_root.iterdir() if p.is_dir()}
    wanted = [DatasetId.parse(d) for d in datasets] if datasets else list(DatasetId)
    roots = {d: entries[d.value] for d in wanted if d.value in entries}
    if datasets:
        missing = [d.value for d in wanted if d not in roots]
        if missing:
            raise LayoutError(f"{data_root}: missing dataset directories {missing}")
    if not roots:
        raise LayoutError(f"{data_root}: no dataset directories found")
    return roots
