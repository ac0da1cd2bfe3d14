"""Synthetic chest-radiograph phantoms with known lung/heart labels.

Used for smoke tests and demos where the real corpora are unavailable.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from cxrseg.core import BACKGROUND, HEART, LEFT_LUNG, LUNG, RIGHT_LUNG, ClassScheme, GrayImage, LabelMask
from cxrseg.ingest import assemble_mask


def _ellipse(shape, cy, cx, ry, rx) -> np.ndarray:
    yy, xx = np.mgrid[: shape[0], : shape[1]]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def phantom_structures(size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Binary left lung, right lung and heart masks with jittered geometry."""
    shape = (size, size)
    u = lambda spread: rng.uniform(-spread, spread)  # noqa: E731
    ry, rx = (0.30 + u(0.02)) * size, (0.15 + u(0.015)) * size
    cy = (0.48 + u(0.03)) * size
    # Image-left is the patient's right lung.
    right = _ellipse(shape, cy, (0.28 + u(0.02)) * size, ry, rx)
    left = _ellipse(shape, cy, (0.72 + u(0.02)) * size, ry, rx)
    heart = _ellipse(shape, (0.62 + u(0.02)) * size, (0.55 + u(0.02)) * size, 0.14 * size, 0.17 * size)
    return {LEFT_LUNG: left, RIGHT_LUNG: right, HEART: heart}


def phantom_image(structures: dict[str, np.ndarray], rng: np.random.Generator, bit_depth: int = 8,
                  noise: float = 0.04) -> GrayImage:
    size = structures[LEFT_LUNG].shape[0]
    yy, xx = np.mgrid[:size, :size] / size
    values = 0.55 + 0.15 * np.exp(-((xx - 0.5) ** 2) / 0.08)
    values = values - 0.35 * (structures[LEFT_LUNG] | structures[RIGHT_LUNG])
    values = values + 0.25 * structures[HEART]
    values = values + noise * rng.standard_normal(values.shape)
    max_value = (1 << bit_depth) - 1
    return GrayImage(np.clip(np.rint(values * max_value), 0, max_value).astype(np.int64), bit_depth)


def make_phantom(size: int, scheme: ClassScheme, seed: int = 0, bit_depth: int = 8) -> tuple[GrayImage, LabelMask]:
    rng = np.random.default_rng(seed)
    structures = phantom_structures(size, rng)
    image = phantom_image(structures, rng, bit_depth)
    if scheme.classes == (BACKGROUND, LUNG):
        masks = {LUNG: structures[LEFT_LUNG] | structures[RIGHT_LUNG]}
    else:
        masks = {k: v for k, v in structures.items() if k in scheme.classes}
    return image, assemble_mask(masks, scheme)


def write_phantom_dataset(root: str | Path, dataset: str, count: int, size: int = 64,
                          structures=(LEFT_LUNG, RIGHT_LUNG), seed: int = 0) -> Path:
    """Write ``count`` phantoms as PNG images and masks in the ingest layout."""
    directory = Path(root) / dataset.lower()
    (directory / "images").mkdir(parents=True, exist_ok=True)
    for name in structures:
        (directory / "masks" / name).mkdir(parents=True, exist_ok=True)
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        parts = phantom_structures(size, rng)
        image = phantom_image(parts, rng)
        stem = f"{dataset.lower()}_{i:04d}"
        Image.fromarray(image.pixels.astype(np.uint8)).save(directory / "images" / f"{stem}.png")
        if LUNG in structures:
            parts[LUNG] = parts[LEFT_LUNG] | parts[RIGHT_LUNG]
        for name in structures:
            Image.fromarray(parts[name].astype(np.uint8) * 255).save(directory / "masks" / name / f"{stem}.png")
    return directory
