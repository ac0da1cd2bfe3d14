"""Shared domain types and label encoding.

Arrays inside the value types are made read-only on construction so that
instances can be shared freely between threads and pipeline stages.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BACKGROUND = "background"
LEFT_LUNG = "left_lung"
RIGHT_LUNG = "right_lung"
HEART = "heart"
LUNG = "lung"


class EncodingError(ValueError):
    """Raised when a class index map or mask cannot be encoded."""


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class GrayImage:
    """Single-channel integer raster with its bit depth."""

    pixels: np.ndarray
    bit_depth: int

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 2 or pixels.shape[0] == 0 or pixels.shape[1] == 0:
            raise ValueError(f"expected non-empty 2-D pixel array, got shape {pixels.shape}")
        if not 1 <= self.bit_depth <= 16:
            raise ValueError(f"bit_depth must be in [1, 16], got {self.bit_depth}")
        if not np.issubdtype(pixels.dtype, np.integer):
            raise ValueError(f"pixels must be integers, got {pixels.dtype}")
        if pixels.min() < 0 or pixels.max() > self.max_value:
            raise ValueError(f"pixel values outside [0, {self.max_value}]")
        dtype = np.uint8 if self.bit_depth <= 8 else np.uint16
        object.__setattr__(self, "pixels", _frozen(pixels.astype(dtype, copy=False)))

    @property
    def max_value(self) -> int:
        return (1 << self.bit_depth) - 1

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class NormalizedImage:
    """Real-valued raster with values in [-1, 1]."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 2 or values.size == 0:
            raise ValueError(f"expected non-empty 2-D array, got shape {values.shape}")
        if not np.all(np.isfinite(values)) or values.min() < -1.0 or values.max() > 1.0:
            raise ValueError("normalized values must lie in [-1, 1]")
        object.__setattr__(self, "values", _frozen(values))

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class ClassScheme:
    """Ordered class names; the background class always comes first."""

    classes: tuple[str, ...]
    background_index: int = 0

    def __post_init__(self):
        classes = tuple(self.classes)
        object.__setattr__(self, "classes", classes)
        if classes not in SUPPORTED_SCHEMES.values():
            raise ValueError(f"unsupported class scheme {classes}")
        if classes[self.background_index] != BACKGROUND:
            raise ValueError("background_index must point at the background class")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def foreground(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.num_classes) if i != self.background_index)

    @property
    def name(self) -> str:
        for key, classes in SUPPORTED_SCHEMES.items():
            if classes == self.classes:
                return key
        raise AssertionError("unreachable")

    def index(self, class_name: str) -> int:
        try:
            return self.classes.index(class_name)
        except ValueError:
            raise EncodingError(f"class {class_name!r} not in scheme {self.classes}") from None

    @classmethod
    def from_name(cls, name: str) -> "ClassScheme":
        if name not in SUPPORTED_SCHEMES:
            raise ValueError(f"unknown scheme {name!r}; choose from {sorted(SUPPORTED_SCHEMES)}")
        return cls(SUPPORTED_SCHEMES[name])


SUPPORTED_SCHEMES: dict[str, tuple[str, ...]] = {
    "lungs": (BACKGROUND, LEFT_LUNG, RIGHT_LUNG),
    "lungs_heart": (BACKGROUND, LEFT_LUNG, RIGHT_LUNG, HEART),
    "lung": (BACKGROUND, LUNG),
}


@dataclass(frozen=True)
class LabelMask:
    """One-hot label volume of shape [H, W, C]."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[2] < 2:
            raise ValueError(f"expected [H, W, C>=2] array, got shape {data.shape}")
        if not np.isin(data, (0, 1)).all() or not (data.sum(axis=2) == 1).all():
            raise EncodingError("label mask is not one-hot per pixel")
        object.__setattr__(self, "data", _frozen(data.astype(np.uint8, copy=False)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class Prediction:
    """Per-pixel class probabilities of shape [H, W, C]."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] < 2:
            raise ValueError(f"expected [H, W, C>=2] array, got shape {data.shape}")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        if np.abs(data.sum(axis=2) - 1.0).max() > 1e-6:
            raise ValueError("class probabilities must sum to 1 at every pixel")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def one_hot_encode(class_index_map: np.ndarray, scheme: ClassScheme | int) -> LabelMask:
    """Encode an [H, W] class index map as a one-hot LabelMask."""
    num_classes = scheme if isinstance(scheme, int) else scheme.num_classes
    index = np.asarray(class_index_map)
    if index.ndim != 2:
        raise EncodingError(f"expected 2-D index map, got shape {index.shape}")
    if not np.issubdtype(index.dtype, np.integer):
        raise EncodingError(f"index map must be integer, got {index.dtype}")
    if index.size and (index.min() < 0 or index.max() >= num_classes):
        raise EncodingError(f"class index out of range [0, {num_classes})")
    return LabelMask(np.eye(num_classes, dtype=np.uint8)[index])


def decode_argmax(pred: Prediction | LabelMask | np.ndarray) -> np.ndarray:
    """Hard labels from an [H, W, C] volume; ties go to the lowest channel."""
    data = pred.data if isinstance(pred, (Prediction, LabelMask)) else np.asarray(pred)
    # np.argmax returns the first maximal index, which is the tie rule we want.
    return np.argmax(data, axis=-1).astype(np.int64)
