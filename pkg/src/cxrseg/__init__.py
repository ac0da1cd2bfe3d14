"""Attention U-Net lung/heart segmentation for chest X-rays with adversarial
structure correction, Focal Tversky training and CLAHE preprocessing."""

from cxrseg.core import (
    ClassScheme,
    GrayImage,
    LabelMask,
    NormalizedImage,
    Prediction,
    decode_argmax,
    one_hot_encode,
)

__version__ = "0.1.0"

__all__ = [
    "ClassScheme",
    "GrayImage",
    "LabelMask",
    "NormalizedImage",
    "Prediction",
    "decode_argmax",
    "one_hot_encode",
]
