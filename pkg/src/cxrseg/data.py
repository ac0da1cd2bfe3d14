"""In-memory tensor datasets built from manifest records."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from cxrseg.core import ClassScheme, LabelMask, NormalizedImage, decode_argmax
from cxrseg.ingest import SampleRecord, load_sample
from cxrseg.preprocess import PreprocessCache, PreprocessConfig, preprocess_pair

log = logging.getLogger(__name__)

CACHE_ENV = "CXRSEG_CACHE"


@dataclass
class SegmentationSet:
    """Images (N, 1, H, W) float32 in [-1, 1] and label maps (N, H, W) uint8."""

    images: torch.Tensor
    labels: torch.Tensor
    ids: list[str]
    num_classes: int

    def __post_init__(self):
        if self.images.dim() != 4 or self.images.shape[1] != 1:
            raise ValueError(f"images must be (N, 1, H, W), got {tuple(self.images.shape)}")
        if self.labels.shape != (self.images.shape[0], *self.images.shape[2:]):
            raise ValueError("labels must be (N, H, W) matching images")
        if len(self.ids) != self.images.shape[0]:
            raise ValueError("one id per sample required")

    def __len__(self) -> int:
        return self.images.shape[0]

    def batch(self, index: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor]:
        """(images, one-hot masks) for the given sample indices."""
        index = torch.as_tensor(list(index), dtype=torch.long)
        masks = torch.nn.functional.one_hot(self.labels[index].long(), self.num_classes)
        return self.images[index], masks.permute(0, 3, 1, 2).to(self.images.dtype)

    def subset(self, index: Sequence[int]) -> "SegmentationSet":
        index = list(index)
        return SegmentationSet(self.images[index], self.labels[index], [self.ids[i] for i in index], self.num_classes)

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[NormalizedImage, LabelMask]], ids: Sequence[str]) -> "SegmentationSet":
        if not pairs:
            raise ValueError("no samples")
        images = torch.from_numpy(np.stack([p[0].values for p in pairs]).astype(np.float32))[:, None]
        labels = torch.from_numpy(np.stack([decode_argmax(p[1]) for p in pairs]).astype(np.uint8))
        return cls(images, labels, list(ids), pairs[0][1].channels)


def default_cache_dir() -> Path | None:
    value = os.environ.get(CACHE_ENV)
    return Path(value) if value else None


def prepare_record(record: SampleRecord, scheme: ClassScheme, cfg: PreprocessConfig,
                   cache: PreprocessCache | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Preprocessed (image values, label map) for one record, via the cache if given."""
    key = None
    if cache is not None:
        paths = [record.image_path, *record.mask_paths.values()]
        key = PreprocessCache.key(paths, cfg, extra=scheme.name)
        hit = cache.get(key)
        if hit is not None:
            return hit
    image, mask = load_sample(record, scheme, invert_jsrt=cfg.invert_jsrt)
    norm, resized = preprocess_pair(image, mask, cfg)
    values, labels = norm.values, decode_argmax(resized).astype(np.uint8)
    if cache is not None:
        cache.put(key, values, labels)
    return values, labels


def load_records(records: Sequence[SampleRecord], scheme: ClassScheme, cfg: PreprocessConfig,
                 cache_dir: str | Path | None = None, workers: int = 1) -> SegmentationSet:
    if not records:
        raise ValueError("no records to load")
    cache = PreprocessCache(cache_dir) if cache_dir is not None else None

    def work(r):
        return prepare_record(r, scheme, cfg, cache)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, records))
    else:
        results = [work(r) for r in records]
    images = torch.from_numpy(np.stack([r[0] for r in results]).astype(np.float32))[:, None]
    labels = torch.from_numpy(np.stack([r[1] for r in results]).astype(np.uint8))
    log.info("loaded %d samples", len(records))
    return SegmentationSet(images, labels, [r.sample_id for r in records], scheme.num_classes)
