"""On-the-fly training transforms: pad-and-crop shifts and time reversal."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import FbankImage


@dataclass
class AugmentConfig:
    crop: bool = True
    reverse: bool = False
    pad: int = 2
    max_offset: int = 2
    reverse_prob: float = 0.5

    def __post_init__(self):
        if self.pad < 0 or self.max_offset < 0:
            raise ValueError("pad and max_offset must be non-negative")
        if self.max_offset > 2 * self.pad:
            raise ValueError("offsets cannot exceed twice the padding")
        if not 0.0 <= self.reverse_prob <= 1.0:
            raise ValueError("reverse_prob must be in [0, 1]")

    @property
    def offset_choices(self) -> range:
        return range(self.max_offset + 1)


def crop_at(image: np.ndarray, row: int, col: int, pad: int = 2) -> np.ndarray:
    """Zero-pad both axes by `pad` and cut the original-size window at (row, col).

    (pad, pad) returns the input unchanged; smaller offsets delay the content
    in time (rows) and shift it up in frequency (columns).
    """
    t, m = image.shape[-2:]
    widths = [(0, 0)] * (image.ndim - 2) + [(pad, pad), (pad, pad)]
    padded = np.pad(image, widths)
    return padded[..., row:row + t, col:col + m]


def _apply(image, fn):
    if isinstance(image, FbankImage):
        return FbankImage(fn(image.values), image.item_id)
    return fn(image)


def random_crop_shift(image, config: AugmentConfig, rng: np.random.Generator):
    """Crop at offsets drawn uniformly from `config.offset_choices` on each axis."""
    row, col = rng.integers(0, config.max_offset + 1, size=2)
    return _apply(image, lambda v: crop_at(v, int(row), int(col), config.pad))


def reverse_time(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1, :].copy()


def time_reverse(image, config: AugmentConfig, rng: np.random.Generator):
    if rng.random() < config.reverse_prob:
        return _apply(image, reverse_time)
    return image


def augment_batch(batch: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply the enabled transforms independently to every image of a (n, 1, T, M) batch."""
    if not (config.crop or config.reverse):
        return batch
    out = np.empty_like(batch)
    for i, img in enumerate(batch):
        if config.crop:
            img = random_crop_shift(img, config, rng)
        if config.reverse:
            img = time_reverse(img, config, rng)
        out[i] = img
    return out
