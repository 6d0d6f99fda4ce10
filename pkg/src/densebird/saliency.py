"""Guided-backpropagation saliency and saliency-masked resynthesis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import FbankImage, FilterBank, WaveBuffer, istft_overlap_add, stft
from .model import Model


@dataclass
class SaliencyMap:
    values: np.ndarray  # (frames, bands), in [0, 1]
    target_class: int = 1
    item_id: str = ""


def input_gradient(model: Model, image: np.ndarray, target_class: int = 1, guided: bool = True) -> np.ndarray:
    """Gradient of the target-class logit with respect to a (frames, bands) input."""
    x = np.asarray(image, dtype=model.dtype)[None, None]
    model.set_guided(guided)
    try:
        logits = model.logits(x, train=False)
        seed = np.zeros_like(logits)
        seed[0, target_class] = 1
        grad = model.backward(seed)
    finally:
        model.set_guided(False)
    # backward also accumulates parameter gradients; don't leave them behind
    model.zero_grad()
    return grad[0, 0].astype(np.float64)


def saliency_map(model: Model, image: FbankImage | np.ndarray, target_class: int = 1) -> SaliencyMap:
    """|guided gradient| of the target logit, scaled so the largest cell is 1."""
    values = image.values if isinstance(image, FbankImage) else image
    item = image.item_id if isinstance(image, FbankImage) else ""
    sal = np.abs(input_gradient(model, values, target_class, guided=True))
    peak = sal.max()
    if peak > 0:
        sal = sal / peak
    return SaliencyMap(sal, target_class, item)


def expand_to_bins(smap: SaliencyMap | np.ndarray, fb: FilterBank) -> np.ndarray:
    """Spread each band's saliency over the FFT bins strictly inside its edges.

    Bins shared by overlapping triangles take the largest saliency; bins
    outside every band get 0.
    """
    values = smap.values if isinstance(smap, SaliencyMap) else np.asarray(smap)
    if values.shape[1] != fb.n_mels:
        raise ValueError(f"map has {values.shape[1]} bands, filter bank {fb.n_mels}")
    freqs = np.arange(fb.bins) * fb.sample_rate / fb.n_fft
    mask = np.zeros((values.shape[0], fb.bins))
    for m, (lo, _, hi) in enumerate(fb.band_edges):
        inside = (freqs > lo) & (freqs < hi)
        mask[:, inside] = np.maximum(mask[:, inside], values[:, m:m + 1])
    return mask


def resynthesize(wave_buf: WaveBuffer, mask: np.ndarray) -> WaveBuffer:
    """Apply a (frames, bins) mask to the STFT of `wave_buf` and overlap-add back."""
    spec = stft(wave_buf)
    if mask.shape != spec.data.shape:
        raise ValueError(f"mask shape {mask.shape} does not match spectrogram {spec.data.shape}")
    return istft_overlap_add(spec, mask, wave_buf.item_id)


def write_pgm(path, values: np.ndarray) -> None:
    """8-bit grayscale PGM with frequency increasing upwards and time to the right."""
    img = np.asarray(values, dtype=np.float64).T[::-1]
    lo, hi = img.min(), img.max()
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
