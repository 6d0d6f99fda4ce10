"""Synthetic bird-detection corpus: frequency sweeps buried in coloured noise.

Positive clips carry one linear chirp whose power over its duration equals
the noise power (0 dB SNR); negative clips are noise only. Every clip is a
deterministic function of (seed, index), so audio can be regenerated for
any item after features have been cached.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal.windows import tukey

from .dsp import FRAME_LEN, HOP, SAMPLE_RATE, FilterBank, WaveBuffer, _lead_pad, extract_features
from .train import FeatureSet


@dataclass(frozen=True)
class Chirp:
    start: float  # seconds
    duration: float
    f_start: float  # Hz
    f_end: float

    def frequency_at(self, t):
        frac = np.clip((np.asarray(t) - self.start) / self.duration, 0.0, 1.0)
        return self.f_start + (self.f_end - self.f_start) * frac


@dataclass
class ClipSpec:
    item_id: str
    label: int
    chirp: Chirp | None


def coloured_noise(n: int, rng: np.random.Generator, tilt: float, rms: float) -> np.ndarray:
    spectrum = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(len(spectrum), dtype=np.float64)
    f[0] = 1.0
    spectrum *= f ** (-tilt / 2)
    x = np.fft.irfft(spectrum, n)
    return x * (rms / np.sqrt(np.mean(x**2)))


def render_chirp(chirp: Chirp, n: int, sample_rate: int, power: float) -> np.ndarray:
    out = np.zeros(n)
    i0 = int(round(chirp.start * sample_rate))
    m = min(int(round(chirp.duration * sample_rate)), n - i0)
    t = np.arange(m) / sample_rate
    sweep = (chirp.f_end - chirp.f_start) / chirp.duration
    phase = 2 * np.pi * (chirp.f_start * t + 0.5 * sweep * t**2)
    env = tukey(m, 0.3)
    tone = env * np.sin(phase)
    out[i0:i0 + m] = tone * np.sqrt(power / np.mean(tone**2))
    return out


def clip_spec(seed: int, index: int, positive: bool,
              clip_seconds: float = 10.0) -> tuple[ClipSpec, np.random.Generator]:
    rng = np.random.default_rng([seed, index])
    chirp = None
    if positive:
        duration = min(rng.uniform(0.3, 1.0), clip_seconds / 2)
        margin = min(0.2, 0.1 * clip_seconds)
        start = rng.uniform(margin, clip_seconds - duration - margin)
        f0 = rng.uniform(2000.0, 7000.0)
        f1 = f0 + rng.choice([-1, 1]) * rng.uniform(500.0, 3000.0)
        chirp = Chirp(start, duration, f0, float(np.clip(f1, 1000.0, 10000.0)))
    return ClipSpec(f"syn{seed}_{index:05d}", int(positive), chirp), rng


def render_clip(seed: int, index: int, positive: bool, duration: float = 10.0,
                sample_rate: int = SAMPLE_RATE, snr_db: float = 0.0) -> tuple[WaveBuffer, ClipSpec]:
    spec, rng = clip_spec(seed, index, positive, duration)
    n = int(round(duration * sample_rate))
    rms = rng.uniform(0.02, 0.2)
    x = coloured_noise(n, rng, tilt=rng.uniform(0.0, 1.5), rms=rms)
    if spec.chirp is not None:
        x += render_chirp(spec.chirp, n, sample_rate, rms**2 * 10 ** (snr_db / 10))
    return WaveBuffer(x, sample_rate, spec.item_id), spec


@dataclass
class SyntheticCorpus:
    seed: int
    train: FeatureSet
    valid: FeatureSet
    test: FeatureSet
    specs: dict[str, ClipSpec]
    positive: dict[str, bool]
    index: dict[str, int]

    def wave(self, item_id: str) -> WaveBuffer:
        return render_clip(self.seed, self.index[item_id], self.positive[item_id])[0]


def generate_corpus(n_train: int = 500, n_valid: int = 100, n_test: int = 100, seed: int = 0,
                    positive_fraction: float = 0.5) -> SyntheticCorpus:
    total = n_train + n_valid + n_test
    labels = np.zeros(total, dtype=bool)
    labels[: int(round(positive_fraction * total))] = True
    labels = np.random.default_rng([seed, 10**6]).permutation(labels)
    ids, feats, specs, index = [], [], {}, {}
    for i in range(total):
        wave, spec = render_clip(seed, i, bool(labels[i]))
        feats.append(extract_features(wave).values.astype(np.float32))
        ids.append(spec.item_id)
        specs[spec.item_id] = spec
        index[spec.item_id] = i
    feats = np.stack(feats)
    y = labels.astype(np.int64)

    def part(lo, hi):
        return FeatureSet(ids[lo:hi], feats[lo:hi], y[lo:hi])

    return SyntheticCorpus(
        seed, part(0, n_train), part(n_train, n_train + n_valid), part(n_train + n_valid, total),
        specs, dict(zip(ids, labels.tolist())), index,
    )


def chirp_support(chirp: Chirp, fb: FilterBank, n_frames: int = 200, hop: int = HOP,
                  frame_len: int = FRAME_LEN, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Boolean (frames, bands) mask of cells the chirp passes through."""
    mask = np.zeros((n_frames, fb.n_mels), dtype=bool)
    lead = _lead_pad(hop)
    lo_edge, hi_edge = fb.band_edges[:, 0], fb.band_edges[:, 2]
    for t in range(n_frames):
        t0 = (t * hop - lead) / sample_rate
        t1 = t0 + frame_len / sample_rate
        a, b = max(t0, chirp.start), min(t1, chirp.start + chirp.duration)
        if a >= b:
            continue
        fa, fb_ = chirp.frequency_at(a), chirp.frequency_at(b)
        f_lo, f_hi = min(fa, fb_), max(fa, fb_)
        mask[t] = (hi_edge > f_lo) & (lo_edge < f_hi)
    return mask
