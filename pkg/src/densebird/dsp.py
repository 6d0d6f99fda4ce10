"""Log-Mel filter-bank front end and overlap-add resynthesis.

Analysis uses 100 ms frames every 50 ms, so a 10 s clip at 44.1 kHz gives
200 frames; 56 triangular mel filters between 50 Hz and 22050 Hz turn each
power spectrum into one row of the 200x56 network input.
"""

from __future__ import annotations

import math
import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import get_window

SAMPLE_RATE = 44100
FRAME_LEN = 4410
HOP = 2205
N_MELS = 56
FMIN = 50.0
FMAX = 22050.0
LOG_FLOOR = 1e-10

FBANK_MAGIC = b"BADFBK1"


class AudioFormatError(ValueError):
    """Raised for unreadable or unsupported audio files."""


@dataclass
class WaveBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    item_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("samples must be one-dimensional")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples contain non-finite values")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class ComplexSpectrogram:
    data: np.ndarray  # (frames, bins) complex
    frame_len: int
    hop: int
    window: np.ndarray
    n_samples: int
    sample_rate: int = SAMPLE_RATE

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def bins(self) -> int:
        return self.data.shape[1]

    def bin_frequencies(self) -> np.ndarray:
        return np.arange(self.bins) * self.sample_rate / self.frame_len


@dataclass
class FilterBank:
    matrix: np.ndarray  # (n_mels, bins)
    band_edges: np.ndarray  # (n_mels, 3) low/center/high in Hz
    fmin: float
    fmax: float
    sample_rate: int
    n_fft: int

    @property
    def n_mels(self) -> int:
        return self.matrix.shape[0]

    @property
    def bins(self) -> int:
        return self.matrix.shape[1]


@dataclass
class FbankImage:
    values: np.ndarray  # (frames, bands)
    item_id: str = ""

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


# ---------------------------------------------------------------------------
# WAV I/O


def load_wav(path, force_resample: bool = False, target_rate: int = SAMPLE_RATE) -> WaveBuffer:
    """Read a 16-bit PCM WAV file as a mono float buffer in [-1, 1).

    Stereo is downmixed by averaging channels. A sample rate other than
    `target_rate` is an error unless `force_resample` is set, in which case
    the signal is linearly interpolated onto the target grid.
    """
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise AudioFormatError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise AudioFormatError(f"{path}: cannot read ({exc})") from exc
    if width != 2:
        raise AudioFormatError(f"{path}: only 16-bit PCM is supported (got {8 * width}-bit)")
    if n_channels not in (1, 2):
        raise AudioFormatError(f"{path}: unsupported channel count {n_channels}")

    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    pcm = pcm[: len(pcm) - len(pcm) % n_channels].reshape(-1, n_channels)
    samples = pcm.mean(axis=1) / 32768.0

    if rate != target_rate:
        if not force_resample:
            raise AudioFormatError(
                f"{path}: sample rate {rate} Hz, expected {target_rate} Hz (pass force_resample)"
            )
        samples = resample_linear(samples, rate, target_rate)
        rate = target_rate
    return WaveBuffer(samples, rate, path.stem)


def resample_linear(samples: np.ndarray, rate_in: int, rate_out: int) -> np.ndarray:
    n_out = int(round(len(samples) * rate_out / rate_in))
    t_out = np.arange(n_out) / rate_out
    t_in = np.arange(len(samples)) / rate_in
    return np.interp(t_out, t_in, samples)


def write_wav(path, buf: WaveBuffer) -> float:
    """Write `buf` as 16-bit mono PCM and return the gain that was applied.

    The signal is peak-normalized only when it would otherwise clip.
    """
    x = buf.samples
    peak = float(np.max(np.abs(x))) if len(x) else 0.0
    gain = 1.0
    if peak > 32767 / 32768:
        gain = (32767 / 32768) / peak
    pcm = np.clip(np.round(x * gain * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(buf.sample_rate)
        wf.writeframes(pcm.tobytes())
    return gain


# ---------------------------------------------------------------------------
# Spectral analysis


def analysis_window(frame_len: int = FRAME_LEN) -> np.ndarray:
    return get_window("hann", frame_len, fftbins=True)


def frame_count(n_samples: int, hop: int = HOP) -> int:
    return max(1, math.ceil(n_samples / hop))


def _lead_pad(hop: int) -> int:
    # Shifts the signal by a quarter frame so every sample sits where the
    # squared-window envelope is >= 0.25, instead of at a Hann zero.
    return hop // 2


def stft(wave_buf: WaveBuffer, frame_len: int = FRAME_LEN, hop: int = HOP) -> ComplexSpectrogram:
    """Short-time Fourier transform with ceil(len/hop) Hann-windowed frames."""
    x = wave_buf.samples
    if len(x) == 0:
        raise ValueError("cannot analyse an empty signal")
    n_frames = frame_count(len(x), hop)
    lead = _lead_pad(hop)
    total = (n_frames - 1) * hop + frame_len
    padded = np.zeros(total)
    padded[lead : lead + len(x)] = x
    frames = np.lib.stride_tricks.sliding_window_view(padded, frame_len)[::hop][:n_frames]
    window = analysis_window(frame_len)
    data = np.fft.rfft(frames * window, axis=1)
    return ComplexSpectrogram(data, frame_len, hop, window, len(x), wave_buf.sample_rate)


def istft_overlap_add(spec: ComplexSpectrogram, mask=None, item_id: str = "") -> WaveBuffer:
    """Weighted overlap-add inverse of `stft`, optionally masking bins first.

    Frames are windowed again after the inverse FFT and the sum is divided
    by the accumulated squared window, so a unity mask reproduces the input.
    """
    data = spec.data
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != data.shape:
            raise ValueError(f"mask shape {mask.shape} does not match spectrogram {data.shape}")
        data = data * mask
    frames = np.fft.irfft(data, n=spec.frame_len, axis=1) * spec.window
    total = (spec.frames - 1) * spec.hop + spec.frame_len
    out = np.zeros(total)
    envelope = np.zeros(total)
    w2 = spec.window**2
    for t in range(spec.frames):
        start = t * spec.hop
        out[start : start + spec.frame_len] += frames[t]
        envelope[start : start + spec.frame_len] += w2
    lead = _lead_pad(spec.hop)
    sl = slice(lead, lead + spec.n_samples)
    return WaveBuffer(out[sl] / envelope[sl], spec.sample_rate, item_id)


# ---------------------------------------------------------------------------
# Mel filter bank


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank_matrix(
    bins: int = FRAME_LEN // 2 + 1,
    n_mels: int = N_MELS,
    fmin: float = FMIN,
    fmax: float = FMAX,
    sample_rate: int = SAMPLE_RATE,
) -> FilterBank:
    """Triangular filters with centers evenly spaced on the HTK mel scale.

    Filter i rises from center i-1 to center i and falls to center i+1
    (fmin and fmax act as the outermost edges). Each row is scaled so its
    largest weight is exactly 1.
    """
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    if not (0 <= fmin < fmax <= sample_rate / 2):
        raise ValueError(f"invalid frequency range [{fmin}, {fmax}] for rate {sample_rate}")
    n_fft = 2 * (bins - 1)
    freqs = np.arange(bins) * sample_rate / n_fft
    points = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    edges = np.stack([points[:-2], points[1:-1], points[2:]], axis=1)

    matrix = np.zeros((n_mels, bins))
    for i, (lo, mid, hi) in enumerate(edges):
        rising = (freqs - lo) / (mid - lo)
        falling = (hi - freqs) / (hi - mid)
        row = np.maximum(0.0, np.minimum(rising, falling))
        peak = row.max()
        if peak <= 0:
            raise ValueError(f"mel band {i} ({lo:.1f}-{hi:.1f} Hz) contains no FFT bin")
        matrix[i] = row / peak
    return FilterBank(matrix, edges, float(fmin), float(fmax), sample_rate, n_fft)


def fbank(spec: ComplexSpectrogram, fb: FilterBank, floor_eps: float = LOG_FLOOR,
          item_id: str = "") -> FbankImage:
    """Natural-log mel energies, (frames, bands). No normalization is applied."""
    if fb.bins != spec.bins:
        raise ValueError(f"filter bank has {fb.bins} bins, spectrogram has {spec.bins}")
    power = spec.data.real**2 + spec.data.imag**2
    return FbankImage(np.log(power @ fb.matrix.T + floor_eps), item_id)


_DEFAULT_FB: FilterBank | None = None


def default_filterbank() -> FilterBank:
    global _DEFAULT_FB
    if _DEFAULT_FB is None:
        _DEFAULT_FB = mel_filterbank_matrix()
    return _DEFAULT_FB


def extract_features(wave_buf: WaveBuffer, fb: FilterBank | None = None) -> FbankImage:
    """WAV samples to the (frames, 56) log-Mel image used as network input."""
    fb = fb or default_filterbank()
    return fbank(stft(wave_buf), fb, item_id=wave_buf.item_id)


# ---------------------------------------------------------------------------
# Feature cache


def write_feature_file(path, values: np.ndarray) -> None:
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    with open(path, "wb") as fh:
        fh.write(FBANK_MAGIC)
        fh.write(struct.pack("<II", *values.shape))
        fh.write(values.tobytes())


def read_feature_file(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    head = len(FBANK_MAGIC) + 8
    if len(blob) < head or blob[: len(FBANK_MAGIC)] != FBANK_MAGIC:
        raise ValueError(f"{path}: not a feature cache file")
    rows, cols = struct.unpack("<II", blob[len(FBANK_MAGIC) : head])
    if len(blob) != head + 4 * rows * cols:
        raise ValueError(f"{path}: truncated feature cache ({len(blob)} bytes)")
    return np.frombuffer(blob, dtype="<f4", offset=head).reshape(rows, cols).astype(np.float32)
