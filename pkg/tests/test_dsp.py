import math
import wave

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densebird import dsp
from densebird.dsp import WaveBuffer

SR = dsp.SAMPLE_RATE


def _write_pcm(path, pcm, rate=SR, channels=1, width=2):
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(channels)
        wf.setsampwidth(width)
        wf.setframerate(rate)
        wf.writeframes(np.asarray(pcm).astype(f"<i{width}").tobytes())


def snr_db(ref, est):
    return 10 * np.log10(np.sum(ref**2) / np.sum((ref - est) ** 2))


# --- WAV loading -----------------------------------------------------------


def test_ten_second_mono_file_length(tmp_path):
    _write_pcm(tmp_path / "a.wav", np.zeros(10 * SR, dtype=np.int16))
    buf = dsp.load_wav(tmp_path / "a.wav")
    assert len(buf.samples) == 441_000
    assert buf.sample_rate == SR
    assert buf.item_id == "a"


def test_all_zero_pcm_gives_zero_samples(tmp_path):
    _write_pcm(tmp_path / "z.wav", np.zeros(1000, dtype=np.int16))
    assert not dsp.load_wav(tmp_path / "z.wav").samples.any()


def test_most_negative_pcm_value_maps_to_minus_one(tmp_path):
    _write_pcm(tmp_path / "n.wav", np.array([-32768, 0, 16384], dtype=np.int16))
    s = dsp.load_wav(tmp_path / "n.wav").samples
    assert s[0] == -32768 / 32768
    assert s[2] == 0.5


def test_stereo_is_mean_downmixed(tmp_path):
    pcm = np.array([[1000, 3000], [-200, 200]], dtype=np.int16).reshape(-1)
    _write_pcm(tmp_path / "s.wav", pcm, channels=2)
    np.testing.assert_array_equal(dsp.load_wav(tmp_path / "s.wav").samples, [2000 / 32768, 0.0])


def test_rate_mismatch_requires_flag(tmp_path):
    _write_pcm(tmp_path / "r.wav", np.arange(220, dtype=np.int16), rate=22050)
    with pytest.raises(dsp.AudioFormatError, match="sample rate"):
        dsp.load_wav(tmp_path / "r.wav")
    buf = dsp.load_wav(tmp_path / "r.wav", force_resample=True)
    assert buf.sample_rate == SR and len(buf.samples) == 440
    # linear interpolation halfway between the first two samples
    assert buf.samples[1] == pytest.approx(0.5 / 32768)


def test_unsupported_width_and_garbage_are_errors(tmp_path):
    _write_pcm(tmp_path / "w.wav", np.zeros(10, dtype=np.int32), width=4)
    with pytest.raises(dsp.AudioFormatError, match="16-bit"):
        dsp.load_wav(tmp_path / "w.wav")
    (tmp_path / "g.wav").write_bytes(b"not a wav file at all")
    with pytest.raises(dsp.AudioFormatError):
        dsp.load_wav(tmp_path / "g.wav")
    with pytest.raises(dsp.AudioFormatError):
        dsp.load_wav(tmp_path / "missing.wav")


def test_write_then_read_wav(tmp_path):
    x = np.sin(np.linspace(0, 50, 2000)) * 0.5
    gain = dsp.write_wav(tmp_path / "o.wav", WaveBuffer(x, SR))
    assert gain == 1.0
    np.testing.assert_allclose(dsp.load_wav(tmp_path / "o.wav").samples, x, atol=1 / 32768)
    assert dsp.write_wav(tmp_path / "loud.wav", WaveBuffer(2 * x, SR)) < 1.0


def test_wavebuffer_rejects_nonfinite():
    with pytest.raises(ValueError):
        WaveBuffer(np.array([0.0, np.nan]), SR)


# --- STFT ------------------------------------------------------------------


def test_ten_seconds_give_200_frames():
    spec = dsp.stft(WaveBuffer(np.random.default_rng(0).standard_normal(441_000) * 0.1, SR))
    assert spec.data.shape == (200, 2206)
    assert spec.hop * 2 == spec.frame_len


def test_zero_input_zero_spectrogram():
    assert not dsp.stft(WaveBuffer(np.zeros(10_000), SR)).data.any()


def test_tone_peaks_at_nearest_bin():
    t = np.arange(SR) / SR
    spec = dsp.stft(WaveBuffer(np.sin(2 * np.pi * 1000 * t), SR))
    expected = round(1000 * dsp.FRAME_LEN / SR)
    peaks = np.abs(spec.data).argmax(axis=1)
    # first and last frames only see part of the tone
    assert np.all(peaks[1:-1] == expected)


@given(st.integers(1, 100_000))
def test_frame_count_is_ceil(n):
    assert dsp.frame_count(n) == math.ceil(n / dsp.HOP)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 20_000), st.integers(0, 2**32 - 1))
def test_stft_frames_match_ceil_and_roundtrip(n, seed):
    x = np.random.default_rng(seed).standard_normal(n)
    spec = dsp.stft(WaveBuffer(x, SR))
    assert spec.frames == math.ceil(n / dsp.HOP)
    y = dsp.istft_overlap_add(spec).samples
    assert np.linalg.norm(y - x) / np.linalg.norm(x) < 1e-3


def test_unity_mask_roundtrip_snr():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(3 * SR) * 0.3
    y = dsp.istft_overlap_add(dsp.stft(WaveBuffer(x, SR)), np.ones((60, 2206))).samples
    assert snr_db(x, y) > 60


def test_zero_mask_is_silence():
    x = np.random.default_rng(2).standard_normal(SR)
    spec = dsp.stft(WaveBuffer(x, SR))
    assert not dsp.istft_overlap_add(spec, np.zeros(spec.data.shape)).samples.any()


def test_lowpass_mask_attenuates_high_band():
    x = np.random.default_rng(3).standard_normal(4 * SR)
    spec = dsp.stft(WaveBuffer(x, SR))
    mask = (spec.bin_frequencies() <= 2000).astype(float)[None].repeat(spec.frames, 0)
    y = dsp.istft_overlap_add(spec, mask).samples
    freqs = np.fft.rfftfreq(len(x), 1 / SR)
    hi = freqs > 2500
    px, py = np.abs(np.fft.rfft(x)) ** 2, np.abs(np.fft.rfft(y)) ** 2
    assert 10 * np.log10(px[hi].sum() / py[hi].sum()) >= 20


def test_mask_shape_mismatch():
    spec = dsp.stft(WaveBuffer(np.ones(5000), SR))
    with pytest.raises(ValueError):
        dsp.istft_overlap_add(spec, np.ones((1, 1)))


# --- Mel filter bank -------------------------------------------------------


def test_mel_formula_points():
    assert dsp.hz_to_mel(0) == 0
    assert dsp.hz_to_mel(700) == pytest.approx(781.1728, abs=1e-4)
    assert dsp.hz_to_mel(700) == pytest.approx(2595 * math.log10(2), rel=1e-15)
    np.testing.assert_allclose(dsp.mel_to_hz(dsp.hz_to_mel([50.0, 1e3, 2e4])), [50, 1e3, 2e4])


def test_filterbank_rows():
    fb = dsp.mel_filterbank_matrix()
    assert fb.matrix.shape == (56, 2206)
    assert np.all(fb.matrix >= 0)
    assert np.all(fb.matrix.max(axis=1) == 1.0)
    assert np.all(fb.matrix.sum(axis=1) > 0)
    for m, row in enumerate(fb.matrix):
        nz = np.flatnonzero(row)
        assert np.all(np.diff(nz) == 1), f"band {m} support is not contiguous"
        assert np.count_nonzero(row == 1.0) == 1
        lo, mid, hi = fb.band_edges[m]
        apex_freq = row.argmax() * SR / fb.n_fft
        assert lo < apex_freq < hi
    assert np.all(np.diff(fb.band_edges[:, 1]) > 0)
    assert fb.band_edges[0, 0] == pytest.approx(dsp.FMIN)
    assert fb.band_edges[-1, 2] == pytest.approx(dsp.FMAX)


def test_filterbank_rejects_bad_range():
    with pytest.raises(ValueError):
        dsp.mel_filterbank_matrix(fmin=5000, fmax=1000)
    with pytest.raises(ValueError):
        dsp.mel_filterbank_matrix(fmax=30000)
    with pytest.raises(ValueError):
        dsp.mel_filterbank_matrix(n_mels=0)


# --- F-BANK ----------------------------------------------------------------


def test_fbank_shape_for_ten_seconds():
    x = np.random.default_rng(4).standard_normal(441_000) * 0.05
    img = dsp.extract_features(WaveBuffer(x, SR, "clip"))
    assert img.values.shape == (200, 56)
    assert img.item_id == "clip"
    assert np.all(np.isfinite(img.values))


def test_fbank_of_silence_is_log_floor():
    img = dsp.extract_features(WaveBuffer(np.zeros(20_000), SR))
    np.testing.assert_array_equal(img.values, math.log(dsp.LOG_FLOOR))


def test_doubling_amplitude_adds_ln4():
    x = np.random.default_rng(5).standard_normal(30_000)
    a = dsp.extract_features(WaveBuffer(x, SR)).values
    b = dsp.extract_features(WaveBuffer(2 * x, SR)).values
    np.testing.assert_allclose(b - a, math.log(4), atol=1e-6)


@settings(max_examples=15, deadline=None)
@given(st.floats(1.01, 100.0), st.integers(0, 1000))
def test_fbank_monotone_in_energy(c, seed):
    x = np.random.default_rng(seed).standard_normal(8000)
    a = dsp.extract_features(WaveBuffer(x, SR)).values
    b = dsp.extract_features(WaveBuffer(c * x, SR)).values
    assert np.all(b > a)


def test_fbank_shape_mismatch():
    spec = dsp.stft(WaveBuffer(np.ones(5000), SR))
    with pytest.raises(ValueError):
        dsp.fbank(spec, dsp.mel_filterbank_matrix(bins=513, fmax=20000))


# --- feature cache ---------------------------------------------------------


def test_feature_file_roundtrip_and_layout(tmp_path):
    v = np.random.default_rng(6).standard_normal((200, 56)).astype(np.float32)
    p = tmp_path / "x.fbk"
    dsp.write_feature_file(p, v)
    blob = p.read_bytes()
    assert blob[:7] == b"BADFBK1"
    assert int.from_bytes(blob[7:11], "little") == 200
    assert int.from_bytes(blob[11:15], "little") == 56
    assert len(blob) == 15 + 200 * 56 * 4
    np.testing.assert_array_equal(dsp.read_feature_file(p), v)


def test_feature_file_truncated(tmp_path):
    p = tmp_path / "x.fbk"
    dsp.write_feature_file(p, np.zeros((4, 3)))
    p.write_bytes(p.read_bytes()[:-1])
    with pytest.raises(ValueError, match="truncated"):
        dsp.read_feature_file(p)
    p.write_bytes(b"JUNK")
    with pytest.raises(ValueError):
        dsp.read_feature_file(p)
