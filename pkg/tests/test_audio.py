import math
import wave

import numpy as np
import pytest

from patool.audio import (
    AudioFormatError, FrameConfig, Waveform, bin_frequencies, export_spectrogram_csv, load_wav,
    overlap_add, save_wav, segment, snr_db, spectrum, to_int16,
)


def _write_raw(path, data, channels=1, width=2, rate=16000):
    with wave.open(str(path), "wb") as f:
        f.setnchannels(channels)
        f.setsampwidth(width)
        f.setframerate(rate)
        f.writeframes(np.asarray(data, dtype="<i2" if width == 2 else "u1").tobytes())


def test_waveform_rejects_out_of_range_and_bad_shapes():
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, 1.5]))
    with pytest.raises(ValueError):
        Waveform(np.array([np.nan]))
    with pytest.raises(ValueError):
        Waveform(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        Waveform(np.array([]))
    with pytest.raises(ValueError):
        Waveform(np.zeros(4), 0)


def test_waveform_is_read_only():
    w = Waveform(np.zeros(4))
    with pytest.raises(ValueError):
        w.samples[0] = 0.5


@pytest.mark.parametrize("L", [500, 0, 3])
def test_frame_config_needs_power_of_two(L):
    with pytest.raises(ValueError):
        FrameConfig(L)


def test_frame_config_hop_bounds():
    assert FrameConfig(512).hop == 512
    with pytest.raises(ValueError):
        FrameConfig(512, 513)
    with pytest.raises(ValueError):
        FrameConfig(512, 0)


def test_load_wav_scales_int16(tmp_path):
    p = tmp_path / "a.wav"
    _write_raw(p, [0, 16384, -32768])
    w = load_wav(p)
    assert w.samples.tolist() == [0.0, 0.5, -1.0]
    assert w.sample_rate_hz == 16000


def test_load_wav_rejects_stereo_and_8bit(tmp_path):
    p = tmp_path / "st.wav"
    _write_raw(p, [0, 0, 1, 1], channels=2)
    with pytest.raises(AudioFormatError):
        load_wav(p)
    p8 = tmp_path / "u8.wav"
    _write_raw(p8, [128, 129], width=1)
    with pytest.raises(AudioFormatError):
        load_wav(p8)


def test_load_wav_missing_and_garbage(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_wav(tmp_path / "nope.wav")
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"not a wav file at all")
    with pytest.raises(AudioFormatError):
        load_wav(bad)
    bad.write_bytes(b"RIFF")
    with pytest.raises(AudioFormatError):
        load_wav(bad)


def test_save_wav_clamps_full_scale(tmp_path):
    assert to_int16(np.array([1.0, 0.0, -1.0])).tolist() == [32767, 0, -32768]
    p = tmp_path / "one.wav"
    save_wav(Waveform(np.array([1.0])), p)
    with wave.open(str(p)) as f:
        assert np.frombuffer(f.readframes(1), "<i2")[0] == 32767


def test_save_wav_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        save_wav(Waveform(np.zeros(3)), tmp_path / "missing_dir" / "x.wav")


def test_wav_round_trip_within_one_lsb(tmp_path, rng):
    x = rng.uniform(-1, 1, 1000)
    p = tmp_path / "r.wav"
    save_wav(Waveform(x, 22050), p)
    y = load_wav(p)
    assert y.sample_rate_hz == 22050
    assert np.max(np.abs(y.samples - x)) <= 1 / 32768


def test_segment_counts_and_padding():
    x = np.linspace(-0.5, 0.5, 16000)
    fs = segment(Waveform(x), FrameConfig(512))
    assert fs.frames.shape == (32, 512)
    assert np.all(fs.frames[31, 512 - 384 :] == 0.0)
    assert fs.origin_offsets[3] == 3 * 512


def test_segment_hann_constant_signal_gives_window():
    fs = segment(np.ones(512), FrameConfig(512, 512, "hann"))
    assert fs.frames[0, 0] == 0.0 and fs.frames[0, -1] == 0.0
    k = np.arange(512)
    np.testing.assert_allclose(fs.frames[0], 0.5 - 0.5 * np.cos(2 * np.pi * k / 511), atol=1e-15)


def test_partition_reassembly_is_exact(rng):
    x = rng.uniform(-1, 1, 1500)
    fs = segment(x, FrameConfig(256))
    assert np.array_equal(fs.frames.reshape(-1)[:1500], x)
    assert np.array_equal(overlap_add(fs.frames, 256, 1500), x)


def test_overlap_add_is_adjoint_of_framing(rng):
    cfg = FrameConfig(64, 16, "rectangular")
    x = rng.normal(size=300)
    F = rng.normal(size=(cfg.n_frames(300), 64))
    lhs = np.sum(segment(x, cfg).frames * F)
    rhs = x @ overlap_add(F, 16, 300)
    assert math.isclose(lhs, rhs, rel_tol=1e-12)


def test_spectrum_dc_and_sinusoid():
    L = 64
    spec = spectrum(segment(np.full(L, 0.25), FrameConfig(L)))
    assert abs(spec.bins[0, 0] - 0.25 * math.sqrt(L)) < 1e-12
    assert np.max(np.abs(spec.bins[0, 1:])) < 1e-12
    k0 = 5
    s = np.cos(2 * np.pi * k0 * np.arange(L) / L)
    full = np.fft.fft(s) / math.sqrt(L)
    peaks = np.flatnonzero(np.abs(full) > 1e-9)
    assert peaks.tolist() == [k0, L - k0]
    assert abs(full[k0] - np.conj(full[L - k0])) < 1e-12


def test_parseval_against_direct_dft(rng):
    L = 128
    frame = rng.normal(size=L)
    n = np.arange(L)
    direct = np.array([np.sum(frame * np.exp(-2j * np.pi * k * n / L)) for k in range(L)]) / math.sqrt(L)
    X = spectrum(segment(frame, FrameConfig(L))).bins[0]
    np.testing.assert_allclose(X, direct[: L // 2 + 1], atol=1e-10)
    assert math.isclose(np.sum(np.abs(direct) ** 2), np.sum(frame**2), rel_tol=1e-9)


def test_snr_examples():
    x = np.zeros(100)
    x[0] = 1.0
    d = np.zeros(100)
    d[1] = 0.1
    assert math.isclose(snr_db(x, d), 20.0)
    assert snr_db(x, np.zeros(100)) == math.inf
    assert snr_db(x, x) == 0.0
    with pytest.raises(ValueError):
        snr_db(x, np.zeros(99))


def test_bin_frequencies():
    f = bin_frequencies(FrameConfig(512), 16000)
    assert f[0] == 0 and f[-1] == 8000 and f.size == 257


def test_spectrogram_csv_shape_and_chirp(tmp_path):
    p = tmp_path / "s.csv"
    export_spectrogram_csv(Waveform(np.full(100, 0.1)), FrameConfig(128), p)
    rows = p.read_text().strip().splitlines()
    assert len(rows) == 2 and len(rows[1].split(",")) == 65

    silent = tmp_path / "z.csv"
    export_spectrogram_csv(Waveform(np.zeros(256)), FrameConfig(128), silent)
    vals = np.loadtxt(silent, delimiter=",", skiprows=1)
    assert np.all(vals == -120.0)

    t = np.arange(16000) / 16000
    chirp = 0.5 * np.sin(2 * np.pi * (200 * t + 3000 * t**2))
    c = tmp_path / "c.csv"
    export_spectrogram_csv(Waveform(chirp), FrameConfig(512, 512, "hann"), c)
    peaks = np.argmax(np.loadtxt(c, delimiter=",", skiprows=1), axis=1)
    assert np.all(np.diff(peaks) >= 0) and peaks[-1] > peaks[0]
