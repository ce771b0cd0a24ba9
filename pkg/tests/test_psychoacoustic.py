import math

import numpy as np
import pytest

from patool import psychoacoustic as pa
from patool.audio import FrameConfig, Waveform


FREQS = np.arange(257) * 16000 / 512


def _sine_frame_psd(bin_index, amp=0.5, L=512):
    n = np.arange(L)
    x = amp * np.sin(2 * np.pi * bin_index * n / L) * np.hanning(L)
    X = np.fft.rfft(x) / math.sqrt(L)
    return 10 * np.log10(np.abs(X) ** 2 + 1e-12)


def test_ath_values():
    # closed form evaluated by hand: 3.64 - 6.5*exp(-0.6*2.3**2) + 1e-3
    assert abs(pa.absolute_threshold(1000.0) - 3.369) < 1e-3
    assert pa.absolute_threshold(3300.0) < pa.absolute_threshold(100.0)
    assert pa.absolute_threshold(20.0) > pa.absolute_threshold(1000.0)
    with pytest.raises(ValueError):
        pa.absolute_threshold(10.0)
    with pytest.raises(ValueError):
        pa.absolute_threshold(9000.0)


def test_bark_reference_points():
    # Zwicker's table puts 1 kHz near 8.5 Bark and 4 kHz near 17.3 Bark
    assert abs(pa.bark(1000.0) - 8.5) < 0.1
    assert abs(pa.bark(4000.0) - 17.3) < 0.2


def test_spl_normalize_shift_and_silence():
    psd = np.full(257, -20.0)
    psd[10] = 40.0
    spl = pa.spl_normalize(psd, FREQS)
    assert spl.levels_db_spl[10] == 96.0
    assert spl.norm_offset_db == 56.0
    silent = pa.spl_normalize(np.full(257, -120.0), FREQS)
    assert silent.silent and np.all(silent.levels_db_spl == -120.0)


def test_spl_normalize_gain_invariant(rng):
    x = rng.normal(0, 0.1, 512)
    psd = lambda v: 10 * np.log10(np.abs(np.fft.rfft(v) / math.sqrt(512)) ** 2 + 1e-12)
    a = pa.spl_normalize(psd(x), FREQS)
    b = pa.spl_normalize(psd(2 * x), FREQS)
    np.testing.assert_allclose(a.levels_db_spl, b.levels_db_spl, atol=1e-9)


def test_single_sinusoid_has_one_tonal_masker():
    m = pa.find_maskers(pa.spl_normalize(_sine_frame_psd(40), FREQS))
    assert [b for b, _ in m.tonal] == [40]
    P = pa.spl_normalize(_sine_frame_psd(40), FREQS).levels_db_spl
    for b, _ in m.tonal:
        assert P[b] > P[b - 1] and P[b] > P[b + 1]


def test_flat_psd_gives_one_nontonal_per_band():
    m = pa.find_maskers(pa.spl_normalize(np.zeros(257), FREQS))
    assert m.tonal == []
    # bark(8000 Hz) = 21.27, so bins span bands 0..21
    assert len(m.nontonal) == 22


def test_silence_has_no_maskers_and_threshold_is_ath():
    m = pa.find_maskers(pa.spl_normalize(np.full(257, -120.0), FREQS))
    assert m.all() == []
    t = pa.global_threshold(pa.decimate_maskers(m))
    assert np.array_equal(t, pa.ath_bins(FREQS))


def test_decimation_rules():
    z = pa.bark(FREQS)
    b1 = 60
    b2 = int(np.argmin(np.abs(z - (z[b1] + 0.3))))
    m = pa.MaskerSet([(b1, 80.0), (b2, 60.0)], [], FREQS)
    assert pa.decimate_maskers(m).tonal == [(b1, 80.0)]
    b3 = int(np.argmin(np.abs(z - (z[b1] + 2.0))))
    m = pa.MaskerSet([(b1, 80.0), (b3, 60.0)], [], FREQS)
    assert len(pa.decimate_maskers(m).tonal) == 2
    quiet = pa.ath_bins(FREQS)[b1] - 10
    assert pa.decimate_maskers(pa.MaskerSet([], [(b1, quiet)], FREQS)).all() == []


def test_decimated_maskers_half_bark_apart(tone_clip):
    an = pa.analyze(tone_clip)
    z = pa.bark(FREQS)
    for m in an.maskers:
        bins = sorted(b for b, _, _ in m.all())
        assert all(z[j] - z[i] >= 0.5 for i, j in zip(bins, bins[1:]))


def test_strong_masker_raises_local_threshold_only():
    b = 64
    m = pa.MaskerSet([(b, 90.0)], [], FREQS)
    t = pa.global_threshold(m)
    ath = pa.ath_bins(FREQS)
    assert np.all(t[b - 3 : b + 4] > ath[b - 3 : b + 4])
    far = np.abs(pa.bark(FREQS) - pa.bark(FREQS[b])) > 8.5
    assert np.all(np.abs(t[far] - ath[far]) <= 0.1)


def test_more_maskers_never_lower_threshold():
    a = pa.global_threshold(pa.MaskerSet([(40, 80.0)], [], FREQS))
    b = pa.global_threshold(pa.MaskerSet([(40, 80.0), (120, 70.0)], [(200, 60.0)], FREQS))
    assert np.all(b >= a)


def test_weights():
    assert pa.weights(np.array([0.0]))[0] == 1.0
    assert math.isclose(pa.weights(np.array([50.0]), 0.06)[0], 1e-3, rel_tol=1e-12)
    w = pa.weights(np.array([10.0, 20.0, 30.0]))
    assert np.all(np.diff(w) < 0)
    with pytest.raises(ValueError):
        pa.weights(np.array([1.0]), 0.0)


def test_threshold_above_ath_on_signal(tone_clip):
    an = pa.analyze(tone_clip)
    assert np.all(an.thresholds_db >= pa.ath_bins(an.freqs_hz)[None, :] - 1e-9)
    assert np.all(an.weights > 0)


def test_analysis_gain_invariant(tone_clip):
    a = pa.analyze(tone_clip)
    b = pa.analyze(Waveform(tone_clip.samples * 0.5))
    # only the fixed PSD floor breaks exact invariance, and only in near-empty bins
    np.testing.assert_allclose(a.thresholds_db, b.thresholds_db, atol=0.05)


def test_analysis_requires_stride_equal_to_length(tone_clip):
    with pytest.raises(ValueError):
        pa.analyze(tone_clip, FrameConfig(512, 256, "hann"))


def test_quadratic_form_identity_weights():
    G = pa.quadratic_form(np.ones((1, 33)))
    np.testing.assert_allclose(G, np.eye(64), atol=1e-12)


def test_quadratic_form_matches_circulant_oracle(rng):
    L = 64
    w_half = rng.uniform(0.1, 2.0, (1, L // 2 + 1))
    G = pa.quadratic_form(w_half)
    # with mirrored weights, G[m, n] = (1/L) sum_k w_k cos(2 pi k (m - n) / L)
    wf = np.concatenate([w_half[0], w_half[0][-2:0:-1]])
    m = np.arange(L)
    diff = m[:, None] - m[None, :]
    oracle = np.zeros((L, L))
    for k in range(L):
        oracle += wf[k] * np.cos(2 * np.pi * k * diff / L)
    oracle /= L
    np.testing.assert_allclose(G, oracle, atol=1e-12)
    assert np.max(np.abs(G - G.T)) <= 1e-10
    d = rng.normal(size=L)
    assert d @ G @ d >= -1e-12
    spec = np.fft.fft(d) / math.sqrt(L)
    assert math.isclose(d @ G @ d, np.sum(wf * np.abs(spec) ** 2), rel_tol=1e-8)


def test_matrix_free_matches_dense(rng):
    W = rng.uniform(0.0, 1.0, (3, 257))
    frames = rng.normal(size=(3, 512))
    fast = pa.apply_quadratic_form(W, frames)
    for n in range(3):
        np.testing.assert_allclose(fast[n], pa.quadratic_form(W, n) @ frames[n], atol=1e-10)


def test_perceptual_loss_zero_and_oracle(tone_clip, rng):
    an = pa.analyze(tone_clip)
    loss, grad = pa.perceptual_loss(np.zeros(16000), an)
    assert loss == 0.0 and not np.any(grad)
    d = rng.normal(0, 1e-3, 16000)
    loss, _ = pa.perceptual_loss(d, an)
    assert math.isclose(loss, pa.spectral_perceptual_loss(d, an), rel_tol=1e-8)
    with pytest.raises(ValueError):
        pa.perceptual_loss(np.zeros(100), an)


def test_perceptual_loss_gradient_finite_differences(tone_clip, rng):
    an = pa.analyze(tone_clip)
    d = rng.normal(0, 1e-2, 16000)
    _, g = pa.perceptual_loss(d, an)
    h = 1e-5
    for i in rng.choice(16000, 10, replace=False):
        e = np.zeros(16000)
        e[i] = h
        fd = (pa.perceptual_loss(d + e, an)[0] - pa.perceptual_loss(d - e, an)[0]) / (2 * h)
        assert abs(fd - g[i]) <= 1e-5 * max(abs(g[i]), 1e-12)


def test_loss_monotone_along_rays(tone_clip, rng):
    an = pa.analyze(tone_clip)
    d = rng.normal(size=16000)
    losses = [pa.perceptual_loss(s * d, an)[0] for s in (0.0, 0.1, 0.5, 1.0, 3.0)]
    assert all(a <= b for a, b in zip(losses, losses[1:]))


def test_delta_spl_of_signal_matches_its_own_levels(tone_clip):
    an = pa.analyze(tone_clip)
    lv = pa.delta_spl_db(tone_clip.samples, an)
    above_floor = an.levels_db_spl - an.norm_offsets_db[:, None] > -90
    np.testing.assert_allclose(lv[above_floor], an.levels_db_spl[above_floor], atol=5e-3)


def test_export_threshold_csv(tone_clip, tmp_path):
    an = pa.analyze(tone_clip)
    p = tmp_path / "t.csv"
    pa.export_threshold_csv(an, p)
    rows = p.read_text().strip().splitlines()
    assert len(rows) == an.n_frames + 1
    assert rows[0].split(",")[1] == "31.25"
