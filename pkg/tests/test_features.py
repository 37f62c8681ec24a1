import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from weakclick import features as F
from weakclick.audio import AudioSegment
from weakclick.features import FeatureCombination, FeatureSequence

RATE = 48_000
BIN = 93.75


def _sine(freq, n=512, amp=1.0, phase=0.0):
    return amp * np.sin(2 * np.pi * freq * np.arange(n) / RATE + phase)


def test_rms_band_examples():
    assert F.rms_band(np.zeros(512), 1000, 2000) == 0.0
    rng = np.random.default_rng(0)
    for f in rng.uniform(2000, 18000, size=10):
        assert F.rms_band(_sine(f, amp=0.5, phase=rng.uniform(0, 6)), 1000, 20000) == pytest.approx(0.3536, rel=0.02)
    assert F.rms_band(_sine(10_000, amp=0.5), 1000, 2000) < 0.02 * 0.5
    assert F.rms_band(_sine(10_000, n=2048, amp=0.5), 1000, 2000) < 0.02 * 0.5


def test_rms_band_stopband_matches_filter_oracle():
    for f1, f2 in [(1000, 2000), (2000, 4000), (16000, 20000)]:
        x = _sine(10_000, n=2048, amp=0.5)
        assert F.rms_band(x, f1, f2) == pytest.approx(oracles.rms_band(x, f1, f2), rel=1e-6)


def test_spectral_frame_tone_and_zero():
    fr = F.spectral_frame(_sine(5000))
    assert abs(F.FREQS[np.argmax(fr.s)] - 5000) <= 2 * BIN
    assert abs(F.peak_frequency(fr) - 5000) <= BIN
    assert fr.bin_width == BIN
    assert np.all(np.diff(fr.f) > 0)
    assert np.all(F.spectral_frame(np.zeros(512)).s == 0)
    with pytest.raises(ValueError):
        F.spectral_frame(np.zeros(500))


def test_white_noise_spectrum_is_flat_on_average():
    rng = np.random.default_rng(1)
    s = np.mean([F.spectral_frame(rng.standard_normal(512)).s for _ in range(100)], axis=0)
    assert s.max() / s.min() < 1.6


def test_frequency_statistics_examples():
    assert F.mean_frequency(np.ones(203)) == pytest.approx(10_500.0)
    s = np.zeros(203)
    k = int(np.flatnonzero(F.FREQS == 8062.5)[0])
    s[k] = 3.0
    assert F.peak_frequency(s) == F.mean_frequency(s) == 8062.5
    assert F.spectral_width(s) == 0.0
    zero = np.zeros(203)
    assert F.peak_frequency(zero) == F.mean_frequency(zero) == F.spectral_width(zero) == 0.0
    assert F.handcrafted_features(np.zeros(512)).degenerate


def test_energy_partition_and_tone():
    s = F.spectral_frame(np.random.default_rng(2).standard_normal(512)).s
    parts = sum(F.energy_sum(s, a, b) for a, b in [(1000, 4000), (4000, 8000), (8000, 16000)])
    assert parts == pytest.approx(F.energy_sum(s, 1000, 16000), rel=1e-12)
    assert F.energy_sum(np.zeros(203), 1000, 4000) == 0.0
    tone = F.spectral_frame(_sine(5000)).s
    assert F.energy_sum(tone, 4000, 8000) >= 0.95 * tone.sum()


def test_spectral_width_scan_rules():
    s = np.full(203, 1e-6)
    s[50:61] = 1.0  # 11-bin plateau
    assert F.spectral_width(s) == pytest.approx(10 * BIN)
    assert F.spectral_width(s) == oracles.width(s)
    s[61:64] = 1e-6  # 3-bin gap is bridged
    s[64:70] = 1.0
    assert F.spectral_width(s) == pytest.approx(19 * BIN)
    s = np.full(203, 1e-6)
    s[50:61] = 1.0
    s[61:65] = 1e-6  # 4-bin gap stops the scan
    s[65:70] = 1.0
    assert F.spectral_width(s) == pytest.approx(10 * BIN)
    assert F.spectral_width(s) == oracles.width(s)


def test_profile_length_zero_and_tone_position():
    assert F.spectral_profile(np.random.default_rng(3).standard_normal(512)).shape == (200,)
    assert np.all(F.spectral_profile(np.zeros(512)) == 0)
    expected = (10_000 - 1031.25) / BIN
    assert abs(np.argmax(F.spectral_profile(_sine(10_000))) - expected) <= 1.0
    prof = F.normalised_profiles(_sine(10_000))
    assert prof.shape == (1, 200)
    assert prof.min() == 0.0 and prof.max() == 1.0


def test_spectrogram_shape_zero_and_range():
    assert F.spectrogram(np.zeros(32_768)).shape == (128, 128)
    assert np.all(F.spectrogram(np.zeros(32_768)) == 0)
    img = F.spectrogram(np.random.default_rng(4).standard_normal(32_768))
    assert img.min() == 0.0 and img.max() == 1.0


def _column_peaks(energy):
    """Local maxima of column energy rising above the midpoint between floor and max."""
    mid = 0.5 * (np.median(energy) + energy.max())
    return [i for i in range(len(energy))
            if energy[i] > mid and energy[i] >= energy[max(i - 1, 0)] and energy[i] > energy[min(i + 1, len(energy) - 1)]]


@pytest.mark.parametrize("offset", [0.01, 0.05, 0.12, 0.19])
def test_click_train_gives_one_stripe_per_click(offset):
    rng = np.random.default_rng(5)
    x = rng.standard_normal(32_768) * 0.01
    click = np.sin(2 * np.pi * 9000 * np.arange(48) / RATE) * np.exp(-np.arange(48) / 10)
    times = [t for t in np.arange(offset, 0.68, 0.2) if t * RATE + 48 < 32_768]
    for t in times:
        i = int(t * RATE)
        x[i:i + 48] += click
    img = F.spectrogram(x)
    peaks = _column_peaks(img.sum(axis=1))
    assert len(peaks) == len(times)
    assert 3 <= len(peaks) <= 4
    # each stripe sits at the frame containing its click
    for p, t in zip(peaks, times):
        assert abs(p - t * RATE / 256) <= 2


@pytest.mark.parametrize("n_samples,window,expected", [
    (11_520_000, 512, 22_500), (11_520_000, 2048, 5_625), (1_440_000, 512, 2_812), (1_440_000, 2048, 703),
    (11_520_000, 32_768, 352), (1_440_000, 32_768, 44)])
def test_window_counts(n_samples, window, expected):
    assert F.window_count(n_samples, window) == expected


def test_extract_sequence_shapes_and_errors():
    seg = AudioSegment(np.random.default_rng(6).standard_normal(48_000), RATE)
    for combo in FeatureCombination:
        seq = F.extract_sequence(seg, combo, 512)
        assert seq.data.shape == (combo.m, 93)
    assert [c.m for c in FeatureCombination] == [1, 3, 5, 4, 7]
    with pytest.raises(ValueError):
        F.extract_sequence(seg, "Rms3", 1000)
    with pytest.raises(ValueError, match="unknown"):
        FeatureCombination.parse("Rms4")


def test_extract_sequence_matches_per_window_features():
    rng = np.random.default_rng(7)
    x = rng.standard_normal(2048 * 3) * 0.1
    x[3000:3048] += 0.8
    seq = F.extract_sequence(x, FeatureCombination.SPECTRAL7, 2048).data
    for j in range(3):
        hf = F.handcrafted_features(x[j * 2048:(j + 1) * 2048])
        want = [hf.rms[(1000, 20000)], hf.pkf, hf.mean_f, hf.width, hf.energy[(1000, 4000)],
                hf.energy[(4000, 8000)], hf.energy[(8000, 16000)]]
        np.testing.assert_allclose(seq[:, j], want, rtol=1e-5)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([512, 2048]), st.integers(1, 4), st.integers(0, 3),
       st.sampled_from(list(FeatureCombination)))
def test_concatenation_invariance(seed, window, na, nb, combo):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(window * na)
    b = rng.standard_normal(window * nb + rng.integers(0, window))
    whole = F.extract_sequence(np.concatenate([a, b]), combo, window).data
    parts = np.concatenate([F.extract_sequence(a, combo, window).data,
                            F.extract_sequence(b, combo, window).data], axis=1)
    np.testing.assert_array_equal(whole, parts)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.integers(-8, 8))
def test_dc_and_scale_properties(seed, offset, exponent):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(2048) * 0.1
    x[rng.integers(0, 2000):][:48] += rng.uniform(0.1, 1.0)
    base = F.combo_matrix(x[None], FeatureCombination.SPECTRAL7)[:, 0]
    rms5 = F.combo_matrix(x[None], FeatureCombination.RMS5)[:, 0]
    shifted = F.combo_matrix((x + offset)[None], FeatureCombination.SPECTRAL7)[:, 0]
    np.testing.assert_allclose(shifted, base, rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(F.combo_matrix((x + offset)[None], FeatureCombination.RMS5)[:, 0], rms5,
                               rtol=1e-6, atol=1e-12)
    c = 2.0 ** exponent
    scaled = F.combo_matrix((c * x)[None], FeatureCombination.SPECTRAL7)[:, 0]
    np.testing.assert_allclose(scaled[0], c * base[0], rtol=1e-12)  # rms is linear
    np.testing.assert_allclose(scaled[1:4], base[1:4], rtol=1e-12)  # frequencies are scale-free
    np.testing.assert_allclose(scaled[4:], c * c * base[4:], rtol=1e-12)  # energies are quadratic


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.001, 1000.0))
def test_frequency_features_invariant_to_any_positive_scale(seed, c):
    x = np.random.default_rng(seed).standard_normal(512)
    s, sc = F.spectral_frame(x), F.spectral_frame(c * x)
    assert F.peak_frequency(s) == F.peak_frequency(sc)
    assert F.mean_frequency(sc) == pytest.approx(F.mean_frequency(s), rel=1e-9)
    assert abs(F.spectral_width(sc) - F.spectral_width(s)) <= BIN


def test_in_band_energy_tracks_rms_squared():
    # Parseval: for in-band tones the summed spectrum is a fixed multiple of rms^2
    ratios = []
    for f in np.linspace(2000, 18_000, 9):
        x = _sine(f, amp=0.3, phase=0.4)
        ratios.append(F.energy_sum(F.spectral_frame(x), 1000, 20_001) / F.rms_band(x, 1000, 20_000) ** 2)
    ratios = np.array(ratios)
    # for a Hann window sum |X_k|^2 over positive bins = N * sum(w^2 x^2) / 2 ~ N * 3N/8 * rms^2 / 2
    assert np.allclose(ratios, 512 * 512 * 3 / 8 / 2, rtol=0.05)


def test_spectral_frame_matches_direct_dft_oracle():
    x = np.random.default_rng(8).standard_normal(512)
    np.testing.assert_allclose(F.spectral_frame(x).s, oracles.band_spectrum(x), rtol=1e-9)
    y = np.random.default_rng(9).standard_normal(2048)
    np.testing.assert_allclose(F._band_spectra(y), oracles.band_spectrum(y), rtol=1e-9)


def test_feature_sequence_round_trip(tmp_path):
    seq = F.extract_sequence(np.random.default_rng(10).standard_normal(4096), "Rms3", 512, source="a.wav",
                             label="Positive", deployment="D1")
    seq.save(tmp_path / "a.fsq")
    back = FeatureSequence.load(tmp_path / "a.fsq")
    np.testing.assert_array_equal(back.data, seq.data)
    assert (back.combo, back.window, back.source, back.label, back.deployment) == (
        "Rms3", 512, "a.wav", "Positive", "D1")
