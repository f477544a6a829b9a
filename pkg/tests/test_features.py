"""Front-end transforms against closed-form signal oracles."""

import numpy as np
import pytest

from sedt.features import (
    FeatureConfig,
    NormalizationStats,
    Waveform,
    compute_normalization_stats,
    hz_to_mel,
    load_features,
    log_mel,
    mel_filterbank,
    mel_to_hz,
    normalize,
    save_features,
    stft_magnitude,
)
from sedt.geometry import ValidationError


class TestStft:
    def test_zero_signal_gives_zero_magnitudes(self):
        mag = stft_magnitude(np.zeros(4000), win_len=512, hop=128)
        assert mag.shape == (int(np.ceil(4000 / 128)), 257)
        assert np.all(mag == 0)

    def test_frame_count_is_ceil(self):
        mag = stft_magnitude(np.random.default_rng(0).standard_normal(1000), 256, 160)
        assert mag.shape[0] == int(np.ceil(1000 / 160))

    def test_bin_centered_sine_concentrates_energy(self):
        # Rectangular window with win == hop: every frame holds an integer
        # number of cycles, so the DFT has a single nonzero bin.
        sr, win = 16000, 256
        k = 32
        f = k * sr / win
        t = np.arange(win * 8) / sr
        x = np.sin(2 * np.pi * f * t)
        mag = stft_magnitude(x, win_len=win, hop=win, window="rect")
        energy = mag**2
        ratio = energy[:, k] / energy.sum(axis=1)
        assert np.all(ratio >= 0.95)

    def test_parseval_energy_conservation(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal(2048)
        win, hop = 512, 512
        mag = stft_magnitude(x, win, hop, window="hann")
        w = np.hanning(win)
        # rfft Parseval: sum|x|^2 = (|X_0|^2 + 2*sum_mid|X_k|^2 + |X_N/2|^2)/N
        weights = np.full(win // 2 + 1, 2.0)
        weights[0] = weights[-1] = 1.0
        spectral = (mag**2 * weights).sum(axis=1) / win
        framed = (x.reshape(-1, win) * w) ** 2
        np.testing.assert_allclose(spectral, framed.sum(axis=1), rtol=0.01)

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            stft_magnitude(np.array([]), 256, 128)

    def test_bad_hop_rejected(self):
        with pytest.raises(ValidationError):
            stft_magnitude(np.ones(100), 64, 128)


class TestMelFilterbank:
    def test_rows_sum_positive(self):
        fb = mel_filterbank(64, 0.0, 8000.0, 513, 16000)
        assert fb.shape == (64, 513)
        assert np.all(fb.sum(axis=1) > 0)
        assert np.all(fb >= 0)

    def test_adjacent_crossover_at_peak(self):
        fb = mel_filterbank(16, 0.0, 8000.0, 513, 16000)
        for k in range(15):
            peak_bin = int(np.argmax(fb[k]))
            # the next filter rises from (approximately) this bin
            assert fb[k + 1, peak_bin] <= fb[k + 1].max() * 0.2

    def test_mel_scale_reference_point(self):
        assert hz_to_mel(700.0) == pytest.approx(2595.0 * np.log10(2.0), abs=1e-9)
        assert mel_to_hz(hz_to_mel(1234.5)) == pytest.approx(1234.5, abs=1e-6)

    def test_interior_bins_covered(self):
        fb = mel_filterbank(64, 0.0, 8000.0, 513, 16000)
        bin_freqs = np.arange(513) * 8000.0 / 512
        interior = (bin_freqs > 0) & (bin_freqs < 8000.0)
        assert np.all(fb[:, interior].sum(axis=0) > 0)

    def test_degenerate_range_rejected(self):
        with pytest.raises(ValidationError):
            mel_filterbank(64, 4000.0, 4000.0, 513, 16000)
        with pytest.raises(ValidationError):
            mel_filterbank(64, 0.0, 9000.0, 513, 16000)


class TestLogMel:
    def test_silence_hits_floor(self):
        cfg = FeatureConfig()
        wav = Waveform(np.zeros(16000), 16000)
        spec = log_mel(wav, cfg)
        np.testing.assert_allclose(spec.values, np.log(cfg.eps_floor))

    def test_doubling_amplitude_adds_log4(self):
        rng = np.random.default_rng(5)
        x = 0.3 * rng.standard_normal(16000)
        cfg = FeatureConfig()
        a = log_mel(Waveform(x, 16000), cfg)
        b = log_mel(Waveform(2 * x, 16000), cfg)
        np.testing.assert_allclose(b.values - a.values, np.log(4.0), atol=1e-6)

    def test_shape_contract(self):
        wav = Waveform(np.random.default_rng(0).standard_normal(160000), 16000)
        spec = log_mel(wav, FeatureConfig(hop=160))
        assert spec.values.shape == (1000, 64)
        assert spec.hop_s == pytest.approx(0.01)

    def test_deterministic(self):
        x = np.random.default_rng(6).standard_normal(8000)
        a = log_mel(Waveform(x, 16000))
        b = log_mel(Waveform(x.copy(), 16000))
        assert np.array_equal(a.values, b.values)

    def test_monotone_in_amplitude(self):
        x = np.random.default_rng(7).standard_normal(8000)
        a = log_mel(Waveform(x, 16000))
        b = log_mel(Waveform(3.0 * x, 16000))
        assert np.all(b.values >= a.values)


class TestNormalize:
    def test_constant_input_with_matching_stats_is_zero(self):
        spec = log_mel(Waveform(np.zeros(8000), 16000))
        stats = NormalizationStats(
            mean=spec.values.mean(axis=0), std=np.ones(spec.n_mels)
        )
        out = normalize(spec, stats)
        np.testing.assert_allclose(out.values, 0.0)

    def test_not_idempotent(self):
        rng = np.random.default_rng(8)
        spec = log_mel(Waveform(rng.standard_normal(8000), 16000))
        stats = compute_normalization_stats([spec])
        once = normalize(spec, stats)
        twice = normalize(once, stats)
        assert not np.allclose(once.values, twice.values)

    def test_split_statistics_normalize_to_unit(self):
        rng = np.random.default_rng(9)
        specs = [
            log_mel(Waveform(rng.standard_normal(8000) * rng.uniform(0.5, 2), 16000))
            for _ in range(6)
        ]
        stats = compute_normalization_stats(specs)
        stacked = np.concatenate([normalize(s, stats).values for s in specs], axis=0)
        np.testing.assert_allclose(stacked.mean(axis=0), 0.0, atol=1e-3)
        np.testing.assert_allclose(stacked.std(axis=0), 1.0, atol=1e-3)

    def test_zero_std_bin_uses_floor(self):
        spec = log_mel(Waveform(np.zeros(8000), 16000))
        stats = compute_normalization_stats([spec])  # std is exactly zero
        out = normalize(spec, stats)
        assert np.all(np.isfinite(out.values))


class TestFeatureCache:
    def test_round_trip(self, tmp_path):
        spec = log_mel(Waveform(np.random.default_rng(1).standard_normal(8000), 16000))
        save_features(spec, "clip_x", tmp_path)
        loaded = load_features(tmp_path / "clip_x.npy")
        assert np.array_equal(loaded.values, spec.values)
        assert loaded.hop_s == spec.hop_s
        assert loaded.clip_len_s == spec.clip_len_s
