import numpy as np
import pytest

from conftest import sine_buffer
from ddmkit.audio import AudioBuffer
from ddmkit.prosody import (ContourSet, energy_contours, extract_contours, f0_contour,
                            frame_count, normalize_contours, write_contours_csv)


class TestF0:
    @pytest.mark.parametrize("freq", [100.0, 200.0])
    def test_pure_tone_recovered(self, freq):
        f0 = f0_contour(sine_buffer(freq))
        voiced = f0[f0 > 0]
        assert len(voiced) > 0.9 * len(f0)
        assert abs(np.median(voiced) - freq) <= 2.0

    def test_silence_all_unvoiced(self):
        buf = AudioBuffer(np.zeros(16000), 16000)
        f0 = f0_contour(buf)
        assert len(f0) == frame_count(16000, 16000)
        assert not f0.any()

    def test_too_short_gives_empty(self):
        buf = AudioBuffer(np.zeros(100), 16000)
        assert len(f0_contour(buf)) == 0

    def test_white_noise_mostly_unvoiced(self, rng):
        buf = AudioBuffer(0.5 * rng.standard_normal(16000), 16000)
        f0 = f0_contour(buf)
        assert np.count_nonzero(f0) < 0.2 * len(f0)

    def test_amplitude_invariant(self):
        loud = sine_buffer(150.0, amplitude=0.9)
        quiet = AudioBuffer(loud.samples * 0.01, 16000)
        assert np.allclose(f0_contour(loud), f0_contour(quiet))

    def test_sawtooth_not_octave_doubled(self):
        # harmonic-rich signal: the fundamental must win over harmonics
        rate, freq = 16000, 150.0
        t = np.arange(rate) / rate
        x = sum(np.sin(2 * np.pi * k * freq * t) / k for k in range(1, 7))
        f0 = f0_contour(AudioBuffer(0.5 * x / np.abs(x).max(), rate))
        voiced = f0[f0 > 0]
        assert abs(np.median(voiced) - freq) <= 2.0


class TestEnergy:
    def test_500hz_in_low_band(self):
        tot, low, high = energy_contours(sine_buffer(500.0))
        assert low.sum() / (low.sum() + high.sum()) >= 0.99

    def test_2khz_in_high_band(self):
        tot, low, high = energy_contours(sine_buffer(2000.0))
        assert high.sum() / (low.sum() + high.sum()) >= 0.99

    def test_boundary_1khz_assigned_high(self):
        tot, low, high = energy_contours(sine_buffer(1000.0))
        assert high.sum() > low.sum()

    def test_parseval_per_frame(self, rng):
        buf = AudioBuffer(rng.uniform(-0.8, 0.8, size=12000), 16000)
        tot, low, high = energy_contours(buf)
        nz = tot > 0
        assert np.all(np.abs(low[nz] + high[nz] - tot[nz]) / tot[nz] <= 1e-3)

    def test_amplitude_scales_quadratically(self):
        buf = sine_buffer(300.0, amplitude=0.4)
        buf2 = AudioBuffer(buf.samples * 2.0, 16000)
        t1, l1, h1 = energy_contours(buf)
        t2, l2, h2 = energy_contours(buf2)
        assert np.allclose(t2, 4 * t1)
        assert np.allclose(l2, 4 * l1)
        assert np.allclose(h2, 4 * h1, atol=1e-12)

    def test_empty_audio(self):
        tot, low, high = energy_contours(AudioBuffer(np.zeros(10), 16000))
        assert len(tot) == len(low) == len(high) == 0


class TestContourSet:
    def test_all_channels_share_length(self):
        c = extract_contours(sine_buffer(120.0, duration_s=0.8))
        n = frame_count(int(0.8 * 16000), 16000)
        assert len(c) == n
        assert c.as_matrix().shape == (4, n)

    def test_mismatched_lengths_rejected(self):
        with pytest.raises(ValueError, match="share one length"):
            ContourSet(np.zeros(3), np.zeros(3), np.zeros(2), np.zeros(3))

    def test_band_split_invariant(self):
        c = extract_contours(sine_buffer(700.0))
        c.validate_raw()

    def test_csv_dump(self, tmp_path):
        c = extract_contours(sine_buffer(100.0, duration_s=0.2))
        path = tmp_path / "c.csv"
        write_contours_csv(c, str(path))
        lines = path.read_text().splitlines()
        assert lines[0] == "frame_index,f0,e_total,e_low,e_high"
        assert len(lines) == len(c) + 1


class TestNormalize:
    def test_constant_channel_zeroed(self):
        c = ContourSet(np.zeros(10), np.full(10, 2.5), np.full(10, 1.0), np.full(10, 1.5))
        out = normalize_contours(c)
        assert not out.energy_total.any()
        assert not out.f0_hz.any()

    def test_zscore_over_included_frames(self, rng):
        f0 = np.where(rng.random(200) < 0.3, 0.0, rng.uniform(80, 300, 200))
        e = rng.uniform(0.1, 5.0, 200)
        c = ContourSet(f0, e, e * 0.6, e * 0.4)
        out = normalize_contours(c)
        included = out.f0_hz[f0 != 0]
        assert included.mean() == pytest.approx(0.0, abs=1e-6)
        assert included.std() == pytest.approx(1.0, abs=1e-6)
        assert not out.f0_hz[f0 == 0].any()

    def test_all_unvoiced_f0_stays_zero(self):
        c = ContourSet(np.zeros(50), np.ones(50), np.ones(50) * 0.5, np.ones(50) * 0.5)
        assert not normalize_contours(c).f0_hz.any()

    def test_idempotent(self, rng):
        e = rng.uniform(0.1, 5.0, 100)
        c = ContourSet(rng.uniform(80, 300, 100), e, e * 0.7, e * 0.3)
        once = normalize_contours(c)
        twice = normalize_contours(once)
        for ch in ("f0_hz", "energy_total", "energy_low", "energy_high"):
            assert np.allclose(getattr(once, ch), getattr(twice, ch), atol=1e-6)
