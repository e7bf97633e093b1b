import struct

import numpy as np
import pytest

from ddmkit.audio import (AudioFormatError, AudioParseError, read_wav, resample_sinc,
                          write_wav_pcm16)


def _write_raw_wav(path, fmt_code, bits, rate, channels, payload: bytes):
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    block = channels * bits // 8
    header += b"fmt " + struct.pack("<IHHIIHH", 16, fmt_code, channels, rate,
                                    rate * block, block, bits)
    header += b"data" + struct.pack("<I", len(payload))
    path.write_bytes(header + payload)


def test_silence_roundtrip(tmp_path):
    path = tmp_path / "silence.wav"
    write_wav_pcm16(str(path), np.zeros(16000), 16000)
    buf = read_wav(str(path))
    assert buf.sample_rate_hz == 16000
    assert len(buf.samples) == 16000
    assert np.all(buf.samples == 0.0)


def test_pcm16_full_scale(tmp_path):
    path = tmp_path / "fs.wav"
    _write_raw_wav(path, 1, 16, 16000, 1, struct.pack("<3h", 32767, 0, -32768))
    buf = read_wav(str(path))
    assert buf.samples[0] == pytest.approx(32767 / 32768, abs=1e-12)
    assert buf.samples[2] == -1.0


def test_float32_passthrough(tmp_path):
    path = tmp_path / "f32.wav"
    values = np.array([0.5, -0.25, 0.125], dtype="<f4")
    _write_raw_wav(path, 3, 32, 16000, 1, values.tobytes())
    buf = read_wav(str(path))
    assert np.allclose(buf.samples, values, atol=1e-7)


def test_stereo_averaged(tmp_path):
    path = tmp_path / "st.wav"
    _write_raw_wav(path, 1, 16, 16000, 2, struct.pack("<4h", 16384, -16384, 8192, 8192))
    buf = read_wav(str(path))
    assert buf.samples[0] == pytest.approx(0.0)
    assert buf.samples[1] == pytest.approx(8192 / 32768)


def test_441k_second_gives_16k_samples(tmp_path):
    path = tmp_path / "44.wav"
    t = np.arange(44100) / 44100
    pcm = (0.5 * np.sin(2 * np.pi * 220 * t) * 32767).astype("<i2")
    _write_raw_wav(path, 1, 16, 44100, 1, pcm.tobytes())
    buf = read_wav(str(path))
    assert abs(len(buf.samples) - 16000) <= 1


def test_sine_frequency_preserved_through_resampling(tmp_path):
    # zero-crossing count pins the frequency to within 1 Hz
    for rate in (44100, 48000):
        t = np.arange(rate) / rate
        x = 0.7 * np.sin(2 * np.pi * 220 * t)
        path = tmp_path / f"sine{rate}.wav"
        _write_raw_wav(path, 1, 16, rate, 1, (x * 32767).astype("<i2").tobytes())
        buf = read_wav(str(path))
        crossings = np.count_nonzero(np.diff(np.signbit(buf.samples)))
        freq = crossings / 2 / buf.duration_s
        assert abs(freq - 220.0) <= 1.0


def test_non_pcm_codec_rejected(tmp_path):
    path = tmp_path / "ulaw.wav"
    _write_raw_wav(path, 7, 8, 8000, 1, b"\x00" * 100)  # mu-law
    with pytest.raises(AudioFormatError):
        read_wav(str(path))


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "trunc.wav"
    write_wav_pcm16(str(path), np.zeros(1000), 16000)
    data = path.read_bytes()
    path.write_bytes(data[:len(data) // 2])
    with pytest.raises(AudioParseError):
        read_wav(str(path))


def test_not_riff_rejected(tmp_path):
    path = tmp_path / "junk.wav"
    path.write_bytes(b"this is not audio at all")
    with pytest.raises(AudioParseError):
        read_wav(str(path))


def test_resample_identity_when_rates_match():
    x = np.linspace(-1, 1, 100)
    y = resample_sinc(x, 16000, 16000)
    assert np.array_equal(x, y)
    assert y is not x


def test_resample_preserves_dc():
    x = np.full(48000, 0.5)
    y = resample_sinc(x, 48000, 16000)
    mid = y[100:-100]  # away from edge effects
    assert np.allclose(mid, 0.5, atol=1e-6)


def test_resample_rejects_bad_rates():
    with pytest.raises(ValueError):
        resample_sinc(np.zeros(10), 0, 16000)
