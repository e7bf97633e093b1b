"""WAV ingestion and sample-rate conversion.

Reads RIFF/WAVE PCM16 or float32, mono or stereo (stereo is averaged), and
resamples everything to 16 kHz with a Kaiser-windowed sinc kernel. The
resampler is deterministic and adequate for prosody/energy contours.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

TARGET_RATE = 16000
SINC_TAPS = 64
KAISER_BETA = 8.6


class AudioFormatError(ValueError):
    """Codec or encoding outside the supported PCM16/float32 subset."""


class AudioParseError(ValueError):
    """Structurally broken RIFF/WAVE file."""


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray  # float64 in [-1, 1]
    sample_rate_hz: int

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


def _parse_chunks(data: bytes) -> dict[str, bytes]:
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise AudioParseError("not a RIFF/WAVE file")
    chunks: dict[str, bytes] = {}
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise AudioParseError(f"truncated {cid.decode('latin1').strip()!r} chunk")
        chunks.setdefault(cid.decode("latin1"), body)
        pos += 8 + size + (size & 1)  # chunks are word-aligned
    return chunks


def read_wav(path: str, target_rate: int = TARGET_RATE) -> AudioBuffer:
    """Load a WAV file as mono float samples at target_rate."""
    with open(path, "rb") as fh:
        data = fh.read()
    chunks = _parse_chunks(data)
    if "fmt " not in chunks or "data" not in chunks:
        raise AudioParseError("missing fmt or data chunk")
    fmt = chunks["fmt "]
    if len(fmt) < 16:
        raise AudioParseError("fmt chunk too short")
    audio_format, n_channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    if n_channels < 1:
        raise AudioParseError("zero channels")

    raw = chunks["data"]
    if audio_format == 1 and bits == 16:
        if len(raw) % 2:
            raise AudioParseError("PCM16 data chunk has odd length")
        samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif audio_format == 3 and bits == 32:
        if len(raw) % 4:
            raise AudioParseError("float32 data chunk length not a multiple of 4")
        samples = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    else:
        raise AudioFormatError(
            f"unsupported WAV encoding (format={audio_format}, bits={bits}); "
            "only PCM16 and IEEE float32 are accepted")

    if len(samples) % n_channels:
        raise AudioParseError("data chunk does not divide into whole frames")
    if n_channels > 1:
        samples = samples.reshape(-1, n_channels).mean(axis=1)

    if rate != target_rate:
        samples = resample_sinc(samples, rate, target_rate)
    return AudioBuffer(samples=samples, sample_rate_hz=target_rate)


def resample_sinc(x: np.ndarray, src_rate: int, dst_rate: int,
                  taps: int = SINC_TAPS, beta: float = KAISER_BETA) -> np.ndarray:
    """Windowed-sinc rate conversion (Kaiser window, `taps` input samples wide).

    Each output sample's kernel is normalized to unit DC gain, so constant
    signals pass through exactly.
    """
    if src_rate <= 0 or dst_rate <= 0:
        raise ValueError("rates must be positive")
    if src_rate == dst_rate:
        return np.asarray(x, dtype=np.float64).copy()
    x = np.asarray(x, dtype=np.float64)
    n_in = len(x)
    n_out = int(round(n_in * dst_rate / src_rate))
    if n_in == 0 or n_out == 0:
        return np.zeros(0)

    half = taps / 2.0
    cutoff = min(1.0, dst_rate / src_rate)  # relative to the source Nyquist
    pos = np.arange(n_out) * (src_rate / dst_rate)
    left = np.ceil(pos - half).astype(np.int64)
    idx = left[:, None] + np.arange(taps)[None, :]
    dist = idx - pos[:, None]

    t = np.clip(dist / half, -1.0, 1.0)
    window = np.i0(beta * np.sqrt(1.0 - t * t)) / np.i0(beta)
    kernel = cutoff * np.sinc(cutoff * dist) * window
    kernel /= kernel.sum(axis=1, keepdims=True)

    valid = (idx >= 0) & (idx < n_in)
    gathered = np.where(valid, x[np.clip(idx, 0, n_in - 1)], 0.0)
    return (gathered * kernel).sum(axis=1)


def write_wav_pcm16(path: str, samples: np.ndarray, rate: int) -> None:
    """Write mono PCM16 (used by the synthetic fixture generator)."""
    pcm = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(pcm * 32767.0).astype("<i2")
    body = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(body)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, rate, rate * 2, 2, 16)
    header += b"data" + struct.pack("<I", len(body))
    with open(path, "wb") as fh:
        fh.write(header + body)
