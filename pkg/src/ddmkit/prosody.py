"""Frame-level pitch and energy contours for the prosody projector.

Four channels per utterance: F0 via normalized autocorrelation (50-400 Hz,
parabolic peak refinement, 0 on unvoiced frames) and three energies (total,
below 1 kHz, 1 kHz and above). Frames are 25 ms with a 10 ms hop; all channels
share one frame count. Normalization statistics are per utterance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .audio import AudioBuffer

FRAME_LEN_S = 0.025
HOP_S = 0.010
FFT_N = 512
F0_MIN_HZ = 50.0
F0_MAX_HZ = 400.0
VOICING_THRESHOLD = 0.45
BAND_SPLIT_HZ = 1000.0
_F0_WINDOW_S = 0.050  # wider window so two 50 Hz periods fit at the max lag
_PEAK_KEEP_FRACTION = 0.90  # near-top peaks compete; the shortest lag wins


@dataclass(frozen=True)
class ContourSet:
    f0_hz: np.ndarray
    energy_total: np.ndarray
    energy_low: np.ndarray
    energy_high: np.ndarray
    frame_len_s: float = FRAME_LEN_S
    hop_s: float = HOP_S

    def __post_init__(self) -> None:
        n = len(self.f0_hz)
        for arr in (self.energy_total, self.energy_low, self.energy_high):
            if len(arr) != n:
                raise ValueError("contour channels must share one length")

    def __len__(self) -> int:
        return len(self.f0_hz)

    def validate_raw(self) -> None:
        """Invariants of freshly extracted (un-normalized) contours."""
        if np.any(self.energy_total < 0) or np.any(self.energy_low < 0) \
                or np.any(self.energy_high < 0):
            raise ValueError("energies must be nonnegative")
        if np.any(self.energy_low + self.energy_high >
                  self.energy_total * (1 + 1e-6) + 1e-12):
            raise ValueError("band energies exceed the total")

    def as_matrix(self) -> np.ndarray:
        """Channels stacked as a (4, n_frames) array for the CNN projector."""
        return np.stack([self.f0_hz, self.energy_total, self.energy_low, self.energy_high])


def frame_count(n_samples: int, sample_rate: int,
                frame_len_s: float = FRAME_LEN_S, hop_s: float = HOP_S) -> int:
    frame = int(round(frame_len_s * sample_rate))
    hop = int(round(hop_s * sample_rate))
    if n_samples < frame:
        return 0
    return 1 + (n_samples - frame) // hop


def _frames(x: np.ndarray, frame: int, hop: int) -> np.ndarray:
    n = 1 + (len(x) - frame) // hop if len(x) >= frame else 0
    if n == 0:
        return np.zeros((0, frame))
    idx = np.arange(frame)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def f0_contour(audio: AudioBuffer) -> np.ndarray:
    """Per-frame fundamental frequency; 0 where the frame is unvoiced."""
    sr = audio.sample_rate_hz
    x = np.asarray(audio.samples, dtype=np.float64)
    frame = int(round(FRAME_LEN_S * sr))
    hop = int(round(HOP_S * sr))
    n_frames = frame_count(len(x), sr)
    if n_frames == 0:
        return np.zeros(0)

    lag_min = int(np.floor(sr / F0_MAX_HZ))
    lag_max = int(np.ceil(sr / F0_MIN_HZ))
    win = int(round(_F0_WINDOW_S * sr))
    fft_n = 1 << int(np.ceil(np.log2(2 * win)))

    out = np.zeros(n_frames)
    centers = hop * np.arange(n_frames) + frame // 2
    for i, c in enumerate(centers):
        lo = max(0, c - win // 2)
        seg = x[lo:lo + win]
        if len(seg) < win:
            seg = np.pad(seg, (0, win - len(seg)))
        if not np.any(seg):
            continue
        spec = np.fft.rfft(seg, fft_n)
        raw = np.fft.irfft(spec * np.conj(spec), fft_n)[:lag_max + 2]
        # normalized autocorrelation: r[t] = raw[t] / sqrt(E(seg[:w-t]) E(seg[t:]))
        sq = np.concatenate([[0.0], np.cumsum(seg * seg)])
        total = sq[-1]
        lags = np.arange(lag_max + 2)
        head_e = sq[np.maximum(win - lags, 0)]
        tail_e = total - sq[np.minimum(lags, win)]
        denom = np.sqrt(np.maximum(head_e * tail_e, 0.0))
        r = np.divide(raw, denom, out=np.zeros_like(raw), where=denom > 0)

        band = r[lag_min:lag_max + 1]
        if len(band) < 3:
            continue
        interior = band[1:-1]
        peaks = np.flatnonzero((interior >= band[:-2]) & (interior > band[2:])) + 1
        if len(peaks) == 0:
            continue
        best = band[peaks].max()
        if best < VOICING_THRESHOLD:
            continue
        lag = lag_min + peaks[band[peaks] >= _PEAK_KEEP_FRACTION * best][0]
        # parabolic refinement around the integer-lag peak
        rm, r0, rp = r[lag - 1], r[lag], r[lag + 1]
        denom2 = rm - 2 * r0 + rp
        delta = 0.5 * (rm - rp) / denom2 if denom2 != 0 else 0.0
        f0 = sr / (lag + np.clip(delta, -0.5, 0.5))
        out[i] = min(max(f0, F0_MIN_HZ), F0_MAX_HZ)
    return out


def energy_contours(audio: AudioBuffer) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-frame (total, below-1kHz, 1kHz-and-above) energies, Hann windowed.

    Band energies use Parseval-weighted FFT power so low + high reproduces the
    windowed time-domain total up to rounding.
    """
    sr = audio.sample_rate_hz
    x = np.asarray(audio.samples, dtype=np.float64)
    frame = int(round(FRAME_LEN_S * sr))
    hop = int(round(HOP_S * sr))
    if frame > FFT_N:
        raise ValueError(f"frame of {frame} samples exceeds the {FFT_N}-point FFT; "
                         "contours expect 16 kHz input (resample first)")
    frames = _frames(x, frame, hop)
    if frames.shape[0] == 0:
        z = np.zeros(0)
        return z, z.copy(), z.copy()
    windowed = frames * np.hanning(frame)
    total = (windowed ** 2).sum(axis=1)

    spec = np.fft.rfft(windowed, FFT_N, axis=1)
    power = np.abs(spec) ** 2
    # Parseval weights for a length-N real FFT: double everything except DC
    # and (for even N) the Nyquist bin.
    weights = np.full(power.shape[1], 2.0)
    weights[0] = 1.0
    if FFT_N % 2 == 0:
        weights[-1] = 1.0
    power = power * weights / FFT_N
    freqs = np.arange(power.shape[1]) * (sr / FFT_N)
    low = power[:, freqs < BAND_SPLIT_HZ].sum(axis=1)
    high = power[:, freqs >= BAND_SPLIT_HZ].sum(axis=1)
    return total, low, high


def extract_contours(audio: AudioBuffer) -> ContourSet:
    total, low, high = energy_contours(audio)
    contours = ContourSet(f0_hz=f0_contour(audio), energy_total=total,
                          energy_low=low, energy_high=high)
    contours.validate_raw()
    return contours


def _znorm_nonzero(channel: np.ndarray) -> np.ndarray:
    out = np.zeros_like(channel)
    mask = channel != 0
    if mask.sum() < 1:
        return out
    mu = channel[mask].mean()
    sd = channel[mask].std()
    if sd == 0:
        return out
    out[mask] = (channel[mask] - mu) / sd
    return out


def normalize_contours(c: ContourSet) -> ContourSet:
    """Per-utterance z-normalization of each channel over its nonzero frames.

    Zero-variance (or all-zero) channels map to all zeros.
    """
    return ContourSet(
        f0_hz=_znorm_nonzero(c.f0_hz),
        energy_total=_znorm_nonzero(c.energy_total),
        energy_low=_znorm_nonzero(c.energy_low),
        energy_high=_znorm_nonzero(c.energy_high),
        frame_len_s=c.frame_len_s,
        hop_s=c.hop_s,
    )


def write_contours_csv(c: ContourSet, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame_index", "f0", "e_total", "e_low", "e_high"])
        for i in range(len(c)):
            writer.writerow([i, repr(float(c.f0_hz[i])), repr(float(c.energy_total[i])),
                             repr(float(c.energy_low[i])), repr(float(c.energy_high[i]))])
