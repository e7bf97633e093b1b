"""Character features from ASR output: bigram statistics and symbol durations.

Bigram counts are taken over the decoded transcript string (no blank); the
duration features come from a CTC-style greedy collapse of per-frame posterior
scores, where the blank appears as the ``sil`` symbol.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass

import numpy as np

from .alphabet import Alphabet, UNK_CHAR

POSTERIOR_MAGIC = b"DDMPOST1"
DEFAULT_FRAME_STRIDE_S = 0.02

_WS = re.compile(r"\s+")


class PosteriorFileError(ValueError):
    """Malformed posterior matrix file."""


@dataclass(frozen=True)
class PosteriorMatrix:
    """Per-frame scores over the alphabet; higher means more likely."""

    values: np.ndarray  # frames x |alphabet|
    frame_stride_s: float = DEFAULT_FRAME_STRIDE_S

    def __post_init__(self) -> None:
        if self.frame_stride_s <= 0:
            raise ValueError("frame stride must be positive")
        if self.values.ndim != 2:
            raise ValueError("posterior matrix must be 2-D")


def normalize_transcript(text: str, alphabet: Alphabet | None = None) -> str:
    """Uppercase, collapse whitespace runs, map out-of-alphabet chars to unk."""
    alphabet = alphabet or Alphabet()
    text = _WS.sub(" ", text.upper()).strip()
    known = alphabet.char_to_index
    return "".join(c if c in known else UNK_CHAR for c in text)


def bigram_frequencies(text: str, alphabet: Alphabet | None = None,
                       *, normalize: bool = False) -> np.ndarray:
    """Flattened |A| x |A| bigram vector over a normalized text.

    Entry i*|A|+j counts symbol i immediately followed by symbol j. With
    normalize=True the counts are divided by max(len(text)-1, 1), removing the
    utterance-length confound.
    """
    alphabet = alphabet or Alphabet()
    n = len(alphabet)
    counts = np.zeros(n * n, dtype=np.float64)
    idx = alphabet.text_to_indices(text)
    for a, b in zip(idx, idx[1:]):
        counts[a * n + b] += 1.0
    if normalize:
        counts /= max(len(text) - 1, 1)
    return counts


def bigram_feature_names(alphabet: Alphabet | None = None) -> list[str]:
    alphabet = alphabet or Alphabet()
    names = [alphabet.display_name(i) for i in range(len(alphabet))]
    return [f"{a}_{b}" for a in names for b in names]


def greedy_align(p: PosteriorMatrix, alphabet: Alphabet | None = None) -> list[tuple[str, int]]:
    """Collapse per-frame argmaxes into (symbol, run_length) runs.

    Ties go to the lowest symbol index. Consecutive identical argmaxes merge,
    so the output never repeats a symbol in adjacent runs.
    """
    alphabet = alphabet or Alphabet()
    values = p.values
    if values.shape[0] == 0:
        return []
    if values.shape[1] != len(alphabet):
        raise ValueError(f"posterior has {values.shape[1]} columns, "
                         f"alphabet has {len(alphabet)} symbols")
    best = np.argmax(values, axis=1)  # first max wins on ties
    runs: list[tuple[str, int]] = []
    start = 0
    for i in range(1, len(best) + 1):
        if i == len(best) or best[i] != best[start]:
            runs.append((alphabet.symbols[best[start]], i - start))
            start = i
    return runs


def char_durations(p: PosteriorMatrix, alphabet: Alphabet | None = None) -> np.ndarray:
    """Mean run duration in seconds per alphabet symbol; 0 for absent symbols."""
    alphabet = alphabet or Alphabet()
    totals = np.zeros(len(alphabet), dtype=np.float64)
    counts = np.zeros(len(alphabet), dtype=np.float64)
    for symbol, length in greedy_align(p, alphabet):
        i = alphabet.index[symbol]
        totals[i] += length
        counts[i] += 1
    out = np.zeros(len(alphabet), dtype=np.float64)
    seen = counts > 0
    out[seen] = totals[seen] / counts[seen] * p.frame_stride_s
    return out


def duration_feature_names(alphabet: Alphabet | None = None) -> list[str]:
    alphabet = alphabet or Alphabet()
    return [alphabet.display_name(i) for i in range(len(alphabet))]


def decode_transcript(p: PosteriorMatrix, alphabet: Alphabet | None = None) -> str:
    """Greedy transcript: collapse runs, drop ``sil``, join remaining symbols."""
    alphabet = alphabet or Alphabet()
    chars = []
    for symbol, _ in greedy_align(p, alphabet):
        c = alphabet.char_for_index(alphabet.index[symbol])
        if c is not None:
            chars.append(c)
    return normalize_transcript("".join(chars), alphabet)


def write_posterior_file(path: str, p: PosteriorMatrix) -> None:
    rows, cols = p.values.shape
    with open(path, "wb") as fh:
        fh.write(POSTERIOR_MAGIC)
        fh.write(struct.pack("<IIf", rows, cols, p.frame_stride_s))
        fh.write(np.ascontiguousarray(p.values, dtype="<f4").tobytes())


def read_posterior_file(path: str, default_stride_s: float = DEFAULT_FRAME_STRIDE_S) -> PosteriorMatrix:
    """Read the binary posterior format, falling back to plain CSV rows."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(POSTERIOR_MAGIC)] == POSTERIOR_MAGIC:
        header_end = len(POSTERIOR_MAGIC) + 12
        if len(blob) < header_end:
            raise PosteriorFileError(f"{path}: truncated header")
        rows, cols, stride = struct.unpack_from("<IIf", blob, len(POSTERIOR_MAGIC))
        expected = header_end + rows * cols * 4
        if len(blob) != expected:
            raise PosteriorFileError(
                f"{path}: expected {expected} bytes for {rows}x{cols} matrix, got {len(blob)}")
        values = np.frombuffer(blob, dtype="<f4", offset=header_end).astype(np.float64)
        return PosteriorMatrix(values.reshape(rows, cols), float(stride))

    try:
        text = blob.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise PosteriorFileError(f"{path}: neither binary posterior nor CSV") from exc
    rows = []
    width = None
    for ln, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = [float(v) for v in line.split(",")]
        except ValueError as exc:
            raise PosteriorFileError(f"{path}:{ln}: non-numeric cell") from exc
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise PosteriorFileError(f"{path}:{ln}: ragged row ({len(row)} != {width})")
        rows.append(row)
    if not rows:
        raise PosteriorFileError(f"{path}: empty posterior file")
    return PosteriorMatrix(np.asarray(rows, dtype=np.float64), default_stride_s)
