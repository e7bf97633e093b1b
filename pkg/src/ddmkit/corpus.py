"""Utterance manifests, dialect density math, weak-label pooling, and splits.

The manifest is UTF-8 line-delimited JSON, one utterance per line. Side
matrices (posteriors, embedding tables) live in separate files and are opened
lazily by the feature extractors, never here.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .alphabet import Alphabet
from .asr_features import normalize_transcript


class City(str, Enum):
    DCB = "DCB"
    ROC = "ROC"
    PRV = "PRV"
    LES = "LES"
    VLD = "VLD"


CITY_ORDER = (City.DCB, City.ROC, City.PRV, City.LES, City.VLD)

XVECTOR_DIM = 512

MANIFEST_REQUIRED = ("id", "speaker", "city", "audio", "transcript")


class ManifestError(ValueError):
    """Malformed manifest line or record-level invariant violation."""


class FeatureTableError(ValueError):
    """Malformed feature table CSV."""


@dataclass(frozen=True)
class DDMAnnotation:
    """Hand counts behind a dialect density score."""

    n_ph: int  # phonological dialect tokens
    n_ms: int  # morphosyntactic dialect tokens
    n_words: int

    def __post_init__(self) -> None:
        if self.n_words < 1:
            raise ValueError("n_words must be >= 1")
        if not (0 <= self.n_ph <= self.n_words):
            raise ValueError(f"n_ph={self.n_ph} outside [0, {self.n_words}]")
        if not (0 <= self.n_ms <= self.n_words):
            raise ValueError(f"n_ms={self.n_ms} outside [0, {self.n_words}]")


@dataclass(frozen=True)
class DDMScore:
    ddm_phon: float
    ddm_gram: float
    ddm: float


def compute_ddm(a: DDMAnnotation) -> DDMScore:
    """Per-word dialect densities; ddm is the float sum of the two parts."""
    if a.n_words < 1:
        raise ValueError("annotation has no words")
    phon = a.n_ph / a.n_words
    gram = a.n_ms / a.n_words
    return DDMScore(ddm_phon=phon, ddm_gram=gram, ddm=phon + gram)


@dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    speaker_id: str
    city: City
    audio_path: str
    transcript: str  # normalized
    word_count: int
    posterior_path: str | None = None
    xvector_id: str | None = None
    compare_id: str | None = None
    pos_tags: tuple[str, ...] | None = None
    ddm_annotation: DDMAnnotation | None = None
    interrupted: bool = False
    xvector: np.ndarray | None = field(default=None, compare=False)
    compare_features: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        if self.xvector is not None and self.xvector.shape != (XVECTOR_DIM,):
            raise ValueError(f"x-vector must have exactly {XVECTOR_DIM} entries, "
                             f"got shape {self.xvector.shape}")

    @property
    def is_scored(self) -> bool:
        return self.ddm_annotation is not None


def _record_from_obj(obj: dict, line_no: int, alphabet: Alphabet) -> UtteranceRecord:
    missing = [k for k in MANIFEST_REQUIRED if k not in obj]
    if missing:
        raise ManifestError(f"line {line_no}: missing required field(s) {missing}")
    try:
        city = City(obj["city"])
    except ValueError:
        raise ManifestError(f"line {line_no}: unknown city {obj['city']!r}") from None

    annotation = None
    ann_keys = [k for k in ("n_ph", "n_ms", "n_words") if k in obj]
    if ann_keys:
        if len(ann_keys) != 3:
            raise ManifestError(
                f"line {line_no}: partial annotation, need all of n_ph/n_ms/n_words")
        try:
            annotation = DDMAnnotation(int(obj["n_ph"]), int(obj["n_ms"]), int(obj["n_words"]))
        except ValueError as exc:
            raise ManifestError(f"line {line_no}: {exc}") from None

    transcript = normalize_transcript(str(obj["transcript"]), alphabet)
    tags = obj.get("pos_tags")
    return UtteranceRecord(
        utterance_id=str(obj["id"]),
        speaker_id=str(obj["speaker"]),
        city=city,
        audio_path=str(obj["audio"]),
        transcript=transcript,
        word_count=len([w for w in transcript.split(" ") if w]),
        posterior_path=obj.get("posteriors"),
        xvector_id=obj.get("xvector_id"),
        compare_id=obj.get("compare_id"),
        pos_tags=tuple(tags) if tags is not None else None,
        ddm_annotation=annotation,
        interrupted=bool(obj.get("interrupted", False)),
    )


def load_manifest(path: str, alphabet: Alphabet | None = None) -> list[UtteranceRecord]:
    """Parse a line-delimited JSON manifest; side files stay unopened.

    Relative audio/posterior paths are resolved against the manifest's own
    directory, so corpora are relocatable.
    """
    alphabet = alphabet or Alphabet()
    base = os.path.dirname(os.path.abspath(path))

    def resolve(p: str | None) -> str | None:
        if p is None or os.path.isabs(p):
            return p
        return os.path.join(base, p)

    records: list[UtteranceRecord] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"line {line_no}: invalid JSON ({exc.msg})") from None
            rec = _record_from_obj(obj, line_no, alphabet)
            rec = replace(rec, audio_path=resolve(rec.audio_path),
                          posterior_path=resolve(rec.posterior_path))
            if rec.utterance_id in seen:
                raise ManifestError(
                    f"line {line_no}: duplicate utterance id {rec.utterance_id!r}")
            seen.add(rec.utterance_id)
            records.append(rec)
    return records


def save_manifest(records: list[UtteranceRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj: dict = {
                "id": rec.utterance_id,
                "speaker": rec.speaker_id,
                "city": rec.city.value,
                "audio": rec.audio_path,
                "transcript": rec.transcript,
            }
            if rec.posterior_path is not None:
                obj["posteriors"] = rec.posterior_path
            if rec.xvector_id is not None:
                obj["xvector_id"] = rec.xvector_id
            if rec.compare_id is not None:
                obj["compare_id"] = rec.compare_id
            if rec.pos_tags is not None:
                obj["pos_tags"] = list(rec.pos_tags)
            if rec.ddm_annotation is not None:
                obj["n_ph"] = rec.ddm_annotation.n_ph
                obj["n_ms"] = rec.ddm_annotation.n_ms
                obj["n_words"] = rec.ddm_annotation.n_words
            if rec.interrupted:
                obj["interrupted"] = True
            fh.write(json.dumps(obj, ensure_ascii=True) + "\n")


def filter_weak_label_pool(records: list[UtteranceRecord]) -> list[UtteranceRecord]:
    """Utterances usable as weak city labels: >= 10 words, uninterrupted, unscored."""
    return [r for r in records
            if r.word_count >= 10 and not r.interrupted and r.ddm_annotation is None]


@dataclass(frozen=True)
class SplitSpec:
    train_speakers: frozenset[str]
    valid_speakers: frozenset[str]
    test_speakers: frozenset[str]
    seed: int

    def __post_init__(self) -> None:
        parts = (self.train_speakers, self.valid_speakers, self.test_speakers)
        total = sum(len(p) for p in parts)
        if len(self.train_speakers | self.valid_speakers | self.test_speakers) != total:
            raise ValueError("split partitions overlap")

    def partition_of(self, speaker_id: str) -> str | None:
        if speaker_id in self.train_speakers:
            return "train"
        if speaker_id in self.valid_speakers:
            return "valid"
        if speaker_id in self.test_speakers:
            return "test"
        return None


def _greedy_partition(speakers: list[str], weights: dict[str, int],
                      fractions: tuple[float, ...], rng: np.random.Generator) -> list[set[str]]:
    """Fill partitions in order with shuffled speakers until each hits its
    utterance-count target, reserving one speaker per remaining nonempty part."""
    order = sorted(speakers)
    rng.shuffle(order)
    total = sum(weights[s] for s in order)
    nonzero = [i for i, f in enumerate(fractions) if f > 0]
    parts: list[set[str]] = [set() for _ in fractions]
    cursor = 0
    for seq, i in enumerate(nonzero):
        if seq == len(nonzero) - 1:
            parts[i].update(order[cursor:])
            cursor = len(order)
            break
        target = fractions[i] * total
        got = 0
        parts_left = len(nonzero) - seq - 1
        while got < target and cursor < len(order) - parts_left:
            parts[i].add(order[cursor])
            got += weights[order[cursor]]
            cursor += 1
    return parts


def make_speaker_split(records: list[UtteranceRecord],
                       fractions: tuple[float, float, float] = (0.70, 0.15, 0.15),
                       seed: int = 0) -> SplitSpec:
    """Speaker-independent train/valid/test split, greedy on utterance counts."""
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError("fractions must be three nonnegative values")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    weights: dict[str, int] = {}
    for r in records:
        weights[r.speaker_id] = weights.get(r.speaker_id, 0) + 1
    if len(weights) < 3:
        raise ValueError(f"need >= 3 distinct speakers, got {len(weights)}")
    rng = np.random.default_rng(seed)
    train, valid, test = _greedy_partition(list(weights), weights, fractions, rng)
    return SplitSpec(frozenset(train), frozenset(valid), frozenset(test), seed)


def make_random_holdouts(records: list[UtteranceRecord], n_iter: int = 200,
                         test_fraction: float = 0.20, seed: int = 0) -> list[SplitSpec]:
    """Two-way speaker-independent splits, one per iteration, each seeded by
    (seed, iteration index)."""
    if not (0 < test_fraction < 1):
        raise ValueError("test_fraction must be in (0, 1)")
    weights: dict[str, int] = {}
    for r in records:
        weights[r.speaker_id] = weights.get(r.speaker_id, 0) + 1
    if len(weights) < 2:
        raise ValueError(f"need >= 2 distinct speakers, got {len(weights)}")
    splits = []
    for i in range(n_iter):
        rng = np.random.default_rng([seed, i])
        train, _, test = _greedy_partition(
            list(weights), weights, (1.0 - test_fraction, 0.0, test_fraction), rng)
        splits.append(SplitSpec(frozenset(train), frozenset(), frozenset(test), seed))
    return splits


@dataclass(frozen=True)
class FeatureTable:
    """Named float vectors keyed by utterance id, e.g. x-vectors or ComParE."""

    names: tuple[str, ...]
    vectors: dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(self.vectors)


def ingest_feature_table(path: str, expected_dim: int | None = None) -> FeatureTable:
    """Read a CSV with an `id` column and uniformly named feature columns."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise FeatureTableError(f"{path}: missing header row")
    header = lines[0].split(",")
    if header[0] != "id":
        raise FeatureTableError(f"{path}: first column must be 'id', got {header[0]!r}")
    names = tuple(header[1:])
    if expected_dim is not None and len(names) != expected_dim:
        raise FeatureTableError(
            f"{path}: expected {expected_dim} feature columns, header has {len(names)}")
    vectors: dict[str, np.ndarray] = {}
    for row_no, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != len(names) + 1:
            raise FeatureTableError(
                f"{path}: row {row_no} has {len(cells) - 1} values, expected {len(names)}")
        values = np.empty(len(names), dtype=np.float64)
        for col, cell in enumerate(cells[1:], start=1):
            try:
                values[col - 1] = float(cell)
            except ValueError:
                raise FeatureTableError(
                    f"{path}: non-numeric cell at row {row_no}, column {col + 1} "
                    f"({header[col]!r}): {cell!r}") from None
        vectors[cells[0]] = values
    return FeatureTable(names=names, vectors=vectors)


def attach_side_data(records: list[UtteranceRecord],
                     xvectors: FeatureTable | None = None,
                     compare: FeatureTable | None = None) -> list[UtteranceRecord]:
    """Resolve xvector_id / compare_id references against loaded tables."""
    if xvectors is not None and len(xvectors.names) != XVECTOR_DIM:
        raise FeatureTableError(
            f"x-vector table has {len(xvectors.names)} columns, expected {XVECTOR_DIM}")
    out = []
    for rec in records:
        xv = rec.xvector
        cf = rec.compare_features
        if xvectors is not None and rec.xvector_id is not None:
            xv = xvectors.vectors.get(rec.xvector_id)
            if xv is None:
                raise FeatureTableError(
                    f"x-vector id {rec.xvector_id!r} (utterance {rec.utterance_id!r}) "
                    "not present in table")
        if compare is not None and rec.compare_id is not None:
            cf = compare.vectors.get(rec.compare_id)
            if cf is None:
                raise FeatureTableError(
                    f"compare id {rec.compare_id!r} (utterance {rec.utterance_id!r}) "
                    "not present in table")
        out.append(replace(rec, xvector=xv, compare_features=cf))
    return out
