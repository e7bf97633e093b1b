"""Feature-set assembly and per-set model training.

Seven feature sets feed the regressors: transcript character bigrams, symbol
durations, the five LM features, two projected 5-dim city embeddings, the
ingested paralinguistic table, and the concatenation of all six (with the
table reduced to its top-10 columns by attribution mass).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import gbt
from .alphabet import Alphabet
from .asr_features import (bigram_feature_names, bigram_frequencies, char_durations,
                           decode_transcript, duration_feature_names, read_posterior_file)
from .audio import read_wav
from .char_lm import CharLM, WordVocab, lm_features, tag_verbs, LM_FEATURE_NAMES
from .corpus import UtteranceRecord, SplitSpec
from .projector import ProjectorModel, project
from .prosody import extract_contours, normalize_contours

DDM_MIN, DDM_MAX = 0.0, 2.0


class FeatureSetId(str, Enum):
    CHAR_COMB = "char_comb"
    CHAR_DUR = "char_dur"
    LM = "lm"
    XVECTOR_PROJ = "xvector_proj"
    COMPARE = "compare"
    PROSODY_PROJ = "prosody_proj"
    ALL = "all"


BASE_SETS = (FeatureSetId.CHAR_COMB, FeatureSetId.CHAR_DUR, FeatureSetId.LM,
             FeatureSetId.XVECTOR_PROJ, FeatureSetId.COMPARE, FeatureSetId.PROSODY_PROJ)
ALL_SETS = BASE_SETS + (FeatureSetId.ALL,)
COMPARE_TOP_K = 10


class TargetKind(str, Enum):
    DDM_PHON = "ddm_phon"
    DDM_GRAM = "ddm_gram"
    DDM = "ddm"


def target_value(record: UtteranceRecord, target: TargetKind) -> float:
    from .corpus import compute_ddm

    if record.ddm_annotation is None:
        raise ValueError(f"utterance {record.utterance_id!r} has no annotation")
    score = compute_ddm(record.ddm_annotation)
    return getattr(score, target.value)


class FeatureBuildError(ValueError):
    """One or more records could not produce the requested feature set."""

    def __init__(self, set_id: FeatureSetId, failures: dict[str, str]) -> None:
        self.set_id = set_id
        self.failures = failures
        ids = ", ".join(sorted(failures))
        super().__init__(f"feature set {set_id.value!r} failed for: {ids}")


@dataclass
class FeatureMatrix:
    ids: list[str]
    columns: list[str]
    values: np.ndarray  # rows x columns, NaN for missing
    provenance: dict[str, str]  # column -> feature set id
    set_id: FeatureSetId

    def __post_init__(self) -> None:
        if self.values.shape != (len(self.ids), len(self.columns)):
            raise ValueError("matrix shape disagrees with ids/columns")
        if len(set(self.columns)) != len(self.columns):
            dupes = sorted({c for c in self.columns if self.columns.count(c) > 1})
            raise ValueError(f"duplicate column names: {dupes[:5]}")

    def column_subset(self, names: list[str]) -> "FeatureMatrix":
        pos = {c: i for i, c in enumerate(self.columns)}
        missing = [n for n in names if n not in pos]
        if missing:
            raise ValueError(f"columns not in matrix: {missing[:5]}")
        take = [pos[n] for n in names]
        return FeatureMatrix(ids=list(self.ids), columns=list(names),
                             values=self.values[:, take],
                             provenance={n: self.provenance[n] for n in names},
                             set_id=self.set_id)

    def save_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(["id"] + self.columns) + "\n")
            for i, uid in enumerate(self.ids):
                cells = [repr(float(v)) for v in self.values[i]]
                fh.write(",".join([uid] + cells) + "\n")
        sidecar = {"version": 1, "set": self.set_id.value, "columns": self.columns,
                   "provenance": self.provenance}
        with open(path + ".meta.json", "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, sort_keys=True)

    @staticmethod
    def load_csv(path: str) -> "FeatureMatrix":
        with open(path + ".meta.json", "r", encoding="utf-8") as fh:
            sidecar = json.load(fh)
        ids, rows = [], []
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().rstrip("\n").split(",")
            for line in fh:
                cells = line.rstrip("\n").split(",")
                ids.append(cells[0])
                rows.append([float(c) for c in cells[1:]])
        columns = header[1:]
        if columns != sidecar["columns"]:
            raise ValueError(f"{path}: sidecar column order disagrees with CSV header")
        values = np.asarray(rows, dtype=np.float64) if rows else np.zeros((0, len(columns)))
        return FeatureMatrix(ids=ids, columns=columns, values=values,
                             provenance=sidecar["provenance"],
                             set_id=FeatureSetId(sidecar["set"]))


@dataclass
class FeatureExtractor:
    """Holds the side models and caches per-utterance feature rows.

    Character features come from the posterior matrix (bigrams over its greedy
    decode, durations over its alignment); LM features score the manifest
    transcript; projections need the attached x-vector and the audio file.
    """

    alphabet: Alphabet
    char_lm: CharLM | None = None
    vocab: WordVocab | None = None
    fc_model: ProjectorModel | None = None
    cnn_model: ProjectorModel | None = None
    compare_names: tuple[str, ...] | None = None
    normalized_bigrams: bool = True
    _cache: dict[tuple[str, str], np.ndarray] = field(default_factory=dict, repr=False)

    def feature_names(self, set_id: FeatureSetId) -> list[str]:
        if set_id == FeatureSetId.CHAR_COMB:
            return bigram_feature_names(self.alphabet)
        if set_id == FeatureSetId.CHAR_DUR:
            return duration_feature_names(self.alphabet)
        if set_id == FeatureSetId.LM:
            if self.char_lm is None or self.vocab is None:
                raise ValueError("extractor has no trained language model")
            return list(LM_FEATURE_NAMES)
        if set_id == FeatureSetId.XVECTOR_PROJ:
            return [f"xvec_{c}" for c in self._fc().city_order]
        if set_id == FeatureSetId.PROSODY_PROJ:
            return [f"prosody_{c}" for c in self._cnn().city_order]
        if set_id == FeatureSetId.COMPARE:
            if self.compare_names is None:
                raise ValueError("no compare table attached to the extractor")
            return list(self.compare_names)
        raise ValueError(f"no single name list for {set_id}")

    def _fc(self) -> ProjectorModel:
        if self.fc_model is None:
            raise ValueError("extractor has no trained x-vector projector")
        return self.fc_model

    def _cnn(self) -> ProjectorModel:
        if self.cnn_model is None:
            raise ValueError("extractor has no trained prosody projector")
        return self.cnn_model

    def _row(self, record: UtteranceRecord, set_id: FeatureSetId) -> np.ndarray:
        # availability checks come before the cache: a record stripped of its
        # side data must fail even if a sibling record already warmed the key
        if set_id in (FeatureSetId.CHAR_COMB, FeatureSetId.CHAR_DUR):
            if record.posterior_path is None:
                raise ValueError("no posterior matrix on record")
        elif set_id == FeatureSetId.LM:
            if self.char_lm is None or self.vocab is None:
                raise ValueError("extractor has no trained language model")
        elif set_id == FeatureSetId.XVECTOR_PROJ:
            if record.xvector is None:
                raise ValueError("no x-vector attached to record")
        elif set_id == FeatureSetId.PROSODY_PROJ:
            self._cnn()
        elif set_id == FeatureSetId.COMPARE:
            if record.compare_features is None:
                raise ValueError("no compare features attached to record")
            if self.compare_names is not None \
                    and len(record.compare_features) != len(self.compare_names):
                raise ValueError("compare vector length disagrees with the table header")
        else:
            raise ValueError(f"cannot build a single row for {set_id}")

        key = (record.utterance_id, set_id.value)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        if set_id in (FeatureSetId.CHAR_COMB, FeatureSetId.CHAR_DUR):
            posterior = read_posterior_file(record.posterior_path)
            decoded = decode_transcript(posterior, self.alphabet)
            self._cache[(record.utterance_id, FeatureSetId.CHAR_COMB.value)] = \
                bigram_frequencies(decoded, self.alphabet, normalize=self.normalized_bigrams)
            self._cache[(record.utterance_id, FeatureSetId.CHAR_DUR.value)] = \
                char_durations(posterior, self.alphabet)
        elif set_id == FeatureSetId.LM:
            verbs = tag_verbs(record.transcript, list(record.pos_tags)
                              if record.pos_tags is not None else None)
            feats = lm_features(self.char_lm, self.vocab, record.transcript, verbs)
            self._cache[key] = np.asarray(feats.as_vector())
        elif set_id == FeatureSetId.XVECTOR_PROJ:
            self._cache[key] = project(self._fc(), record.xvector)
        elif set_id == FeatureSetId.PROSODY_PROJ:
            contours = normalize_contours(extract_contours(read_wav(record.audio_path)))
            self._cache[key] = project(self._cnn(), contours.as_matrix())
        else:
            self._cache[key] = np.asarray(record.compare_features, dtype=np.float64)
        return self._cache[key]

    def prefetch(self, record: UtteranceRecord, set_id: FeatureSetId) -> None:
        """Warm the row cache, swallowing per-record failures (they resurface
        with full context when the matrix is built)."""
        try:
            self._row(record, set_id)
        except (ValueError, OSError):
            pass

    def build_features(self, records: list[UtteranceRecord], set_id: FeatureSetId,
                       compare_top10: list[str] | None = None) -> FeatureMatrix:
        """Assemble the named matrix; per-record failures are aggregated."""
        if set_id == FeatureSetId.ALL:
            return self._build_all(records, compare_top10)
        columns = self.feature_names(set_id)
        rows, failures = [], {}
        for rec in records:
            try:
                rows.append(self._row(rec, set_id))
            except (ValueError, OSError) as exc:
                failures[rec.utterance_id] = str(exc)
        if failures:
            raise FeatureBuildError(set_id, failures)
        values = np.vstack(rows) if rows else np.zeros((0, len(columns)))
        return FeatureMatrix(ids=[r.utterance_id for r in records], columns=columns,
                             values=values,
                             provenance={c: set_id.value for c in columns}, set_id=set_id)

    def _build_all(self, records: list[UtteranceRecord],
                   compare_top10: list[str] | None) -> FeatureMatrix:
        if compare_top10 is None:
            raise ValueError("the combined set needs the selected compare columns")
        parts = [self.build_features(records, s) for s in BASE_SETS
                 if s != FeatureSetId.COMPARE]
        compare = self.build_features(records, FeatureSetId.COMPARE)
        compare = compare.column_subset(compare_top10)
        ordered = parts[:4] + [compare] + parts[4:]
        columns: list[str] = []
        provenance: dict[str, str] = {}
        for m in ordered:
            columns.extend(m.columns)
            provenance.update(m.provenance)
        values = np.hstack([m.values for m in ordered]) if records else \
            np.zeros((0, len(columns)))
        return FeatureMatrix(ids=[r.utterance_id for r in records], columns=columns,
                             values=values, provenance=provenance, set_id=FeatureSetId.ALL)


@dataclass
class TrainResult:
    target: TargetKind
    models: dict[FeatureSetId, gbt.GBTModel]
    compare_top10: list[str]


def _records_in(records: list[UtteranceRecord], speakers: frozenset[str]) -> list[UtteranceRecord]:
    return [r for r in records if r.speaker_id in speakers]


def train_all(records: list[UtteranceRecord], split: SplitSpec, target: TargetKind,
              extractor: FeatureExtractor, params: gbt.GBTParams | None = None,
              sets: tuple[FeatureSetId, ...] = ALL_SETS,
              importance: str = "shap") -> TrainResult:
    """One model per requested feature set on the split's training speakers.

    The compare table's top-10 columns are chosen on training data (by mean
    absolute attribution, or split gain with importance="gain") before the
    combined set is assembled. The validation partition drives early stopping
    when it is nonempty.
    """
    if importance not in ("shap", "gain"):
        raise ValueError(f"unknown importance metric {importance!r}")
    scored = [r for r in records if r.ddm_annotation is not None]
    train_recs = _records_in(scored, split.train_speakers)
    valid_recs = _records_in(scored, split.valid_speakers)
    if not train_recs:
        raise ValueError("no annotated records in the training partition")
    y_train = np.asarray([target_value(r, target) for r in train_recs])
    y_valid = np.asarray([target_value(r, target) for r in valid_recs])

    models: dict[FeatureSetId, gbt.GBTModel] = {}
    compare_top10: list[str] = []

    need_compare = FeatureSetId.COMPARE in sets or FeatureSetId.ALL in sets
    base_order = [s for s in BASE_SETS if s in sets or (s == FeatureSetId.COMPARE and need_compare)]
    for set_id in base_order:
        m_train = extractor.build_features(train_recs, set_id)
        eval_set = None
        if valid_recs:
            m_valid = extractor.build_features(valid_recs, set_id)
            eval_set = (m_valid.values, y_valid)
        model = gbt.fit(m_train.values, y_train, params,
                        feature_names=tuple(m_train.columns), eval_set=eval_set)
        if set_id in sets:
            models[set_id] = model
        if set_id == FeatureSetId.COMPARE and need_compare:
            if importance == "shap":
                ranking = gbt.mean_abs_shap_ranking(model, m_train.values)
            else:
                ranking = gbt.gain_importance_ranking(model)
            compare_top10 = gbt.select_top_k(ranking, min(COMPARE_TOP_K, len(ranking)))

    if FeatureSetId.ALL in sets:
        m_train = extractor.build_features(train_recs, FeatureSetId.ALL, compare_top10)
        eval_set = None
        if valid_recs:
            m_valid = extractor.build_features(valid_recs, FeatureSetId.ALL, compare_top10)
            eval_set = (m_valid.values, y_valid)
        models[FeatureSetId.ALL] = gbt.fit(m_train.values, y_train, params,
                                           feature_names=tuple(m_train.columns),
                                           eval_set=eval_set)
    return TrainResult(target=target, models=models, compare_top10=compare_top10)


def clamp_ddm(value: float) -> float:
    return min(max(value, DDM_MIN), DDM_MAX)


def predict_ddm(result: TrainResult, extractor: FeatureExtractor,
                record: UtteranceRecord) -> tuple[dict[FeatureSetId, float],
                                                  dict[FeatureSetId, str]]:
    """Per-set predictions for one utterance, clamped to the valid DDM range.

    Sets whose side data is missing are reported in the error map; the rest
    are still returned.
    """
    predictions: dict[FeatureSetId, float] = {}
    errors: dict[FeatureSetId, str] = {}
    for set_id, model in result.models.items():
        try:
            matrix = extractor.build_features(
                [record], set_id,
                result.compare_top10 if set_id == FeatureSetId.ALL else None)
            predictions[set_id] = clamp_ddm(gbt.predict(model, matrix.values[0]))
        except FeatureBuildError as exc:
            errors[set_id] = exc.failures.get(record.utterance_id, str(exc))
        except ValueError as exc:
            errors[set_id] = str(exc)
    return predictions, errors
