"""Correlation reporting, random hold-out averaging, and attribution summaries.

Correlations between predicted and hand-scored dialect densities are the
headline metric; raters disagree on absolute levels but order speakers
consistently, so r is more meaningful than error magnitudes. Undefined cells
(zero-variance inputs) are reported explicitly, never coerced to 0.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import gbt
from .corpus import (City, DDMScore, SplitSpec, UtteranceRecord, compute_ddm,
                     make_random_holdouts)
from .pipeline import (ALL_SETS, FeatureExtractor, FeatureSetId, TargetKind,
                       TrainResult, clamp_ddm, target_value, train_all)


class UndefinedCorrelationError(ValueError):
    """Pearson r is undefined when either input has zero variance."""


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be 1-D arrays of equal length")
    if len(x) < 2:
        raise ValueError("need at least 2 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = float(np.sum(dx * dx))
    sy = float(np.sum(dy * dy))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError("zero variance input")
    return float(np.sum(dx * dy) / np.sqrt(sx * sy))


@dataclass(frozen=True)
class ReportCell:
    set_id: FeatureSetId
    target: TargetKind
    r: float | None
    n_test: int
    note: str = ""


@dataclass
class EvalReport:
    cells: list[ReportCell] = field(default_factory=list)

    def cell(self, set_id: FeatureSetId, target: TargetKind) -> ReportCell:
        for c in self.cells:
            if c.set_id == set_id and c.target == target:
                return c
        raise KeyError((set_id, target))

    def write_csv(self, path: str) -> None:
        """Grid shaped like the headline results table: sets x targets."""
        targets = [TargetKind.DDM_PHON, TargetKind.DDM_GRAM, TargetKind.DDM]
        sets = []
        for c in self.cells:
            if c.set_id not in sets:
                sets.append(c.set_id)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["feature_set"] + [t.value for t in targets])
            for s in sets:
                row = [s.value]
                for t in targets:
                    try:
                        c = self.cell(s, t)
                        row.append("undefined" if c.r is None else repr(c.r))
                    except KeyError:
                        row.append("")
                writer.writerow(row)


def _test_records(records: list[UtteranceRecord], split: SplitSpec) -> list[UtteranceRecord]:
    return [r for r in records
            if r.ddm_annotation is not None and r.speaker_id in split.test_speakers]


def evaluate_split(result: TrainResult, extractor: FeatureExtractor,
                   records: list[UtteranceRecord], split: SplitSpec,
                   target: TargetKind) -> list[ReportCell]:
    """r between clamped predictions and truth on the test partition only."""
    test_recs = _test_records(records, split)
    truth = np.asarray([target_value(r, target) for r in test_recs])
    cells = []
    for set_id, model in result.models.items():
        if len(test_recs) < 2:
            cells.append(ReportCell(set_id, target, None, len(test_recs), "n < 2"))
            continue
        matrix = extractor.build_features(
            test_recs, set_id,
            result.compare_top10 if set_id == FeatureSetId.ALL else None)
        preds = np.asarray([clamp_ddm(v) for v in gbt.predict_many(model, matrix.values)])
        try:
            r = pearson(preds, truth)
            cells.append(ReportCell(set_id, target, r, len(test_recs)))
        except UndefinedCorrelationError as exc:
            cells.append(ReportCell(set_id, target, None, len(test_recs), str(exc)))
    return cells


def evaluate_grid(results: dict[TargetKind, TrainResult], extractor: FeatureExtractor,
                  records: list[UtteranceRecord], split: SplitSpec) -> EvalReport:
    """All trained sets x all trained targets (7 x 3 with the defaults)."""
    report = EvalReport()
    for target, result in results.items():
        report.cells.extend(evaluate_split(result, extractor, records, split, target))
    return report


@dataclass
class HoldoutReport:
    target: TargetKind
    n_iter: int
    mean_r: dict[FeatureSetId, float]
    n_undefined: dict[FeatureSetId, int]
    iterations: list[list[ReportCell]]

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["feature_set", "target", "mean_r", "n_undefined", "n_iter"])
            for set_id, r in self.mean_r.items():
                writer.writerow([set_id.value, self.target.value,
                                 "undefined" if np.isnan(r) else repr(r),
                                 self.n_undefined[set_id], self.n_iter])


def random_holdout_eval(records: list[UtteranceRecord], extractor: FeatureExtractor,
                        target: TargetKind, params: gbt.GBTParams | None = None,
                        sets: tuple[FeatureSetId, ...] = ALL_SETS,
                        n_iter: int = 200, test_fraction: float = 0.20,
                        seed: int = 0, importance: str = "shap") -> HoldoutReport:
    """Train and evaluate on repeated speaker-independent two-way splits.

    Means exclude undefined cells; their count is reported alongside.
    """
    scored = [r for r in records if r.ddm_annotation is not None]
    splits = make_random_holdouts(scored, n_iter=n_iter,
                                  test_fraction=test_fraction, seed=seed)
    iterations: list[list[ReportCell]] = []
    for split in splits:
        result = train_all(scored, split, target, extractor, params,
                           sets=sets, importance=importance)
        iterations.append(evaluate_split(result, extractor, scored, split, target))

    mean_r: dict[FeatureSetId, float] = {}
    n_undefined: dict[FeatureSetId, int] = {}
    for set_id in sets:
        values = [c.r for cells in iterations for c in cells
                  if c.set_id == set_id and c.r is not None]
        skipped = sum(1 for cells in iterations for c in cells
                      if c.set_id == set_id and c.r is None)
        mean_r[set_id] = float(np.mean(values)) if values else float("nan")
        n_undefined[set_id] = skipped
    return HoldoutReport(target=target, n_iter=n_iter, mean_r=mean_r,
                         n_undefined=n_undefined, iterations=iterations)


def city_means(records: list[UtteranceRecord]) -> dict[City, DDMScore]:
    """Unweighted mean dialect density per city over annotated utterances."""
    by_city: dict[City, list[DDMScore]] = {}
    for rec in records:
        if rec.ddm_annotation is None:
            continue
        by_city.setdefault(rec.city, []).append(compute_ddm(rec.ddm_annotation))
    out = {}
    for city, scores in by_city.items():
        out[city] = DDMScore(
            ddm_phon=float(np.mean([s.ddm_phon for s in scores])),
            ddm_gram=float(np.mean([s.ddm_gram for s in scores])),
            ddm=float(np.mean([s.ddm for s in scores])),
        )
    return out


def write_city_means_csv(means: dict[City, DDMScore], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["city", "ddm_phon", "ddm_gram", "ddm"])
        for city in City:
            if city in means:
                s = means[city]
                writer.writerow([city.value, repr(s.ddm_phon), repr(s.ddm_gram), repr(s.ddm)])


@dataclass(frozen=True)
class ShapSummaryRow:
    feature: str
    mean_abs_phi: float
    phi_min: float
    phi_median: float
    phi_max: float


def shap_summary(model: gbt.GBTModel, X: np.ndarray, top_n: int = 20) -> list[ShapSummaryRow]:
    """Top features by mean |phi| with per-utterance phi spread, for reports."""
    X = np.asarray(X, dtype=np.float64)
    phis = np.vstack([gbt.tree_shap(model, X[i]).values for i in range(X.shape[0])])
    mean_abs = np.abs(phis).mean(axis=0)
    order = sorted(range(model.n_features), key=lambda j: (-mean_abs[j], j))
    rows = []
    for j in order[:min(top_n, model.n_features)]:
        rows.append(ShapSummaryRow(
            feature=model.feature_names[j],
            mean_abs_phi=float(mean_abs[j]),
            phi_min=float(phis[:, j].min()),
            phi_median=float(np.median(phis[:, j])),
            phi_max=float(phis[:, j].max()),
        ))
    return rows


def write_shap_summary_csv(rows: list[ShapSummaryRow], path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature", "mean_abs_phi", "phi_min", "phi_median", "phi_max"])
        for row in rows:
            writer.writerow([row.feature, repr(row.mean_abs_phi), repr(row.phi_min),
                             repr(row.phi_median), repr(row.phi_max)])


def write_shap_plot_data_csv(model: gbt.GBTModel, ids: list[str], X: np.ndarray,
                             path: str) -> None:
    """Long-form (feature, utterance, phi, feature value) rows for plotting."""
    X = np.asarray(X, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["feature", "utterance_id", "phi", "feature_value"])
        for i, uid in enumerate(ids):
            phi = gbt.tree_shap(model, X[i]).values
            for j, name in enumerate(model.feature_names):
                writer.writerow([name, uid, repr(float(phi[j])), repr(float(X[i, j]))])


def write_attributions_csv(model: gbt.GBTModel, ids: list[str], X: np.ndarray,
                           path: str) -> None:
    """Per-utterance attribution export: (utterance_id, feature, phi)."""
    X = np.asarray(X, dtype=np.float64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["utterance_id", "feature", "phi"])
        for i, uid in enumerate(ids):
            phi = gbt.tree_shap(model, X[i]).values
            for j, name in enumerate(model.feature_names):
                writer.writerow([uid, name, repr(float(phi[j]))])
