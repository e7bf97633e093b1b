"""Command-line front end: corpus -> features -> models -> reports.

Subcommands are idempotent: rerunning with unchanged inputs rewrites
byte-identical outputs. Exit codes: 0 success, 2 missing or invalid input,
3 partial per-row failure.
"""

from __future__ import annotations

import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import evaluation, gbt, pipeline, synth
from .char_lm import (load_char_lm, load_word_vocab, save_char_lm, save_word_vocab,
                      train_char_lm, train_word_vocab, utterance_char_ppl)
from .config import RunConfig, load_config
from .corpus import (attach_side_data, filter_weak_label_pool, ingest_feature_table,
                     load_manifest, make_speaker_split, UtteranceRecord)
from .audio import read_wav
from .pipeline import ALL_SETS, FeatureExtractor, FeatureSetId, TargetKind, TrainResult
from .projector import (build_cnn, build_fc, load_projector, save_projector,
                        train_projector)
from .prosody import extract_contours, normalize_contours
from .seeds import substream_rng, substream_seed

EXIT_BAD_INPUT = 2
EXIT_PARTIAL = 3

TARGETS = (TargetKind.DDM_PHON, TargetKind.DDM_GRAM, TargetKind.DDM)


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_cfg(config_path: str, seed: int | None, out: str | None, jobs: int | None) -> RunConfig:
    if not Path(config_path).exists():
        _fail(EXIT_BAD_INPUT, f"config file not found: {config_path}")
    cfg = load_config(config_path)
    updates = {}
    if seed is not None:
        updates["seed"] = seed
    if out is not None:
        updates["out_dir"] = out
    if jobs is not None:
        updates["jobs"] = jobs
    if updates:
        from dataclasses import replace
        cfg = replace(cfg, **updates)
    return cfg


def _paths(cfg: RunConfig) -> dict[str, Path]:
    out = Path(cfg.out_dir)
    return {
        "models": out / "models",
        "features": out / "features",
        "reports": out / "reports",
        "char_lm": out / "models" / "char_lm.json",
        "vocab": out / "models" / "word_vocab.json",
        "fc": out / "models" / "projector_fc.json",
        "cnn": out / "models" / "projector_cnn.json",
    }


def _load_records(cfg: RunConfig) -> list[UtteranceRecord]:
    if not Path(cfg.manifest).exists():
        _fail(EXIT_BAD_INPUT, f"manifest not found: {cfg.manifest}")
    records = load_manifest(cfg.manifest, cfg.alphabet())
    xvec = table = None
    if cfg.xvector_table:
        if not Path(cfg.xvector_table).exists():
            _fail(EXIT_BAD_INPUT, f"x-vector table not found: {cfg.xvector_table}")
        xvec = ingest_feature_table(cfg.xvector_table, expected_dim=512)
    if cfg.compare_table:
        if not Path(cfg.compare_table).exists():
            _fail(EXIT_BAD_INPUT, f"compare table not found: {cfg.compare_table}")
        table = ingest_feature_table(cfg.compare_table)
    return attach_side_data(records, xvectors=xvec, compare=table)


def _model_needs(sets: tuple[FeatureSetId, ...]) -> tuple[bool, bool]:
    """Which trained side models the requested feature sets require."""
    need_lm = any(s in (FeatureSetId.LM, FeatureSetId.ALL) for s in sets)
    need_proj = any(s in (FeatureSetId.XVECTOR_PROJ, FeatureSetId.PROSODY_PROJ,
                          FeatureSetId.ALL) for s in sets)
    return need_lm, need_proj


def _table_names(path: str) -> tuple[str, ...]:
    with open(path, "r", encoding="utf-8") as fh:
        return tuple(fh.readline().rstrip("\n").split(",")[1:])


def _extractor(cfg: RunConfig, need_lm: bool = True,
               need_projectors: bool = True) -> FeatureExtractor:
    p = _paths(cfg)
    ex = FeatureExtractor(alphabet=cfg.alphabet())
    if need_lm:
        if not p["char_lm"].exists() or not p["vocab"].exists():
            _fail(EXIT_BAD_INPUT, f"language model not trained yet: {p['char_lm']} "
                                  "(run train-lm first)")
        ex.char_lm = load_char_lm(str(p["char_lm"]))
        ex.vocab = load_word_vocab(str(p["vocab"]))
    if need_projectors:
        if not p["fc"].exists() or not p["cnn"].exists():
            _fail(EXIT_BAD_INPUT, f"projectors not trained yet: {p['fc']} "
                                  "(run train-projectors first)")
        ex.fc_model = load_projector(str(p["fc"]))
        ex.cnn_model = load_projector(str(p["cnn"]))
    if cfg.compare_table and Path(cfg.compare_table).exists():
        ex.compare_names = _table_names(cfg.compare_table)
    return ex


def _prewarm(ex: FeatureExtractor, records: list[UtteranceRecord],
             sets: list[FeatureSetId], jobs: int) -> None:
    """Fill the per-row cache in parallel; failures surface later per set."""
    if jobs <= 1:
        return
    tasks = [(r, s) for r in records for s in sets if s != FeatureSetId.ALL]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        for _ in pool.map(lambda rs: ex.prefetch(*rs), tasks):
            pass


def _split(cfg: RunConfig, records: list[UtteranceRecord]):
    scored = [r for r in records if r.ddm_annotation is not None]
    if not scored:
        _fail(EXIT_BAD_INPUT, "manifest has no annotated utterances")
    return make_speaker_split(scored, cfg.split_fractions,
                              seed=substream_seed(cfg.seed, "speaker-split"))


@click.group()
def main() -> None:
    """Dialect density estimation pipeline."""


_config_opt = click.option("--config", "config_path", required=True,
                           type=click.Path(), help="TOML run configuration.")
_seed_opt = click.option("--seed", type=int, default=None, help="Override the global seed.")
_out_opt = click.option("--out", type=click.Path(), default=None,
                        help="Override the output directory.")
_jobs_opt = click.option("--jobs", type=int, default=None,
                         help="Cap worker parallelism for feature extraction.")


@main.command("synth-fixture")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=0)
@click.option("--speakers", type=int, default=20)
@click.option("--scored-per-speaker", type=int, default=10)
@click.option("--pool-per-speaker", type=int, default=6)
def cmd_synth_fixture(out_dir: str, seed: int, speakers: int,
                      scored_per_speaker: int, pool_per_speaker: int) -> None:
    """Generate the synthetic acceptance corpus and a ready config.toml."""
    summary = synth.generate_fixture(out_dir, n_speakers=speakers,
                                     scored_per_speaker=scored_per_speaker,
                                     pool_per_speaker=pool_per_speaker, seed=seed)
    click.echo(f"fixture written to {out_dir}: {summary['scored']} scored, "
               f"{summary['pool']} pool, {summary['decoys']} decoy utterances "
               f"over {summary['speakers']} speakers")


@main.command("train-lm")
@_config_opt
@_seed_opt
@_out_opt
def cmd_train_lm(config_path: str, seed: int | None, out: str | None) -> None:
    """Train the character LM and word vocabulary on the reference corpus."""
    cfg = _load_cfg(config_path, seed, out, None)
    if not Path(cfg.lm_corpus).exists():
        _fail(EXIT_BAD_INPUT, f"LM corpus not found: {cfg.lm_corpus}")
    sentences = [ln for ln in Path(cfg.lm_corpus).read_text(encoding="utf-8").splitlines()
                 if ln.strip()]
    if not sentences:
        _fail(EXIT_BAD_INPUT, f"LM corpus is empty: {cfg.lm_corpus}")
    alphabet = cfg.alphabet()
    # hold out a tail slice for the perplexity summary
    n_held = max(1, len(sentences) // 20)
    train, held = sentences[:-n_held], sentences[-n_held:]
    lm = train_char_lm(train or sentences, alphabet, order=cfg.lm.order, k=cfg.lm.k)
    vocab = train_word_vocab(train or sentences, alphabet, min_count=cfg.lm.min_count)
    p = _paths(cfg)
    p["models"].mkdir(parents=True, exist_ok=True)
    save_char_lm(lm, str(p["char_lm"]))
    save_word_vocab(vocab, str(p["vocab"]))
    ppl = float(np.mean([utterance_char_ppl(lm, s.upper()) for s in held if s.strip()]))
    click.echo(f"char LM: order={cfg.lm.order} k={cfg.lm.k} "
               f"contexts={len(lm.counts)} held-out ppl={ppl:.2f}")
    click.echo(f"word vocab: {len(vocab)} words (min_count={cfg.lm.min_count})")


@main.command("train-projectors")
@_config_opt
@_seed_opt
@_out_opt
def cmd_train_projectors(config_path: str, seed: int | None, out: str | None) -> None:
    """Train the x-vector FC and prosody CNN city classifiers on the weak pool."""
    cfg = _load_cfg(config_path, seed, out, None)
    records = _load_records(cfg)
    pool = filter_weak_label_pool(records)
    if not pool:
        _fail(EXIT_BAD_INPUT, "weak-label pool is empty after filtering")
    rng = substream_rng(cfg.seed, "projector-valid")
    order = rng.permutation(len(pool))
    n_val = max(1, len(pool) // 7)
    val_idx = set(order[:n_val].tolist())

    fc_pool, fc_val, cnn_pool, cnn_val = [], [], [], []
    for i, rec in enumerate(pool):
        if rec.xvector is None:
            _fail(EXIT_BAD_INPUT, f"pool utterance {rec.utterance_id!r} has no x-vector")
        contours = normalize_contours(extract_contours(read_wav(rec.audio_path)))
        fc_item = (rec.xvector, rec.city.value)
        cnn_item = (contours.as_matrix(), rec.city.value)
        if i in val_idx:
            fc_val.append(fc_item)
            cnn_val.append(cnn_item)
        else:
            fc_pool.append(fc_item)
            cnn_pool.append(cnn_item)

    p = _paths(cfg)
    p["models"].mkdir(parents=True, exist_ok=True)
    from dataclasses import replace

    # every stream hangs off the one global seed
    fc_cfg = replace(cfg.fc_train, seed=substream_seed(cfg.seed, "fc-train"))
    fc = build_fc(seed=substream_seed(cfg.seed, "fc-init"),
                  init_scale=fc_cfg.weight_init_scale)
    fc, fc_hist = train_projector(fc, fc_pool, fc_cfg, val_pool=fc_val)
    save_projector(fc, str(p["fc"]))
    click.echo(f"fc projector: {len(fc_pool)} train / {len(fc_val)} val, "
               f"final val accuracy {fc_hist[-1].val_accuracy:.3f}")

    cnn_cfg = replace(cfg.cnn_train, seed=substream_seed(cfg.seed, "cnn-train"))
    cnn = build_cnn(seed=substream_seed(cfg.seed, "cnn-init"),
                    init_scale=cnn_cfg.weight_init_scale)
    cnn, cnn_hist = train_projector(cnn, cnn_pool, cnn_cfg, val_pool=cnn_val)
    save_projector(cnn, str(p["cnn"]))
    click.echo(f"cnn projector: {len(cnn_pool)} train / {len(cnn_val)} val, "
               f"final val accuracy {cnn_hist[-1].val_accuracy:.3f}")


def _parse_set(name: str) -> FeatureSetId:
    try:
        return FeatureSetId(name)
    except ValueError:
        _fail(EXIT_BAD_INPUT, f"unknown feature set {name!r}; "
                              f"choose from {[s.value for s in ALL_SETS]}")
        raise AssertionError  # unreachable


@main.command("extract")
@_config_opt
@click.option("--set", "set_name", default="all", show_default=True,
              help="Feature set to extract.")
@_seed_opt
@_out_opt
@_jobs_opt
def cmd_extract(config_path: str, set_name: str, seed: int | None, out: str | None,
                jobs: int | None) -> None:
    """Extract a feature matrix for every annotated utterance."""
    cfg = _load_cfg(config_path, seed, out, jobs)
    set_id = _parse_set(set_name)
    records = _load_records(cfg)
    scored = [r for r in records if r.ddm_annotation is not None]
    if not scored:
        _fail(EXIT_BAD_INPUT, "manifest has no annotated utterances")
    need_lm, need_proj = _model_needs((set_id,))
    ex = _extractor(cfg, need_lm=need_lm, need_projectors=need_proj)
    _prewarm(ex, scored, [set_id] if set_id != FeatureSetId.ALL else list(ALL_SETS),
             cfg.jobs)
    compare_top10 = None
    if set_id == FeatureSetId.ALL:
        split = _split(cfg, records)
        result = pipeline.train_all(scored, split, TargetKind.DDM, ex, cfg.gbt,
                                    sets=(FeatureSetId.COMPARE,), importance=cfg.importance)
        compare_top10 = result.compare_top10
    try:
        matrix = ex.build_features(scored, set_id, compare_top10)
    except pipeline.FeatureBuildError as exc:
        for uid, msg in sorted(exc.failures.items()):
            click.echo(f"error: {uid}: {msg}", err=True)
        sys.exit(EXIT_PARTIAL)
    p = _paths(cfg)
    p["features"].mkdir(parents=True, exist_ok=True)
    path = p["features"] / f"features_{set_id.value}.csv"
    matrix.save_csv(str(path))
    click.echo(f"{len(matrix.ids)} x {len(matrix.columns)} matrix written to {path}")


def _train_results(cfg: RunConfig, records: list[UtteranceRecord],
                   ex: FeatureExtractor, targets: tuple[TargetKind, ...]
                   ) -> dict[TargetKind, TrainResult]:
    scored = [r for r in records if r.ddm_annotation is not None]
    split = _split(cfg, records)
    results = {}
    for target in targets:
        results[target] = pipeline.train_all(scored, split, target, ex, cfg.gbt,
                                             importance=cfg.importance)
    return results


def _bundle_path(cfg: RunConfig, target: TargetKind) -> Path:
    return _paths(cfg)["models"] / f"bundle_{target.value}.json"


def _save_results(cfg: RunConfig, results: dict[TargetKind, TrainResult]) -> None:
    import json

    p = _paths(cfg)
    p["models"].mkdir(parents=True, exist_ok=True)
    for target, result in results.items():
        for set_id, model in result.models.items():
            gbt.save_model(model, str(p["models"] / f"gbt_{target.value}_{set_id.value}.json"))
        bundle = {"version": 1, "target": target.value,
                  "sets": [s.value for s in result.models],
                  "compare_top10": result.compare_top10}
        with open(_bundle_path(cfg, target), "w", encoding="utf-8") as fh:
            json.dump(bundle, fh, sort_keys=True)


def _load_results(cfg: RunConfig, targets: tuple[TargetKind, ...]
                  ) -> dict[TargetKind, TrainResult]:
    import json

    p = _paths(cfg)
    results = {}
    for target in targets:
        bundle_path = _bundle_path(cfg, target)
        if not bundle_path.exists():
            _fail(EXIT_BAD_INPUT, f"missing trained bundle: {bundle_path} "
                                  "(run train-model first)")
        with open(bundle_path, "r", encoding="utf-8") as fh:
            bundle = json.load(fh)
        models = {}
        for set_name in bundle["sets"]:
            mp = p["models"] / f"gbt_{target.value}_{set_name}.json"
            if not mp.exists():
                _fail(EXIT_BAD_INPUT, f"missing model file: {mp}")
            models[FeatureSetId(set_name)] = gbt.load_model(str(mp))
        results[target] = TrainResult(target=target, models=models,
                                      compare_top10=bundle["compare_top10"])
    return results


@main.command("train-model")
@_config_opt
@click.option("--target", "target_name", default=None,
              help="Train a single target instead of all three.")
@_seed_opt
@_out_opt
@_jobs_opt
def cmd_train_model(config_path: str, target_name: str | None, seed: int | None,
                    out: str | None, jobs: int | None) -> None:
    """Train one boosted-tree model per feature set and target."""
    cfg = _load_cfg(config_path, seed, out, jobs)
    targets = TARGETS if target_name is None else (TargetKind(target_name),)
    records = _load_records(cfg)
    ex = _extractor(cfg)
    scored = [r for r in records if r.ddm_annotation is not None]
    _prewarm(ex, scored, list(ALL_SETS), cfg.jobs)
    try:
        results = _train_results(cfg, records, ex, targets)
    except pipeline.FeatureBuildError as exc:
        for uid, msg in sorted(exc.failures.items()):
            click.echo(f"error: {uid}: {msg}", err=True)
        sys.exit(EXIT_PARTIAL)
    _save_results(cfg, results)
    for target, result in results.items():
        rounds = {s.value: len(m.trees) for s, m in result.models.items()}
        click.echo(f"{target.value}: trained {len(result.models)} models, rounds {rounds}")


@main.command("evaluate")
@_config_opt
@_seed_opt
@_out_opt
@_jobs_opt
def cmd_evaluate(config_path: str, seed: int | None, out: str | None,
                 jobs: int | None) -> None:
    """Correlation grid on the test partition plus per-city mean densities."""
    cfg = _load_cfg(config_path, seed, out, jobs)
    records = _load_records(cfg)
    ex = _extractor(cfg)
    results = _load_results(cfg, TARGETS)
    split = _split(cfg, records)
    report = evaluation.evaluate_grid(results, ex, records, split)
    p = _paths(cfg)
    p["reports"].mkdir(parents=True, exist_ok=True)
    report.write_csv(str(p["reports"] / "correlations.csv"))
    means = evaluation.city_means(records)
    evaluation.write_city_means_csv(means, str(p["reports"] / "city_means.csv"))
    for cell in report.cells:
        shown = "undefined" if cell.r is None else f"{cell.r:.3f}"
        click.echo(f"{cell.set_id.value:13s} {cell.target.value:9s} r={shown} "
                   f"(n={cell.n_test})")
    click.echo(f"reports written to {p['reports']}")


@main.command("holdout")
@_config_opt
@click.option("--target", "target_name", default="ddm", show_default=True)
@click.option("--sets", "set_names", default="char_comb,lm,all", show_default=True,
              help="Comma-separated feature sets to evaluate.")
@click.option("--n-iter", type=int, default=None,
              help="Override the configured iteration count.")
@_seed_opt
@_out_opt
@_jobs_opt
def cmd_holdout(config_path: str, target_name: str, set_names: str, n_iter: int | None,
                seed: int | None, out: str | None, jobs: int | None) -> None:
    """Average correlations over repeated random speaker-independent splits."""
    cfg = _load_cfg(config_path, seed, out, jobs)
    target = TargetKind(target_name)
    sets = tuple(_parse_set(s.strip()) for s in set_names.split(","))
    records = _load_records(cfg)
    scored = [r for r in records if r.ddm_annotation is not None]
    if not scored:
        _fail(EXIT_BAD_INPUT, "manifest has no annotated utterances")
    need_lm, need_proj = _model_needs(sets)
    ex = _extractor(cfg, need_lm=need_lm, need_projectors=need_proj)
    _prewarm(ex, scored, list(sets), cfg.jobs)
    report = evaluation.random_holdout_eval(
        scored, ex, target, cfg.gbt, sets=sets,
        n_iter=n_iter if n_iter is not None else cfg.eval.n_iter,
        test_fraction=cfg.eval.test_fraction,
        seed=substream_seed(cfg.seed, "holdout"), importance=cfg.importance)
    p = _paths(cfg)
    p["reports"].mkdir(parents=True, exist_ok=True)
    path = p["reports"] / f"holdout_{target.value}.csv"
    report.write_csv(str(path))
    for set_id, r in report.mean_r.items():
        click.echo(f"{set_id.value:13s} mean r={r:.3f} over {report.n_iter} iterations "
                   f"({report.n_undefined[set_id]} undefined)")
    click.echo(f"hold-out report written to {path}")


@main.command("explain")
@_config_opt
@click.option("--target", "target_name", default="ddm", show_default=True)
@click.option("--set", "set_name", default="all", show_default=True)
@click.option("--top-n", type=int, default=20, show_default=True)
@_seed_opt
@_out_opt
@_jobs_opt
def cmd_explain(config_path: str, target_name: str, set_name: str, top_n: int,
                seed: int | None, out: str | None, jobs: int | None) -> None:
    """Attribution ranking, plot data, and per-utterance attributions."""
    cfg = _load_cfg(config_path, seed, out, jobs)
    target = TargetKind(target_name)
    set_id = _parse_set(set_name)
    records = _load_records(cfg)
    ex = _extractor(cfg)
    result = _load_results(cfg, (target,))[target]
    if set_id not in result.models:
        _fail(EXIT_BAD_INPUT, f"no trained model for set {set_id.value!r}")
    model = result.models[set_id]
    split = _split(cfg, records)
    scored = [r for r in records if r.ddm_annotation is not None]
    test_recs = [r for r in scored if r.speaker_id in split.test_speakers]
    matrix = ex.build_features(
        test_recs, set_id,
        result.compare_top10 if set_id == FeatureSetId.ALL else None)
    rows = evaluation.shap_summary(model, matrix.values, top_n=top_n)
    p = _paths(cfg)
    p["reports"].mkdir(parents=True, exist_ok=True)
    stem = f"{target.value}_{set_id.value}"
    evaluation.write_shap_summary_csv(
        rows, str(p["reports"] / f"shap_ranking_{stem}.csv"))
    evaluation.write_shap_plot_data_csv(
        model, matrix.ids, matrix.values, str(p["reports"] / f"shap_plot_{stem}.csv"))
    evaluation.write_attributions_csv(
        model, matrix.ids, matrix.values, str(p["reports"] / f"attributions_{stem}.csv"))
    for row in rows[:10]:
        click.echo(f"{row.feature:24s} mean|phi|={row.mean_abs_phi:.5f}")
    click.echo(f"attribution reports written to {p['reports']}")


if __name__ == "__main__":
    main()
