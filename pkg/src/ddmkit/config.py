"""Run configuration: one TOML file drives every pipeline stage.

All randomness flows from the single `seed` through named substreams, so runs
are reproducible end to end and adding a component never shifts another's
stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import tomli

from .alphabet import Alphabet
from .gbt import GBTParams
from .projector import TrainConfig


@dataclass(frozen=True)
class LMConfig:
    order: int = 6
    k: float = 0.01
    min_count: int = 2


@dataclass(frozen=True)
class EvalConfig:
    n_iter: int = 200
    test_fraction: float = 0.20


@dataclass(frozen=True)
class RunConfig:
    manifest: str = "manifest.jsonl"
    lm_corpus: str = "lm_corpus.txt"
    xvector_table: str | None = None
    compare_table: str | None = None
    out_dir: str = "out"
    alphabet_symbols: tuple[str, ...] | None = None
    seed: int = 0
    jobs: int = 1
    importance: str = "shap"  # compare top-10 selection metric: shap | gain
    split_fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)
    lm: LMConfig = field(default_factory=LMConfig)
    fc_train: TrainConfig = field(default_factory=TrainConfig)
    cnn_train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10))
    gbt: GBTParams = field(default_factory=GBTParams)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def alphabet(self) -> Alphabet:
        if self.alphabet_symbols is None:
            return Alphabet()
        return Alphabet(self.alphabet_symbols)

    def resolve(self, base: Path) -> "RunConfig":
        """Interpret relative paths against the config file's directory."""
        def fix(p: str | None) -> str | None:
            return None if p is None else str(base / p) if not Path(p).is_absolute() else p
        return replace(self, manifest=fix(self.manifest), lm_corpus=fix(self.lm_corpus),
                       xvector_table=fix(self.xvector_table),
                       compare_table=fix(self.compare_table), out_dir=fix(self.out_dir))


def _train_config(obj: dict, default: TrainConfig) -> TrainConfig:
    return TrainConfig(
        learning_rate=obj.get("learning_rate", default.learning_rate),
        batch_size=obj.get("batch_size", default.batch_size),
        epochs=obj.get("epochs", default.epochs),
        seed=obj.get("seed", default.seed),
        weight_init_scale=obj.get("weight_init_scale", default.weight_init_scale),
        optimizer=obj.get("optimizer", default.optimizer),
        momentum=obj.get("momentum", default.momentum),
    )


def load_config(path: str) -> RunConfig:
    with open(path, "rb") as fh:
        obj = tomli.load(fh)
    paths = obj.get("paths", {})
    lm = obj.get("lm", {})
    gbt_obj = obj.get("gbt", {})
    ev = obj.get("eval", {})
    split = obj.get("split", {})
    cfg = RunConfig(
        manifest=paths.get("manifest", "manifest.jsonl"),
        lm_corpus=paths.get("lm_corpus", "lm_corpus.txt"),
        xvector_table=paths.get("xvector_table"),
        compare_table=paths.get("compare_table"),
        out_dir=paths.get("out_dir", "out"),
        alphabet_symbols=tuple(obj["alphabet"]) if "alphabet" in obj else None,
        seed=obj.get("seed", 0),
        jobs=obj.get("jobs", 1),
        importance=obj.get("importance", "shap"),
        split_fractions=tuple(split.get("fractions", (0.70, 0.15, 0.15))),
        lm=LMConfig(order=lm.get("order", 6), k=lm.get("k", 0.01),
                    min_count=lm.get("min_count", 2)),
        fc_train=_train_config(obj.get("fc_train", {}), TrainConfig()),
        cnn_train=_train_config(obj.get("cnn_train", {}), TrainConfig(epochs=10)),
        gbt=GBTParams(
            eta=gbt_obj.get("eta", 0.1),
            max_depth=gbt_obj.get("max_depth", 4),
            n_rounds=gbt_obj.get("n_rounds", 200),
            lam=gbt_obj.get("lambda", 1.0),
            gamma=gbt_obj.get("gamma", 0.0),
            min_child_weight=gbt_obj.get("min_child_weight", 1.0),
            early_stopping_rounds=gbt_obj.get("early_stopping_rounds", 20),
        ),
        eval=EvalConfig(n_iter=ev.get("n_iter", 200),
                        test_fraction=ev.get("test_fraction", 0.20)),
    )
    return cfg.resolve(Path(path).resolve().parent)
