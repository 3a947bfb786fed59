"""Config-driven glue: generate splits, prepare the training corpus, train, evaluate."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .config import RunConfig
from .data.corpus import Corpus, CorpusExample
from .data.synthetic import drop_human, gen_splits, reduce_language, simulate_translation
from .evaluator import RecallReport, evaluate
from .model import ModelParams, init_params
from .trainer import train


def generate(cfg: RunConfig, translate: bool = False) -> dict[str, Corpus]:
    """Synthetic train/val/test splits.

    The low-resource reduction and the simulated translations only touch the
    training split.
    """
    splits = gen_splits(cfg.synthetic_spec(), cfg.split_sizes())
    train_split = splits["train"]
    if cfg["reduce_lang"] and cfg["reduce_fraction"] < 1.0:
        train_split = reduce_language(train_split, cfg["reduce_lang"], cfg["reduce_fraction"], cfg["seed"])
    if translate:
        train_split = simulate_translation(train_split, cfg["translate_src"], cfg["translate_dst"],
                                           cfg["translate_p"], cfg["seed"])
    splits["train"] = train_split
    return splits


def drop_machine(corpus: Corpus) -> Corpus:
    examples = [
        CorpusExample(e.image_id, e.feature, {l: tuple(s for s in ss if not s.machine) for l, ss in e.sentences.items()})
        for e in corpus.examples
    ]
    return corpus.with_examples(examples)


def training_corpus(corpus: Corpus, cfg: RunConfig) -> Corpus:
    """Apply the translation switches to a training split."""
    if cfg["trans_only"]:
        return drop_human(corpus, cfg["translate_dst"])
    if not cfg["translate"]:
        return drop_machine(corpus)
    return corpus


def initial_params(cfg: RunConfig, corpus: Corpus) -> ModelParams:
    mc = cfg.model_config(corpus.vocab_sizes, corpus.feature_dim, corpus.languages)
    return init_params(mc, np.random.default_rng([cfg["seed"], 1]))


@dataclass
class RunResult:
    params: ModelParams
    history: list
    report: RecallReport | None


def run(cfg: RunConfig, splits: dict[str, Corpus], on_epoch: Callable | None = None,
        evaluate_test: bool = True) -> RunResult:
    corpus = training_corpus(splits["train"], cfg)
    params = initial_params(cfg, corpus)
    best, history = train(corpus, cfg.training_config(), val=splits.get("val"), params=params, on_epoch=on_epoch)
    report = evaluate(splits["test"], best) if evaluate_test and "test" in splits else None
    return RunResult(best, history, report)
