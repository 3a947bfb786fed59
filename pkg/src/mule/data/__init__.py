"""Corpora, file formats, synthetic data and minibatch samplers."""

from .corpus import SPLITS, Corpus, CorpusExample, Lexicon, example_from_tokens
from .formats import load_corpus, load_split, save_corpus, save_dataset
from .sampling import BatchSampler, MiniBatch, SamplerSpec, sample_batch
from .synthetic import (
    SyntheticSpec,
    SyntheticWorld,
    drop_human,
    gen_splits,
    gen_synthetic,
    reduce_language,
    simulate_translation,
)

__all__ = [
    "SPLITS", "Corpus", "CorpusExample", "Lexicon", "example_from_tokens",
    "load_corpus", "load_split", "save_corpus", "save_dataset",
    "BatchSampler", "MiniBatch", "SamplerSpec", "sample_batch",
    "SyntheticSpec", "SyntheticWorld", "drop_human", "gen_splits", "gen_synthetic",
    "reduce_language", "simulate_translation",
]
