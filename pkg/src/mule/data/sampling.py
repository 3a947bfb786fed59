"""Language-balanced minibatch construction.

``multi30k``: B distinct images, per language a quota of sentences per
image (2 for languages with several captions per image, 1 otherwise).
``mscoco-groups``: images are grouped by which languages they carry and each
group contributes an equal share of the batch; leftover slots rotate
round-robin over groups from batch to batch. ``uniform``: like multi30k with
the same quota for every language.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import ConfigError, SamplingError
from ..language import SentenceTokens
from .corpus import Corpus

STYLES = ("uniform", "multi30k", "mscoco-groups")


@dataclass(frozen=True)
class SamplerSpec:
    style: str = "multi30k"
    batch_size: int = 450
    quotas: Mapping[str, int] | None = None
    default_quota: int = 1

    def __post_init__(self):
        if self.style not in STYLES:
            raise ConfigError(f"unknown sampler style {self.style!r}; choose from {STYLES}")
        if self.batch_size < 2:
            raise ConfigError("batch size must be at least 2")
        if self.quotas and min(self.quotas.values()) < 0:
            raise ConfigError("quotas must be non-negative")


@dataclass
class MiniBatch:
    image_indices: np.ndarray
    features: np.ndarray
    sentences: list[SentenceTokens]
    sentence_image: np.ndarray  # batch-local image position of each sentence
    group_counts: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.image_indices)


def resolve_quotas(corpus: Corpus, spec: SamplerSpec) -> dict[str, int]:
    if spec.style == "uniform":
        return {l: spec.default_quota for l in corpus.languages}
    if spec.quotas:
        return {l: int(spec.quotas.get(l, spec.default_quota)) for l in corpus.languages}
    quotas = {}
    for lang in corpus.languages:
        counts = [e.count(lang) for e in corpus.examples if e.count(lang) > 0]
        quotas[lang] = 2 if counts and np.median(counts) >= 2 else 1
    return quotas


def availability_groups(corpus: Corpus) -> list[tuple[tuple[str, ...], np.ndarray]]:
    """Images keyed by the tuple of languages they have sentences in."""
    groups: dict[tuple, list[int]] = {}
    for i, e in enumerate(corpus.examples):
        key = tuple(l for l in corpus.languages if e.count(l) > 0)
        groups.setdefault(key, []).append(i)
    ordered = sorted(groups, key=lambda k: (len(k), [corpus.languages.index(l) for l in k]))
    return [(k, np.asarray(groups[k], dtype=np.intp)) for k in ordered]


class BatchSampler:
    """Draws minibatches; keeps the round-robin pointer for group remainders."""

    def __init__(self, corpus: Corpus, spec: SamplerSpec):
        if len(corpus) == 0:
            raise SamplingError("cannot sample from an empty corpus")
        if spec.batch_size > len(corpus):
            raise SamplingError(f"batch size {spec.batch_size} exceeds corpus size {len(corpus)}")
        self.corpus = corpus
        self.spec = spec
        self.quotas = resolve_quotas(corpus, spec)
        self.groups = availability_groups(corpus) if spec.style == "mscoco-groups" else None
        self._next_group = 0

    def group_sizes(self) -> list[int]:
        """Images drawn from each group in the next batch."""
        n_groups = len(self.groups)
        base, extra = divmod(self.spec.batch_size, n_groups)
        sizes = [base] * n_groups
        for j in range(extra):
            sizes[(self._next_group + j) % n_groups] += 1
        return sizes

    def _draw_images(self, rng: np.random.Generator) -> tuple[np.ndarray, dict]:
        if self.groups is None:
            return rng.choice(len(self.corpus), self.spec.batch_size, replace=False), {}
        sizes = self.group_sizes()
        picked, counts = [], {}
        for (key, members), size in zip(self.groups, sizes):
            if size > len(members):
                raise SamplingError(f"group {'+'.join(key)} has {len(members)} images, batch needs {size}")
            picked.append(rng.choice(members, size, replace=False))
            counts[key] = size
        self._next_group = (self._next_group + self.spec.batch_size % len(self.groups)) % len(self.groups)
        return np.concatenate(picked), counts

    def sample(self, rng: np.random.Generator) -> MiniBatch:
        images, counts = self._draw_images(rng)
        sentences, owner = [], []
        for pos, idx in enumerate(images):
            example = self.corpus.examples[idx]
            for lang in self.corpus.languages:
                sents = example.sentences.get(lang, ())
                quota = self.quotas[lang]
                if len(sents) <= quota:
                    chosen = range(len(sents))
                else:
                    chosen = sorted(rng.choice(len(sents), quota, replace=False).tolist())
                for k in chosen:
                    sentences.append(sents[k])
                    owner.append(pos)
        feats = np.stack([self.corpus.examples[i].feature for i in images])
        return MiniBatch(np.asarray(images, dtype=np.intp), feats, sentences, np.asarray(owner, dtype=np.intp), counts)


def sample_batch(corpus: Corpus, spec: SamplerSpec, rng: np.random.Generator) -> MiniBatch:
    return BatchSampler(corpus, spec).sample(rng)
