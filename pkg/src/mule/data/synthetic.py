"""Synthetic multilingual image-caption corpora and simulated translation.

Each image has one concept and, optionally, a few attributes drawn from a
shared pool. Its feature is the sum of the matching prototype vectors plus
Gaussian noise. Every language has its own surface vocabulary: a small word
bank per concept and per attribute plus distractor words. Sentences in
different languages about the same image are therefore parallel in meaning
without sharing tokens. The sense keys behind the words form a bijective
dictionary used by :func:`simulate_translation`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..errors import ConfigError
from ..language import SentenceTokens, Vocabulary
from .corpus import Corpus, CorpusExample, Lexicon


@dataclass(frozen=True)
class SyntheticSpec:
    languages: tuple[str, ...] = ("en", "de")
    concepts: int = 3
    attributes: int = 10
    attributes_per_image: int = 2
    bank_size: int = 3
    distractors: int = 20
    tokens_per_sentence: int = 6
    sentences_per_lang: Mapping[str, int] | int = 2
    sigma: float = 0.05
    distractor_rate: float = 0.2
    img_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "languages", tuple(self.languages))
        if self.concepts < 2:
            raise ConfigError("need at least two concepts")
        if self.sigma < 0:
            raise ConfigError("sigma must be non-negative")
        if not 0 <= self.distractor_rate <= 1:
            raise ConfigError("distractor_rate must lie in [0, 1]")
        if self.attributes_per_image > self.attributes:
            raise ConfigError("attributes_per_image exceeds the attribute pool")
        if self.tokens_per_sentence < 1:
            raise ConfigError("tokens_per_sentence must be at least 1")

    def quota(self, language: str) -> int:
        if isinstance(self.sentences_per_lang, int):
            return self.sentences_per_lang
        return int(self.sentences_per_lang.get(language, 0))


@dataclass
class SyntheticWorld:
    """Prototypes, vocabularies and lexicon shared by every split."""

    spec: SyntheticSpec
    concept_protos: np.ndarray
    attribute_protos: np.ndarray
    vocabs: dict
    lexicon: Lexicon
    banks: dict = field(default_factory=dict)  # lang -> sense group -> token indices
    distractor_ids: dict = field(default_factory=dict)

    @classmethod
    def build(cls, spec: SyntheticSpec) -> "SyntheticWorld":
        rng = np.random.default_rng([spec.seed, 0])
        concept_protos = rng.normal(size=(spec.concepts, spec.img_dim))
        attribute_protos = rng.normal(size=(spec.attributes, spec.img_dim))
        groups = [f"c{c}" for c in range(spec.concepts)] + [f"a{a}" for a in range(spec.attributes)]
        vocabs, senses, banks, distractor_ids = {}, {}, {}, {}
        for lang in spec.languages:
            vocab = Vocabulary()
            keys = [None]
            banks[lang] = {}
            for g in groups:
                banks[lang][g] = []
                for j in range(spec.bank_size):
                    key = f"{g}w{j}"
                    banks[lang][g].append(vocab.add(f"{lang}_{key}"))
                    keys.append(key)
            distractor_ids[lang] = []
            for j in range(spec.distractors):
                key = f"x{j}"
                distractor_ids[lang].append(vocab.add(f"{lang}_{key}"))
                keys.append(key)
            vocabs[lang] = vocab
            senses[lang] = keys
        return cls(spec, concept_protos, attribute_protos, vocabs, Lexicon(senses), banks, distractor_ids)

    def _sentence(self, rng, lang, senses) -> tuple[int, ...]:
        spec = self.spec
        slots = list(senses[: spec.tokens_per_sentence])
        while len(slots) < spec.tokens_per_sentence:
            slots.append(senses[rng.integers(len(senses))])
        tokens = []
        for g in slots:
            if spec.distractors and rng.random() < spec.distractor_rate:
                tokens.append(self.distractor_ids[lang][rng.integers(spec.distractors)])
            else:
                bank = self.banks[lang][g]
                tokens.append(bank[rng.integers(len(bank))])
        order = rng.permutation(len(tokens))
        return tuple(int(tokens[i]) for i in order)

    def sample(self, n_images: int, split: str = "train", stream: int = 1) -> Corpus:
        spec = self.spec
        rng = np.random.default_rng([spec.seed, stream])
        examples = []
        for i in range(n_images):
            concept = int(rng.integers(spec.concepts))
            attrs = sorted(rng.choice(spec.attributes, spec.attributes_per_image, replace=False).tolist())
            feature = self.concept_protos[concept] + self.attribute_protos[attrs].sum(axis=0)
            feature = feature + spec.sigma * rng.normal(size=spec.img_dim)
            senses = [f"c{concept}"] + [f"a{a}" for a in attrs]
            sentences = {
                lang: tuple(SentenceTokens(lang, self._sentence(rng, lang, senses)) for _ in range(spec.quota(lang)))
                for lang in spec.languages
            }
            if not any(sentences.values()):
                raise ConfigError("every image needs at least one sentence")
            examples.append(CorpusExample(f"{split}-{i:05d}", feature.astype(np.float32), sentences))
        return Corpus(tuple(examples), self.vocabs, split, self.lexicon, spec.languages)

    def concept_of(self, language: str, token: int):
        key = self.lexicon.sense(language, token)
        if key is None or not key.startswith("c"):
            return None
        return int(key[1:].split("w")[0])


def gen_synthetic(n_images: int, languages: Sequence[str] = ("en", "de"), concepts: int = 3,
                  tokens_per_sentence: int = 6, sentences_per_lang=2, sigma: float = 0.05,
                  seed: int = 0, split: str = "train", **kwargs) -> Corpus:
    """One synthetic split. Extra keyword arguments go to :class:`SyntheticSpec`."""
    spec = SyntheticSpec(tuple(languages), concepts, tokens_per_sentence=tokens_per_sentence,
                         sentences_per_lang=sentences_per_lang, sigma=sigma, seed=seed, **kwargs)
    return SyntheticWorld.build(spec).sample(n_images, split)


def gen_splits(spec: SyntheticSpec, sizes: Mapping[str, int]) -> dict[str, Corpus]:
    """Train/val/test corpora from one world; each split has its own stream."""
    world = SyntheticWorld.build(spec)
    return {name: world.sample(n, name, stream=k + 1) for k, (name, n) in enumerate(sizes.items())}


def simulate_translation(corpus: Corpus, src: str, dst: str, p: float, seed: int) -> Corpus:
    """Add noisy dictionary translations of unpaired ``src`` sentences.

    Within an image, the k-th ``src`` sentence is paired with the k-th ``dst``
    sentence; every ``src`` sentence beyond the image's ``dst`` count is
    translated token by token, each token replaced by a uniformly random
    ``dst`` word with probability ``p``. Existing sentences are untouched.
    """
    if corpus.lexicon is None or not (corpus.lexicon.has(src) and corpus.lexicon.has(dst)):
        raise ConfigError(f"no dictionary between {src!r} and {dst!r}")
    if not 0 <= p <= 1:
        raise ConfigError("translation noise rate must lie in [0, 1]")
    rng = np.random.default_rng([seed, 7])
    dst_size = len(corpus.vocabs[dst])
    examples = []
    for e in corpus.examples:
        src_sents = e.sentences.get(src, ())
        dst_sents = e.sentences.get(dst, ())
        new = []
        for s in src_sents[len(dst_sents):]:
            toks = []
            for t in s.tokens:
                if rng.random() < p:
                    toks.append(int(rng.integers(1, dst_size)))
                else:
                    toks.append(corpus.lexicon.translate(src, dst, t))
            new.append(SentenceTokens(dst, tuple(toks), machine=True))
        if new:
            sentences = dict(e.sentences)
            sentences[dst] = tuple(dst_sents) + tuple(new)
            e = CorpusExample(e.image_id, e.feature, sentences)
        examples.append(e)
    return corpus.with_examples(examples)


def reduce_language(corpus: Corpus, language: str, fraction: float, seed: int) -> Corpus:
    """Keep a random ``fraction`` of one language's sentences (low-resource setting).

    Images left without any sentence keep at least their other languages;
    the kept count is ``round(fraction * total)``.
    """
    if not 0 <= fraction <= 1:
        raise ConfigError("fraction must lie in [0, 1]")
    rng = np.random.default_rng([seed, 11])
    slots = [(i, k) for i, e in enumerate(corpus.examples) for k in range(e.count(language))]
    keep_n = int(round(fraction * len(slots)))
    chosen = set(map(tuple, np.asarray(slots)[rng.permutation(len(slots))[:keep_n]].tolist())) if slots else set()
    examples = []
    for i, e in enumerate(corpus.examples):
        sents = e.sentences.get(language, ())
        kept = tuple(s for k, s in enumerate(sents) if (i, k) in chosen)
        sentences = dict(e.sentences)
        sentences[language] = kept
        if not any(sentences.values()):
            raise ConfigError(f"{e.image_id} would be left without sentences")
        examples.append(CorpusExample(e.image_id, e.feature, sentences))
    return corpus.with_examples(examples)


def drop_human(corpus: Corpus, language: str) -> Corpus:
    """Remove human-written sentences of one language (machine-only training)."""
    examples = []
    for e in corpus.examples:
        sentences = dict(e.sentences)
        sentences[language] = tuple(s for s in e.sentences.get(language, ()) if s.machine)
        examples.append(CorpusExample(e.image_id, e.feature, sentences))
    return corpus.with_examples(examples)
