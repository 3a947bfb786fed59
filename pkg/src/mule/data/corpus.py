"""In-memory corpus of image features with per-language sentences."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np

from ..errors import ConfigError, ParseError
from ..language import SentenceTokens, Vocabulary

SPLITS = ("train", "val", "test")


@dataclass(frozen=True, eq=False)
class CorpusExample:
    image_id: str
    feature: np.ndarray
    sentences: Mapping[str, tuple[SentenceTokens, ...]]

    def __post_init__(self):
        feat = np.asarray(self.feature, dtype=np.float32)
        feat.setflags(write=False)
        object.__setattr__(self, "feature", feat)
        object.__setattr__(self, "sentences", {k: tuple(v) for k, v in self.sentences.items()})

    def count(self, language: str, machine: bool | None = None) -> int:
        sents = self.sentences.get(language, ())
        if machine is None:
            return len(sents)
        return sum(1 for s in sents if s.machine == machine)

    def languages(self) -> list[str]:
        return [l for l, s in self.sentences.items() if s]

    def __eq__(self, other):
        if not isinstance(other, CorpusExample):
            return NotImplemented
        mine = {k: v for k, v in self.sentences.items() if v}
        theirs = {k: v for k, v in other.sentences.items() if v}
        return (self.image_id == other.image_id and mine == theirs
                and self.feature.shape == other.feature.shape
                and np.array_equal(self.feature, other.feature))


class Lexicon:
    """Word senses shared across languages; a bijective dictionary.

    ``senses[lang][i]`` is the sense key of token index ``i`` (None for the
    unknown slot). Two tokens in different languages translate into each
    other iff they carry the same sense key.
    """

    def __init__(self, senses: Mapping[str, list]):
        self.senses = {lang: list(keys) for lang, keys in senses.items()}
        self._by_sense = {
            lang: {key: i for i, key in enumerate(keys) if key is not None}
            for lang, keys in self.senses.items()
        }

    def has(self, language: str) -> bool:
        return language in self.senses

    def translate(self, src: str, dst: str, index: int) -> int:
        if not (self.has(src) and self.has(dst)):
            raise ConfigError(f"no dictionary between {src!r} and {dst!r}")
        key = self.senses[src][index] if index < len(self.senses[src]) else None
        if key is None:
            return 0
        return self._by_sense[dst].get(key, 0)

    def sense(self, language: str, index: int):
        return self.senses[language][index]

    def __eq__(self, other):
        return isinstance(other, Lexicon) and self.senses == other.senses


@dataclass(frozen=True, eq=False)
class Corpus:
    examples: tuple[CorpusExample, ...]
    vocabs: Mapping[str, Vocabulary]
    split: str = "train"
    lexicon: Lexicon | None = None
    languages: tuple[str, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple(self.examples))
        if not self.languages:
            object.__setattr__(self, "languages", tuple(self.vocabs))
        object.__setattr__(self, "languages", tuple(self.languages))
        missing = [l for l in self.languages if l not in self.vocabs]
        if missing:
            raise ConfigError(f"no vocabulary for languages {missing}")
        ids = [e.image_id for e in self.examples]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate image ids in corpus")
        dims = {e.feature.shape for e in self.examples}
        if len(dims) > 1:
            raise ConfigError(f"feature dimensions differ across corpus: {sorted(dims)}")
        for e in self.examples:
            for lang, sents in e.sentences.items():
                if sents and lang not in self.vocabs:
                    raise ConfigError(f"{e.image_id}: language {lang!r} has no vocabulary")
                size = len(self.vocabs[lang]) if lang in self.vocabs else 0
                for s in sents:
                    if s.language != lang:
                        raise ConfigError(f"{e.image_id}: sentence filed under {lang} is {s.language}")
                    if max(s.tokens) >= size or min(s.tokens) < 0:
                        raise ConfigError(f"{e.image_id}: token index out of range for {lang}")

    def __len__(self):
        return len(self.examples)

    def __eq__(self, other):
        if not isinstance(other, Corpus):
            return NotImplemented
        return (self.split == other.split and self.languages == other.languages
                and self.examples == other.examples
                and all(self.vocabs[l] == other.vocabs.get(l) for l in self.languages))

    @property
    def feature_dim(self) -> int:
        return int(self.examples[0].feature.shape[0]) if self.examples else 0

    @property
    def features(self) -> np.ndarray:
        return np.stack([e.feature for e in self.examples]) if self.examples else np.zeros((0, 0), np.float32)

    @property
    def vocab_sizes(self) -> dict[str, int]:
        return {l: len(self.vocabs[l]) for l in self.languages}

    def sentence_count(self, language: str, machine: bool | None = None) -> int:
        return sum(e.count(language, machine) for e in self.examples)

    def sentences(self, language: str | None = None):
        """Yield ``(example_index, sentence)`` pairs."""
        langs = self.languages if language is None else (language,)
        for i, e in enumerate(self.examples):
            for lang in langs:
                for s in e.sentences.get(lang, ()):
                    yield i, s

    def with_examples(self, examples: Iterable[CorpusExample], **changes) -> "Corpus":
        return replace(self, examples=tuple(examples), **changes)


def example_from_tokens(image_id: str, feature, sentences: Mapping[str, Iterable[Iterable[int]]],
                        machine: bool = False) -> CorpusExample:
    return CorpusExample(
        image_id, feature,
        {lang: tuple(SentenceTokens(lang, tuple(t), machine) for t in sents) for lang, sents in sentences.items()},
    )


def require(condition: bool, message: str, path=None, line=None):
    if not condition:
        raise ParseError(message, path, line)
