"""Language identifiers, vocabularies and tokenized sentences."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .errors import ConfigError, EmptyInputError

UNK = 0
UNK_TOKEN = "<unk>"


@dataclass(frozen=True)
class LanguageId:
    code: str
    index: int


def language_ids(codes: Iterable[str]) -> tuple[LanguageId, ...]:
    codes = list(codes)
    if len(set(codes)) != len(codes):
        raise ConfigError(f"duplicate language codes in {codes}")
    return tuple(LanguageId(code, i) for i, code in enumerate(codes))


class Vocabulary:
    """Token to index map for one language; index 0 is the unknown token."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._tokens: list[str] = [UNK_TOKEN]
        self._index: dict[str, int] = {}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token in self._index:
            return self._index[token]
        if token == UNK_TOKEN or not token or any(ch.isspace() for ch in token):
            raise ConfigError(f"invalid vocabulary token {token!r}")
        self._index[token] = len(self._tokens)
        self._tokens.append(token)
        return self._index[token]

    def lookup(self, token: str) -> int:
        return self._index.get(token, UNK)

    def token(self, index: int) -> str:
        return self._tokens[index]

    def encode(self, tokens: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.lookup(t) for t in tokens)

    def decode(self, indices: Iterable[int]) -> list[str]:
        return [self._tokens[i] for i in indices]

    @property
    def tokens(self) -> list[str]:
        """Known tokens in index order, excluding the unknown slot."""
        return self._tokens[1:]

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, token):
        return token in self._index

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    def __repr__(self):
        return f"Vocabulary({len(self)} entries)"


@dataclass(frozen=True)
class SentenceTokens:
    """A tokenized sentence. ``machine`` marks simulated translations."""

    language: str
    tokens: tuple[int, ...]
    machine: bool = False

    def __post_init__(self):
        if not isinstance(self.tokens, tuple):
            object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if len(self.tokens) == 0:
            raise EmptyInputError("sentence has no tokens")

    def __len__(self):
        return len(self.tokens)
