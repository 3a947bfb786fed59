"""On-disk corpus layout.

``features.bin``: magic ``MULF``, u32 version, u32 count, u32 dim, then
count*dim little-endian float32 in ``ids.txt`` order. ``sentences.tsv``:
``image_id<TAB>lang<TAB>tokens`` with an optional fourth column ``mt`` for
machine-generated sentences. ``vocab/<lang>.txt``: one token per line, index
= line number (0 is the implicit unknown). ``lexicon.tsv``:
``lang<TAB>token<TAB>sense``.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from ..errors import ParseError
from ..language import UNK_TOKEN, SentenceTokens, Vocabulary
from .corpus import Corpus, CorpusExample, Lexicon, require

FEATURE_MAGIC = b"MULF"
FEATURE_VERSION = 1
MACHINE_TAG = "mt"


def write_features(path, features: np.ndarray):
    features = np.ascontiguousarray(features, dtype="<f4")
    count, dim = features.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, count, dim))
        fh.write(features.tobytes())


def read_features(path) -> np.ndarray:
    data = Path(path).read_bytes()
    require(len(data) >= 16, "truncated header", path)
    require(data[:4] == FEATURE_MAGIC, "bad magic, expected MULF", path)
    version, count, dim = struct.unpack_from("<III", data, 4)
    require(version == FEATURE_VERSION, f"unsupported version {version}", path)
    require(len(data) - 16 == count * dim * 4,
            f"dim mismatch: header says {count}x{dim}, payload has {len(data) - 16} bytes", path)
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(count, dim).astype(np.float32)


def write_ids(path, ids):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i in ids:
            fh.write(i + "\n")


def read_ids(path) -> list[str]:
    ids = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            ident = line.rstrip("\n")
            require(ident != "" and "\t" not in ident, "malformed image id", path, n)
            ids.append(ident)
    require(len(set(ids)) == len(ids), "duplicate image ids", path)
    return ids


def write_vocab(path, vocab: Vocabulary):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for tok in vocab.tokens:
            fh.write(tok + "\n")


def read_vocab(path) -> Vocabulary:
    vocab = Vocabulary()
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            tok = line.rstrip("\n")
            require(tok != "" and tok not in vocab and tok != UNK_TOKEN, f"bad or duplicate token {tok!r}", path, n)
            vocab.add(tok)
    return vocab


def write_vocabs(vocab_dir, vocabs):
    os.makedirs(vocab_dir, exist_ok=True)
    for lang, vocab in vocabs.items():
        write_vocab(Path(vocab_dir) / f"{lang}.txt", vocab)


def write_lexicon(path, lexicon: Lexicon, vocabs):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for lang, senses in lexicon.senses.items():
            for idx, key in enumerate(senses):
                if key is not None:
                    fh.write(f"{lang}\t{vocabs[lang].token(idx)}\t{key}\n")


def read_lexicon(path, vocabs) -> Lexicon:
    senses = {lang: [None] * len(v) for lang, v in vocabs.items()}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            require(len(parts) == 3, "expected lang<TAB>token<TAB>sense", path, n)
            lang, tok, key = parts
            require(lang in vocabs, f"unknown language {lang!r}", path, n)
            idx = vocabs[lang].lookup(tok)
            require(idx != 0, f"token {tok!r} not in {lang} vocabulary", path, n)
            senses[lang][idx] = key
    return Lexicon(senses)


def write_sentences(path, corpus: Corpus):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in corpus.examples:
            for lang in corpus.languages:
                vocab = corpus.vocabs[lang]
                for s in e.sentences.get(lang, ()):
                    text = " ".join(vocab.decode(s.tokens))
                    fh.write(f"{e.image_id}\t{lang}\t{text}" + (f"\t{MACHINE_TAG}" if s.machine else "") + "\n")


def _read_sentence_lines(path, known_ids):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            require(len(parts) in (3, 4), "expected image_id<TAB>lang<TAB>tokens[<TAB>mt]", path, n)
            image_id, lang, text = parts[:3]
            machine = len(parts) == 4
            if machine:
                require(parts[3] == MACHINE_TAG, f"unknown flag {parts[3]!r}", path, n)
            require(image_id in known_ids, f"unknown image id {image_id!r}", path, n)
            require(lang != "", "empty language code", path, n)
            tokens = text.split(" ")
            require(text != "" and all(tokens), "empty or malformed token list", path, n)
            rows.append((image_id, lang, tokens, machine))
    return rows


def load_corpus(features_path, ids_path, sentences_path, vocab_dir=None, split="train",
                languages=None, lexicon_path=None) -> Corpus:
    """Join features and sentences by image id.

    Vocabularies are read from ``vocab_dir/<lang>.txt`` when present, else
    built from the sentences in first-seen order. Languages are ordered as
    given, otherwise by first appearance in the sentence file.
    """
    features = read_features(features_path)
    ids = read_ids(ids_path)
    if len(ids) != features.shape[0]:
        raise ParseError(f"id mismatch: {len(ids)} ids but {features.shape[0]} feature rows", ids_path)
    rows = _read_sentence_lines(sentences_path, set(ids))

    order = list(languages) if languages else []
    for _, lang, _, _ in rows:
        if lang not in order:
            if languages:
                raise ParseError(f"language {lang!r} not among configured languages", sentences_path)
            order.append(lang)
    vocabs = {}
    for lang in order:
        vocab_file = Path(vocab_dir) / f"{lang}.txt" if vocab_dir else None
        if vocab_file is not None and vocab_file.exists():
            vocabs[lang] = read_vocab(vocab_file)
        else:
            vocab = Vocabulary()
            for _, l, toks, _ in rows:
                if l == lang:
                    for t in toks:
                        if t != UNK_TOKEN:
                            vocab.add(t)
            vocabs[lang] = vocab

    per_image = {i: {lang: [] for lang in order} for i in ids}
    for image_id, lang, toks, machine in rows:
        per_image[image_id][lang].append(SentenceTokens(lang, vocabs[lang].encode(toks), machine))
    examples = [CorpusExample(i, features[k], per_image[i]) for k, i in enumerate(ids)]
    lexicon = read_lexicon(lexicon_path, vocabs) if lexicon_path and Path(lexicon_path).exists() else None
    return Corpus(tuple(examples), vocabs, split, lexicon, tuple(order))


def save_corpus(corpus: Corpus, split_dir):
    """Write ``features.bin``, ``ids.txt`` and ``sentences.tsv`` into ``split_dir``."""
    split_dir = Path(split_dir)
    split_dir.mkdir(parents=True, exist_ok=True)
    write_features(split_dir / "features.bin", corpus.features.reshape(len(corpus), corpus.feature_dim))
    write_ids(split_dir / "ids.txt", [e.image_id for e in corpus.examples])
    write_sentences(split_dir / "sentences.tsv", corpus)


def save_dataset(splits: dict, data_dir):
    """Write every split plus shared vocabularies and lexicon under ``data_dir``."""
    data_dir = Path(data_dir)
    first = next(iter(splits.values()))
    write_vocabs(data_dir / "vocab", first.vocabs)
    if first.lexicon is not None:
        write_lexicon(data_dir / "lexicon.tsv", first.lexicon, first.vocabs)
    for name, corpus in splits.items():
        save_corpus(corpus, data_dir / name)


def load_split(data_dir, split, languages=None) -> Corpus:
    data_dir = Path(data_dir)
    d = data_dir / split
    for name in ("features.bin", "ids.txt", "sentences.tsv"):
        if not (d / name).exists():
            raise ParseError(f"missing {name}", d / name)
    return load_corpus(d / "features.bin", d / "ids.txt", d / "sentences.tsv", data_dir / "vocab",
                       split=split, languages=languages, lexicon_path=data_dir / "lexicon.tsv")
