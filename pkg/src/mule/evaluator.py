"""Bidirectional retrieval metrics, the language probe and report files."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .data.corpus import Corpus
from .errors import ConfigError, DegenerateInputError, EmptyInputError, ParseError
from .language import SentenceTokens
from .model import ModelParams, embed_images, encode_sentences
from .optim import Adam

KS = (1, 5, 10)
DIRECTIONS = ("i2s", "s2i")
REPORT_COLUMNS = ("language", "i2s_r1", "i2s_r5", "i2s_r10", "s2i_r1", "s2i_r5", "s2i_r10", "mR")
ENCODE_CHUNK = 512


def _as_matrix(x) -> np.ndarray:
    if isinstance(x, ad.Node):
        x = x.value
    if isinstance(x, (list, tuple)):
        if not x:
            raise EmptyInputError("no embeddings given")
        x = np.stack([v.value if isinstance(v, ad.Node) else np.asarray(v) for v in x])
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyInputError("embeddings must form a nonempty [n, d] block")
    return x


def distance_matrix(images, sentences) -> np.ndarray:
    """``D[i, j]`` = cosine distance between image ``i`` and sentence ``j``."""
    a, b = _as_matrix(images), _as_matrix(sentences)
    if a.shape[1] != b.shape[1]:
        raise ConfigError(f"embedding dims differ: {a.shape[1]} vs {b.shape[1]}")
    with ad.no_grad():
        return ad.cosine_distance_matrix(ad.constant(a, np.float64), ad.constant(b, np.float64)).value


def _first_hit_rank(d: np.ndarray, targets: np.ndarray) -> int:
    """0-based rank of the best-ranked target; ties go to the lower index."""
    best = len(d)
    for g in targets:
        dg = d[g]
        rank = int(np.count_nonzero(d < dg) + np.count_nonzero(d[:g] == dg))
        best = min(best, rank)
    return best


def recall_at_k(D, ground_truth, direction: str, k: int) -> float:
    """Percentage of queries with a ground-truth item among their ``k`` nearest.

    ``D`` is image-by-sentence. For ``i2s`` the queries are rows and
    ``ground_truth[i]`` lists sentence columns; for ``s2i`` the queries are
    columns and ``ground_truth[j]`` lists image rows.
    """
    D = np.asarray(D)
    if direction not in DIRECTIONS:
        raise ConfigError(f"direction must be one of {DIRECTIONS}")
    Q = D if direction == "i2s" else D.T
    gallery = Q.shape[1]
    if k > gallery:
        raise ConfigError(f"k={k} exceeds gallery size {gallery}")
    if k < 1:
        raise ConfigError("k must be at least 1")
    items = ground_truth.items() if isinstance(ground_truth, Mapping) else enumerate(ground_truth)
    hits = total = 0
    for q, targets in items:
        targets = np.atleast_1d(np.asarray(targets, dtype=np.intp))
        if targets.size == 0:
            raise ConfigError(f"query {q} has no ground-truth item")
        total += 1
        hits += _first_hit_rank(Q[q], targets) < k
    if total == 0:
        raise EmptyInputError("no queries")
    return 100.0 * hits / total


def round_half_up(x: float, digits: int = 1) -> float:
    # round(x, 9) first so binary noise such as 67.94999999 still rounds up
    q = Decimal(1).scaleb(-digits)
    return float(Decimal(repr(round(x, 9))).quantize(q, rounding=ROUND_HALF_UP))


def mean_recall(values: Sequence[float]) -> float:
    values = list(values)
    if len(values) != 6:
        raise ConfigError(f"mean recall needs six values, got {len(values)}")
    return sum(values) / 6.0


@dataclass
class LanguageRecall:
    language: str
    i2s: tuple[float, float, float]
    s2i: tuple[float, float, float]
    n_images: int = 0
    n_sentences: int = 0

    @property
    def values(self) -> tuple[float, ...]:
        return tuple(self.i2s) + tuple(self.s2i)

    @property
    def mr(self) -> float:
        return mean_recall(self.values)


@dataclass
class RecallReport:
    rows: dict = field(default_factory=dict)  # language -> LanguageRecall

    @property
    def mean_mr(self) -> float:
        """Model-selection score: mean of the per-language mR."""
        return float(np.mean([r.mr for r in self.rows.values()]))

    def mr(self, language: str) -> float:
        return self.rows[language].mr

    def to_tsv(self) -> str:
        lines = ["\t".join(REPORT_COLUMNS)]
        for r in self.rows.values():
            cells = [r.language] + [f"{round_half_up(v):.1f}" for v in r.values] + [f"{round_half_up(r.mr):.1f}"]
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"

    def format_table(self) -> str:
        header = f"{'lang':<6}" + "".join(f"{c:>9}" for c in REPORT_COLUMNS[1:])
        out = [header]
        for r in self.rows.values():
            out.append(f"{r.language:<6}" + "".join(f"{round_half_up(v):>9.1f}" for v in r.values)
                       + f"{round_half_up(r.mr):>9.1f}")
        return "\n".join(out)


def write_report(report: RecallReport, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_tsv())


def read_report(path) -> dict[str, dict[str, float]]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or tuple(lines[0].split("\t")) != REPORT_COLUMNS:
        raise ParseError("bad report header", path, 1)
    out = {}
    for n, line in enumerate(lines[1:], 2):
        cells = line.split("\t")
        if len(cells) != len(REPORT_COLUMNS):
            raise ParseError("wrong column count", path, n)
        out[cells[0]] = {c: float(v) for c, v in zip(REPORT_COLUMNS[1:], cells[1:])}
    return out


# ---------------------------------------------------------------- embedding a split


def _encode_in_chunks(sentences: Sequence[SentenceTokens], params: ModelParams, need_s=True):
    us, ss = [], []
    with ad.no_grad():
        for start in range(0, len(sentences), ENCODE_CHUNK):
            u, s = encode_sentences(sentences[start:start + ENCODE_CHUNK], params, need_s)
            us.append(u.value)
            if need_s:
                ss.append(s.value)
    return np.concatenate(us), (np.concatenate(ss) if need_s else None)


def image_embeddings(corpus: Corpus, params: ModelParams) -> np.ndarray:
    with ad.no_grad():
        return embed_images(corpus.features, params, training=False).value


def language_sentences(corpus: Corpus, language: str, include_machine: bool = True):
    owners, sents = [], []
    for i, s in corpus.sentences(language):
        if include_machine or not s.machine:
            owners.append(i)
            sents.append(s)
    return np.asarray(owners, dtype=np.intp), sents


def evaluate(corpus: Corpus, params: ModelParams, ks: Sequence[int] = KS,
             languages: Sequence[str] | None = None) -> RecallReport:
    """Per-language bidirectional recall on one split.

    Image queries are the images holding at least one sentence in the
    language; the gallery for sentence queries is every image in the split.
    """
    f = image_embeddings(corpus, params)
    report = RecallReport()
    for lang in languages or corpus.languages:
        owners, sents = language_sentences(corpus, lang)
        if not sents:
            raise EmptyInputError(f"split {corpus.split!r} has no {lang} sentences")
        _, s = _encode_in_chunks(sents, params)
        D = distance_matrix(f, s)
        i2s_gt = {}
        for j, i in enumerate(owners):
            i2s_gt.setdefault(int(i), []).append(j)
        s2i_gt = {j: [int(i)] for j, i in enumerate(owners)}
        i2s = tuple(recall_at_k(D, i2s_gt, "i2s", k) for k in ks)
        s2i = tuple(recall_at_k(D, s2i_gt, "s2i", k) for k in ks)
        report.rows[lang] = LanguageRecall(lang, i2s, s2i, len(i2s_gt), len(sents))
    return report


def nearest_sentences(corpus: Corpus, params: ModelParams, language: str, n: int) -> list[tuple[str, list[str]]]:
    """Debug helper: the ``n`` nearest sentences of each image, as text."""
    owners, sents = language_sentences(corpus, language)
    _, s = _encode_in_chunks(sents, params)
    D = distance_matrix(image_embeddings(corpus, params), s)
    vocab = corpus.vocabs[language]
    out = []
    for i, e in enumerate(corpus.examples):
        order = np.lexsort((np.arange(D.shape[1]), D[i]))[:n]
        out.append((e.image_id, [" ".join(vocab.decode(sents[j].tokens)) for j in order]))
    return out


# ---------------------------------------------------------------- chance level


def chance_i2s(n_sentences: int, n_targets: int, k: int) -> float:
    """Probability that ``n_targets`` specific items land in a random top-``k``."""
    if k >= n_sentences:
        return 1.0
    return 1.0 - math.comb(n_sentences - n_targets, k) / math.comb(n_sentences, k)


def chance_level(corpus: Corpus, language: str, ks: Sequence[int] = KS) -> float:
    """mR (percent) of a ranking that is uniformly random over the gallery."""
    owners, _ = language_sentences(corpus, language)
    n_img, n_sent = len(corpus), len(owners)
    counts = np.bincount(owners, minlength=n_img)
    counts = counts[counts > 0]
    i2s = [100.0 * float(np.mean([chance_i2s(n_sent, int(g), k) for g in counts])) for k in ks]
    s2i = [100.0 * min(k, n_img) / n_img for k in ks]
    return mean_recall(i2s + s2i)


# ---------------------------------------------------------------- language probe


def universal_features(sentences: Sequence[SentenceTokens], params: ModelParams) -> np.ndarray:
    u, _ = _encode_in_chunks(list(sentences), params, need_s=False)
    return u


def _fit_probe(x: np.ndarray, y: np.ndarray, n_classes: int, steps: int, lr: float, seed: int):
    rng = np.random.default_rng([seed, 23])
    w = ad.parameter(rng.normal(scale=0.01, size=(x.shape[1], n_classes)), "probe.weight", np.float64)
    b = ad.parameter(np.zeros(n_classes), "probe.bias", np.float64)
    params = {"w": w, "b": b}
    opt = Adam()
    xs = ad.constant(x, np.float64)
    for _ in range(steps):
        w.zero_grad()
        b.zero_grad()
        loss = ad.softmax_cross_entropy(ad.matmul(xs, w) + b, y)
        loss.backward()
        opt.step(params, {"w": w.grad, "b": b.grad}, lr)
    return w.value, b.value


def probe_accuracy(x: np.ndarray, y: np.ndarray, n_classes: int, seed: int = 0,
                   steps: int = 300, lr: float = 0.05) -> float:
    """Held-out accuracy (percent) of a fresh affine softmax probe.

    Half of each class trains the probe, the other half measures it.
    Features are standardized with training-half statistics.
    """
    rng = np.random.default_rng([seed, 19])
    train_idx, test_idx = [], []
    for c in np.unique(y):
        members = rng.permutation(np.flatnonzero(y == c))
        half = len(members) // 2
        train_idx.extend(members[:half])
        test_idx.extend(members[half:])
    train_idx, test_idx = np.sort(train_idx), np.sort(test_idx)
    if len(train_idx) == 0 or len(test_idx) == 0:
        raise EmptyInputError("too few sentences to split for the probe")
    mu = x[train_idx].mean(axis=0)
    sd = x[train_idx].std(axis=0)
    sd[sd < 1e-12] = 1.0
    z = (x - mu) / sd
    w, b = _fit_probe(z[train_idx], y[train_idx], n_classes, steps, lr, seed)
    pred = np.argmax(z[test_idx] @ w + b, axis=1)
    return 100.0 * float(np.mean(pred == y[test_idx]))


def probe_language_classifier(params: ModelParams, sentences: Sequence[SentenceTokens], seed: int = 0,
                              steps: int = 300) -> float:
    """Train a new language probe on frozen universal features; held-out accuracy in percent."""
    langs = sorted({s.language for s in sentences}, key=params.config.language_index)
    if len(langs) < 2:
        raise DegenerateInputError("the language probe needs at least two languages")
    x = universal_features(sentences, params).astype(np.float64)
    y = np.array([langs.index(s.language) for s in sentences], dtype=np.intp)
    return probe_accuracy(x, y, len(langs), seed, steps)
