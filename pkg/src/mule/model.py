"""The shared-branch multilingual embedding network.

Per-language word tables and affine projections map tokens into one
universal space. Mean-pooled universal features (``u``) feed the adversarial
language classifier; an LSTM shared by all languages turns the universal
token sequence into the multimodal sentence embedding (``s``). Images pass
through two affine layers with batch norm and a ReLU (``f``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import CheckpointError, ConfigError, EmptyInputError, ParseError, ShapeError
from .language import SentenceTokens, Vocabulary

FULL_DIMS = dict(d_w=300, d_u=512, d_h=1024, d_m=512, d_img=2048)
DESK_DIMS = dict(d_w=16, d_u=24, d_h=32, d_m=16, d_img=32)
EMBED_INIT_RANGE = 0.08
CLASSIFIER = "classifier."


@dataclass(frozen=True)
class ModelConfig:
    languages: tuple[str, ...]
    vocab_sizes: dict = field(hash=False)
    d_w: int = 300
    d_u: int = 512
    d_h: int = 1024
    d_m: int = 512
    d_img: int = 2048
    parallel: bool = False

    def __post_init__(self):
        object.__setattr__(self, "languages", tuple(self.languages))
        missing = [l for l in self.languages if l not in self.vocab_sizes]
        if missing:
            raise ConfigError(f"no vocabulary size for languages {missing}")
        for key in ("d_w", "d_u", "d_h", "d_m", "d_img"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")

    def language_index(self, code: str) -> int:
        try:
            return self.languages.index(code)
        except ValueError:
            raise ConfigError(f"unknown language {code!r}") from None


class ModelParams:
    """All trainable tensors plus batch-norm running statistics.

    ``theta_names`` and ``classifier_names`` partition the trainable
    parameters: the classifier is updated only from its own loss, everything
    else from the main objective.
    """

    def __init__(self, config: ModelConfig, params: dict, buffers: dict, embed_init: dict):
        self.config = config
        self.params = params
        self.buffers = buffers
        self.embed_init = embed_init

    def __getitem__(self, name) -> Node:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def theta_names(self) -> list[str]:
        return [n for n in self.params if not n.startswith(CLASSIFIER)]

    @property
    def classifier_names(self) -> list[str]:
        return [n for n in self.params if n.startswith(CLASSIFIER)]

    def subset(self, names) -> dict:
        return {n: self.params[n] for n in names}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def count(self, prefix: str = "") -> int:
        return int(sum(p.value.size for n, p in self.params.items() if n.startswith(prefix)))

    def astype(self, dtype) -> "ModelParams":
        params = {n: ad.parameter(p.value, name=n, dtype=dtype) for n, p in self.params.items()}
        buffers = {n: {k: v.astype(dtype) for k, v in b.items()} for n, b in self.buffers.items()}
        init = {n: v.astype(dtype) for n, v in self.embed_init.items()}
        return ModelParams(self.config, params, buffers, init)

    def copy(self) -> "ModelParams":
        return self.astype(self.dtype)

    def state(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of everything a checkpoint must hold."""
        out = {n: p.value for n, p in self.params.items()}
        for n, b in self.buffers.items():
            out[f"buffer.{n}.running_mean"] = b["mean"]
            out[f"buffer.{n}.running_var"] = b["var"]
        for lang, v in self.embed_init.items():
            out[f"init.embed.{lang}"] = v
        return out

    @classmethod
    def from_state(cls, config: ModelConfig, state: dict[str, np.ndarray]) -> "ModelParams":
        template = init_params(config, np.random.default_rng(0))
        expected = template.state()
        missing = sorted(set(expected) - set(state))
        if missing:
            raise CheckpointError(f"checkpoint is missing tensors: {', '.join(missing)}")
        for name, arr in state.items():
            if name in expected and expected[name].shape != arr.shape:
                raise CheckpointError(f"tensor {name} has shape {arr.shape}, expected {expected[name].shape}")
        params = {n: ad.parameter(state[n], name=n) for n in template.params}
        buffers = {
            n: {"mean": np.array(state[f"buffer.{n}.running_mean"]), "var": np.array(state[f"buffer.{n}.running_var"])}
            for n in template.buffers
        }
        init = {lang: np.array(state[f"init.embed.{lang}"]) for lang in config.languages}
        return cls(config, params, buffers, init)

    def encoder_prefix(self, language: str) -> str:
        return f"encoder.{language}." if self.config.parallel else "encoder."


def _uniform(rng, shape, scale, dtype):
    return rng.uniform(-scale, scale, size=shape).astype(dtype)


def init_params(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> ModelParams:
    """Random initialization. Word tables are uniform in [-0.08, 0.08]."""
    p: dict[str, np.ndarray] = {}
    for lang in config.languages:
        p[f"embed.{lang}"] = _uniform(rng, (config.vocab_sizes[lang], config.d_w), EMBED_INIT_RANGE, dtype)
        p[f"proj.{lang}.weight"] = _uniform(rng, (config.d_w, config.d_u), 1 / np.sqrt(config.d_w), dtype)
        p[f"proj.{lang}.bias"] = np.zeros(config.d_u, dtype)
    prefixes = [f"encoder.{l}." for l in config.languages] if config.parallel else ["encoder."]
    for pre in prefixes:
        scale = 1 / np.sqrt(config.d_h)
        p[pre + "lstm.w_x"] = _uniform(rng, (config.d_u, 4 * config.d_h), scale, dtype)
        p[pre + "lstm.w_h"] = _uniform(rng, (config.d_h, 4 * config.d_h), scale, dtype)
        p[pre + "lstm.bias"] = np.zeros(4 * config.d_h, dtype)
        p[pre + "out.weight"] = _uniform(rng, (config.d_h, config.d_m), 1 / np.sqrt(config.d_h), dtype)
        p[pre + "out.bias"] = np.zeros(config.d_m, dtype)
    p["image.fc1.weight"] = _uniform(rng, (config.d_img, config.d_img), 1 / np.sqrt(config.d_img), dtype)
    p["image.bn1.gamma"] = np.ones(config.d_img, dtype)
    p["image.bn1.beta"] = np.zeros(config.d_img, dtype)
    p["image.fc2.weight"] = _uniform(rng, (config.d_img, config.d_m), 1 / np.sqrt(config.d_img), dtype)
    p["image.bn2.gamma"] = np.ones(config.d_m, dtype)
    p["image.bn2.beta"] = np.zeros(config.d_m, dtype)
    n_lang = len(config.languages)
    p["classifier.weight"] = _uniform(rng, (config.d_u, n_lang), 1 / np.sqrt(config.d_u), dtype)
    p["classifier.bias"] = np.zeros(n_lang, dtype)

    params = {n: ad.parameter(v, name=n, dtype=dtype) for n, v in p.items()}
    buffers = {
        "image.bn1": {"mean": np.zeros(config.d_img, dtype), "var": np.ones(config.d_img, dtype)},
        "image.bn2": {"mean": np.zeros(config.d_m, dtype), "var": np.ones(config.d_m, dtype)},
    }
    embed_init = {l: params[f"embed.{l}"].value.copy() for l in config.languages}
    return ModelParams(config, params, buffers, embed_init)


# ---------------------------------------------------------------- sentences


def _check_sentence(s: SentenceTokens, params: ModelParams):
    if len(s.tokens) == 0:
        raise EmptyInputError("empty sentence")
    size = params.config.vocab_sizes.get(s.language)
    if size is None:
        raise ConfigError(f"unknown language {s.language!r}")
    if max(s.tokens) >= size or min(s.tokens) < 0:
        raise ShapeError(f"token index out of range for {s.language} vocabulary of {size}")


def embed_universal(s: SentenceTokens, params: ModelParams) -> Node:
    """Token features in the universal space, one row per token."""
    _check_sentence(s, params)
    lang = s.language
    words = ad.rows(params[f"embed.{lang}"], s.tokens)
    return ad.matmul(words, params[f"proj.{lang}.weight"]) + params[f"proj.{lang}.bias"]


def mule_sentence(s: SentenceTokens, params: ModelParams) -> Node:
    x = embed_universal(s, params)
    return ad.mean_pool(x, len(s.tokens))


def _lstm(params: ModelParams, prefix: str) -> dict:
    return {k: params[prefix + "lstm." + k] for k in ("w_x", "w_h", "bias")}


def multimodal_sentence(s: SentenceTokens, params: ModelParams) -> Node:
    """Last LSTM hidden state over the universal token rows, then an affine map."""
    x = embed_universal(s, params)
    prefix = params.encoder_prefix(s.language)
    cell = _lstm(params, prefix)
    zeros = np.zeros(params.config.d_h, dtype=params.dtype)
    h, c = ad.constant(zeros), ad.constant(zeros)
    for t in range(len(s.tokens)):
        h, c = ad.lstm_step(x[t], h, c, cell)
    return ad.matmul(h, params[prefix + "out.weight"]) + params[prefix + "out.bias"]


def _run_encoder(x: Node, lengths: np.ndarray, params: ModelParams, prefix: str) -> Node:
    n, t_max, _ = x.shape
    cell = _lstm(params, prefix)
    zeros = np.zeros((n, params.config.d_h), dtype=params.dtype)
    h, c = ad.constant(zeros), ad.constant(zeros)
    for t in range(t_max):
        h_new, c_new = ad.lstm_step(x[:, t, :], h, c, cell)
        active = lengths > t
        if active.all():
            h, c = h_new, c_new
        else:
            m = ad.constant(active.astype(params.dtype)[:, None])
            h = h + (h_new - h) * m
            c = c + (c_new - c) * m
    return ad.matmul(h, params[prefix + "out.weight"]) + params[prefix + "out.bias"]


def encode_sentences(sentences: Sequence[SentenceTokens], params: ModelParams, need_s=True):
    """Batched ``(u, s)`` for a list of sentences, rows in input order.

    ``s`` is None when ``need_s`` is false.
    """
    if not sentences:
        raise EmptyInputError("no sentences to encode")
    for s in sentences:
        _check_sentence(s, params)
    t_max = max(len(s.tokens) for s in sentences)
    order, blocks, block_lengths, block_langs = [], [], [], []
    for lang in params.config.languages:
        members = [i for i, s in enumerate(sentences) if s.language == lang]
        if not members:
            continue
        tok = np.zeros((len(members), t_max), dtype=np.intp)
        lengths = np.empty(len(members), dtype=np.intp)
        for r, i in enumerate(members):
            toks = sentences[i].tokens
            tok[r, : len(toks)] = toks
            lengths[r] = len(toks)
        words = ad.rows(params[f"embed.{lang}"], tok.reshape(-1))
        proj = ad.matmul(words, params[f"proj.{lang}.weight"]) + params[f"proj.{lang}.bias"]
        blocks.append(ad.reshape(proj, (len(members), t_max, params.config.d_u)))
        block_lengths.append(lengths)
        block_langs.append(lang)
        order.extend(members)
    x = blocks[0] if len(blocks) == 1 else ad.concat(blocks, axis=0)
    lengths = np.concatenate(block_lengths)
    inverse = np.empty(len(order), dtype=np.intp)
    inverse[np.asarray(order)] = np.arange(len(order))

    u = ad.rows(ad.mean_pool(x, lengths), inverse)
    if not need_s:
        return u, None
    if params.config.parallel:
        outs, start = [], 0
        for lang, blk_len in zip(block_langs, block_lengths):
            stop = start + len(blk_len)
            outs.append(_run_encoder(x[start:stop], blk_len, params, params.encoder_prefix(lang)))
            start = stop
        s = outs[0] if len(outs) == 1 else ad.concat(outs, axis=0)
    else:
        s = _run_encoder(x, lengths, params, "encoder.")
    return u, ad.rows(s, inverse)


# ---------------------------------------------------------------- images


def embed_images(features, params: ModelParams, training: bool) -> Node:
    """Image branch on a ``[B, d_img]`` block of frozen features."""
    feats = np.asarray(features)
    if feats.ndim != 2 or feats.shape[1] != params.config.d_img:
        raise ShapeError(f"image features must be [B, {params.config.d_img}], got {feats.shape}")
    x = ad.constant(feats.astype(params.dtype))
    # No bias before batch norm: beta absorbs any shift, and a bias there would
    # carry an identically zero gradient in training mode.
    h = ad.matmul(x, params["image.fc1.weight"])
    h = ad.batch_norm(h, params["image.bn1.gamma"], params["image.bn1.beta"], training, params.buffers["image.bn1"])
    h = ad.relu(h)
    h = ad.matmul(h, params["image.fc2.weight"])
    return ad.batch_norm(h, params["image.bn2.gamma"], params["image.bn2.beta"], training, params.buffers["image.bn2"])


def embed_image(feature, params: ModelParams, training: bool = False) -> Node:
    """Single-image convenience wrapper; training mode needs a batch."""
    feat = np.asarray(feature)
    if feat.ndim != 1:
        raise ShapeError("embed_image expects one feature vector")
    return embed_images(feat[None, :], params, training)[0]


# ---------------------------------------------------------------- classifier


def classify_language(u: Node, params: ModelParams, reverse: bool) -> Node:
    """Language logits from universal features; ``reverse`` inserts gradient reversal."""
    if reverse:
        u = ad.gradient_reversal(u)
    return ad.matmul(u, params["classifier.weight"]) + params["classifier.bias"]


def language_labels(sentences: Sequence[SentenceTokens], config: ModelConfig) -> np.ndarray:
    return np.array([config.language_index(s.language) for s in sentences], dtype=np.intp)


# ---------------------------------------------------------------- embedding files

EMBED_MAGIC = b"MULE"
EMBED_VERSION = 1


def write_embedding_file(path, tokens: Sequence[str], matrix: np.ndarray):
    matrix = np.asarray(matrix, dtype="<f4")
    if matrix.shape[0] != len(tokens):
        raise ShapeError("one embedding row per token required")
    with open(path, "wb") as fh:
        fh.write(EMBED_MAGIC)
        fh.write(struct.pack("<III", EMBED_VERSION, len(tokens), matrix.shape[1]))
        for tok in tokens:
            raw = tok.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        fh.write(matrix.tobytes(order="C"))


def read_embedding_file(path) -> tuple[list[str], np.ndarray]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != EMBED_MAGIC:
        raise ParseError("bad magic, expected MULE", path)
    if len(data) < 16:
        raise ParseError("truncated header", path)
    version, count, dim = struct.unpack_from("<III", data, 4)
    if version != EMBED_VERSION:
        raise ParseError(f"unsupported version {version}", path)
    pos, tokens = 16, []
    for _ in range(count):
        if pos + 4 > len(data):
            raise ParseError("truncated token table", path)
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        tokens.append(data[pos : pos + n].decode("utf-8"))
        pos += n
    expected = count * dim * 4
    if len(data) - pos != expected:
        raise ParseError(f"expected {expected} bytes of floats, found {len(data) - pos}", path)
    matrix = np.frombuffer(data, dtype="<f4", count=count * dim, offset=pos).reshape(count, dim)
    return tokens, matrix.astype(np.float32)


def load_pretrained(params: ModelParams, language: str, vocab: Vocabulary, path) -> int:
    """Fill rows of a word table from an embedding file; returns rows filled.

    The initial-value snapshot used by the L2 anchor is updated too.
    """
    tokens, matrix = read_embedding_file(path)
    table = params[f"embed.{language}"]
    if matrix.shape[1] != table.shape[1]:
        raise ShapeError(f"embedding dim {matrix.shape[1]} != model d_w {table.shape[1]}")
    filled = 0
    for tok, row in zip(tokens, matrix):
        idx = vocab.lookup(tok)
        if idx:
            table.value[idx] = row
            filled += 1
    params.embed_init[language] = table.value.copy()
    return filled


def language_branch_size(config: ModelConfig) -> dict:
    """Parameter counts split into language-specific and shared parts."""
    per_lang = {l: config.vocab_sizes[l] * config.d_w + config.d_w * config.d_u + config.d_u for l in config.languages}
    encoder = config.d_u * 4 * config.d_h + config.d_h * 4 * config.d_h + 4 * config.d_h + config.d_h * config.d_m + config.d_m
    return {"per_language": per_lang, "encoder": encoder * (len(config.languages) if config.parallel else 1)}


def with_dims(config: ModelConfig, **dims) -> ModelConfig:
    return replace(config, **dims)
