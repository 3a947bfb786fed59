"""Triplet objectives with hard-negative mining and the adversarial classifier loss.

Every triplet term enumerates all (anchor, positive, negative) triples in the
batch, keeps at most ``top_k`` with positive loss (largest first, ties broken
by ids) and averages them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import ConfigError
from .model import ModelParams, classify_language, embed_images, encode_sentences, language_labels

LAYERS = ("u", "s")


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.05
    lambda1: float = 1.0
    lambda2: float = 1e-6
    lambda3: float = 1.0
    top_k: int = 10

    def __post_init__(self):
        if self.margin <= 0:
            raise ConfigError("margin must be positive")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.top_k < 1:
            raise ConfigError("top_k must be at least 1")


@dataclass(frozen=True)
class TripletCandidate:
    anchor: int
    positive: int
    negative: int
    loss: float


def triplet_loss(d_pos, d_neg, margin: float) -> Node:
    """``max(0, d_pos - d_neg + margin)``."""
    d_pos, d_neg = ad._pair(d_pos, d_neg)
    return ad.relu(d_pos - d_neg + margin)


def mine_top_k(candidates: Sequence[TripletCandidate], k: int) -> list[TripletCandidate]:
    """Positive-loss candidates, hardest first, at most ``k`` of them."""
    if k < 1:
        raise ConfigError("k must be at least 1")
    live = [c for c in candidates if c.loss > 0]
    live.sort(key=lambda c: (-c.loss, c.anchor, c.positive, c.negative))
    return live[:k]


def _hardest_negatives(dist: np.ndarray, valid: np.ndarray, k: int) -> np.ndarray:
    """Per row, indices of the ``k`` smallest valid distances (ties: lower index).

    Invalid slots come back as -1.
    """
    masked = np.where(valid, dist, np.inf)
    k = min(k, dist.shape[1])
    idx = np.argsort(masked, axis=1, kind="stable")[:, :k]
    ok = np.take_along_axis(valid, idx, axis=1)
    return np.where(ok, idx, -1)


def mine_triplets(dist: np.ndarray, pos_a: np.ndarray, pos_p: np.ndarray, neg_valid: np.ndarray,
                  k: int, margin: float, pos_group=None, gallery_group=None):
    """Vectorized enumerate/sort/truncate over a distance matrix.

    ``dist[a, j]`` is the anchor-to-gallery distance, ``(pos_a, pos_p)`` lists
    positive pairs and ``neg_valid[a, j]`` says whether ``j`` may serve as a
    negative for anchor ``a``. With groups, a negative must also share the
    positive's group (e.g. its language).

    Only the ``k`` hardest negatives per (anchor, group) can reach the global
    top ``k``, so the candidate set is restricted to those before sorting.
    Returns ``(a, p, n, loss)`` arrays in selection order.
    """
    empty = np.zeros(0, dtype=np.intp)
    if len(pos_a) == 0:
        return empty, empty, empty, np.zeros(0)
    pos_a = np.asarray(pos_a, dtype=np.intp)
    pos_p = np.asarray(pos_p, dtype=np.intp)
    if pos_group is None:
        hard = _hardest_negatives(dist, neg_valid, k)
        cand = hard[pos_a]
    else:
        pos_group = np.asarray(pos_group)
        cand = np.full((len(pos_a), min(k, dist.shape[1])), -1, dtype=np.intp)
        for g in np.unique(pos_group):
            hard = _hardest_negatives(dist, neg_valid & (gallery_group[None, :] == g), k)
            sel = pos_group == g
            cand[sel] = hard[pos_a[sel]]
    a = np.repeat(pos_a, cand.shape[1])
    p = np.repeat(pos_p, cand.shape[1])
    n = cand.reshape(-1)
    keep = n >= 0
    a, p, n = a[keep], p[keep], n[keep]
    loss = dist[a, p] - dist[a, n] + margin
    live = loss > 0
    a, p, n, loss = a[live], p[live], n[live], loss[live]
    order = np.lexsort((n, p, a, -loss))[:k]
    return a[order], p[order], n[order], loss[order]


def _mined_term(dist: Node, a, p, n, margin: float) -> Node | None:
    # the gradient depends on the selected set, not on its loss ordering
    chosen = np.stack([a, p, n]) if len(a) else np.zeros((3, 0), dtype=np.intp)
    ad.note_decision(chosen[:, np.lexsort(chosen[::-1])])
    if len(a) == 0:
        return None
    losses = triplet_loss(dist[(a, p)], dist[(a, n)], margin)
    return ad.mean(losses)


def _zero(like: Node) -> Node:
    return ad.constant(np.zeros((), dtype=like.dtype))


def _sum_terms(terms, like):
    terms = [t for t in terms if t is not None]
    if not terms:
        return _zero(like)
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def neighborhood_loss(u: Node | None, s: Node | None, sentence_image, cfg: LossConfig,
                      layers: Sequence[str] = LAYERS) -> Node:
    """Same-image sentences (any language) pulled together at each layer.

    Anchor and positive are distinct sentences of one image; any sentence of
    another image is a negative. Each layer is mined separately and the mined
    averages are summed.
    """
    img = np.asarray(sentence_image)
    same = img[:, None] == img[None, :]
    pos_a, pos_p = np.nonzero(same & ~np.eye(len(img), dtype=bool))
    feats = {"u": u, "s": s}
    terms = []
    like = u if u is not None else s
    for layer in layers:
        x = feats[layer]
        if x is None:
            raise ConfigError(f"layer {layer!r} requested but not provided")
        if len(pos_a) == 0:
            ad.note_decision(np.zeros((3, 0), dtype=np.intp))
            continue
        dist = ad.cosine_distance_matrix(x, x)
        a, p, n, _ = mine_triplets(dist.value, pos_a, pos_p, ~same, cfg.top_k, cfg.margin)
        terms.append(_mined_term(dist, a, p, n, cfg.margin))
    return _sum_terms(terms, like)


def matching_loss(f: Node, s: Node, sentence_image, sentence_lang, cfg: LossConfig) -> Node:
    """Bidirectional image-sentence ranking loss.

    Image anchors take negative sentences in the positive's language;
    sentence anchors take any other image as negative.
    """
    img = np.asarray(sentence_image)
    lang = np.asarray(sentence_lang)
    n_img = f.shape[0]
    if n_img < 2:
        return _zero(f)
    dist = ad.cosine_distance_matrix(f, s)
    owns = np.arange(n_img)[:, None] == img[None, :]
    # image -> sentence
    pos_a, pos_p = np.nonzero(owns)
    a, p, n, _ = mine_triplets(dist.value, pos_a, pos_p, ~owns, cfg.top_k, cfg.margin,
                               pos_group=lang[pos_p], gallery_group=lang)
    i2s = _mined_term(dist, a, p, n, cfg.margin)
    # sentence -> image
    dist_t = ad.transpose(dist)
    pos_a = np.arange(len(img))
    a, p, n, _ = mine_triplets(dist_t.value, pos_a, img, ~owns.T, cfg.top_k, cfg.margin)
    s2i = _mined_term(dist_t, a, p, n, cfg.margin)
    return _sum_terms([i2s, s2i], f)


def lc_loss(u: Node, labels, params: ModelParams, reverse: bool) -> Node:
    """Mean cross-entropy of the language classifier over sentences."""
    return ad.softmax_cross_entropy(classify_language(u, params, reverse), labels)


@dataclass
class Objective:
    """Losses for one batch.

    ``theta_loss`` is backpropagated for the shared/language parameters; its
    classifier term runs through gradient reversal, so its gradient is that
    of ``theta_value`` = lambda1*NC + lambda3*match - lambda2*LC.
    ``wlc_loss`` only reaches the classifier.
    """

    theta_loss: Node
    wlc_loss: Node
    neighborhood: Node
    matching: Node
    lc: Node
    cfg: LossConfig

    @property
    def theta_value(self) -> float:
        c = self.cfg
        return (c.lambda1 * float(self.neighborhood.value) + c.lambda3 * float(self.matching.value)
                - c.lambda2 * float(self.lc.value))

    def terms(self) -> dict[str, float]:
        return {
            "nc": float(self.neighborhood.value),
            "match": float(self.matching.value),
            "lc": float(self.lc.value),
            "theta": self.theta_value,
            "wlc": float(self.wlc_loss.value),
        }


def _adversarial_pair(u: Node, labels, params: ModelParams, lambda2: float):
    lc_rev = lc_loss(u, labels, params, reverse=True)
    lc_plain = lc_loss(ad.detach(u), labels, params, reverse=False)
    return lc_rev, lc_plain


def total_objective(batch, params: ModelParams, cfg: LossConfig, nc_layers: Sequence[str] = LAYERS,
                    training: bool = True) -> Objective:
    """Full fine-tuning objective on a minibatch."""
    u, s = encode_sentences(batch.sentences, params)
    f = embed_images(batch.features, params, training)
    labels = language_labels(batch.sentences, params.config)
    nc = neighborhood_loss(u, s, batch.sentence_image, cfg, nc_layers)
    match = matching_loss(f, s, batch.sentence_image, labels, cfg)
    lc_rev, lc_plain = _adversarial_pair(u, labels, params, cfg.lambda2)
    theta = cfg.lambda1 * nc + cfg.lambda3 * match + cfg.lambda2 * lc_rev
    return Objective(theta, cfg.lambda2 * lc_plain, nc, match, lc_plain, cfg)


def pretrain_objective(batch, params: ModelParams, cfg: LossConfig) -> Objective:
    """Universal-layer neighborhood term plus the adversarial classifier only."""
    u, _ = encode_sentences(batch.sentences, params, need_s=False)
    labels = language_labels(batch.sentences, params.config)
    nc = neighborhood_loss(u, None, batch.sentence_image, cfg, ("u",))
    lc_rev, lc_plain = _adversarial_pair(u, labels, params, cfg.lambda2)
    theta = cfg.lambda1 * nc + cfg.lambda2 * lc_rev
    return Objective(theta, cfg.lambda2 * lc_plain, nc, _zero(u), lc_plain, cfg)
