import numpy as np
import pytest

from mule import autodiff as ad
from mule.errors import EmptyInputError, ParseError, ShapeError
from mule.language import SentenceTokens, Vocabulary
from mule.losses import lc_loss
from mule.model import (
    ModelConfig,
    classify_language,
    embed_image,
    embed_images,
    embed_universal,
    encode_sentences,
    init_params,
    language_branch_size,
    language_labels,
    load_pretrained,
    mule_sentence,
    multimodal_sentence,
    read_embedding_file,
    write_embedding_file,
)

VOCAB = {"en": 7, "de": 9}


def make(languages=("en", "de"), seed=0, dtype=np.float64, **dims):
    d = dict(d_w=4, d_u=5, d_h=3, d_m=4, d_img=6)
    d.update(dims)
    cfg = ModelConfig(languages, {l: VOCAB.get(l, 7) for l in languages}, **d)
    return init_params(cfg, np.random.default_rng(seed), dtype=dtype)


def sent(lang, *tokens):
    return SentenceTokens(lang, tuple(tokens))


def test_universal_single_token_shape():
    assert embed_universal(sent("en", 3), make()).shape == (1, 5)


def test_universal_repeated_token_rows_equal():
    out = embed_universal(sent("en", 2, 2), make()).value
    np.testing.assert_array_equal(out[0], out[1])


def test_universal_identity_projection_returns_embeddings():
    p = make(d_w=5, d_u=5)
    p["proj.en.weight"].value[:] = np.eye(5)
    out = embed_universal(sent("en", 1, 4), p).value
    np.testing.assert_array_equal(out, p["embed.en"].value[[1, 4]])


def test_universal_empty_sentence():
    with pytest.raises(EmptyInputError):
        embed_universal(sent("en"), make())


def test_token_out_of_range():
    with pytest.raises(ShapeError):
        embed_universal(sent("en", 7), make())


def test_mule_single_token_is_token_feature():
    p = make()
    np.testing.assert_allclose(mule_sentence(sent("de", 5), p).value, embed_universal(sent("de", 5), p).value[0])


def test_mule_sentence_hand_average():
    p = make()
    toks = (1, 3, 6)
    rows = p["embed.en"].value[list(toks)] @ p["proj.en.weight"].value + p["proj.en.bias"].value
    np.testing.assert_allclose(mule_sentence(sent("en", *toks), p).value, rows.mean(axis=0), rtol=1e-12)


def test_mule_sentence_permutation_invariant():
    p = make()
    rng = np.random.default_rng(3)
    for _ in range(20):
        toks = rng.integers(7, size=rng.integers(1, 6))
        a = mule_sentence(sent("en", *toks), p).value
        b = mule_sentence(sent("en", *rng.permutation(toks)), p).value
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_multimodal_length_one_is_one_lstm_step():
    p = make()
    x = embed_universal(sent("en", 2), p)[0]
    zeros = ad.constant(np.zeros(3))
    cell = {k: p["encoder.lstm." + k] for k in ("w_x", "w_h", "bias")}
    h, _ = ad.lstm_step(x, zeros, zeros, cell)
    expected = h.value @ p["encoder.out.weight"].value + p["encoder.out.bias"].value
    np.testing.assert_allclose(multimodal_sentence(sent("en", 2), p).value, expected)


def test_multimodal_zero_weights_gives_zero():
    p = make()
    for name in ("lstm.w_x", "lstm.w_h", "lstm.bias", "out.weight", "out.bias"):
        p["encoder." + name].value[:] = 0
    np.testing.assert_array_equal(multimodal_sentence(sent("en", 1, 2, 3), p).value, 0)


def test_multimodal_order_sensitive():
    p = make(seed=4)
    a = multimodal_sentence(sent("en", 1, 5), p).value
    b = multimodal_sentence(sent("en", 5, 1), p).value
    assert np.abs(a - b).max() > 1e-6


def test_batched_encoder_matches_single_sentence_path():
    p = make(seed=2)
    sentences = [sent("en", 1, 2, 3), sent("de", 4), sent("en", 6), sent("de", 2, 8)]
    u, s = encode_sentences(sentences, p)
    for i, x in enumerate(sentences):
        np.testing.assert_allclose(u.value[i], mule_sentence(x, p).value, atol=1e-12)
        np.testing.assert_allclose(s.value[i], multimodal_sentence(x, p).value, atol=1e-12)


def test_parallel_encoders_are_per_language():
    p = make(seed=2)
    cfg = ModelConfig(("en", "de"), VOCAB, d_w=4, d_u=5, d_h=3, d_m=4, d_img=6, parallel=True)
    q = init_params(cfg, np.random.default_rng(0), np.float64)
    assert "encoder.en.lstm.w_x" in q and "encoder.de.lstm.w_x" in q and "encoder.lstm.w_x" not in q
    sentences = [sent("en", 1, 2), sent("de", 3)]
    _, s = encode_sentences(sentences, q)
    for i, x in enumerate(sentences):
        np.testing.assert_allclose(s.value[i], multimodal_sentence(x, q).value, atol=1e-12)
    assert p.count("encoder.") * 2 == q.count("encoder.")


def test_shared_tables_give_identical_u_across_languages():
    p = make(seed=1)
    p["embed.de"].value[:7] = p["embed.en"].value
    p["proj.de.weight"].value[:] = p["proj.en.weight"].value
    p["proj.de.bias"].value[:] = p["proj.en.bias"].value
    np.testing.assert_array_equal(mule_sentence(sent("en", 1, 3), p).value, mule_sentence(sent("de", 1, 3), p).value)


def test_image_eval_mode_deterministic():
    p = make()
    feat = np.random.default_rng(0).normal(size=6)
    np.testing.assert_array_equal(embed_image(feat, p).value, embed_image(feat, p).value)


def _leaves(node):
    seen, stack, out = set(), [node], []
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        if not n.parents:
            out.append(n)
        stack.extend(n.parents)
    return out


def test_image_features_receive_no_gradient():
    p = make()
    feats = np.random.default_rng(0).normal(size=(3, 6))
    out = embed_images(feats, p, training=True)
    inputs = [n for n in _leaves(out) if n.name is None and n.value.shape == feats.shape]
    assert len(inputs) == 1 and not inputs[0].requires_grad
    assert set(n.name for n in _leaves(out) if n.requires_grad) <= set(p.theta_names)


def test_image_dimension_mismatch():
    with pytest.raises(ShapeError):
        embed_image(np.zeros(5), make())


def test_image_branch_gradients_pass_grad_check():
    p = make(seed=3)
    feats = np.random.default_rng(1).normal(size=(4, 6))
    w = ad.constant(np.random.default_rng(2).normal(size=(4, 4)))
    names = ["image.fc1.weight", "image.fc2.weight", "image.bn1.gamma", "image.bn2.beta"]
    # scale invariance of batch norm: larger weights into it reduce finite-difference truncation
    p["image.fc1.weight"].value *= 10
    p["image.fc2.weight"].value *= 10
    report = ad.grad_check(lambda: ad.total(embed_images(feats, p, True) * w), [p[n] for n in names])
    assert report.passed, str(report)


def test_single_language_classifier_has_zero_loss():
    p = make(languages=("en",))
    u, _ = encode_sentences([sent("en", 1), sent("en", 2, 3)], p, need_s=False)
    assert lc_loss(u, [0, 0], p, reverse=False).value == 0


def test_reversal_gives_negated_projection_gradient():
    lam = 0.3
    sentences = [sent("en", 1, 2), sent("de", 3), sent("de", 4, 5, 6)]
    grads = {}
    for reverse in (False, True):
        p = make(seed=5)
        labels = language_labels(sentences, p.config)
        u, _ = encode_sentences(sentences, p, need_s=False)
        (lam * ad.softmax_cross_entropy(classify_language(u, p, reverse), labels)).backward()
        grads[reverse] = {n: p[n].grad.copy() for n in ("proj.en.weight", "proj.de.weight", "classifier.weight")}
    for n in ("proj.en.weight", "proj.de.weight"):
        np.testing.assert_allclose(grads[True][n], -grads[False][n], atol=1e-15)
    np.testing.assert_allclose(grads[True]["classifier.weight"], grads[False]["classifier.weight"])


def test_theta_and_classifier_partition():
    p = make()
    theta, clf = set(p.theta_names), set(p.classifier_names)
    assert theta.isdisjoint(clf) and theta | clf == set(p.params)
    assert clf == {"classifier.weight", "classifier.bias"}


def test_language_specific_parameters_grow_linearly():
    counts = {}
    for langs in (("en",), ("en", "de"), ("en", "de", "cs")):
        p = make(languages=langs)
        counts[len(langs)] = p
        per = language_branch_size(p.config)["per_language"]
        for l in langs:
            assert p.count(f"embed.{l}") + p.count(f"proj.{l}.") == per[l]
    shared = lambda p: p.count("encoder.") + p.count("image.")
    assert shared(counts[1]) == shared(counts[2]) == shared(counts[3])
    assert counts[3].count("classifier.") - counts[2].count("classifier.") == 5 + 1


def test_full_scale_projection_size():
    cfg = ModelConfig(("en",), {"en": 10})
    per = language_branch_size(cfg)["per_language"]["en"]
    assert per - 10 * 300 == 300 * 512 + 512


def test_embedding_file_round_trip(tmp_path):
    path = tmp_path / "e.bin"
    m = np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32)
    write_embedding_file(path, ["a", "bé", "c"], m)
    tokens, back = read_embedding_file(path)
    assert tokens == ["a", "bé", "c"]
    np.testing.assert_array_equal(back, m)
    raw = path.read_bytes()
    assert raw[:4] == b"MULE"
    assert int.from_bytes(raw[4:8], "little") == 1


def test_embedding_file_bad_magic(tmp_path):
    path = tmp_path / "e.bin"
    path.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ParseError):
        read_embedding_file(path)


def test_load_pretrained_fills_known_rows(tmp_path):
    p = make()
    vocab = Vocabulary(["x", "y"])
    path = tmp_path / "e.bin"
    write_embedding_file(path, ["y", "zzz"], np.full((2, 4), 0.5, np.float32))
    assert load_pretrained(p, "en", vocab, path) == 1
    np.testing.assert_array_equal(p["embed.en"].value[2], 0.5)
    np.testing.assert_array_equal(p.embed_init["en"], p["embed.en"].value)


def test_word_tables_initialized_in_range():
    p = make(d_w=50)
    assert np.abs(p["embed.en"].value).max() <= 0.08
