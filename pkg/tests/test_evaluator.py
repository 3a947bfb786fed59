import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recall_fixtures import REFERENCE_ROWS, within_tolerance

from mule.data.synthetic import gen_synthetic
from mule.errors import ConfigError, DegenerateInputError
from mule.evaluator import (
    REPORT_COLUMNS,
    chance_i2s,
    chance_level,
    distance_matrix,
    evaluate,
    mean_recall,
    probe_accuracy,
    probe_language_classifier,
    read_report,
    recall_at_k,
    round_half_up,
    write_report,
)
from mule.model import init_params
from mule.trainer import model_config_for


def oracle_recall(D, gt, direction, k):
    """Fully sort every query's gallery (distance, then index) and look at the first k."""
    Q = D if direction == "i2s" else D.T
    hits = 0
    for q, targets in gt.items():
        ranking = sorted(range(Q.shape[1]), key=lambda j: (Q[q, j], j))
        hits += any(j in targets for j in ranking[:k])
    return 100.0 * hits / len(gt)


def random_gallery(rng, n_img, per_img, ties=False):
    n_sent = n_img * per_img
    D = rng.uniform(size=(n_img, n_sent))
    if ties:
        D = np.round(D, 1)
    owner = np.repeat(np.arange(n_img), per_img)
    i2s = {i: list(np.flatnonzero(owner == i)) for i in range(n_img)}
    s2i = {j: [int(owner[j])] for j in range(n_sent)}
    return D, i2s, s2i


# ---------------------------------------------------------------- mean recall


@pytest.mark.parametrize("label,values,printed", REFERENCE_ROWS, ids=[r[0] for r in REFERENCE_ROWS])
def test_mean_recall_matches_reference_rows(label, values, printed):
    assert within_tolerance(mean_recall(values), printed)


def test_mean_recall_all_hundred():
    assert mean_recall([100.0] * 6) == 100.0


def test_mean_recall_needs_six():
    with pytest.raises(ConfigError):
        mean_recall([1, 2, 3])


def test_round_half_up_display():
    assert mean_recall((52.3, 79.8, 87.8, 38.4, 69.5, 79.9)) == pytest.approx(67.95)
    assert round_half_up(67.95) == 68.0
    assert round_half_up(61.65) == 61.7
    assert round_half_up(2.25) == 2.3
    assert round_half_up(-0.04) == -0.0


# ---------------------------------------------------------------- distance matrix


def test_distance_matches_pairwise_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(7, 3))
    D = distance_matrix(a, b)
    for i in range(5):
        for j in range(7):
            assert D[i, j] == pytest.approx(1 - a[i] @ b[j] / (np.linalg.norm(a[i]) * np.linalg.norm(b[j])), abs=1e-12)


def test_distance_zero_diagonal_and_scale_invariance():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 3))
    np.testing.assert_allclose(np.diag(distance_matrix(a, a)), 0, atol=1e-12)
    scaled = a * np.array([[2.0], [0.1], [7.0], [1.0]])
    np.testing.assert_allclose(distance_matrix(scaled, a), distance_matrix(a, a), atol=1e-12)


def test_distance_zero_vector():
    with pytest.raises(DegenerateInputError):
        distance_matrix(np.zeros((1, 3)), np.ones((2, 3)))


# ---------------------------------------------------------------- recall@k


def test_recall_perfect_embeddings():
    D = np.ones((3, 3)) - np.eye(3)
    assert recall_at_k(D, {i: [i] for i in range(3)}, "i2s", 1) == 100.0


def test_recall_full_gallery_is_hundred():
    D, i2s, s2i = random_gallery(np.random.default_rng(2), 4, 2)
    assert recall_at_k(D, i2s, "i2s", 8) == 100.0
    assert recall_at_k(D, s2i, "s2i", 4) == 100.0


def test_recall_k_too_large():
    D, i2s, _ = random_gallery(np.random.default_rng(2), 3, 2)
    with pytest.raises(ConfigError):
        recall_at_k(D, i2s, "i2s", 7)


def test_recall_three_images_six_sentences_fixture():
    D = np.array([
        [0.1, 0.5, 0.3, 0.9, 0.2, 0.8],
        [0.4, 0.4, 0.6, 0.2, 0.7, 0.1],
        [0.3, 0.2, 0.5, 0.5, 0.6, 0.4],
    ])
    i2s = {0: [0, 1], 1: [2, 3], 2: [4, 5]}
    s2i = {j: [j // 2] for j in range(6)}
    # image 0 ranks sentence 0 first; image 1 ranks 5 then 3; image 2 ranks 1, 0, then 5
    assert recall_at_k(D, i2s, "i2s", 1) == pytest.approx(100 / 3)
    assert recall_at_k(D, i2s, "i2s", 2) == pytest.approx(200 / 3)
    for k in (1, 2, 3):
        assert recall_at_k(D, s2i, "s2i", k) == pytest.approx(oracle_recall(D, s2i, "s2i", k))
        assert recall_at_k(D, i2s, "i2s", k) == pytest.approx(oracle_recall(D, i2s, "i2s", k))


def test_recall_tie_goes_to_lower_index():
    D = np.array([[0.5, 0.5]])
    assert recall_at_k(D, {0: [0]}, "i2s", 1) == 100.0
    assert recall_at_k(D, {0: [1]}, "i2s", 1) == 0.0


def test_recall_matches_exhaustive_ranking_on_50_galleries():
    rng = np.random.default_rng(3)
    for n in range(50):
        D, i2s, s2i = random_gallery(rng, int(rng.integers(2, 9)), int(rng.integers(1, 4)), ties=n % 2 == 0)
        for direction, gt, size in (("i2s", i2s, D.shape[1]), ("s2i", s2i, D.shape[0])):
            for k in range(1, size + 1):
                assert recall_at_k(D, gt, direction, k) == pytest.approx(oracle_recall(D, gt, direction, k))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_recall_monotone_in_k(seed):
    D, i2s, s2i = random_gallery(np.random.default_rng(seed), 5, 2, ties=True)
    vals = [recall_at_k(D, i2s, "i2s", k) for k in range(1, 11)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    assert all(0 <= v <= 100 for v in vals)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_recall_invariant_to_gallery_relabeling(seed):
    rng = np.random.default_rng(seed)
    D, i2s, s2i = random_gallery(rng, 5, 2)  # continuous distances: no ties
    perm = rng.permutation(D.shape[1])
    inv = np.argsort(perm)
    D2 = D[:, perm]
    i2s2 = {i: [int(inv[j]) for j in t] for i, t in i2s.items()}
    for k in (1, 3, 5):
        assert recall_at_k(D2, i2s2, "i2s", k) == recall_at_k(D, i2s, "i2s", k)


# ---------------------------------------------------------------- chance level


def test_chance_i2s_closed_form_vs_monte_carlo():
    rng = np.random.default_rng(4)
    n, g, k = 20, 2, 5
    hits = np.mean([bool(set(rng.permutation(n)[:k]) & {0, 1}) for _ in range(20000)])
    assert chance_i2s(n, g, k) == pytest.approx(1 - math.comb(18, 5) / math.comb(20, 5))
    assert abs(hits - chance_i2s(n, g, k)) < 0.015


def test_untrained_model_near_chance():
    c = gen_synthetic(100, ("en", "de"), seed=5, sentences_per_lang=2, img_dim=8)
    p = init_params(model_config_for(c, d_w=8, d_u=8, d_h=8, d_m=8), np.random.default_rng(0))
    report = evaluate(c, p)
    for lang in ("en", "de"):
        row = report.rows[lang]
        n_img, n_sent = row.n_images, row.n_sentences
        for k, r in zip((1, 5, 10), row.i2s):
            p_hit = chance_i2s(n_sent, 2, k)
            band = 4 * 100 * math.sqrt(p_hit * (1 - p_hit) / n_img)
            assert abs(r - 100 * p_hit) <= band + 1e-9
        for k, r in zip((1, 5, 10), row.s2i):
            p_hit = k / n_img
            band = 4 * 100 * math.sqrt(p_hit * (1 - p_hit) / n_sent)
            assert abs(r - 100 * p_hit) <= band + 1e-9
        assert chance_level(c, lang) < 10


# ---------------------------------------------------------------- reports


def test_report_invariants_and_tsv(tmp_path):
    c = gen_synthetic(30, ("en", "de"), seed=6, img_dim=8)
    p = init_params(model_config_for(c, d_w=8, d_u=8, d_h=8, d_m=8), np.random.default_rng(0))
    before = {n: v.value.tobytes() for n, v in p.params.items()}
    report = evaluate(c, p)
    assert {n: v.value.tobytes() for n, v in p.params.items()} == before
    for row in report.rows.values():
        assert row.i2s[0] <= row.i2s[1] <= row.i2s[2]
        assert row.s2i[0] <= row.s2i[1] <= row.s2i[2]
        assert row.mr == pytest.approx(mean_recall(row.values))
    write_report(report, tmp_path / "r.tsv")
    assert (tmp_path / "r.tsv").read_text().splitlines()[0].split("\t") == list(REPORT_COLUMNS)
    table = read_report(tmp_path / "r.tsv")
    for lang, row in report.rows.items():
        assert table[lang]["mR"] == round_half_up(row.mr)
    again = evaluate(c, p)
    assert again.to_tsv() == report.to_tsv()


# ---------------------------------------------------------------- probe


def test_probe_separable_features():
    x = np.repeat(np.eye(3), 20, axis=0) + np.random.default_rng(0).normal(scale=0.01, size=(60, 3))
    y = np.repeat(np.arange(3), 20)
    assert probe_accuracy(x, y, 3) == 100.0


def test_probe_identical_features_near_chance():
    x = np.ones((200, 4))
    y = np.tile([0, 1], 100)
    assert abs(probe_accuracy(x, y, 2) - 50.0) <= 10


def test_probe_needs_two_languages():
    c = gen_synthetic(6, ("en", "de"), seed=0, img_dim=4)
    p = init_params(model_config_for(c, d_w=4, d_u=4, d_h=4, d_m=4), np.random.default_rng(0))
    with pytest.raises(DegenerateInputError):
        probe_language_classifier(p, [s for _, s in c.sentences("en")])
