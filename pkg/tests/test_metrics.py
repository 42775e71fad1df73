import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fgl.domain import BinaryMask, ScoreMap
from fgl.errors import ContractError, ShapeError, UndefinedMetricError
from fgl.metrics import (
    evaluate_localization,
    image_accuracy,
    lcs_length,
    mean_pixel_auc,
    pixel_auc,
    pixel_f1,
    rouge,
    rouge_tokens,
)

from oracles import brute_auc, brute_lcs, brute_rouge


# -- AUC ------------------------------------------------------------------


def test_auc_worked_example():
    assert pixel_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert pixel_auc([0.9, 0.8, 0.7, 0.1], [1, 0, 1, 0]) == 0.75


def test_auc_extremes_and_ties():
    gt = np.array([[0, 1], [1, 0]])
    assert pixel_auc(gt.astype(float), gt) == 1.0
    assert pixel_auc(1.0 - gt, gt) == 0.0
    assert pixel_auc(np.full(4, 0.3), [0, 1, 1, 0]) == 0.5
    assert pixel_auc(ScoreMap(gt.astype(float)), BinaryMask(gt)) == 1.0


def test_auc_undefined_and_shape():
    with pytest.raises(UndefinedMetricError):
        pixel_auc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetricError):
        pixel_auc([0.1, 0.2], [0, 0])
    with pytest.raises(ShapeError):
        pixel_auc([0.1, 0.2], [0, 1, 1])


def test_auc_matches_brute_force(rng):
    for _ in range(200):
        n = int(rng.integers(2, 40))
        gt = rng.integers(0, 2, n)
        gt[0], gt[1] = 0, 1
        score = rng.integers(0, 6, n) / 5.0  # coarse grid forces ties
        assert math.isclose(pixel_auc(score, gt), brute_auc(score, gt), abs_tol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 64), min_size=4, max_size=30), st.integers(0, 2**31 - 1))
def test_auc_invariant_under_monotone_maps(scores, seed):
    gt = np.random.default_rng(seed).integers(0, 2, len(scores))
    gt[0], gt[1] = 0, 1
    s = np.array(scores) / 64.0  # dyadic grid keeps the maps injective in floating point
    a = pixel_auc(s, gt)
    assert 0.0 <= a <= 1.0
    assert math.isclose(pixel_auc(3 * s + 1, gt), a, abs_tol=1e-12)
    assert math.isclose(pixel_auc(s**3, gt), a, abs_tol=1e-12)
    assert math.isclose(pixel_auc(-s, gt), 1 - a, abs_tol=1e-12)


def test_mean_auc_skips_single_class():
    assert mean_pixel_auc([np.array([0.2, 0.9]), np.array([0.5, 0.5])], [np.array([0, 1]), np.array([1, 1])]) == 1.0
    assert math.isnan(mean_pixel_auc([np.array([0.5])], [np.array([1])]))


# -- F1 -------------------------------------------------------------------


def test_f1_cases():
    assert pixel_f1([0.9, 0.8, 0.1, 0.0], [1, 0, 0, 0]) == pytest.approx(2 / 3)
    assert round(pixel_f1([0.9, 0.8, 0.1, 0.0], [1, 0, 0, 0]), 3) == 0.667
    assert pixel_f1([0.9, 0.1], [1, 0]) == 1.0
    assert pixel_f1([0.1, 0.1], [0, 0]) == 1.0
    assert pixel_f1([0.9, 0.9], [0, 0]) == 0.0
    assert pixel_f1([0.5], [1]) == 1.0  # threshold is inclusive


def test_evaluate_localization_per_image_and_pooled():
    scores = [np.array([0.1, 0.9]), np.array([0.4, 0.4]), np.array([0.2, 0.7])]
    gts = [np.array([0, 1]), np.array([0, 0]), np.array([1, 0])]
    res = evaluate_localization(scores, gts, ids=["a", "b", "c"], pooled=True)
    assert res.skipped == 1
    assert [r["id"] for r in res.per_image] == ["a", "c"]
    assert res.mean_auc == 0.5 and res.mean_f1 == 0.5
    assert res.pooled_auc == pytest.approx(brute_auc([0.1, 0.9, 0.4, 0.4, 0.2, 0.7], [0, 1, 0, 0, 1, 0]))


# -- accuracy -------------------------------------------------------------


def test_accuracy_cases():
    assert image_accuracy(["forged", "authentic"], ["forged", "authentic"]) == 1.0
    assert image_accuracy(["forged", "forged", "forged", "authentic"], ["forged", "authentic", "forged", "forged"]) == 0.5
    with pytest.raises(ContractError):
        image_accuracy(["forged"], [])
    with pytest.raises(ContractError):
        image_accuracy([], [])


# -- ROUGE ----------------------------------------------------------------


def test_rouge_worked_example():
    r = rouge("the cat sat", "the cat lay down")
    assert r.rouge1.f1 == pytest.approx(4 / 7)
    assert r.rouge1.precision == pytest.approx(2 / 3) and r.rouge1.recall == pytest.approx(1 / 2)
    assert r.rouge2.f1 == pytest.approx(2 * (1 / 2) * (1 / 3) / (1 / 2 + 1 / 3))
    assert r.rougeL.f1 == pytest.approx(4 / 7)


def test_rouge_identity_and_tokenization():
    r = rouge("Yes, it's 100% forged.", "yes it s 100 forged")
    assert r.rouge1.f1 == r.rouge2.f1 == r.rougeL.f1 == 1.0
    assert rouge_tokens("A-B c") == ["a", "b", "c"]


def test_rouge_empty_raises():
    with pytest.raises(ContractError):
        rouge("", "the cat")
    with pytest.raises(ContractError):
        rouge("the cat", "!!!")


def test_rouge_matches_oracle(rng):
    vocab = ["a", "b", "c", "d", "e"]
    for _ in range(200):
        c = list(rng.choice(vocab, int(rng.integers(1, 9))))
        r = list(rng.choice(vocab, int(rng.integers(1, 9))))
        got = rouge(" ".join(c), " ".join(r))
        ref = brute_rouge(c, r)
        assert np.allclose([got.rouge1.f1, got.rouge2.f1, got.rougeL.f1], ref, atol=1e-12)
        assert lcs_length(c, r) == brute_lcs(c, r)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from("abcd"), min_size=1, max_size=10), st.lists(st.sampled_from("abcd"), min_size=1, max_size=10))
def test_rouge_bounds_and_symmetry(c, r):
    a, b = rouge(" ".join(c), " ".join(r)), rouge(" ".join(r), " ".join(c))
    for x, y in ((a.rouge1, b.rouge1), (a.rouge2, b.rouge2), (a.rougeL, b.rougeL)):
        assert 0.0 <= x.f1 <= 1.0
        assert math.isclose(x.f1, y.f1, abs_tol=1e-12)
        assert math.isclose(x.precision, y.recall, abs_tol=1e-12)
