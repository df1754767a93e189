from fractions import Fraction
from itertools import combinations, product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mangolab.errors import ContractError
from mangolab.metrics import (
    PairOutcome,
    Prediction,
    accuracy,
    consensus_score,
    consistency_quadrants,
    flips_decomposition,
    group_consensus,
    is_correct,
    link_pairs,
    main_sub_pairs,
    meta_average,
    ood_delta,
    polygon_score,
    quadrant_summary,
    relative_gap,
)

UNITER_B = [64.56, 54.54, 50.00, 56.80, 59.99, 8.47, 40.67, 46.93, 53.43, 72.70]
UNITER_B_FLIPS = [False] * 5 + [True, True] + [False] * 3


def preds_from(flags, groups=None):
    return [
        Prediction(i, "a", bool(c), group_id=None if groups is None else groups[i]) for i, c in enumerate(flags)
    ]


def enumerate_cs(outcome, k):
    subsets = list(combinations(range(len(outcome)), k))
    return Fraction(sum(all(outcome[i] for i in s) for s in subsets), len(subsets))


# ---------------------------------------------------------------- accuracy


def test_accuracy_examples():
    assert accuracy(preds_from([1, 1, 1])) == 100.0
    assert accuracy(preds_from([1, 1, 1, 0])) == 75.0
    with pytest.raises(ContractError):
        accuracy([])
    assert is_correct({"2": 0.3}, "2") and not is_correct({"2": 0.3}, "3")


def test_accuracy_matches_recount():
    rng = np.random.default_rng(0)
    for _ in range(200):
        flags = rng.random(int(rng.integers(1, 50))) < rng.random()
        count = 0
        for f in flags:
            count += 1 if f else 0
        assert accuracy(preds_from(flags)) == pytest.approx(100 * count / len(flags), abs=1e-12)


# ---------------------------------------------------------------- consensus


def test_consensus_examples():
    assert group_consensus(4, 3, 2) == 0.5
    assert group_consensus(4, 4, 3) == 1.0
    assert group_consensus(4, 1, 2) == 0.0
    with pytest.raises(ContractError):
        group_consensus(3, 4, 1)


def test_closed_form_equals_enumeration_for_small_groups():
    for n in range(1, 9):
        for outcome in product([False, True], repeat=n):
            c = sum(outcome)
            for k in range(1, n + 1):
                assert Fraction(group_consensus(n, c, k)).limit_denominator(10**6) == enumerate_cs(outcome, k)


def test_consensus_score_aggregation_and_errors():
    groups = ["a"] * 4 + ["b"] * 4
    preds = preds_from([1, 1, 1, 0, 1, 1, 1, 1], groups)
    assert consensus_score(preds, 2) == pytest.approx(100 * (0.5 + 1.0) / 2)
    per_group_acc = (75 + 100) / 2
    assert consensus_score(preds, 1) == pytest.approx(per_group_acc)
    with pytest.raises(ContractError):
        consensus_score(preds, 5)
    with pytest.raises(ContractError):
        consensus_score(preds_from([1]), 1)
    uneven = preds_from([1, 0, 1, 1, 1], ["a", "a", "b", "b", "b"])
    weighted = consensus_score(uneven, 2, weighted=True)
    assert weighted == pytest.approx(100 * (1 * 0 + 3 * 1) / 4)


def test_consensus_nonincreasing_in_k_on_random_sets():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n_groups = int(rng.integers(1, 6))
        n = int(rng.integers(1, 7))
        flags = rng.random(n_groups * n) < rng.random()
        groups = [str(i // n) for i in range(n_groups * n)]
        preds = preds_from(flags, groups)
        scores = [consensus_score(preds, k) for k in range(1, n + 1)]
        assert all(b <= a + 1e-12 for a, b in zip(scores, scores[1:]))


# ---------------------------------------------------------------- flips


def test_flips_examples():
    same = [PairOutcome("a", True, "a", True), PairOutcome("b", False, "b", False)]
    assert flips_decomposition(same) == {"flips": 0.0, "p2n": 0.0, "n2p": 0.0, "n2n": 0.0}
    four = [
        PairOutcome("a", True, "b", False),
        PairOutcome("a", False, "b", True),
        PairOutcome("a", False, "b", False),
        PairOutcome("a", True, "a", True),
    ]
    assert flips_decomposition(four) == {"flips": 75.0, "p2n": 25.0, "n2p": 25.0, "n2n": 25.0}
    with pytest.raises(ContractError):
        flips_decomposition([])


def test_flips_decrement_expectation():
    pairs = [PairOutcome("3", True, "2", True), PairOutcome("3", True, "3", False), PairOutcome("yes", False, "0", False)]
    out = flips_decomposition(pairs, expect="decrement")
    assert out["flips"] == pytest.approx(200 / 3) and out["p2n"] == pytest.approx(100 / 3)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("abc"), st.booleans(), st.sampled_from("abc"), st.booleans()), min_size=1))
def test_flips_partition_identity(raw):
    pairs = [PairOutcome(a, ca and a == "a", b, cb and b == "a") for a, ca, b, cb in raw]
    out = flips_decomposition(pairs)
    assert out["flips"] == pytest.approx(out["p2n"] + out["n2p"] + out["n2n"], abs=1e-9)


def test_link_pairs_resolution():
    preds = [Prediction(0, "x", True), Prediction(1, "y", False, source_id=0)]
    assert link_pairs(preds) == [PairOutcome("x", True, "y", False)]
    with pytest.raises(ContractError):
        link_pairs([Prediction(1, "y", False, source_id=5)])


# ---------------------------------------------------------------- consistency


def test_consistency_examples():
    summary = quadrant_summary(47.42, 18.57)
    assert abs(summary["S_given_M"] - 71.86) <= 0.01
    assert abs(summary["main_acc"] - 65.99) <= 0.01
    out = consistency_quadrants([(True, True)] * 5)
    assert (out["MS"], out["M_notS"], out["notM_S"], out["notM_notS"], out["S_given_M"]) == (100, 0, 0, 0, 100)
    rng = np.random.default_rng(2)
    pairs = [tuple(x) for x in rng.random((37, 2)) < 0.6]
    q = consistency_quadrants(pairs)
    assert q["MS"] + q["M_notS"] + q["notM_S"] + q["notM_notS"] == pytest.approx(100.0, abs=1e-12)
    with pytest.raises(ContractError):
        consistency_quadrants([])


def test_main_sub_links():
    preds = [Prediction(0, "x", True), Prediction(1, "y", False, main_id=0)]
    assert main_sub_pairs(preds) == [(True, False)]
    with pytest.raises(ContractError):
        main_sub_pairs([Prediction(1, "y", False, main_id=9)])


# ---------------------------------------------------------------- OOD


def test_ood_examples():
    assert abs(relative_gap(53.40, 46.50) - 14.84) <= 0.01
    assert abs(relative_gap(35.90, 32.20) - 11.49) <= 0.01
    assert relative_gap(40.0, 40.0) == 0.0
    assert relative_gap(40.0, 0.0) is None
    preds = [Prediction(i, "a", i % 2 == 0, ood_tag="head" if i < 6 else "tail") for i in range(10)]
    out = ood_delta(preds)
    assert out["head"] == 50.0 and out["tail"] == 50.0 and out["delta"] == 0.0
    only_head = ood_delta([Prediction(0, "a", True, ood_tag="head")])
    assert only_head["tail"] is None and only_head["delta"] is None


# ---------------------------------------------------------------- aggregates


def test_meta_average_examples():
    assert abs(meta_average(UNITER_B, UNITER_B_FLIPS) - 40.98) <= 0.005
    assert meta_average([37.5]) == 37.5
    assert meta_average([10.0, 4.0, 30.0], [False, True, False]) == pytest.approx((10 - 4 + 30) / 3)
    with pytest.raises(ContractError):
        meta_average([1.0, 2.0], [True])
    with pytest.raises(ContractError):
        meta_average([])


def test_meta_average_order_invariant():
    rng = np.random.default_rng(3)
    perm = rng.permutation(10)
    a = meta_average(UNITER_B, UNITER_B_FLIPS)
    b = meta_average([UNITER_B[i] for i in perm], [UNITER_B_FLIPS[i] for i in perm])
    assert a == pytest.approx(b, abs=1e-12)


def test_polygon_examples():
    assert polygon_score("iv", 7.53) == pytest.approx(62.35, abs=1e-9)
    assert polygon_score("cv", 0.0) == 100.0
    assert polygon_score("vqa_lol", (48.99, 50.54)) == pytest.approx(49.765, abs=1e-9)
    assert polygon_score("gqa", 61.0) == 61.0
    with pytest.raises(ContractError):
        polygon_score("clevr", 1.0)
