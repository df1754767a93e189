"""Evaluation formulas: accuracy, consensus score, flips, consistency
quadrants, head/tail delta, Meta-Ave and polygon scores.

All scores are percentages. Every function is pure.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from math import comb
from typing import Iterable, Mapping, Sequence

from .errors import ContractError


@dataclass(frozen=True)
class Prediction:
    question_id: int
    answer: str
    correct: bool
    gold: str = ""
    group_id: str | None = None
    main_id: int | None = None
    source_id: int | None = None
    role: str | None = None
    ood_tag: str | None = None


def is_correct(soft_scores: Mapping[str, float], predicted: str) -> bool:
    """Correct iff the predicted answer carries a non-zero soft score."""
    return soft_scores.get(predicted, 0.0) > 0.0


def accuracy(preds: Sequence[Prediction]) -> float:
    if not preds:
        raise ContractError("accuracy of an empty prediction set")
    return 100.0 * sum(p.correct for p in preds) / len(preds)


# ---------------------------------------------------------------- consensus


def group_consensus(n: int, c: int, k: int) -> float:
    """Fraction of size-k subsets of an n-member group that are all correct."""
    if not 0 <= c <= n or not 1 <= k <= n:
        raise ContractError(f"bad group counts n={n} c={c} k={k}")
    return comb(c, k) / comb(n, k)


def consensus_score(preds: Sequence[Prediction], k: int, weighted: bool = False) -> float:
    """CS(k): mean over rephrase groups of C(c, k) / C(n, k), times 100.

    ``weighted`` averages over groups in proportion to the subset count
    C(n, k) instead of uniformly.
    """
    groups: dict[str, list[bool]] = defaultdict(list)
    for p in preds:
        if p.group_id is None:
            raise ContractError(f"question {p.question_id} has no group")
        groups[p.group_id].append(p.correct)
    if not groups:
        raise ContractError("no groups to score")
    smallest = min(len(g) for g in groups.values())
    if k > smallest:
        raise ContractError(f"k={k} exceeds the smallest group size {smallest}")
    total = weight = 0.0
    for gid in sorted(groups):
        outcome = groups[gid]
        n, c = len(outcome), sum(outcome)
        w = comb(n, k) if weighted else 1.0
        total += w * group_consensus(n, c, k)
        weight += w
    return 100.0 * total / weight


# ---------------------------------------------------------------- flips


@dataclass(frozen=True)
class PairOutcome:
    real_answer: str
    real_correct: bool
    edited_answer: str
    edited_correct: bool


def decrement_answer(answer: str) -> str | None:
    try:
        return str(int(answer) - 1)
    except ValueError:
        return None


def flips_decomposition(pairs: Sequence[PairOutcome], expect: str = "same") -> dict[str, float]:
    """Flip rate and its p2n / n2p / n2n split, as percentages of pairs.

    With ``expect="same"`` a pair flips when the two predictions differ. With
    ``expect="decrement"`` a pair flips when the edited prediction is not the
    real prediction minus one.
    """
    if not pairs:
        raise ContractError("no pairs to score")
    if expect not in ("same", "decrement"):
        raise ContractError(f"unknown expectation {expect!r}")
    flips = p2n = n2p = n2n = 0
    for pair in pairs:
        if expect == "same":
            flipped = pair.real_answer != pair.edited_answer
        else:
            flipped = decrement_answer(pair.real_answer) != pair.edited_answer
        if not flipped:
            continue
        flips += 1
        if pair.real_correct and not pair.edited_correct:
            p2n += 1
        elif not pair.real_correct and pair.edited_correct:
            n2p += 1
        elif not pair.real_correct and not pair.edited_correct:
            n2n += 1
        else:
            raise ContractError("both sides correct yet the pair flipped")
    n = len(pairs)
    return {"flips": 100.0 * flips / n, "p2n": 100.0 * p2n / n, "n2p": 100.0 * n2p / n, "n2n": 100.0 * n2n / n}


def link_pairs(preds: Sequence[Prediction]) -> list[PairOutcome]:
    """Pair every edited-scene prediction with its source prediction."""
    by_id = {p.question_id: p for p in preds}
    pairs = []
    for p in preds:
        if p.source_id is None:
            continue
        src = by_id.get(p.source_id)
        if src is None:
            raise ContractError(f"edited question {p.question_id} links to missing {p.source_id}")
        pairs.append(PairOutcome(src.answer, src.correct, p.answer, p.correct))
    return pairs


# ---------------------------------------------------------------- consistency


def consistency_quadrants(pairs: Iterable[tuple[bool, bool]]) -> dict[str, float]:
    """Joint correctness of (main, sub) pairs.

    Keys: MS (both right), M_notS, notM_S, notM_notS, S_given_M, main_acc.
    """
    counts = {"MS": 0, "M_notS": 0, "notM_S": 0, "notM_notS": 0}
    n = 0
    for main_ok, sub_ok in pairs:
        n += 1
        if main_ok:
            counts["MS" if sub_ok else "M_notS"] += 1
        else:
            counts["notM_S" if sub_ok else "notM_notS"] += 1
    if n == 0:
        raise ContractError("no main/sub pairs")
    out = {k: 100.0 * v / n for k, v in counts.items()}
    out.update(quadrant_summary(out["MS"], out["M_notS"]))
    return out


def quadrant_summary(ms: float, m_not_s: float) -> dict[str, float]:
    """S-given-M consistency and main accuracy from the two main-correct quadrants."""
    main = ms + m_not_s
    return {"S_given_M": 100.0 * ms / main if main else float("nan"), "main_acc": main}


def main_sub_pairs(preds: Sequence[Prediction]) -> list[tuple[bool, bool]]:
    by_id = {p.question_id: p for p in preds}
    out = []
    for p in preds:
        if p.main_id is None:
            continue
        main = by_id.get(p.main_id)
        if main is None:
            raise ContractError(f"sub-question {p.question_id} links to missing main {p.main_id}")
        out.append((main.correct, p.correct))
    return out


# ---------------------------------------------------------------- OOD


def relative_gap(head: float, tail: float) -> float | None:
    """(head - tail) / tail as a percentage; None when tail is zero."""
    if tail == 0:
        return None
    return 100.0 * (head - tail) / tail


def ood_delta(preds: Sequence[Prediction]) -> dict[str, float | None]:
    head = [p for p in preds if p.ood_tag == "head"]
    tail = [p for p in preds if p.ood_tag == "tail"]
    out: dict[str, float | None] = {"all": accuracy(preds)}
    out["head"] = accuracy(head) if head else None
    out["tail"] = accuracy(tail) if tail else None
    if out["head"] is None or out["tail"] is None:
        out["delta"] = None
    else:
        out["delta"] = relative_gap(out["head"], out["tail"])
    return out


# ---------------------------------------------------------------- aggregates


def meta_average(scores: Sequence[float], flip_flags: Sequence[bool] | None = None) -> float:
    """Mean of benchmark scores with flip-valued entries negated."""
    if not scores:
        raise ContractError("no scores to average")
    flags = list(flip_flags) if flip_flags is not None else [False] * len(scores)
    if len(flags) != len(scores):
        raise ContractError("one flip flag per score")
    return sum(-s if f else s for s, f in zip(scores, flags)) / len(scores)


POLYGON_BENCHMARKS = (
    "vqa_rep",
    "vqa_lol",
    "introspect",
    "gqa",
    "iv",
    "cv",
    "vqacp",
    "gqa_ood",
    "vqa_v2",
    "lol_comp",
    "lol_supp",
)


def polygon_score(benchmark: str, value) -> float:
    """Radar-axis value: CV 100 - flips, IV 100 - 5 flips, VQA-LOL mean of its two parts."""
    if benchmark not in POLYGON_BENCHMARKS:
        raise ContractError(f"unknown benchmark {benchmark!r}")
    if benchmark == "cv":
        return 100.0 - value
    if benchmark == "iv":
        return 100.0 - 5.0 * value
    if benchmark == "vqa_lol":
        comp, supp = value
        return (comp + supp) / 2.0
    return float(value)
