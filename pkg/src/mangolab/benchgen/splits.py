"""Distribution-shift splits: answer-prior shift and head/tail tagging."""

from __future__ import annotations

import logging
from collections import Counter, defaultdict

import numpy as np

from .questions import QuestionRecord

log = logging.getLogger(__name__)


def total_variation(a: Counter, b: Counter) -> float:
    na, nb = sum(a.values()), sum(b.values())
    if na == 0 or nb == 0:
        return 0.0
    keys = sorted(set(a) | set(b))
    return 0.5 * sum(abs(a[k] / na - b[k] / nb) for k in keys)


def shift_answer_priors(
    questions: list[QuestionRecord],
    rng: np.random.Generator,
    tv_floor: float = 0.3,
    high_share: float = 0.85,
    attempts: int = 20,
) -> tuple[list[QuestionRecord], list[QuestionRecord], dict]:
    """Partition questions per type key so train and eval answer priors differ.

    Each answer class of a key goes mostly to train (``high_share``) or mostly
    to eval, alternating over a random permutation of the classes. Keys with a
    single distinct answer, or that never reach ``tv_floor``, are dropped.
    Returns (train, eval, info) where info holds per-key TV and dropped keys.
    """
    by_key: dict[str, list[QuestionRecord]] = defaultdict(list)
    for q in questions:
        by_key[q.type_key].append(q)
    train, evals = [], []
    info = {"tv": {}, "excluded": []}
    for key in sorted(by_key):
        group = by_key[key]
        answers = sorted({q.answer for q in group})
        if len(answers) < 2:
            log.info("type key %r has a single answer; excluded from shift split", key)
            info["excluded"].append(key)
            continue
        for _ in range(attempts):
            perm = [answers[i] for i in rng.permutation(len(answers))]
            share = {a: (high_share if i % 2 == 0 else 1.0 - high_share) for i, a in enumerate(perm)}
            coins = rng.random(len(group))
            tr = [q for q, c in zip(group, coins) if c < share[q.answer]]
            ev = [q for q, c in zip(group, coins) if c >= share[q.answer]]
            tv = total_variation(Counter(q.answer for q in tr), Counter(q.answer for q in ev))
            if tr and ev and tv >= tv_floor:
                break
        else:
            log.info("type key %r never reached TV %.2f; excluded", key, tv_floor)
            info["excluded"].append(key)
            continue
        info["tv"][key] = tv
        train.extend(tr)
        evals.extend(ev)
    return train, evals, info


def split_head_tail(questions: list[QuestionRecord], tail_ratio: float = 1.2) -> list[QuestionRecord]:
    """Tag each question head or tail by its answer's frequency inside its group.

    A class is tail when its count is at most ``tail_ratio`` times the mean
    class count of the group; the most frequent class is always head, and a
    single-class group is all head.
    """
    by_group: dict[str, list[QuestionRecord]] = defaultdict(list)
    for q in questions:
        by_group[q.group_id].append(q)
    for gid in sorted(by_group, key=str):
        group = by_group[gid]
        counts = Counter(q.answer for q in group)
        top = max(counts.values())
        mean = sum(counts.values()) / len(counts)
        for q in group:
            c = counts[q.answer]
            head = len(counts) == 1 or c == top or c > tail_ratio * mean
            q.ood_tag = "head" if head else "tail"
    return questions
