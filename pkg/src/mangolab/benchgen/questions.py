"""Templated questions, rephrasings, logical compositions and scene edits."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ContractError
from .scene import (
    ATTR_ORDER,
    ATTRS,
    COLORS,
    SHAPES,
    SIZES,
    Scene,
    connective_count,
    evaluate,
    is_boolean,
    referenced_filters,
    select,
)

Q_TYPES = ("existence", "attribute", "count", "logical")

# Templates used in training. {f} is a singular noun phrase, {fp} a plural one,
# {attr}/{value} an attribute name or value.
TRAIN_TEMPLATES = {
    "exist": ["is there a {f}", "are there any {fp}"],
    "count": ["how many {fp} are there", "how many {fp} are in the image"],
    "query.color": ["what color is the {f}", "what is the color of the {f}"],
    "query.size": ["what size is the {f}", "how big is the {f}"],
    "verify": ["is the {f} {value}"],
}

# Withheld from training; only eval rephrasings draw on these.
REPHRASE_TEMPLATES = {
    "exist": [
        "can you see a {f} in the picture",
        "does the image contain a {f}",
        "is a {f} visible in this picture",
        "would you say there is a {f} here",
    ],
    "count": [
        "what is the total number of {fp} in the picture",
        "count the {fp} you can see",
        "how many {fp} can be seen in this image",
    ],
    "query.color": [
        "which color does the {f} have",
        "tell me the color of the {f}",
        "the {f} is painted in which color",
    ],
    "query.size": [
        "which size does the {f} have",
        "tell me the size of the {f}",
        "is the {f} small or large",
    ],
    "verify": ["would you say the {f} is {value}", "can you confirm the {f} is {value}", "the {f} looks {value} right"],
}

FILLER_PREFIXES = ["", "please", "quick question", "looking at the picture", "i wonder", "just curious"]

# Question-type keys used only by the answer-prior-shift family.
SHIFT_TEMPLATES = {
    "exist": ["does the scene hold a {f}"],
    "count": ["what number of {fp} appear"],
    "query.color": ["which hue has the {f}"],
    "query.size": ["which scale has the {f}"],
}

CONNECTIVE_WORDS = {"and": ("both", "and"), "or": ("either", "or"), "not": ("not",)}


@dataclass
class QuestionRecord:
    question_id: int
    scene_id: int
    tokens: list[str]
    answer: str
    q_type: str
    program: list
    split_tag: str = "train"
    robustness_tag: str = "base"
    benchmark: str = "train"
    group_id: str | None = None
    main_id: int | None = None
    source_id: int | None = None
    role: str | None = None
    type_key: str = ""
    ood_tag: str | None = None

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "scene_id": self.scene_id,
            "tokens": list(self.tokens),
            "answer": self.answer,
            "q_type": self.q_type,
            "program": self.program,
            "split_tag": self.split_tag,
            "robustness_tag": self.robustness_tag,
            "benchmark": self.benchmark,
            "group_id": self.group_id,
            "main_id": self.main_id,
            "source_id": self.source_id,
            "role": self.role,
            "type_key": self.type_key,
            "ood_tag": self.ood_tag,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuestionRecord":
        return cls(**d)

    @property
    def length(self) -> int:
        return len(self.tokens)


def all_template_words() -> set[str]:
    words: set[str] = set()
    for bank in (TRAIN_TEMPLATES, REPHRASE_TEMPLATES, SHIFT_TEMPLATES):
        for templates in bank.values():
            for t in templates:
                words.update(w for w in t.split() if not w.startswith("{"))
    for prefix in FILLER_PREFIXES:
        words.update(prefix.split())
    for pair in CONNECTIVE_WORDS.values():
        words.update(pair)
    for values in ATTRS.values():
        words.update(values)
    words.update(s + "s" for s in SHAPES)
    return words


# ---------------------------------------------------------------- realization


def noun_phrase(filt: dict, plural: bool = False) -> list[str]:
    words = [filt[a] for a in ATTR_ORDER if a in filt and a != "shape"]
    shape = filt.get("shape", "object")
    words.append(shape + "s" if plural and shape != "object" else shape)
    return words


def _template_key(program) -> str:
    op = program[0]
    if op == "query":
        return f"query.{program[1]}"
    return op


def realize(program, template: str) -> list[str]:
    filt = program[-1]
    out = []
    for w in template.split():
        if w == "{f}":
            out.extend(noun_phrase(filt))
        elif w == "{fp}":
            out.extend(noun_phrase(filt, plural=True))
        elif w == "{value}":
            out.append(program[2])
        else:
            out.append(w)
    return out


def realize_logical(program, leaf_tokens) -> list[str]:
    """Prefix form: both X and Y / either X or Y / not X."""
    op = program[0]
    if op == "and":
        return ["both"] + realize_logical(program[1], leaf_tokens) + ["and"] + realize_logical(program[2], leaf_tokens)
    if op == "or":
        return ["either"] + realize_logical(program[1], leaf_tokens) + ["or"] + realize_logical(program[2], leaf_tokens)
    if op == "not":
        return ["not"] + realize_logical(program[1], leaf_tokens)
    return leaf_tokens(program)


def type_key_of(tokens: list[str]) -> str:
    return " ".join(tokens[:2])


# ---------------------------------------------------------------- generation


def _random_filter(rng, scene: Scene, attrs: tuple[str, ...], from_scene_prob: float = 0.5) -> dict:
    if scene.objects and rng.random() < from_scene_prob:
        obj = scene.objects[int(rng.integers(len(scene.objects)))]
        return {a: obj.get(a) for a in attrs}
    return {a: ATTRS[a][int(rng.integers(len(ATTRS[a])))] for a in attrs}


def _filter_attrs(rng, p_color: float = 0.6, p_size: float = 0.4) -> tuple[str, ...]:
    attrs = ["shape"]
    if rng.random() < p_color:
        attrs.append("color")
    if rng.random() < p_size:
        attrs.append("size")
    return tuple(attrs)


def _unique_filters(scene: Scene, attrs_options) -> list[dict]:
    found = []
    for attrs in attrs_options:
        for obj in scene.objects:
            filt = {a: obj.get(a) for a in attrs}
            if len(select(scene.objects, filt)) == 1 and filt not in found:
                found.append(filt)
    return found


def make_program(scene: Scene, kind: str, rng: np.random.Generator, attrs: tuple[str, ...] | None = None):
    """Draw a program of one atomic kind, or None if the scene cannot host it."""
    if kind == "exist":
        return ["exist", _random_filter(rng, scene, attrs or _filter_attrs(rng))]
    if kind == "count":
        attrs = attrs or (("shape", "color") if rng.random() < 0.3 else ("shape",))
        return ["count", _random_filter(rng, scene, attrs, from_scene_prob=0.8)]
    if kind in ("query", "verify"):
        options = [attrs] if attrs else [("shape",), ("size", "shape"), ("color", "shape")]
        filters = _unique_filters(scene, options)
        if not filters:
            return None
        filt = filters[int(rng.integers(len(filters)))]
        free = [a for a in ("color", "size") if a not in filt]
        attr = free[int(rng.integers(len(free)))]
        if kind == "query":
            return ["query", attr, filt]
        if rng.random() < 0.5:
            value = select(scene.objects, filt)[0].get(attr)
        else:
            value = ATTRS[attr][int(rng.integers(len(ATTRS[attr])))]
        return ["verify", attr, value, filt]
    raise ContractError(f"unknown question kind {kind!r}")


_KIND_OF_QTYPE = {"existence": "exist", "count": "count", "attribute": "query"}


def q_type_of(program) -> str:
    op = program[0]
    if op == "exist":
        return "existence"
    if op == "count":
        return "count"
    if op in ("query", "verify"):
        return "attribute"
    return "logical"


def build_record(scene: Scene, program, tokens: list[str], **fields) -> QuestionRecord:
    return QuestionRecord(
        question_id=-1,
        scene_id=scene.scene_id,
        tokens=tokens,
        answer=evaluate(program, scene.objects),
        q_type=q_type_of(program),
        program=program,
        type_key=type_key_of(tokens),
        **fields,
    )


def gen_question(
    scene: Scene,
    q_type: str,
    rng: np.random.Generator,
    bank: dict | None = None,
    attrs: tuple[str, ...] | None = None,
    tries: int = 20,
) -> QuestionRecord:
    """Templated atomic question with its answer from the symbolic evaluator."""
    kind = _KIND_OF_QTYPE.get(q_type, q_type)
    if kind == "count" and not scene.objects:
        raise ContractError("count questions need at least one object")
    bank = bank or TRAIN_TEMPLATES
    for _ in range(tries):
        program = make_program(scene, kind, rng, attrs)
        if program is None:
            continue
        templates = bank[_template_key(program)]
        template = templates[int(rng.integers(len(templates)))]
        return build_record(scene, program, realize(program, template))
    raise ContractError(f"could not place a {q_type} question on scene {scene.scene_id}")


def make_rephrasings(q: QuestionRecord, scene: Scene, n: int, rng: np.random.Generator) -> list[QuestionRecord]:
    """n surface variants from withheld templates, sharing the group and answer."""
    if n < 1:
        raise ContractError("n must be at least 1")
    templates = REPHRASE_TEMPLATES[_template_key(q.program)]
    order = rng.permutation(len(templates))
    out = []
    for i in range(n):
        template = templates[int(order[i % len(templates)])]
        prefix = FILLER_PREFIXES[int(rng.integers(len(FILLER_PREFIXES)))].split()
        tokens = prefix + realize(q.program, template)
        rec = build_record(scene, q.program, tokens, group_id=q.group_id, role="rephrase")
        out.append(rec)
    return out


def compose_logical(q1: QuestionRecord, q2: QuestionRecord | None, connective: str, scene: Scene) -> QuestionRecord:
    """Join boolean questions on one scene with AND / OR / NOT."""
    connective = connective.lower()
    operands = [q1] if connective == "not" else [q1, q2]
    if connective not in CONNECTIVE_WORDS or any(q is None for q in operands):
        raise ContractError(f"bad connective {connective!r} or missing operand")
    for q in operands:
        if not is_boolean(q.program):
            raise ContractError("logical composition needs yes/no operands")
        if q.scene_id != scene.scene_id:
            raise ContractError("operands must share a scene")
    program = [connective] + [q.program for q in operands]
    leaf_tokens = {}
    for q in operands:
        _collect_leaf_tokens(q.program, q.tokens, leaf_tokens)
    tokens = realize_logical(program, lambda p: leaf_tokens[_pkey(p)])
    return build_record(scene, program, tokens)


def _pkey(program) -> str:
    return repr(program)


def _collect_leaf_tokens(program, tokens, out):
    if program[0] not in ("and", "or", "not"):
        out[_pkey(program)] = list(tokens)
        return
    # Nested operands were realized by realize_logical; recover leaves by re-walking.
    _split_leaves(program, list(tokens), out)


def _split_leaves(program, tokens, out):
    pos = 0

    def walk(p):
        nonlocal pos
        op = p[0]
        if op in ("and", "or"):
            pos += 1
            walk(p[1])
            pos += 1
            walk(p[2])
        elif op == "not":
            pos += 1
            walk(p[1])
        else:
            start = pos
            while pos < len(tokens) and tokens[pos] not in ("and", "or"):
                pos += 1
            out[_pkey(p)] = tokens[start:pos]

    walk(program)


def random_logical(
    scene: Scene,
    rng: np.random.Generator,
    n_connectives: int,
    leaf_kind: str = "exist",
    bank: dict | None = None,
) -> QuestionRecord | None:
    """Random formula with exactly ``n_connectives`` connectives over atomic yes/no leaves."""
    bank = bank or TRAIN_TEMPLATES

    def leaf():
        for _ in range(10):
            kind = leaf_kind if leaf_kind != "mixed" else ("verify" if rng.random() < 0.5 else "exist")
            program = make_program(scene, kind, rng)
            if program is not None:
                return program
        return make_program(scene, "exist", rng)

    def tree(k):
        if k == 0:
            return leaf()
        if k == 1 or rng.random() < 0.3:
            op = ("and", "or", "not")[int(rng.integers(3))]
        else:
            op = ("and", "or")[int(rng.integers(2))]
        if op == "not":
            return ["not", tree(k - 1)]
        left = int(rng.integers(0, k))
        return [op, tree(left), tree(k - 1 - left)]

    program = tree(n_connectives)
    leaf_tok = {}

    def tokens_for(p):
        key = _pkey(p)
        if key not in leaf_tok:
            templates = bank[_template_key(p)]
            leaf_tok[key] = realize(p, templates[int(rng.integers(len(templates)))])
        return leaf_tok[key]

    tokens = realize_logical(program, tokens_for)
    rec = build_record(scene, program, tokens)
    assert connective_count(program) == n_connectives
    return rec


# ---------------------------------------------------------------- edits


def removable_objects(scene: Scene, program) -> list[int]:
    filters = referenced_filters(program)
    return [
        i for i, obj in enumerate(scene.objects) if not any(all(obj.get(k) == v for k, v in f.items()) for f in filters)
    ]


def _twin_scene(scene: Scene, drop: int, new_id: int) -> Scene:
    objects = [o for i, o in enumerate(scene.objects) if i != drop]
    return Scene(new_id, objects, base_id=scene.base_id, source_id=scene.scene_id)


def edit_remove_irrelevant(
    scene: Scene, q: QuestionRecord, new_scene_id: int, rng: np.random.Generator
) -> tuple[Scene, QuestionRecord] | None:
    """Erase one object the question does not mention; the answer must not move.

    Returns None when every object is referenced or removal would empty the scene.
    """
    candidates = removable_objects(scene, q.program)
    if not candidates or len(scene.objects) < 2:
        return None
    drop = candidates[int(rng.integers(len(candidates)))]
    twin = _twin_scene(scene, drop, new_scene_id)
    rec = replace(q, question_id=-1, scene_id=twin.scene_id, source_id=q.question_id, role="twin")
    rec.answer = evaluate(q.program, twin.objects)
    if rec.answer != q.answer:
        raise ContractError("irrelevant-object removal changed the answer")
    return twin, rec


def edit_remove_counted(
    scene: Scene, q: QuestionRecord, new_scene_id: int, rng: np.random.Generator
) -> tuple[Scene, QuestionRecord]:
    """Erase one counted object; the twin answer is count - 1."""
    if q.program[0] != "count":
        raise ContractError("counted-object removal needs a count question")
    hits = [i for i, obj in enumerate(scene.objects) if all(obj.get(k) == v for k, v in q.program[1].items())]
    if not hits:
        raise ContractError("count is zero; nothing to remove")
    drop = hits[int(rng.integers(len(hits)))]
    twin = _twin_scene(scene, drop, new_scene_id)
    rec = replace(q, question_id=-1, scene_id=twin.scene_id, source_id=q.question_id, role="twin")
    rec.answer = evaluate(q.program, twin.objects)
    if int(rec.answer) != int(q.answer) - 1:
        raise ContractError("counted-object removal did not decrement the answer")
    return twin, rec
