"""Synthetic scenes of attributed objects and the symbolic question evaluator."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError

SHAPES = ("circle", "square", "triangle", "star")
COLORS = ("red", "green", "blue", "yellow")
SIZES = ("small", "large")
ATTRS = {"shape": SHAPES, "color": COLORS, "size": SIZES}
ATTR_ORDER = ("size", "color", "shape")
EXTRA_DIMS = 2


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    size: str
    key: int  # original slot in the scene that first drew it; seeds its jitter

    def get(self, attr: str) -> str:
        return getattr(self, attr)

    def to_dict(self) -> dict:
        return {"shape": self.shape, "color": self.color, "size": self.size, "key": self.key}


@dataclass
class Scene:
    scene_id: int
    objects: list[SceneObject]
    base_id: int | None = None  # scene whose seed stream supplies the jitter
    source_id: int | None = None  # set on edited twins

    def __post_init__(self):
        if self.base_id is None:
            self.base_id = self.scene_id

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "base_id": self.base_id,
            "source_id": self.source_id,
            "objects": [o.to_dict() for o in self.objects],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(d["scene_id"], [SceneObject(**o) for o in d["objects"]], d["base_id"], d["source_id"])


@dataclass
class SceneParams:
    K_max: int = 6
    min_objects: int = 1
    color_bias: float = 0.5
    large_prob: float = 0.5
    jitter: float = 0.1
    shapes: tuple[str, ...] = SHAPES
    colors: tuple[str, ...] = COLORS

    @property
    def d_v(self) -> int:
        return len(SHAPES) + len(COLORS) + len(SIZES) + EXTRA_DIMS


def gen_scene(rng: np.random.Generator, params: SceneParams, scene_id: int) -> Scene:
    """Each shape prefers one color with probability ``color_bias``."""
    if not params.shapes or not params.colors:
        raise ContractError("attribute vocabularies must be nonempty")
    n = int(rng.integers(params.min_objects, params.K_max + 1))
    objects = []
    for slot in range(n):
        s = int(rng.integers(len(params.shapes)))
        if rng.random() < params.color_bias:
            c = s % len(params.colors)
        else:
            c = int(rng.integers(len(params.colors)))
        size = SIZES[1] if rng.random() < params.large_prob else SIZES[0]
        objects.append(SceneObject(params.shapes[s], params.colors[c], size, slot))
    return Scene(scene_id, objects)


def object_features(obj: SceneObject, seed: int, base_id: int, jitter: float) -> np.ndarray:
    vec = np.zeros(len(SHAPES) + len(COLORS) + len(SIZES) + EXTRA_DIMS)
    vec[SHAPES.index(obj.shape)] = 1.0
    vec[len(SHAPES) + COLORS.index(obj.color)] = 1.0
    vec[len(SHAPES) + len(COLORS) + SIZES.index(obj.size)] = 1.0
    noise = np.random.default_rng([seed, base_id, obj.key]).standard_normal(vec.shape)
    return vec + jitter * noise


def scene_features(scene: Scene, seed: int, jitter: float, K_max: int) -> tuple[np.ndarray, np.ndarray]:
    d_v = len(SHAPES) + len(COLORS) + len(SIZES) + EXTRA_DIMS
    feats = np.zeros((K_max, d_v))
    mask = np.zeros(K_max, dtype=bool)
    for slot, obj in enumerate(scene.objects):
        feats[slot] = object_features(obj, seed, scene.base_id, jitter)
        mask[slot] = True
    return feats, mask


# ---------------------------------------------------------------- evaluator
#
# Programs are nested lists so they serialize as JSON unchanged:
#   ["exist", filt]            -> yes/no
#   ["count", filt]            -> "0".."K_max"
#   ["query", attr, filt]      -> attribute word (filt must pick one object)
#   ["verify", attr, value, filt] -> yes/no (filt must pick one object)
#   ["and", p, q] / ["or", p, q] / ["not", p]


def matches(obj: SceneObject, filt: dict) -> bool:
    return all(obj.get(k) == v for k, v in filt.items())


def select(objects, filt: dict) -> list[SceneObject]:
    return [o for o in objects if matches(o, filt)]


def _yn(b: bool) -> str:
    return "yes" if b else "no"


def evaluate(program, objects) -> str:
    op = program[0]
    if op == "exist":
        return _yn(bool(select(objects, program[1])))
    if op == "count":
        return str(len(select(objects, program[1])))
    if op in ("query", "verify"):
        filt = program[-1]
        hits = select(objects, filt)
        if len(hits) != 1:
            raise ContractError(f"{op} filter {filt} selects {len(hits)} objects")
        if op == "query":
            return hits[0].get(program[1])
        return _yn(hits[0].get(program[1]) == program[2])
    if op == "not":
        return _yn(evaluate(program[1], objects) == "no")
    if op in ("and", "or"):
        a = evaluate(program[1], objects) == "yes"
        b = evaluate(program[2], objects) == "yes"
        return _yn(a and b if op == "and" else a or b)
    raise ContractError(f"unknown program op {op!r}")


def referenced_filters(program) -> list[dict]:
    op = program[0]
    if op in ("exist", "count"):
        return [program[1]]
    if op in ("query", "verify"):
        return [program[-1]]
    return [f for sub in program[1:] for f in referenced_filters(sub)]


def is_boolean(program) -> bool:
    return program[0] in ("exist", "verify", "and", "or", "not")


def connective_count(program) -> int:
    if program[0] in ("and", "or", "not"):
        return 1 + sum(connective_count(p) for p in program[1:])
    return 0
