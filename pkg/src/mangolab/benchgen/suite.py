"""Assemble, serialize and encode the synthetic robustness suite."""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..checkpoint import canonical_json
from ..errors import ContractError
from ..model import EmbeddingBatch
from .questions import (
    SHIFT_TEMPLATES,
    TRAIN_TEMPLATES,
    QuestionRecord,
    all_template_words,
    build_record,
    edit_remove_counted,
    edit_remove_irrelevant,
    gen_question,
    make_program,
    make_rephrasings,
    random_logical,
    realize,
)
from .scene import COLORS, SIZES, Scene, SceneParams, evaluate, gen_scene, referenced_filters, scene_features
from .splits import shift_answer_priors, split_head_tail

log = logging.getLogger(__name__)

SUITE_FORMAT = "mangolab-suite"
SUITE_VERSION = 1
SPECIAL_TOKENS = ("[CLS]", "[MASK]", "[PAD]")

# benchmark -> robustness category
BENCHMARKS = {
    "vqa_rep": "lingual",
    "lol_comp": "reason",
    "lol_supp": "reason",
    "introspect": "reason",
    "gqa": "reason",
    "iv": "visual",
    "cv": "visual",
    "vqacp": "answer",
    "gqa_ood": "answer",
    "vqa_v2": "base",
}
CATEGORIES = ("lingual", "reason", "visual", "answer")
FLIP_BENCHMARKS = ("iv", "cv")


@dataclass
class SuiteParams:
    seed: int = 0
    K_max: int = 6
    L_max: int = 48
    color_bias: float = 0.5
    jitter: float = 0.1
    n_train_scenes: int = 400
    n_eval_scenes: int = 200
    train_base: int = 4000
    train_logic: int = 1500
    train_supp: int = 800
    shift_pool: int = 2000
    vqa_v2: int = 600
    rephrase_groups: int = 250
    n_rephrasings: int = 3
    lol_comp: int = 600
    lol_supp: int = 600
    introspect: int = 300
    gqa: int = 600
    iv: int = 400
    cv: int = 400
    gqa_ood: int = 600
    tv_floor: float = 0.3
    tail_ratio: float = 1.2

    def scene_params(self) -> SceneParams:
        return SceneParams(K_max=self.K_max, color_bias=self.color_bias, jitter=self.jitter)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def small(cls, seed: int = 0) -> "SuiteParams":
        """Preset sized for minutes-long runs on one CPU."""
        return cls(
            seed=seed,
            n_train_scenes=250,
            n_eval_scenes=120,
            train_base=2400,
            train_logic=900,
            train_supp=500,
            shift_pool=1200,
            vqa_v2=300,
            rephrase_groups=100,
            lol_comp=300,
            lol_supp=300,
            introspect=150,
            gqa=300,
            iv=200,
            cv=200,
            gqa_ood=300,
        )


def answer_vocab(K_max: int) -> list[str]:
    return ["yes", "no", *COLORS, *SIZES, *[str(i) for i in range(K_max + 1)]]


def token_vocab() -> list[str]:
    return [*SPECIAL_TOKENS, *sorted(all_template_words())]


def _stream(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng([seed, *path])


class _Emitter:
    def __init__(self):
        self.questions: list[QuestionRecord] = []

    def add(self, rec: QuestionRecord, **fields) -> QuestionRecord:
        for k, v in fields.items():
            setattr(rec, k, v)
        rec.question_id = len(self.questions)
        self.questions.append(rec)
        return rec


@dataclass
class BenchmarkSuite:
    params: SuiteParams
    scenes: dict[int, Scene]
    questions: list[QuestionRecord]
    vocab: list[str]
    answers: list[str]
    shift_info: dict = field(default_factory=dict)

    # ------------------------------------------------------------ views

    @property
    def token_index(self) -> dict[str, int]:
        return {w: i for i, w in enumerate(self.vocab)}

    @property
    def answer_index(self) -> dict[str, int]:
        return {a: i for i, a in enumerate(self.answers)}

    def split(self, tag: str) -> list[QuestionRecord]:
        return [q for q in self.questions if q.split_tag == tag]

    def benchmark(self, name: str) -> list[QuestionRecord]:
        return [q for q in self.questions if q.split_tag == "eval" and q.benchmark == name]

    def by_id(self) -> dict[int, QuestionRecord]:
        return {q.question_id: q for q in self.questions}

    # ------------------------------------------------------------ encoding

    def encode(self, questions: list[QuestionRecord], L_max: int | None = None) -> EmbeddingBatch:
        L_max = L_max or self.params.L_max
        K = self.params.K_max
        tok = self.token_index
        ans = self.answer_index
        n = len(questions)
        d_v = self.params.scene_params().d_v
        regions = np.zeros((n, K, d_v))
        region_mask = np.zeros((n, K), dtype=bool)
        ids = np.full((n, L_max), tok["[PAD]"], dtype=np.int64)
        tmask = np.zeros((n, L_max), dtype=bool)
        labels = np.zeros((n, len(self.answers)))
        cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for i, q in enumerate(questions):
            if q.scene_id not in cache:
                cache[q.scene_id] = scene_features(self.scenes[q.scene_id], self.params.seed, self.params.jitter, K)
            regions[i], region_mask[i] = cache[q.scene_id]
            seq = [tok["[CLS]"]] + [tok[w] for w in q.tokens]
            if len(seq) > L_max:
                raise ContractError(f"question {q.question_id} has {len(seq)} tokens > L_max={L_max}")
            ids[i, : len(seq)] = seq
            tmask[i, : len(seq)] = True
            labels[i, ans[q.answer]] = 1.0
        return EmbeddingBatch(regions, region_mask, ids, tmask, labels)

    # ------------------------------------------------------------ stats

    def stats(self) -> dict:
        out: dict = {"counts": {}, "mean_length": {}}
        tags = Counter((q.split_tag, q.robustness_tag) for q in self.questions)
        for (split, tag), n in sorted(tags.items()):
            out["counts"][f"{split}/{tag}"] = n
        for split in ("train", "eval"):
            qs = self.split(split)
            out["mean_length"][split] = float(np.mean([q.length for q in qs])) if qs else 0.0
            logical = [q.length for q in qs if q.q_type == "logical"]
            out["mean_length"][f"{split}/logical"] = float(np.mean(logical)) if logical else 0.0
        for name in BENCHMARKS:
            qs = self.benchmark(name)
            out["counts"][f"benchmark/{name}"] = len(qs)
            if qs:
                out["mean_length"][f"eval/{name}"] = float(np.mean([q.length for q in qs]))
        out["shift_tv"] = self.shift_info.get("tv", {})
        return out

    # ------------------------------------------------------------ io

    def _tables(self) -> tuple[bytes, bytes]:
        scenes = "".join(canonical_json(self.scenes[k].to_dict()) + "\n" for k in sorted(self.scenes))
        questions = "".join(canonical_json(q.to_dict()) + "\n" for q in self.questions)
        return scenes.encode(), questions.encode()

    def content_hash(self) -> str:
        scenes, questions = self._tables()
        return hashlib.sha256(scenes + b"\0" + questions).hexdigest()

    def manifest(self) -> dict:
        return {
            "format": SUITE_FORMAT,
            "version": SUITE_VERSION,
            "seed": self.params.seed,
            "params": self.params.to_dict(),
            "vocab": self.vocab,
            "answers": self.answers,
            "shift": self.shift_info,
            "stats": self.stats(),
            "content_hash": self.content_hash(),
        }

    def save(self, directory) -> dict[str, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        scenes, questions = self._tables()
        paths = {
            "scenes": directory / "scenes.jsonl",
            "questions": directory / "questions.jsonl",
            "manifest": directory / "manifest.json",
        }
        paths["scenes"].write_bytes(scenes)
        paths["questions"].write_bytes(questions)
        paths["manifest"].write_text(json.dumps(self.manifest(), sort_keys=True, indent=1) + "\n")
        return paths

    @classmethod
    def load(cls, directory) -> "BenchmarkSuite":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        if manifest.get("format") != SUITE_FORMAT:
            raise ContractError(f"{directory} is not a suite directory")
        scenes = {}
        for line in (directory / "scenes.jsonl").read_text().splitlines():
            s = Scene.from_dict(json.loads(line))
            scenes[s.scene_id] = s
        questions = [QuestionRecord.from_dict(json.loads(line)) for line in (directory / "questions.jsonl").read_text().splitlines()]
        suite = cls(SuiteParams(**manifest["params"]), scenes, questions, manifest["vocab"], manifest["answers"], manifest["shift"])
        if suite.content_hash() != manifest["content_hash"]:
            raise ContractError("suite content does not match its manifest hash")
        return suite


def suite_hash(directory) -> str:
    directory = Path(directory)
    h = hashlib.sha256()
    for name in ("scenes.jsonl", "questions.jsonl", "manifest.json"):
        h.update((directory / name).read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------- generation


def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def _placed(rng, scenes, ids, q_type, bank=None):
    """Question of ``q_type`` on a random scene, redrawing scenes that cannot host it."""
    for _ in range(100):
        scene = scenes[_pick(rng, ids)]
        try:
            return scene, gen_question(scene, q_type, rng, bank=bank)
        except ContractError:
            continue
    raise ContractError(f"no scene can host a {q_type} question")


def _atomic_type(rng) -> str:
    r = rng.random()
    if r < 0.35:
        return "existence"
    if r < 0.65:
        return "attribute"
    if r < 0.9:
        return "count"
    return "verify"


def generate_suite(params: SuiteParams) -> BenchmarkSuite:
    """Pure function of ``params``: same params, same suite bytes."""
    seed = params.seed
    sp = params.scene_params()
    scenes: dict[int, Scene] = {}
    train_ids = list(range(params.n_train_scenes))
    eval_ids = list(range(params.n_train_scenes, params.n_train_scenes + params.n_eval_scenes))
    for sid in train_ids + eval_ids:
        scenes[sid] = gen_scene(_stream(seed, 1, sid), sp, sid)
    next_scene = [params.n_train_scenes + params.n_eval_scenes]

    def new_scene_id():
        sid = next_scene[0]
        next_scene[0] += 1
        return sid

    em = _Emitter()

    # training pool
    rng = _stream(seed, 2)
    for _ in range(params.train_base):
        em.add(_placed(rng, scenes, train_ids, _atomic_type(rng))[1])
    rng = _stream(seed, 3)
    for _ in range(params.train_logic):
        em.add(random_logical(scenes[_pick(rng, train_ids)], rng, 1, "exist"))
    rng = _stream(seed, 4)
    for _ in range(params.train_supp):
        em.add(random_logical(scenes[_pick(rng, train_ids)], rng, 1, "mixed"))

    # answer-prior shift family: train part joins the pool, eval part is the benchmark
    rng = _stream(seed, 5)
    pool = []
    for _ in range(params.shift_pool):
        q_type = ("existence", "attribute", "count")[int(rng.integers(3))]
        pool.append(_placed(rng, scenes, train_ids, q_type, SHIFT_TEMPLATES)[1])
    shift_train, shift_eval, shift_info = shift_answer_priors(pool, rng, params.tv_floor)
    for q in shift_train:
        em.add(q, benchmark="vqacp", robustness_tag="answer")

    # evaluation benchmarks, all on held-out scenes
    rng = _stream(seed, 10)
    for _ in range(params.vqa_v2):
        em.add(_placed(rng, scenes, eval_ids, _atomic_type(rng))[1], split_tag="eval", benchmark="vqa_v2")

    rng = _stream(seed, 11)
    for g in range(params.rephrase_groups):
        scene, base = _placed(rng, scenes, eval_ids, ("existence", "attribute", "count")[int(rng.integers(3))])
        gid = f"rep{g}"
        tags = dict(split_tag="eval", benchmark="vqa_rep", robustness_tag="lingual", group_id=gid)
        em.add(base, role="original", **tags)
        for rec in make_rephrasings(base, scene, params.n_rephrasings, rng):
            em.add(rec, **tags)

    rng = _stream(seed, 12)
    for _ in range(params.lol_comp):
        rec = random_logical(scenes[_pick(rng, eval_ids)], rng, int(rng.integers(2, 4)), "exist")
        em.add(rec, split_tag="eval", benchmark="lol_comp", robustness_tag="reason")
    rng = _stream(seed, 13)
    for _ in range(params.lol_supp):
        rec = random_logical(scenes[_pick(rng, eval_ids)], rng, int(rng.integers(2, 4)), "mixed")
        em.add(rec, split_tag="eval", benchmark="lol_supp", robustness_tag="reason")

    rng = _stream(seed, 14)
    for _ in range(params.introspect):
        scene = scenes[_pick(rng, eval_ids)]
        if rng.random() < 0.5:
            main = gen_question(scene, "count", rng)
        else:
            main = random_logical(scene, rng, 1, "exist")
            while main.program[0] == "not":
                main = random_logical(scene, rng, 1, "exist")
        tags = dict(split_tag="eval", benchmark="introspect", robustness_tag="reason")
        main = em.add(main, role="main", **tags)
        filters = []
        for f in referenced_filters(main.program):
            if f not in filters:
                filters.append(f)
        for f in filters[:3]:
            program = ["exist", f]
            sub = build_record(scene, program, realize(program, _pick(rng, TRAIN_TEMPLATES["exist"])))
            em.add(sub, role="sub", main_id=main.question_id, **tags)

    rng = _stream(seed, 15)
    made = 0
    while made < params.gqa:
        scene = scenes[_pick(rng, eval_ids)]
        attrs = (("size", "shape"), ("color", "shape"))[int(rng.integers(2))]
        program = make_program(scene, "query", rng, attrs)
        if program is None:
            continue
        rec = build_record(scene, program, realize(program, _pick(rng, TRAIN_TEMPLATES[f"query.{program[1]}"])))
        em.add(rec, split_tag="eval", benchmark="gqa", robustness_tag="reason")
        made += 1

    rng = _stream(seed, 16)
    made = skipped = 0
    while made < params.iv:
        scene, src = _placed(rng, scenes, eval_ids, ("existence", "attribute", "count")[int(rng.integers(3))])
        edited = edit_remove_irrelevant(scene, src, -1, rng)
        if edited is None:
            skipped += 1
            continue
        tags = dict(split_tag="eval", benchmark="iv", robustness_tag="visual")
        src = em.add(src, role="source", **tags)
        twin_scene, twin = edited
        twin_scene.scene_id = new_scene_id()
        scenes[twin_scene.scene_id] = twin_scene
        em.add(twin, scene_id=twin_scene.scene_id, source_id=src.question_id, **tags)
        made += 1
    if skipped:
        log.info("iv: skipped %d questions with no removable object", skipped)

    rng = _stream(seed, 17)
    made = 0
    while made < params.cv:
        scene = scenes[_pick(rng, eval_ids)]
        obj = _pick(rng, scene.objects)
        attrs = ("shape", "color") if rng.random() < 0.3 else ("shape",)
        program = ["count", {a: obj.get(a) for a in attrs}]
        src = build_record(scene, program, realize(program, _pick(rng, TRAIN_TEMPLATES["count"])))
        tags = dict(split_tag="eval", benchmark="cv", robustness_tag="visual")
        src = em.add(src, role="source", **tags)
        twin_scene, twin = edit_remove_counted(scene, src, -1, rng)
        twin_scene.scene_id = new_scene_id()
        scenes[twin_scene.scene_id] = twin_scene
        em.add(twin, scene_id=twin_scene.scene_id, source_id=src.question_id, **tags)
        made += 1

    for q in shift_eval:
        em.add(q, split_tag="eval", benchmark="vqacp", robustness_tag="answer")

    rng = _stream(seed, 18)
    ood = []
    made = 0
    while made < params.gqa_ood:
        scene = scenes[_pick(rng, eval_ids)]
        program = make_program(scene, "query", rng, ("shape",))
        if program is None or program[1] != "color":
            continue
        rec = build_record(scene, program, realize(program, _pick(rng, TRAIN_TEMPLATES["query.color"])))
        rec.group_id = f"{rec.type_key}|{program[2]['shape']}"
        ood.append(em.add(rec, split_tag="eval", benchmark="gqa_ood", robustness_tag="answer"))
        made += 1
    split_head_tail(ood, params.tail_ratio)

    suite = BenchmarkSuite(params, scenes, em.questions, token_vocab(), answer_vocab(params.K_max), shift_info)
    longest = max(q.length for q in suite.questions) + 1
    if longest > params.L_max:
        raise ContractError(f"longest question needs {longest} tokens > L_max={params.L_max}")
    return suite


def verify_suite(suite: BenchmarkSuite) -> None:
    """Full sweep: answers match the evaluator and every link resolves."""
    ids = suite.by_id()
    for q in suite.questions:
        scene = suite.scenes[q.scene_id]
        if evaluate(q.program, scene.objects) != q.answer:
            raise ContractError(f"question {q.question_id} answer disagrees with its scene")
        for link in (q.main_id, q.source_id):
            if link is not None and link not in ids:
                raise ContractError(f"question {q.question_id} links to missing {link}")
