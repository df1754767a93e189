"""Seeded synthetic analogs of the four robustness categories."""

from .questions import (
    QuestionRecord,
    compose_logical,
    edit_remove_counted,
    edit_remove_irrelevant,
    gen_question,
    make_rephrasings,
    random_logical,
)
from .scene import Scene, SceneObject, SceneParams, evaluate, gen_scene
from .splits import shift_answer_priors, split_head_tail, total_variation
from .suite import (
    BENCHMARKS,
    CATEGORIES,
    FLIP_BENCHMARKS,
    BenchmarkSuite,
    SuiteParams,
    generate_suite,
    suite_hash,
    verify_suite,
)
