from collections import Counter, defaultdict

import numpy as np
import pytest

from mangolab.benchgen import (
    BenchmarkSuite,
    Scene,
    SceneObject,
    SceneParams,
    SuiteParams,
    compose_logical,
    edit_remove_counted,
    edit_remove_irrelevant,
    evaluate,
    gen_question,
    gen_scene,
    generate_suite,
    make_rephrasings,
    random_logical,
    shift_answer_priors,
    split_head_tail,
    suite_hash,
    total_variation,
    verify_suite,
)
from mangolab.benchgen.questions import make_program
from mangolab.benchgen.scene import object_features
from mangolab.errors import ContractError


def brute(program, objects):
    """Independent evaluator: every attribute test done by enumerating index sets."""
    op = program[0]
    idx = range(len(objects))
    if op in ("exist", "count", "query", "verify"):
        filt = program[-1] if op in ("query", "verify") else program[1]
        hits = {i for i in idx if all(getattr(objects[i], k) == v for k, v in filt.items())}
        if op == "exist":
            return "yes" if len(hits) > 0 else "no"
        if op == "count":
            return str(len(hits))
        (only,) = hits
        value = getattr(objects[only], program[1])
        return value if op == "query" else ("no", "yes")[value == program[2]]
    truth = [brute(p, objects) == "yes" for p in program[1:]]
    table = {"not": lambda t: not t[0], "and": lambda t: t[0] and t[1], "or": lambda t: t[0] or t[1]}
    return ("no", "yes")[table[op](truth)]


def try_question(scene, q_type, rng):
    try:
        return gen_question(scene, q_type, rng)
    except ContractError:  # scene has no uniquely identifiable object
        return None


def obj(shape, color, size="small", key=0):
    return SceneObject(shape, color, size, key)


# ---------------------------------------------------------------- scenes


def test_gen_scene_determinism_and_bounds():
    params = SceneParams(K_max=5)
    a = gen_scene(np.random.default_rng(3), params, 0)
    b = gen_scene(np.random.default_rng(3), params, 0)
    assert a.to_dict() == b.to_dict()
    rng = np.random.default_rng(0)
    counts = [len(gen_scene(rng, params, i).objects) for i in range(500)]
    assert min(counts) >= 1 and max(counts) <= 5
    with pytest.raises(ContractError):
        gen_scene(rng, SceneParams(shapes=()), 0)


def test_identical_attributes_get_different_jitter():
    o = obj("circle", "red")
    f0 = object_features(o, 0, 1, 0.1)
    f1 = object_features(o, 0, 2, 0.1)
    assert not np.array_equal(f0, f1)
    assert np.array_equal(f0, object_features(o, 0, 1, 0.1))


# ---------------------------------------------------------------- questions


def test_semantics_examples():
    scene = Scene(0, [obj("circle", "red"), obj("square", "blue", key=1)])
    assert evaluate(["exist", {"color": "red", "shape": "circle"}], scene.objects) == "yes"
    three = Scene(1, [obj("circle", c, key=i) for i, c in enumerate(["red", "blue", "green"])])
    assert evaluate(["count", {"shape": "circle"}], three.objects) == "3"
    yes, no = ["exist", {"shape": "circle"}], ["exist", {"shape": "star"}]
    assert evaluate(["not", yes], scene.objects) == "no"
    assert evaluate(["and", yes, no], scene.objects) == "no"
    assert evaluate(["or", yes, no], scene.objects) == "yes"
    with pytest.raises(ContractError):
        evaluate(["query", "color", {"shape": "circle"}], three.objects)


def test_evaluator_matches_brute_force_on_random_cases():
    params = SceneParams()
    rng = np.random.default_rng(11)
    kinds = ("exist", "count", "query", "verify")
    checked = 0
    while checked < 10**4:
        scene = gen_scene(rng, params, checked)
        if rng.random() < 0.5:
            program = make_program(scene, kinds[int(rng.integers(4))], rng)
            if program is None:
                continue
        else:
            program = random_logical(scene, rng, int(rng.integers(1, 4)), "mixed").program
        assert evaluate(program, scene.objects) == brute(program, scene.objects), program
        checked += 1


def test_gen_question_answer_and_tokens():
    rng = np.random.default_rng(0)
    scene = gen_scene(rng, SceneParams(), 0)
    for q_type in ("existence", "attribute", "count"):
        q = gen_question(scene, q_type, rng)
        assert q.q_type == q_type and q.answer == brute(q.program, scene.objects)
        assert q.tokens and all(isinstance(t, str) for t in q.tokens)
    with pytest.raises(ContractError):
        gen_question(Scene(1, []), "count", rng)


def test_rephrasings_share_answer_and_group():
    rng = np.random.default_rng(1)
    scene = gen_scene(rng, SceneParams(), 0)
    q = gen_question(scene, "existence", rng)
    q.group_id = "g"
    reps = make_rephrasings(q, scene, 3, rng)
    assert len([q, *reps]) == 4
    assert {r.answer for r in reps} == {q.answer} and {r.group_id for r in reps} == {"g"}
    with pytest.raises(ContractError):
        make_rephrasings(q, scene, 0, rng)


def test_compose_logical_truth_table_and_contract():
    rng = np.random.default_rng(2)
    scene = Scene(0, [obj("circle", "red"), obj("square", "blue", key=1)])
    q_yes = gen_question(scene, "existence", rng, attrs=("shape",))
    while q_yes.answer != "yes":
        q_yes = gen_question(scene, "existence", rng, attrs=("shape",))
    q_no = gen_question(scene, "existence", rng, attrs=("shape",))
    while q_no.answer != "no":
        q_no = gen_question(scene, "existence", rng, attrs=("shape",))
    assert compose_logical(q_yes, None, "NOT", scene).answer == "no"
    assert compose_logical(q_yes, q_no, "AND", scene).answer == "no"
    assert compose_logical(q_yes, q_no, "OR", scene).answer == "yes"
    count = gen_question(scene, "count", rng)
    with pytest.raises(ContractError):
        compose_logical(count, q_yes, "and", scene)


def test_composed_answers_match_brute_force():
    rng = np.random.default_rng(3)
    params = SceneParams()
    for i in range(10**4):
        scene = gen_scene(rng, params, i)
        q = random_logical(scene, rng, int(rng.integers(1, 4)), "exist")
        assert q.answer == brute(q.program, scene.objects)


# ---------------------------------------------------------------- edits


def test_edit_examples():
    rng = np.random.default_rng(0)
    scene = Scene(0, [obj("circle", "red", key=i) for i in range(3)] + [obj("star", "blue", key=3)])
    count = gen_question(scene, "count", rng, attrs=("shape",))
    while count.program[1] != {"shape": "circle"}:
        count = gen_question(scene, "count", rng, attrs=("shape",))
    count.question_id = 7
    twin_scene, twin = edit_remove_counted(scene, count, 99, rng)
    assert count.answer == "3" and twin.answer == "2" and twin.source_id == 7
    assert len(twin_scene.objects) == 3
    one = Scene(1, [obj("circle", "red")])
    q1 = gen_question(one, "count", rng, attrs=("shape",))
    assert edit_remove_counted(one, q1, 100, rng)[1].answer == "0"
    star = ["count", {"shape": "star"}]
    zero = gen_question(one, "count", rng)
    zero.program = star
    with pytest.raises(ContractError):
        edit_remove_counted(one, zero, 101, rng)
    iv = edit_remove_irrelevant(scene, count, 102, rng)
    assert iv is not None and iv[1].answer == "3" and len(iv[0].objects) == 3


def test_edits_verified_by_recount():
    rng = np.random.default_rng(4)
    params = SceneParams()
    iv_done = cv_done = 0
    while iv_done < 10**4 or cv_done < 10**4:
        scene = gen_scene(rng, params, 0)
        q = try_question(scene, ("existence", "attribute", "count")[int(rng.integers(3))], rng)
        if q is None:
            continue
        edited = edit_remove_irrelevant(scene, q, 1, rng)
        if edited is not None and iv_done < 10**4:
            assert brute(q.program, edited[0].objects) == q.answer == edited[1].answer
            assert len(edited[0].objects) == len(scene.objects) - 1
            iv_done += 1
        if q.program[0] == "count" and q.answer != "0" and cv_done < 10**4:
            twin_scene, twin = edit_remove_counted(scene, q, 1, rng)
            assert int(brute(q.program, twin_scene.objects)) == int(q.answer) - 1 == int(twin.answer)
            cv_done += 1


# ---------------------------------------------------------------- splits


def test_total_variation():
    assert total_variation(Counter(a=1), Counter(a=5)) == 0.0
    assert total_variation(Counter(a=1), Counter(b=1)) == 1.0
    assert total_variation(Counter(a=3, b=1), Counter(a=1, b=3)) == 0.5


def test_shift_answer_priors_partition_and_floor():
    rng = np.random.default_rng(5)
    scene_rng = np.random.default_rng(6)
    pool = []
    for i in range(600):
        q = try_question(gen_scene(scene_rng, SceneParams(), i), ("existence", "attribute", "count")[i % 3], scene_rng)
        if q is not None:
            pool.append(q)
    for i, q in enumerate(pool):
        q.question_id = i
    train, evals, info = shift_answer_priors(pool, np.random.default_rng(7), 0.3)
    ids = [q.question_id for q in train + evals]
    assert len(ids) == len(set(ids))
    kept = {q.question_id for q in pool if q.type_key not in info["excluded"]}
    assert set(ids) == kept
    assert info["tv"] and min(info["tv"].values()) >= 0.3
    again = shift_answer_priors(pool, np.random.default_rng(7), 0.3)
    assert [q.question_id for q in again[0]] == [q.question_id for q in train]


def test_split_head_tail_rules():
    from mangolab.benchgen import QuestionRecord

    def rec(i, answer, group):
        return QuestionRecord(i, 0, ["x"], answer, "existence", ["exist", {}], group_id=group)

    group = [rec(i, "yes", "g") for i in range(80)] + [rec(80 + i, "no", "g") for i in range(20)]
    single = [rec(200, "yes", "s")]
    tagged = split_head_tail(group + single)
    assert all(q.ood_tag == ("head" if q.answer == "yes" else "tail") for q in tagged if q.group_id == "g")
    assert single[0].ood_tag == "head"
    assert all(q.ood_tag in ("head", "tail") for q in tagged)


# ---------------------------------------------------------------- suite


def test_suite_full_sweep(small_suite):
    verify_suite(small_suite)
    assert len(small_suite.questions) >= 10**4 // 2
    ids = small_suite.by_id()
    for q in small_suite.questions:
        assert q.answer == brute(q.program, small_suite.scenes[q.scene_id].objects)
    groups = defaultdict(set)
    for q in small_suite.benchmark("vqa_rep"):
        groups[q.group_id].add(q.answer)
    assert groups and all(len(a) == 1 for a in groups.values())
    assert all(len([q for q in small_suite.benchmark("vqa_rep") if q.group_id == g]) == 4 for g in list(groups)[:10])
    for bench, check in (("iv", lambda s, t: s == t), ("cv", lambda s, t: int(t) == int(s) - 1)):
        twins = [q for q in small_suite.benchmark(bench) if q.source_id is not None]
        assert twins and all(check(ids[t.source_id].answer, t.answer) for t in twins)
    subs = [q for q in small_suite.benchmark("introspect") if q.role == "sub"]
    assert subs and all(ids[q.main_id].role == "main" for q in subs)
    assert min(small_suite.shift_info["tv"].values()) >= small_suite.params.tv_floor


def test_eval_logical_questions_are_longer(small_suite):
    stats = small_suite.stats()["mean_length"]
    assert stats["eval/lol_comp"] > stats["train/logical"]
    assert stats["eval/vqa_rep"] > stats["train"]


def test_suite_regeneration_and_round_trip_are_byte_identical(small_suite, tmp_path):
    small_suite.save(tmp_path / "a")
    generate_suite(SuiteParams.small(0)).save(tmp_path / "b")
    assert suite_hash(tmp_path / "a") == suite_hash(tmp_path / "b")
    loaded = BenchmarkSuite.load(tmp_path / "a")
    loaded.save(tmp_path / "c")
    assert suite_hash(tmp_path / "a") == suite_hash(tmp_path / "c")
    (tmp_path / "a" / "questions.jsonl").write_text("")
    with pytest.raises(ContractError):
        BenchmarkSuite.load(tmp_path / "a")


def test_encode_shapes(small_suite):
    qs = small_suite.split("train")[:5]
    batch = small_suite.encode(qs)
    assert batch.regions.shape[:2] == (5, small_suite.params.K_max)
    assert batch.labels.sum(axis=1).tolist() == [1.0] * 5
    assert np.all(batch.token_ids[:, 0] == small_suite.token_index["[CLS]"])
