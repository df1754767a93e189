import json

import numpy as np
import pytest

from mangolab import autodiff as ad
from mangolab import checkpoint, optim
from mangolab.autodiff import Parameter
from mangolab.errors import ContractError, NumericFault
from mangolab.model import build_embeddings, crop_tokens, forward_logits, init_params
from mangolab.noise import MaskingConfig, PerturbationConfig, adversary_objective, gaussian_perturb_batch
from mangolab.trainer import (
    TrainConfig,
    clean_step,
    gaussian_step,
    init_state,
    load_state,
    lr_at_step,
    mango_outer_step,
    model_config_for,
    pgd_perturbation,
    pgd_step,
    run_training,
    sample_batch,
    save_model,
    save_state,
)

from conftest import random_batch, tiny_config


def small_state(mode="clean", **kw):
    base = dict(mode=mode, total_steps=50, batch_size=8, d=8, layers=1, heads=2, log_every=5)
    base.update(kw)
    config = TrainConfig(**base)
    mc = tiny_config(d=config.d, layers=config.layers, heads=config.heads)
    return init_state(config, mc)


def snapshot(state):
    return {p.name: p.data.copy() for p in state.all_parameters()}


def same(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


# ---------------------------------------------------------------- schedule and optimizer


def test_lr_schedule_examples():
    cfg = TrainConfig(total_steps=1000, peak_lr=8e-5)
    assert lr_at_step(cfg, 0) == 0.0
    assert abs(lr_at_step(cfg, 50) - 4e-5) < 1e-20
    assert lr_at_step(cfg, 1000) == 0.0
    assert max(lr_at_step(cfg, s) for s in range(1001)) == 8e-5
    with pytest.raises(ContractError):
        lr_at_step(cfg, 1001)
    with pytest.raises(ContractError):
        lr_at_step(cfg, -1)


def test_adamw_pure_decay_and_first_step():
    p = Parameter("w", np.array([2.0, -3.0]))
    p.tensor.grad = np.zeros(2)
    optim.adamw_update(p, 0.1, weight_decay=0.01)
    assert np.array_equal(p.data, np.array([2.0, -3.0]) * (1 - 0.001))
    q = Parameter("w", np.zeros(3))
    q.tensor.grad = np.array([0.5, -2.0, 1e-3])
    optim.adamw_update(q, 0.01, weight_decay=0.0)
    assert np.allclose(q.data, -0.01 * np.sign(q.grad), rtol=1e-4, atol=0)
    assert q.step_count == 1
    before = q.data.copy()
    optim.adamw_update(q, 0.01, weight_decay=0.0)
    step1 = before - 0.0
    assert not np.array_equal(q.data - before, step1)
    with pytest.raises(ContractError):
        optim.adamw_update(Parameter("z", np.zeros(1)), 0.1)


# ---------------------------------------------------------------- steps


def test_clean_step_converges_on_separable_batch():
    state = small_state(total_steps=200, peak_lr=1e-2)
    batch = random_batch(state.model_config, np.random.default_rng(0), B=8)
    first = last = None
    for _ in range(200):
        rec = clean_step(state, batch)
        first = rec["loss_clean"] if first is None else first
        last = rec["loss_clean"]
    assert last < 0.1 * first


def test_grad_accumulation_identity():
    batch = random_batch(tiny_config(d=8, layers=1, heads=2), np.random.default_rng(1), B=8)
    big = small_state()
    acc = small_state(grad_accum_steps=4)
    for _ in range(6):
        clean_step(big, batch)
        clean_step(acc, batch)
    a, b = snapshot(big), snapshot(acc)
    assert all(np.abs(a[k] - b[k]).max() <= 1e-10 for k in a)


@pytest.mark.parametrize("mode", ["gaussian", "pgd", "mango"])
def test_grad_accumulation_identity_other_modes(mode):
    # noise-free settings keep both runs independent of how draws split across micro-batches
    pert = PerturbationConfig(sigma=0.0, generator_lr=0.0, retrain_lr=0.0, zero_output_init=True)
    kw = dict(perturbation=pert, masking=MaskingConfig(0, 0))
    batch = random_batch(tiny_config(d=8, layers=1, heads=2), np.random.default_rng(1), B=8)
    big = small_state(mode, **kw)
    acc = small_state(mode, grad_accum_steps=2, **kw)
    step = {"gaussian": gaussian_step, "pgd": pgd_step, "mango": mango_outer_step}[mode]
    for _ in range(4):
        step(big, batch)
        step(acc, batch)
    a, b = snapshot(big), snapshot(acc)
    assert max(np.abs(a[k] - b[k]).max() for k in a) <= 1e-10


def test_zero_lr_leaves_parameters_bit_unchanged():
    state = small_state(peak_lr=0.0, weight_decay=0.01)
    before = snapshot(state)
    batch = random_batch(state.model_config, np.random.default_rng(0), B=8)
    for _ in range(3):
        clean_step(state, batch)
    assert same(before, snapshot(state))


def test_gaussian_sigma_zero_equals_clean():
    batch = random_batch(tiny_config(d=8, layers=1, heads=2), np.random.default_rng(2), B=8)
    a = small_state("clean")
    b = small_state("gaussian", perturbation=PerturbationConfig(sigma=0.0))
    for _ in range(5):
        clean_step(a, batch)
        gaussian_step(b, batch)
    assert same(snapshot(a), snapshot(b))


def test_gaussian_loss_exceeds_clean_on_average_at_init():
    gaps = []
    pert = PerturbationConfig(gaussian_fraction=1.0)
    for seed in range(100):
        rng = np.random.default_rng(seed)
        mc = tiny_config(d=32, heads=4, init_std=0.2)
        params = init_params(mc, rng)
        batch = random_batch(mc, rng, B=8)

        def loss(v, w):
            logits = forward_logits(mc, params, v, w, batch.region_mask, batch.token_mask)
            return ad.bce_with_logits_loss(logits, batch.labels).item()

        v, w = build_embeddings(mc, params, batch)
        v2, w2, _ = gaussian_perturb_batch(v, w, pert, rng)
        gaps.append(loss(v2, w2) - loss(v, w))
    assert np.mean(gaps) > 0


def test_pgd_zero_iters_equals_clean_on_duplicated_loss():
    batch = random_batch(tiny_config(d=8, layers=1, heads=2), np.random.default_rng(3), B=8)
    a = small_state("clean")
    b = small_state("pgd", pgd_iters=0)
    # first step runs at lr 0, so the moments carry the whole gradient
    clean_step(a, batch)
    pgd_step(b, batch)
    for pa, pb in zip(a.params, b.params):
        assert np.allclose(pb.moment1, 2 * pa.moment1, rtol=1e-12, atol=0)


def test_pgd_losses_nondecreasing_and_on_sphere():
    state = small_state("pgd")
    rng = np.random.default_rng(4)
    for _ in range(5):
        batch = crop_tokens(random_batch(state.model_config, rng, B=8))
        delta, losses = pgd_perturbation(
            state.model_config, state.params, batch, ("image", "text"), 3, 0.1, 1.0
        )
        assert len(losses) == 4
        assert all(b >= a - 1e-12 for a, b in zip(losses, losses[1:])), losses
        norms = np.linalg.norm(delta["text"], axis=-1)[batch.token_mask]
        assert np.abs(norms - 1.0).max() <= 1e-9
        assert not delta["image"][~batch.region_mask].any()
    assert all(p.grad is None or not p.grad.any() for p in state.params)


def test_mango_degenerate_equals_clean():
    kw = dict(
        clean_loss_weight=0.0,
        masking=MaskingConfig(0, 0),
        perturbation=PerturbationConfig(beta=0.0, zero_output_init=True, generator_lr=0.0, retrain_lr=0.0, T=2, retrain_interval=4),
    )
    batch = random_batch(tiny_config(d=8, layers=1, heads=2), np.random.default_rng(5), B=8)
    a = small_state("clean")
    b = small_state("mango", **kw)
    for _ in range(10):
        clean_step(a, batch)
        mango_outer_step(b, batch)
    pa = {p.name: p.data for p in a.params}
    pb = {p.name: p.data for p in b.params}
    assert same(pa, pb)


def test_generator_update_and_reinit_schedule():
    state = small_state("mango", perturbation=PerturbationConfig(T=3, retrain_interval=6, generator_lr=1e-2, retrain_lr=5e-3))
    batch = random_batch(state.model_config, np.random.default_rng(6), B=8)
    gens = lambda: {p.name: p.data.copy() for g in state.generators.values() for p in g}
    history = []
    for _ in range(12):
        before = gens()
        mango_outer_step(state, batch)
        history.append(not same(before, gens()))
        if state.step % 6 == 0:
            assert all(g.lr == 5e-3 for g in state.generators.values())
            assert all(p.step_count == 0 for g in state.generators.values() for p in g)
    assert history == [s % 3 == 0 for s in range(1, 13)]


def test_generator_update_increases_adversary_objective():
    state = small_state("mango", perturbation=PerturbationConfig(generator_lr=1e-2, T=20))
    rng = np.random.default_rng(7)
    batch = crop_tokens(random_batch(state.model_config, rng, B=16))
    pert = state.config.perturbation

    def objective():
        return adversary_objective(state.model_config, state.params, state.generators, batch, pert, np.random.default_rng(0)).item()

    before = objective()
    for _ in range(pert.T):
        ad.backward(adversary_objective(state.model_config, state.params, state.generators, batch, pert, rng))
    from mangolab.trainer import _generator_ascent

    state.config = TrainConfig(**{**state.config.to_dict(), "adv_loss_weight": 1.0})
    _generator_ascent(state)
    assert objective() > before


# ---------------------------------------------------------------- driver


@pytest.fixture(scope="module")
def driver_config():
    return dict(total_steps=12, batch_size=8, d=8, layers=1, heads=2, log_every=4)


def test_sample_batch_is_seeded(small_suite, driver_config):
    cfg = TrainConfig(**driver_config)
    data = small_suite.encode(small_suite.split("train"), small_suite.params.L_max)
    a = init_state(cfg, model_config_for(cfg, small_suite))
    b = init_state(cfg, model_config_for(cfg, small_suite))
    assert np.array_equal(sample_batch(a, data).labels, sample_batch(b, data).labels)


@pytest.mark.parametrize("mode", ["clean", "mango"])
def test_determinism_and_resume(small_suite, driver_config, tmp_path, mode):
    cfg = TrainConfig(mode=mode, **driver_config, perturbation=PerturbationConfig(T=2, retrain_interval=6, generator_lr=1e-3))
    full, _ = run_training(cfg, small_suite, run_dir=tmp_path / "a")
    again, _ = run_training(cfg, small_suite, run_dir=tmp_path / "b")
    assert checkpoint.file_hash(tmp_path / "a" / "state.ckpt") == checkpoint.file_hash(tmp_path / "b" / "state.ckpt")
    part, _ = run_training(cfg, small_suite, run_dir=tmp_path / "c", stop_at=5)
    resumed = load_state(tmp_path / "c" / "state.ckpt")
    assert resumed.step == 5
    run_training(cfg, small_suite, state=resumed, run_dir=tmp_path / "c")
    assert checkpoint.file_hash(tmp_path / "a" / "state.ckpt") == checkpoint.file_hash(tmp_path / "c" / "state.ckpt")
    assert checkpoint.file_hash(tmp_path / "a" / "model.ckpt") == checkpoint.file_hash(tmp_path / "c" / "model.ckpt")
    log = [json.loads(line) for line in open(tmp_path / "a" / "train_log.jsonl")]
    assert [r["step"] for r in log] == [4, 8, 12]
    assert set(log[0]) == {"step", "mode", "lr", "loss_clean", "loss_adv", "r_kl", "delta_norm_mean"}


def test_resume_rejects_different_config(small_suite, driver_config, tmp_path):
    cfg = TrainConfig(**driver_config)
    state, _ = run_training(cfg, small_suite, stop_at=2)
    other = TrainConfig(**{**driver_config, "peak_lr": 1e-4})
    with pytest.raises(ContractError):
        run_training(other, small_suite, state=state)


def test_numeric_fault_aborts_with_record(small_suite, driver_config, tmp_path):
    cfg = TrainConfig(**driver_config)
    state = init_state(cfg, model_config_for(cfg, small_suite))
    state.params["head.fc1.w"].data[:] = np.nan
    with pytest.raises(NumericFault) as info:
        run_training(cfg, small_suite, state=state, run_dir=tmp_path)
    assert info.value.record["step"] == 0
    last = json.loads(open(tmp_path / "train_log.jsonl").read().splitlines()[-1])
    assert "fault" in last


def test_checkpoint_periodic_and_state_round_trip(small_suite, driver_config, tmp_path):
    cfg = TrainConfig(**{**driver_config, "checkpoint_every": 6})
    state, _ = run_training(cfg, small_suite, run_dir=tmp_path)
    assert (tmp_path / "state_000006.ckpt").exists() and (tmp_path / "state_000012.ckpt").exists()
    h = save_state(state, tmp_path / "again.ckpt")
    assert h == checkpoint.file_hash(tmp_path / "state.ckpt")
    assert save_model(state, tmp_path / "m.ckpt", small_suite) == checkpoint.file_hash(tmp_path / "model.ckpt")


def test_train_config_round_trip_and_validation():
    cfg = TrainConfig(mode="mango", masking={"p_mask_img": 0.2, "p_mask_txt": 0.1})
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ContractError):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ContractError):
        TrainConfig(mode="fgsm")
    with pytest.raises(ContractError):
        TrainConfig(batch_size=10, grad_accum_steps=3)
