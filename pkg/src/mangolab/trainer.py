"""Training loops: clean finetuning, Gaussian augmentation, a PGD baseline
and the alternating generator/model loop.

One run is strictly sequential. All randomness comes from five named
streams spawned from the run seed, so a run is a pure function of
(config, suite) and a saved state resumes bit-identically.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint
from . import optim
from .autodiff import Tensor
from .benchgen.suite import BenchmarkSuite
from .errors import ContractError, NumericFault
from .model import (
    EmbeddingBatch,
    ModelConfig,
    ModelParams,
    build_embeddings,
    crop_tokens,
    forward_logits,
    init_params,
)
from .noise import (
    MaskingConfig,
    NoiseGenerator,
    PerturbationConfig,
    gaussian_perturb_batch,
    mango_terms,
    project_to_sphere,
    reinit_generator,
)

log = logging.getLogger(__name__)

MODES = ("clean", "gaussian", "pgd", "mango")
STREAMS = ("init", "data", "noise", "mask", "gen")
STATE_FORMAT = "mangolab-train-state"


@dataclass
class TrainConfig:
    total_steps: int = 600
    batch_size: int = 32
    grad_accum_steps: int = 1
    peak_lr: float = 3e-3
    warmup_fraction: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    mode: str = "clean"
    perturbation: PerturbationConfig = field(default_factory=lambda: PerturbationConfig(generator_lr=1e-3))
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    seed: int = 0
    pgd_iters: int = 3
    pgd_step_size: float = 0.4
    clean_loss_weight: float = 1.0
    adv_loss_weight: float = 1.0
    log_every: int = 10
    checkpoint_every: int | None = None
    d: int = 32
    layers: int = 2
    heads: int = 4
    init_std: float = 0.2
    embed_init_std: float = 1.0
    region_pos: bool = False

    def __post_init__(self):
        if isinstance(self.perturbation, dict):
            self.perturbation = PerturbationConfig(**self.perturbation)
        if isinstance(self.masking, dict):
            self.masking = MaskingConfig(**self.masking)
        if self.mode not in MODES:
            raise ContractError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.total_steps < 1:
            raise ContractError("total_steps must be at least 1")
        if not 0 < self.warmup_fraction < 1:
            raise ContractError("warmup_fraction must lie in (0, 1)")
        if self.batch_size < 1 or self.grad_accum_steps < 1:
            raise ContractError("batch_size and grad_accum_steps must be positive")
        if self.batch_size % self.grad_accum_steps:
            raise ContractError("batch_size must split evenly into grad_accum_steps micro-batches")
        if self.pgd_iters < 0:
            raise ContractError("pgd_iters must be nonnegative")
        if self.log_every < 1:
            raise ContractError("log_every must be positive")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["perturbation"] = self.perturbation.to_dict()
        out["masking"] = self.masking.to_dict()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


def lr_at_step(config: TrainConfig, step: int) -> float:
    return optim.lr_at_step(config.total_steps, config.peak_lr, config.warmup_fraction, step)


def model_config_for(config: TrainConfig, suite: BenchmarkSuite) -> ModelConfig:
    tok = suite.token_index
    return ModelConfig(
        d_v=suite.params.scene_params().d_v,
        d=config.d,
        K_max=suite.params.K_max,
        L_max=suite.params.L_max,
        layers=config.layers,
        heads=config.heads,
        A=len(suite.answers),
        vocab=len(suite.vocab),
        cls_id=tok["[CLS]"],
        mask_id=tok["[MASK]"],
        pad_id=tok["[PAD]"],
        init_std=config.init_std,
        embed_init_std=config.embed_init_std,
        region_pos=config.region_pos,
    )


@dataclass
class TrainState:
    config: TrainConfig
    model_config: ModelConfig
    params: ModelParams
    rngs: dict[str, np.random.Generator]
    generators: dict[str, NoiseGenerator] = field(default_factory=dict)
    step: int = 0
    history: list[dict] = field(default_factory=list)

    def all_parameters(self):
        yield from self.params
        for gen in self.generators.values():
            yield from gen


def init_state(config: TrainConfig, model_config: ModelConfig) -> TrainState:
    seqs = np.random.SeedSequence(config.seed).spawn(len(STREAMS))
    rngs = {name: np.random.default_rng(s) for name, s in zip(STREAMS, seqs)}
    params = init_params(model_config, rngs["init"])
    state = TrainState(config, model_config, params, rngs)
    if config.mode == "mango":
        pert = config.perturbation
        for modality in pert.modalities:
            state.generators[modality] = NoiseGenerator.create(
                modality,
                model_config.d,
                rngs["gen"],
                pert.generator_lr,
                pert.generator_init_std,
                pert.zero_output_init,
            )
    return state


# ---------------------------------------------------------------- batches


def micro_batches(batch, n: int) -> list[EmbeddingBatch]:
    if isinstance(batch, (list, tuple)):
        return list(batch)
    if n == 1:
        return [batch]
    if batch.size % n:
        raise ContractError(f"batch of {batch.size} does not split into {n} micro-batches")
    m = batch.size // n
    return [batch.take(slice(i * m, (i + 1) * m)) for i in range(n)]


def sample_batch(state: TrainState, data: EmbeddingBatch) -> EmbeddingBatch:
    n = data.size
    size = state.config.batch_size
    idx = state.rngs["data"].choice(n, size=size, replace=size > n)
    batch = data.take(np.sort(idx))
    if not batch.labels.any(axis=1).all():
        raise ContractError("batch holds an example with no positive answer")
    return batch


def _finite(state: TrainState, value: float, what: str) -> float:
    if not math.isfinite(value):
        record = {"step": state.step, "mode": state.config.mode, "quantity": what, "value": repr(value)}
        raise NumericFault(f"non-finite {what} at step {state.step}", record)
    return value


def _apply_model_update(state: TrainState) -> float:
    cfg = state.config
    lr = lr_at_step(cfg, state.step)
    for p in state.params:
        if p.grad is None:
            p.tensor.grad = np.zeros_like(p.data)
        if not np.isfinite(p.grad).all():
            raise NumericFault(
                f"non-finite gradient in {p.name} at step {state.step}",
                {"step": state.step, "mode": cfg.mode, "quantity": "grad", "param": p.name},
            )
        optim.adamw_update(p, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.weight_decay, cfg.adam_eps)
    ad.zero_grads(state.params)
    return lr


def _scaled(loss: Tensor, weight: float) -> Tensor:
    return loss if weight == 1.0 else loss * weight


# ---------------------------------------------------------------- steps


def clean_step(state: TrainState, batch) -> dict:
    """One descent update on clean BCE; a list of batches is one accumulated step."""
    parts = micro_batches(batch, state.config.grad_accum_steps)
    n = len(parts)
    total = 0.0
    for part in parts:
        part = crop_tokens(part)
        v, w = build_embeddings(state.model_config, state.params, part)
        logits = forward_logits(state.model_config, state.params, v, w, part.region_mask, part.token_mask)
        loss = ad.bce_with_logits_loss(logits, part.labels)
        total += _finite(state, loss.item(), "loss_clean") / n
        ad.backward(loss if n == 1 else loss / n)
    lr = _apply_model_update(state)
    return _record(state, lr, loss_clean=total)


def gaussian_step(state: TrainState, batch) -> dict:
    """Clean step on embeddings with Gaussian noise on one modality of some examples."""
    parts = micro_batches(batch, state.config.grad_accum_steps)
    n = len(parts)
    pert = state.config.perturbation
    total = 0.0
    for part in parts:
        part = crop_tokens(part)
        v, w = build_embeddings(state.model_config, state.params, part)
        v, w, _ = gaussian_perturb_batch(v, w, pert, state.rngs["noise"])
        logits = forward_logits(state.model_config, state.params, v, w, part.region_mask, part.token_mask)
        loss = ad.bce_with_logits_loss(logits, part.labels)
        total += _finite(state, loss.item(), "loss_clean") / n
        ad.backward(loss if n == 1 else loss / n)
    lr = _apply_model_update(state)
    return _record(state, lr, loss_clean=total)


def pgd_perturbation(
    config: ModelConfig,
    params: ModelParams,
    batch: EmbeddingBatch,
    modalities,
    iters: int,
    step_size: float,
    epsilon: float,
) -> tuple[dict[str, np.ndarray], list[float]]:
    """Per-example perturbations from ``iters`` normalized ascent steps on BCE.

    Starts from zero; every step moves each position along its gradient
    direction and projects back onto the epsilon sphere. Returns the deltas
    and the perturbed loss before each step and after the last one.
    Parameter gradients are left untouched.
    """
    saved = [None if p.grad is None else p.grad.copy() for p in params]
    v0, w0 = build_embeddings(config, params, batch)
    v0, w0 = v0.detach(), w0.detach()
    delta = {m: np.zeros((v0 if m == "image" else w0).shape) for m in modalities}
    valid = {"image": batch.region_mask[..., None], "text": batch.token_mask[..., None]}
    losses = []
    for k in range(iters + 1):
        leaves = {m: Tensor(delta[m], requires_grad=True) for m in modalities}
        v = v0 + leaves["image"] if "image" in leaves else v0
        w = w0 + leaves["text"] if "text" in leaves else w0
        logits = forward_logits(config, params, v, w, batch.region_mask, batch.token_mask)
        loss = ad.bce_with_logits_loss(logits, batch.labels)
        losses.append(loss.item())
        if k == iters:
            break
        ad.backward(loss)
        for m in modalities:
            g = leaves[m].grad
            norm = np.sqrt((g * g).sum(axis=-1, keepdims=True))
            direction = np.divide(g, norm, out=np.zeros_like(g), where=norm > 0)
            stepped = (delta[m] + step_size * direction) * valid[m]
            delta[m] = project_to_sphere(stepped, epsilon).data
    for p, g in zip(params, saved):
        p.tensor.grad = g
    return delta, losses


def pgd_step(state: TrainState, batch, pgd_iters: int | None = None, pgd_step_size: float | None = None) -> dict:
    """Descend on clean BCE plus BCE at PGD-found embedding perturbations."""
    cfg = state.config
    iters = cfg.pgd_iters if pgd_iters is None else pgd_iters
    eta = cfg.pgd_step_size if pgd_step_size is None else pgd_step_size
    pert = cfg.perturbation
    parts = micro_batches(batch, cfg.grad_accum_steps)
    n = len(parts)
    tot_clean = tot_adv = 0.0
    for part in parts:
        part = crop_tokens(part)
        delta, _ = pgd_perturbation(
            state.model_config, state.params, part, pert.modalities, iters, eta, pert.epsilon
        )
        v, w = build_embeddings(state.model_config, state.params, part)
        logits_clean = forward_logits(state.model_config, state.params, v, w, part.region_mask, part.token_mask)
        if "image" in delta:
            v = v + Tensor(delta["image"])
        if "text" in delta:
            w = w + Tensor(delta["text"])
        logits_adv = forward_logits(state.model_config, state.params, v, w, part.region_mask, part.token_mask)
        bce_clean = ad.bce_with_logits_loss(logits_clean, part.labels)
        l_adv = ad.bce_with_logits_loss(logits_adv, part.labels)
        loss = _combine(cfg, bce_clean, l_adv)
        tot_clean += _finite(state, bce_clean.item(), "loss_clean") / n
        tot_adv += _finite(state, l_adv.item(), "loss_adv") / n
        ad.backward(loss if n == 1 else loss / n)
    lr = _apply_model_update(state)
    return _record(state, lr, loss_clean=tot_clean, loss_adv=tot_adv, delta_norm_mean=pert.epsilon if iters else 0.0)


def _combine(cfg: TrainConfig, clean: Tensor, adv: Tensor) -> Tensor:
    if cfg.clean_loss_weight == 0:
        return _scaled(adv, cfg.adv_loss_weight)
    if cfg.adv_loss_weight == 0:
        return _scaled(clean, cfg.clean_loss_weight)
    return _scaled(clean, cfg.clean_loss_weight) + _scaled(adv, cfg.adv_loss_weight)


def mango_outer_step(state: TrainState, batch) -> dict:
    """Model descent on clean BCE + (L_std + beta R_kl); generator gradients of
    the adversary objective accumulate and are applied as one ascent update
    every T steps. Generators are redrawn at retrain-interval boundaries."""
    cfg = state.config
    pert = cfg.perturbation
    parts = micro_batches(batch, cfg.grad_accum_steps)
    n = len(parts)
    sums = {"loss_clean": 0.0, "loss_adv": 0.0, "r_kl": 0.0, "delta_norm_mean": 0.0}
    for part in parts:
        terms = mango_terms(
            state.model_config,
            state.params,
            state.generators,
            crop_tokens(part),
            pert,
            state.rngs["noise"],
            cfg.masking,
            state.rngs["mask"],
        )
        adv = terms.adversary_objective(pert.beta)
        loss = _combine(cfg, terms.bce_clean, adv)
        sums["loss_clean"] += _finite(state, terms.bce_clean.item(), "loss_clean") / n
        sums["loss_adv"] += _finite(state, terms.l_std.item(), "loss_adv") / n
        sums["r_kl"] += _finite(state, terms.r_kl.item(), "r_kl") / n
        sums["delta_norm_mean"] += terms.delta_norm_mean / n
        ad.backward(loss if n == 1 else loss / n)
    lr = _apply_model_update(state)
    after = state.step + 1  # outer steps completed once this one is recorded
    if after % pert.T == 0:
        _generator_ascent(state)
    if pert.retrain_interval is not None and after % pert.retrain_interval == 0:
        for gen in state.generators.values():
            reinit_generator(gen, state.rngs["gen"], pert.retrain_lr)
    return _record(state, lr, **sums)


def _generator_ascent(state: TrainState) -> None:
    cfg = state.config
    scale = cfg.perturbation.T * cfg.adv_loss_weight
    for gen in state.generators.values():
        for p in gen:
            if p.grad is None or scale == 0:
                continue
            ascent = -p.grad / scale
            optim.adamw_update(p, gen.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.weight_decay, cfg.adam_eps, grad=ascent)
        ad.zero_grads(gen)


def _record(state: TrainState, lr: float, **values) -> dict:
    state.step += 1
    rec = {
        "step": state.step,
        "mode": state.config.mode,
        "lr": lr,
        "loss_clean": values.get("loss_clean"),
        "loss_adv": values.get("loss_adv"),
        "r_kl": values.get("r_kl"),
        "delta_norm_mean": values.get("delta_norm_mean"),
    }
    return rec


STEP_FUNCTIONS = {"clean": clean_step, "gaussian": gaussian_step, "pgd": pgd_step, "mango": mango_outer_step}


# ---------------------------------------------------------------- persistence


def model_meta(state: TrainState, suite: BenchmarkSuite | None = None) -> dict:
    meta = {"model_config": state.model_config.to_dict()}
    if suite is not None:
        meta["vocab"] = list(suite.vocab)
        meta["answers"] = list(suite.answers)
    return meta


def save_model(state: TrainState, path, suite: BenchmarkSuite | None = None) -> str:
    """Model parameters only; independent of mode, so equal weights hash equal."""
    return checkpoint.save(path, state.params.state_arrays(), model_meta(state, suite))


def save_generators(state: TrainState, path) -> str:
    arrays = {}
    for gen in state.generators.values():
        arrays.update(gen.state_arrays())
    return checkpoint.save(path, arrays, {"width": state.model_config.d, "modalities": list(state.generators)})


def load_model(path) -> tuple[ModelConfig, ModelParams, dict]:
    arrays, meta = checkpoint.load(path)
    config = ModelConfig(**meta["model_config"])
    params = init_params(config, np.random.default_rng(0))
    params.load_arrays(arrays)
    return config, params, meta


def _param_arrays(prefix: str, params) -> tuple[dict, dict]:
    arrays, counts = {}, {}
    for p in params:
        arrays[f"{prefix}{p.name}"] = p.data
        arrays[f"{prefix}{p.name}#m1"] = p.moment1
        arrays[f"{prefix}{p.name}#m2"] = p.moment2
        if p.grad is not None:
            arrays[f"{prefix}{p.name}#grad"] = p.grad
        counts[p.name] = p.step_count
    return arrays, counts


def _restore_params(prefix: str, params, arrays: dict, counts: dict) -> None:
    for p in params:
        p.tensor.data = arrays[f"{prefix}{p.name}"].copy()
        p.moment1 = arrays[f"{prefix}{p.name}#m1"].copy()
        p.moment2 = arrays[f"{prefix}{p.name}#m2"].copy()
        g = arrays.get(f"{prefix}{p.name}#grad")
        p.tensor.grad = None if g is None else g.copy()
        p.step_count = counts[p.name]


def save_state(state: TrainState, path) -> str:
    arrays, counts = _param_arrays("model/", state.params)
    gen_meta = {}
    for modality, gen in state.generators.items():
        a, c = _param_arrays("gen/", gen)
        arrays.update(a)
        counts.update(c)
        gen_meta[modality] = {"lr": gen.lr}
    meta = {
        "kind": STATE_FORMAT,
        "step": state.step,
        "config": state.config.to_dict(),
        "model_config": state.model_config.to_dict(),
        "step_counts": counts,
        "generators": gen_meta,
        "rngs": {k: r.bit_generator.state for k, r in state.rngs.items()},
        "history": state.history,
    }
    return checkpoint.save(path, arrays, meta)


def load_state(path) -> TrainState:
    arrays, meta = checkpoint.load(path)
    if meta.get("kind") != STATE_FORMAT:
        raise ContractError(f"{path} is not a training-state checkpoint")
    config = TrainConfig.from_dict(meta["config"])
    model_config = ModelConfig(**meta["model_config"])
    state = init_state(config, model_config)
    _restore_params("model/", state.params, arrays, meta["step_counts"])
    for modality, gen in state.generators.items():
        _restore_params("gen/", gen, arrays, meta["step_counts"])
        gen.lr = meta["generators"][modality]["lr"]
    for name, r in state.rngs.items():
        r.bit_generator.state = meta["rngs"][name]
    state.step = meta["step"]
    state.history = meta["history"]
    return state


# ---------------------------------------------------------------- driver


def run_training(
    config: TrainConfig,
    suite: BenchmarkSuite,
    state: TrainState | None = None,
    run_dir=None,
    stop_at: int | None = None,
) -> tuple[TrainState, list[dict]]:
    """Run (or resume) training to ``total_steps`` (or ``stop_at``).

    With ``run_dir`` set, log records are appended to ``train_log.jsonl`` and
    state checkpoints are written every ``checkpoint_every`` steps plus a
    final ``state.ckpt`` and ``model.ckpt`` (plus ``generators.ckpt`` in
    mango mode).
    """
    if state is None:
        state = init_state(config, model_config_for(config, suite))
    elif state.config.to_dict() != config.to_dict():
        raise ContractError("resumed state was produced under a different configuration")
    end = config.total_steps if stop_at is None else min(stop_at, config.total_steps)
    data = suite.encode(suite.split("train"), state.model_config.L_max)
    step_fn = STEP_FUNCTIONS[config.mode]
    log_file = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(run_dir / "train_log.jsonl", "a")
    records = []
    try:
        while state.step < end:
            batch = sample_batch(state, data)
            rec = step_fn(state, batch)
            if state.step % config.log_every == 0 or state.step == config.total_steps:
                state.history.append(rec)
                records.append(rec)
                if log_file:
                    log_file.write(json.dumps(rec, sort_keys=True) + "\n")
                    log_file.flush()
            if run_dir is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
                save_state(state, run_dir / f"state_{state.step:06d}.ckpt")
    except NumericFault as fault:
        log.error("aborting: %s %s", fault, fault.record)
        if log_file:
            log_file.write(json.dumps({"fault": fault.record}, sort_keys=True) + "\n")
        raise
    finally:
        if log_file:
            log_file.close()
    if run_dir is not None:
        save_state(state, run_dir / "state.ckpt")
        save_model(state, run_dir / "model.ckpt", suite)
        if state.generators:
            save_generators(state, run_dir / "generators.ckpt")
    return state, records
