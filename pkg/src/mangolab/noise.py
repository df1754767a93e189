"""Embedding-space perturbations: Gaussian augmentation, learned adversarial
noise generators, the adversary's objective and random masking."""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ContractError, DomainError, ShapeError
from .model import (
    EmbeddingBatch,
    ModelConfig,
    ModelParams,
    build_embeddings,
    crop_tokens,
    forward_logits,
    truncated_normal,
)

MODALITIES = ("image", "text")
PROB_FLOOR = 1e-8


@dataclass
class PerturbationConfig:
    epsilon: float = 1.0
    sigma: float = 0.5
    gaussian_fraction: float = 0.5
    gaussian_modality: str = "image"
    beta: float = 1.0
    T: int = 20
    retrain_interval: int | None = 400
    retrain_lr: float = 1e-4
    generator_lr: float = 1e-5
    modalities: tuple[str, ...] = MODALITIES
    generator_init_std: float = 0.02
    zero_output_init: bool = False

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        if self.epsilon <= 0:
            raise ContractError("epsilon must be positive")
        if self.sigma < 0:
            raise ContractError("sigma must be nonnegative")
        if not 0 <= self.gaussian_fraction <= 1:
            raise ContractError("gaussian_fraction must lie in [0, 1]")
        if self.T < 1:
            raise ContractError("T must be at least 1")
        if self.retrain_interval is not None and self.retrain_interval < self.T:
            raise ContractError("retrain_interval must be >= T")
        bad = set(self.modalities) - set(MODALITIES) | ({self.gaussian_modality} - set(MODALITIES))
        if bad:
            raise ContractError(f"unknown modality {sorted(bad)}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["modalities"] = list(self.modalities)
        return out


@dataclass
class MaskingConfig:
    p_mask_img: float = 0.15
    p_mask_txt: float = 0.15

    def __post_init__(self):
        for name in ("p_mask_img", "p_mask_txt"):
            if not 0 <= getattr(self, name) <= 1:
                raise ContractError(f"{name} must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- primitives


def sample_gaussian(shape, sigma: float, rng: np.random.Generator) -> Tensor:
    if sigma < 0:
        raise DomainError("sigma must be nonnegative")
    return Tensor(rng.standard_normal(shape) * sigma)


def project_to_sphere(delta, epsilon: float) -> Tensor:
    if epsilon <= 0:
        raise DomainError("epsilon must be positive")
    return ad.scale_to_norm(delta, epsilon)


def _row_rngs(rng, n: int) -> list[np.random.Generator] | None:
    if isinstance(rng, np.random.Generator):
        return None
    rngs = list(rng)
    if len(rngs) != n:
        raise ContractError(f"need {n} per-example generators, got {len(rngs)}")
    return rngs


def gaussian_perturb_batch(
    v_embed: Tensor,
    w_embed: Tensor,
    config: PerturbationConfig,
    rng: np.random.Generator,
) -> tuple[Tensor, Tensor, np.ndarray]:
    """Add N(0, sigma^2) noise to one modality of a random subset of examples.

    Returns the two embedding tensors and the boolean selection vector.
    """
    B = v_embed.shape[0]
    selected = rng.random(B) < config.gaussian_fraction
    if config.sigma == 0 or not selected.any():
        return v_embed, w_embed, selected
    target = v_embed if config.gaussian_modality == "image" else w_embed
    noise = sample_gaussian(target.shape, config.sigma, rng).data
    noise = noise * selected[:, None, None]
    noisy = target + Tensor(noise)
    if config.gaussian_modality == "image":
        return noisy, w_embed, selected
    return v_embed, noisy, selected


# ---------------------------------------------------------------- generators


class NoiseGenerator:
    """Per-position map R^d -> R^d: affine, GELU, affine."""

    def __init__(self, modality: str, width: int, params: dict[str, Parameter], lr: float):
        if modality not in MODALITIES:
            raise ContractError(f"unknown modality {modality!r}")
        self.modality = modality
        self.width = width
        self.params = params
        self.lr = lr

    @staticmethod
    def param_shapes(modality: str, width: int) -> dict[str, tuple[int, ...]]:
        p = f"gen.{modality}."
        return {p + "fc1.w": (width, width), p + "fc1.b": (width,), p + "fc2.w": (width, width), p + "fc2.b": (width,)}

    @classmethod
    def create(
        cls,
        modality: str,
        width: int,
        rng: np.random.Generator,
        lr: float,
        init_std: float = 0.02,
        zero_output: bool = False,
    ) -> "NoiseGenerator":
        gen = cls(modality, width, {}, lr)
        gen._draw(rng, init_std, zero_output)
        return gen

    def _draw(self, rng, init_std, zero_output):
        params = {}
        for name, shape in self.param_shapes(self.modality, self.width).items():
            if name.endswith(".b") or (zero_output and ".fc2." in name):
                data = np.zeros(shape)
            else:
                data = truncated_normal(rng, shape, init_std)
            params[name] = Parameter(name, data)
        self.params = params
        self._init_std = init_std
        self._zero_output = zero_output

    def __iter__(self):
        return iter(self.params.values())

    def tensors(self) -> list[Tensor]:
        return [p.tensor for p in self.params.values()]

    def forward(self, alpha: Tensor) -> Tensor:
        if alpha.shape[-1] != self.width:
            raise ShapeError(f"generator width {self.width} != input width {alpha.shape[-1]}")
        p = f"gen.{self.modality}."
        h = ad.matmul(alpha, self.params[p + "fc1.w"].tensor) + self.params[p + "fc1.b"].tensor
        h = ad.gelu(h)
        return ad.matmul(h, self.params[p + "fc2.w"].tensor) + self.params[p + "fc2.b"].tensor

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data for n, p in self.params.items()}


def generate_adversarial(generator: NoiseGenerator, shape, epsilon: float, rng: np.random.Generator) -> Tensor:
    """delta = sphere projection of g(alpha), alpha ~ N(0, I)."""
    if shape[-1] != generator.width:
        raise ShapeError(f"requested width {shape[-1]} != generator width {generator.width}")
    alpha = Tensor(rng.standard_normal(shape))
    return project_to_sphere(generator.forward(alpha), epsilon)


def reinit_generator(
    generator: NoiseGenerator,
    rng: np.random.Generator,
    lr: float | None = None,
) -> NoiseGenerator:
    """Fresh parameters from the init distribution, optimizer state cleared."""
    generator._draw(rng, generator._init_std, generator._zero_output)
    if lr is not None:
        generator.lr = lr
    return generator


# ---------------------------------------------------------------- objective


def symmetric_kl(p, q, check: bool = True) -> Tensor:
    """Batch mean of KL(p||q) + KL(q||p) over probability rows.

    Entries are clamped at 1e-8 before the logs. Uses the identity
    KL(p||q) + KL(q||p) = sum (p - q)(log p - log q).
    """
    p, q = ad.as_tensor(p), ad.as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"{p.shape} vs {q.shape}")
    if check:
        for t in (p, q):
            if np.abs(t.data.sum(axis=-1) - 1.0).max() > 1e-6:
                raise ContractError("probability rows must sum to 1")
    pc = ad.clamp_min(p, PROB_FLOOR)
    qc = ad.clamp_min(q, PROB_FLOOR)
    per_row = ((pc - qc) * (ad.log(pc) - ad.log(qc))).sum(axis=-1)
    return per_row.mean()


def insert_mask_tokens(
    token_ids: np.ndarray,
    token_mask: np.ndarray,
    p_mask_txt: float,
    L_max: int,
    rng,
    mask_id: int,
    pad_id: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Insert Binomial(L_valid, p) [MASK] tokens into random gaps after [CLS].

    Output width is ``L_max``; overlong sequences are cut from the right.
    """
    if not 0 <= p_mask_txt <= 1:
        raise DomainError("p_mask_txt must lie in [0, 1]")
    B = token_ids.shape[0]
    rngs = _row_rngs(rng, B)
    out_ids = np.full((B, L_max), pad_id, dtype=np.int64)
    out_mask = np.zeros((B, L_max), dtype=bool)
    for i in range(B):
        r = rngs[i] if rngs else rng
        seq = token_ids[i][token_mask[i]].tolist()
        n_valid = len(seq)
        n_insert = int(r.binomial(n_valid, p_mask_txt)) if p_mask_txt > 0 else 0
        if n_insert:
            gaps = np.sort(r.integers(1, n_valid + 1, size=n_insert))
            merged = []
            g = 0
            for pos in range(n_valid + 1):
                while g < n_insert and gaps[g] == pos:
                    merged.append(mask_id)
                    g += 1
                if pos < n_valid:
                    merged.append(seq[pos])
            seq = merged
        seq = seq[:L_max]
        out_ids[i, : len(seq)] = seq
        out_mask[i, : len(seq)] = True
    return out_ids, out_mask


def region_keep_mask(region_mask: np.ndarray, p_mask_img: float, rng) -> np.ndarray:
    if not 0 <= p_mask_img <= 1:
        raise DomainError("p_mask_img must lie in [0, 1]")
    rngs = _row_rngs(rng, region_mask.shape[0])
    if rngs:
        draws = np.stack([r.random(region_mask.shape[1]) for r in rngs])
    else:
        draws = rng.random(region_mask.shape)
    return ~(region_mask & (draws < p_mask_img))


def apply_random_region_mask(v_embed: Tensor, region_mask: np.ndarray, p_mask_img: float, rng) -> Tensor:
    """Zero each valid region embedding with probability p; attention mask is untouched."""
    keep = region_keep_mask(region_mask, p_mask_img, rng)
    if keep.all():
        return v_embed
    return v_embed * Tensor(keep[..., None].astype(ad.DTYPE))


@dataclass
class MangoTerms:
    logits_clean: Tensor
    logits_adv: Tensor
    bce_clean: Tensor
    l_std: Tensor
    r_kl: Tensor
    delta_norm_mean: float
    degenerate: int

    def adversary_objective(self, beta: float) -> Tensor:
        if beta == 0:
            return self.l_std
        return self.l_std + beta * self.r_kl


def perturbed_batch_inputs(
    config: ModelConfig,
    batch: EmbeddingBatch,
    masking: MaskingConfig | None,
    rng_mask: np.random.Generator | None,
) -> EmbeddingBatch:
    if masking is None or masking.p_mask_txt == 0:
        return batch
    ids, mask = insert_mask_tokens(
        batch.token_ids, batch.token_mask, masking.p_mask_txt, config.L_max, rng_mask, config.mask_id, config.pad_id
    )
    return crop_tokens(EmbeddingBatch(batch.regions, batch.region_mask, ids, mask, batch.labels))


def mango_terms(
    config: ModelConfig,
    params: ModelParams,
    generators: dict[str, NoiseGenerator],
    batch: EmbeddingBatch,
    pert: PerturbationConfig,
    rng_noise: np.random.Generator,
    masking: MaskingConfig | None = None,
    rng_mask: np.random.Generator | None = None,
) -> MangoTerms:
    """Clean and perturbed forward passes sharing one graph.

    Masking touches only the perturbed branch: [MASK] insertion first, then
    region zeroing, then generator noise on every valid position.
    """
    v_clean, w_clean = build_embeddings(config, params, batch)
    logits_clean = forward_logits(config, params, v_clean, w_clean, batch.region_mask, batch.token_mask)

    adv = perturbed_batch_inputs(config, batch, masking, rng_mask)
    if adv is batch:
        v, w = v_clean, w_clean
    else:
        v, w = build_embeddings(config, params, adv)
    if masking is not None and masking.p_mask_img > 0:
        v = apply_random_region_mask(v, adv.region_mask, masking.p_mask_img, rng_mask)

    norms = []
    degenerate = 0
    for modality in pert.modalities:
        gen = generators[modality]
        target = v if modality == "image" else w
        valid = adv.region_mask if modality == "image" else adv.token_mask
        delta = generate_adversarial(gen, target.shape, pert.epsilon, rng_noise)
        row_norm = np.sqrt((delta.data * delta.data).sum(axis=-1))
        degenerate += int((row_norm[valid] == 0).sum())
        norms.append(row_norm[valid])
        delta = delta * Tensor(valid[..., None].astype(ad.DTYPE))
        if modality == "image":
            v = v + delta
        else:
            w = w + delta

    logits_adv = forward_logits(config, params, v, w, adv.region_mask, adv.token_mask)
    bce_clean = ad.bce_with_logits_loss(logits_clean, batch.labels)
    l_std = ad.bce_with_logits_loss(logits_adv, batch.labels)
    r_kl = symmetric_kl(ad.softmax_rows(logits_adv), ad.softmax_rows(logits_clean), check=False)
    all_norms = np.concatenate(norms) if norms else np.zeros(1)
    return MangoTerms(
        logits_clean, logits_adv, bce_clean, l_std, r_kl, float(all_norms.mean()) if all_norms.size else 0.0, degenerate
    )


def adversary_objective(
    config: ModelConfig,
    params: ModelParams,
    generators: dict[str, NoiseGenerator],
    batch: EmbeddingBatch,
    pert: PerturbationConfig,
    rng_noise: np.random.Generator,
    masking: MaskingConfig | None = None,
    rng_mask: np.random.Generator | None = None,
) -> Tensor:
    """L_std + beta * R_kl: ascended by the generators, descended by the model."""
    terms = mango_terms(config, params, generators, batch, pert, rng_noise, masking, rng_mask)
    return terms.adversary_objective(pert.beta)
