"""Single-stream multimodal transformer over region features and tokens."""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ContractError, DomainError, ShapeError

ATTN_MASK_FILL = -1e9


@dataclass(frozen=True)
class ModelConfig:
    d_v: int
    d: int
    K_max: int
    L_max: int
    layers: int
    heads: int
    A: int
    vocab: int
    cls_id: int = 0
    mask_id: int = 1
    pad_id: int = 2
    ffn_mult: int = 4
    head_mult: int = 2
    region_pos: bool = True
    init_std: float = 0.02
    embed_init_std: float = 1.0
    ln_eps: float = 1e-12

    def __post_init__(self):
        if self.d % self.heads:
            raise ContractError(f"width {self.d} not divisible by {self.heads} heads")
        if self.K_max < 1 or self.L_max < 1:
            raise ContractError("K_max and L_max must be at least 1")
        ids = {self.cls_id, self.mask_id, self.pad_id}
        if len(ids) != 3 or max(ids) >= self.vocab or min(ids) < 0:
            raise ContractError("[CLS], [MASK], [PAD] ids must be distinct and inside the vocab")

    @property
    def d_w(self) -> int:
        return self.d

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EmbeddingBatch:
    regions: np.ndarray  # B x K x d_v
    region_mask: np.ndarray  # B x K bool
    token_ids: np.ndarray  # B x L int
    token_mask: np.ndarray  # B x L bool
    labels: np.ndarray  # B x A

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]

    def take(self, index) -> "EmbeddingBatch":
        return EmbeddingBatch(
            self.regions[index],
            self.region_mask[index],
            self.token_ids[index],
            self.token_mask[index],
            self.labels[index],
        )


@dataclass
class EncodedBatch:
    z_v: Tensor
    z_w: Tensor
    z_cls: Tensor


def truncated_normal(rng: np.random.Generator, shape, std: float, bound: float = 2.0) -> np.ndarray:
    """Normal draws resampled until they fall within ``bound`` std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


class ModelParams:
    """Ordered registry of named parameters for one model instance."""

    def __init__(self, config: ModelConfig, params: dict[str, Parameter]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.values())

    def __len__(self):
        return len(self.params)

    def tensors(self) -> list[Tensor]:
        return [p.tensor for p in self.params.values()]

    def t(self, name: str) -> Tensor:
        return self.params[name].tensor

    def count(self) -> int:
        return sum(p.tensor.size for p in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise ContractError(f"checkpoint lacks parameters: {sorted(missing)}")
        for name, p in self.params.items():
            arr = arrays[name]
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != {p.shape}")
            p.tensor.data = np.array(arr, dtype=ad.DTYPE)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, hid, head = config.d, config.d * config.ffn_mult, config.d * config.head_mult
    shapes: dict[str, tuple[int, ...]] = {
        "emb.token": (config.vocab, d),
        "emb.text_pos": (config.L_max, d),
        "emb.region_proj.w": (config.d_v, d),
        "emb.region_proj.b": (d,),
    }
    if config.region_pos:
        shapes["emb.region_pos"] = (config.K_max, d)
    for i in range(config.layers):
        p = f"layer{i}."
        shapes.update(
            {
                p + "ln1.g": (d,),
                p + "ln1.b": (d,),
                p + "attn.q.w": (d, d),
                p + "attn.q.b": (d,),
                p + "attn.k.w": (d, d),
                p + "attn.k.b": (d,),
                p + "attn.v.w": (d, d),
                p + "attn.v.b": (d,),
                p + "attn.o.w": (d, d),
                p + "attn.o.b": (d,),
                p + "ln2.g": (d,),
                p + "ln2.b": (d,),
                p + "ffn.in.w": (d, hid),
                p + "ffn.in.b": (hid,),
                p + "ffn.out.w": (hid, d),
                p + "ffn.out.b": (d,),
            }
        )
    shapes.update(
        {
            "head.fc1.w": (d, head),
            "head.fc1.b": (head,),
            "head.ln.g": (head,),
            "head.ln.b": (head,),
            "head.fc2.w": (head, config.A),
            "head.fc2.b": (config.A,),
        }
    )
    return shapes


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    params: dict[str, Parameter] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".g"):
            data = np.ones(shape)
        elif name.endswith(".b"):
            data = np.zeros(shape)
        elif name.startswith("emb.") and name != "emb.region_proj.w":
            data = truncated_normal(rng, shape, config.embed_init_std)
        elif name == "emb.region_proj.w":
            data = truncated_normal(rng, shape, config.embed_init_std / math.sqrt(config.d_v))
        else:
            data = truncated_normal(rng, shape, config.init_std)
        params[name] = Parameter(name, data)
    return ModelParams(config, params)


def check_batch(config: ModelConfig, batch: EmbeddingBatch) -> None:
    B, K, dv = batch.regions.shape
    if dv != config.d_v or K > config.K_max:
        raise ShapeError(f"regions {batch.regions.shape} do not fit d_v={config.d_v}, K_max={config.K_max}")
    if batch.token_ids.shape[1] > config.L_max:
        raise ShapeError(f"{batch.token_ids.shape[1]} tokens exceed L_max={config.L_max}")
    if batch.region_mask.shape != (B, K) or batch.token_mask.shape != batch.token_ids.shape:
        raise ShapeError("mask shapes do not match features")
    if batch.labels.shape != (B, config.A):
        raise ShapeError(f"labels {batch.labels.shape} != ({B}, {config.A})")
    if batch.token_ids.max(initial=0) >= config.vocab or batch.token_ids.min(initial=0) < 0:
        raise DomainError("token id outside the vocabulary")


def build_embeddings(config: ModelConfig, params: ModelParams, batch: EmbeddingBatch) -> tuple[Tensor, Tensor]:
    """Project regions and look up tokens; padded slots come out as zeros."""
    check_batch(config, batch)
    K = batch.regions.shape[1]
    L = batch.token_ids.shape[1]
    v = ad.matmul(Tensor(batch.regions), params.t("emb.region_proj.w")) + params.t("emb.region_proj.b")
    if config.region_pos:
        v = v + params.t("emb.region_pos")[:K]
    w = ad.take_rows(params.t("emb.token"), batch.token_ids) + params.t("emb.text_pos")[:L]
    v = v * Tensor(batch.region_mask[..., None].astype(ad.DTYPE))
    w = w * Tensor(batch.token_mask[..., None].astype(ad.DTYPE))
    return v, w


def _linear(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    return ad.matmul(x, params.t(prefix + ".w")) + params.t(prefix + ".b")


def _attention(x: Tensor, bias: np.ndarray, params: ModelParams, prefix: str, heads: int) -> Tensor:
    B, S, d = x.shape
    dh = d // heads

    def split(t):
        return t.reshape(B, S, heads, dh).transpose(0, 2, 1, 3)

    q = split(_linear(x, params, prefix + ".q"))
    k = split(_linear(x, params, prefix + ".k"))
    v = split(_linear(x, params, prefix + ".v"))
    scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)) + Tensor(bias)
    ctx = ad.matmul(ad.softmax_rows(scores), v)
    ctx = ctx.transpose(0, 2, 1, 3).reshape(B, S, d)
    return _linear(ctx, params, prefix + ".o")


def encode_forward(
    config: ModelConfig,
    params: ModelParams,
    v_embed: Tensor,
    w_embed: Tensor,
    region_mask: np.ndarray,
    token_mask: np.ndarray,
) -> EncodedBatch:
    """Pre-norm transformer over the concatenated [text ; regions] sequence."""
    if v_embed.shape[-1] != config.d or w_embed.shape[-1] != config.d:
        raise ShapeError("embedding width does not match model width")
    L = w_embed.shape[1]
    x = ad.concat([w_embed, v_embed], axis=1)
    keys = np.concatenate([token_mask, region_mask], axis=1)
    bias = np.where(keys, 0.0, ATTN_MASK_FILL)[:, None, None, :]
    eps = config.ln_eps
    for i in range(config.layers):
        p = f"layer{i}."
        h = ad.layer_norm_rows(x, params.t(p + "ln1.g"), params.t(p + "ln1.b"), eps)
        x = x + _attention(h, bias, params, p + "attn", config.heads)
        h = ad.layer_norm_rows(x, params.t(p + "ln2.g"), params.t(p + "ln2.b"), eps)
        h = _linear(ad.gelu(_linear(h, params, p + "ffn.in")), params, p + "ffn.out")
        x = x + h
    z_w = x[:, :L]
    z_v = x[:, L:]
    z_cls = x[:, 0]
    return EncodedBatch(z_v=z_v, z_w=z_w, z_cls=z_cls)


def answer_logits(params: ModelParams, encoded: EncodedBatch) -> Tensor:
    h = ad.gelu(_linear(encoded.z_cls, params, "head.fc1"))
    h = ad.layer_norm_rows(h, params.t("head.ln.g"), params.t("head.ln.b"), params.config.ln_eps)
    return _linear(h, params, "head.fc2")


def forward_logits(
    config: ModelConfig,
    params: ModelParams,
    v_embed: Tensor,
    w_embed: Tensor,
    region_mask: np.ndarray,
    token_mask: np.ndarray,
) -> Tensor:
    enc = encode_forward(config, params, v_embed, w_embed, region_mask, token_mask)
    return answer_logits(params, enc)


def predict_answer(logits) -> np.ndarray:
    """Row-wise argmax; ties go to the smallest index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=-1)


def crop_tokens(batch: EmbeddingBatch) -> EmbeddingBatch:
    """Drop trailing token columns that are padding in every row."""
    width = int(batch.token_mask.sum(axis=1).max(initial=1))
    if width == batch.token_ids.shape[1]:
        return batch
    return EmbeddingBatch(
        batch.regions, batch.region_mask, batch.token_ids[:, :width], batch.token_mask[:, :width], batch.labels
    )


def predict_batches(config: ModelConfig, params: ModelParams, batch: EmbeddingBatch, chunk: int = 256) -> np.ndarray:
    preds = []
    with ad.no_grad():
        for start in range(0, batch.size, chunk):
            sub = crop_tokens(batch.take(slice(start, start + chunk)))
            v, w = build_embeddings(config, params, sub)
            logits = forward_logits(config, params, v, w, sub.region_mask, sub.token_mask)
            preds.append(predict_answer(logits))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)
