"""Slim mask-classification transformer decoder with round-robin feature feeding."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .layers import MLP, LayerNorm, Linear, Module, MultiheadAttention, Parameter
from .tensor import Tensor, get_default_dtype, matmul, permute, reshape


@dataclass
class DecoderConfig:
    width: int = 256
    num_layers: int = 6
    num_queries: int = 100
    num_heads: int = 8
    ffn_dim: int = 2048
    num_classes: int = 150
    num_sources: int = 3

    def __post_init__(self):
        if self.num_layers % self.num_sources:
            raise ValueError(f"{self.num_layers} decoder layers is not a multiple of {self.num_sources} sources")
        if self.width % self.num_heads:
            raise ValueError(f"width {self.width} not divisible by {self.num_heads} heads")


@dataclass
class MaskClassOutput:
    """Predictions before the first layer and after each decoder layer."""

    class_logits: list = field(default_factory=list)  # each [B, Nq, K+1]
    mask_logits: list = field(default_factory=list)  # each [B, Nq, h, w]
    source_sequence: list = field(default_factory=list)

    @property
    def final(self):
        return self.class_logits[-1], self.mask_logits[-1]

    def __len__(self):
        return len(self.class_logits)


def source_sequence(num_layers: int, num_sources: int) -> list[int]:
    """Layer j reads source j mod num_sources."""
    if num_sources <= 0 or num_layers % num_sources:
        raise ValueError(f"{num_layers} layers is not a multiple of {num_sources} sources")
    return [j % num_sources for j in range(num_layers)]


def init_queries(cfg: DecoderConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Learned query features and positional embeddings, N(0, 0.02^2)."""
    rng = np.random.default_rng(seed)
    dt = get_default_dtype()
    shape = (cfg.num_queries, cfg.width)
    return rng.normal(0, 0.02, shape).astype(dt), rng.normal(0, 0.02, shape).astype(dt)


def attention_mask_from(mask_logits: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Boolean [B, Nq, h*w] mask (True = masked) from the previous mask prediction.

    A key is hidden from a query where the resized mask probability is below
    0.5 (logit < 0). Rows that would hide every key are left fully visible.
    """
    m = np.asarray(mask_logits, dtype=np.float64)
    H, W = m.shape[-2:]
    if (H, W) != tuple(size):
        m = ops.interp_matrix(H, size[0]) @ m @ ops.interp_matrix(W, size[1]).T
    masked = (m < 0).reshape(m.shape[0], m.shape[1], -1)
    return ops.safeguard_mask(masked)


class DecoderLayer(Module):
    """Masked cross-attention -> self-attention -> FFN, each a pre-norm residual."""

    def __init__(self, cfg: DecoderConfig, rng):
        super().__init__()
        D = cfg.width
        p = ops.AttentionParams(D, cfg.num_heads)
        self.norm_cross = LayerNorm(D)
        self.cross_attn = MultiheadAttention(p, rng)
        self.norm_self = LayerNorm(D)
        self.self_attn = MultiheadAttention(p, rng)
        self.norm_ffn = LayerNorm(D)
        self.linear1 = Linear(D, cfg.ffn_dim, rng, init="xavier")
        self.linear2 = Linear(cfg.ffn_dim, D, rng, init="xavier")

    def forward(self, tgt: Tensor, query_pos: Tensor, memory: Tensor, memory_key: Tensor,
                attn_mask: np.ndarray | None = None) -> Tensor:
        t = self.norm_cross(tgt)
        tgt = tgt + self.cross_attn(t + query_pos, memory_key, memory, attn_mask=attn_mask)
        t = self.norm_self(tgt)
        q = t + query_pos
        tgt = tgt + self.self_attn(q, q, t)
        t = self.norm_ffn(tgt)
        return tgt + self.linear2(ops.relu(self.linear1(t)))


class MaskDecoder(Module):
    def __init__(self, cfg: DecoderConfig, rng, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        D = cfg.width
        qf, qp = init_queries(cfg, seed)
        self.query_feat = Parameter(qf)
        self.query_embed = Parameter(qp)
        self.level_embed = Parameter(rng.normal(0, 0.02, (cfg.num_sources, D)).astype(get_default_dtype()))
        self.layers = [DecoderLayer(cfg, rng) for _ in range(cfg.num_layers)]
        self.decoder_norm = LayerNorm(D)
        self.class_embed = Linear(D, cfg.num_classes + 1, rng, init="xavier")
        self.mask_embed = MLP([D, D, D, D], rng)

    def predict_heads(self, queries: Tensor, f_mask: Tensor) -> tuple[Tensor, Tensor]:
        """Class logits [B, Nq, K+1] and mask logits <e_q, F_mask[x]> [B, Nq, H, W]."""
        B, D, H, W = f_mask.shape
        if queries.shape[-1] != D:
            raise ops.ShapeError(f"query width {queries.shape[-1]} != mask feature width {D}")
        q = self.decoder_norm(queries)
        cls = self.class_embed(q)
        emb = self.mask_embed(q)
        masks = matmul(emb, reshape(f_mask, (B, D, H * W)))
        return cls, reshape(masks, (B, queries.shape[1], H, W))

    def forward(self, sources: list, f_mask: Tensor, use_masks: bool = True) -> MaskClassOutput:
        cfg = self.cfg
        if len(sources) != cfg.num_sources:
            raise ValueError(f"decoder configured for {cfg.num_sources} sources, got {len(sources)}")
        B = f_mask.shape[0]
        memories, keys, sizes = [], [], []
        for i, src in enumerate(sources):
            _, D, h, w = src.shape
            mem = permute(reshape(src, (B, D, h * w)), (0, 2, 1))
            memories.append(mem)
            keys.append(mem + self.level_embed[i])
            sizes.append((h, w))
        ones = np.ones((B, 1, 1), dtype=f_mask.data.dtype)
        tgt = self.query_feat * ones
        qpos = self.query_embed * ones
        seq = source_sequence(cfg.num_layers, cfg.num_sources)
        out = MaskClassOutput(source_sequence=seq)
        cls, masks = self.predict_heads(tgt, f_mask)
        out.class_logits.append(cls)
        out.mask_logits.append(masks)
        for j, s in enumerate(seq):
            mask = attention_mask_from(masks.data, sizes[s]) if use_masks else None
            tgt = self.layers[j](tgt, qpos, memories[s], keys[s], attn_mask=mask)
            cls, masks = self.predict_heads(tgt, f_mask)
            out.class_logits.append(cls)
            out.mask_logits.append(masks)
        return out

    run_decoder = forward
