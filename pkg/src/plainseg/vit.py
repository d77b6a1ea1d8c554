"""Plain (single-resolution) ViT encoder that returns its last feature map."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .layers import LayerNorm, Linear, Module, MultiheadAttention, Parameter, trunc_normal
from .tensor import Tensor, concat, getitem, permute, reshape

POS_KINDS = ("absolute-1d", "relative-2d-bias")


@dataclass
class ViTConfig:
    img_size: int = 512
    patch_size: int = 16
    embed_dim: int = 768
    depth: int = 12
    num_heads: int = 12
    mlp_ratio: float = 4.0
    pos_embed_kind: str = "relative-2d-bias"
    drop_path_rate: float = 0.0
    in_chans: int = 3

    def __post_init__(self):
        if self.img_size % self.patch_size:
            raise ValueError(f"img_size {self.img_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.pos_embed_kind not in POS_KINDS:
            raise ValueError(f"pos_embed_kind must be one of {POS_KINDS}")

    @property
    def grid(self) -> int:
        return self.img_size // self.patch_size

    @property
    def hidden_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


def relative_position_index(h: int, w: int) -> np.ndarray:
    """[h*w+1, h*w+1] lookup into a table of (2h-1)(2w-1)+3 entries.

    Patch pair (query i, key j) maps to (dr + h-1)*(2w-1) + (dc + w-1) with
    (dr, dc) = pos_i - pos_j. The last three entries serve cls->patch,
    patch->cls and cls->cls.
    """
    coords = np.stack(np.meshgrid(np.arange(h), np.arange(w), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    idx = (rel[0] + h - 1) * (2 * w - 1) + (rel[1] + w - 1)
    n_rel = (2 * h - 1) * (2 * w - 1) + 3
    out = np.zeros((h * w + 1, h * w + 1), dtype=np.int64)
    out[1:, 1:] = idx
    out[0, :] = n_rel - 3
    out[:, 0] = n_rel - 2
    out[0, 0] = n_rel - 1
    return out


class RelativePositionBias(Module):
    def __init__(self, h: int, w: int, num_heads: int, rng):
        super().__init__()
        self.h, self.w, self.num_heads = h, w, num_heads
        n_rel = (2 * h - 1) * (2 * w - 1) + 3
        self.table = Parameter(trunc_normal((n_rel, num_heads), 0.02, rng))
        self.index = relative_position_index(h, w)

    def forward(self, h: int, w: int):
        if (h, w) != (self.h, self.w):
            raise ValueError(f"relative bias built for {self.h}x{self.w} tokens, got {h}x{w}")
        bias = getitem(self.table, self.index)  # [N+1, N+1, heads]
        return permute(bias, (2, 0, 1))


def drop_path(x: Tensor, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Stochastic depth: zero whole samples of a residual branch."""
    if not training or rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random((x.shape[0],) + (1,) * (x.ndim - 1)) < keep).astype(x.data.dtype) / keep
    return x * mask


class EncoderLayer(Module):
    """Pre-norm block: LN -> MHA (+relative bias) -> residual -> LN -> MLP -> residual."""

    def __init__(self, cfg: ViTConfig, drop_path_rate: float, rng, seed: int = 0):
        super().__init__()
        C = cfg.embed_dim
        self.norm1 = LayerNorm(C)
        self.attn = MultiheadAttention(ops.AttentionParams(C, cfg.num_heads), rng)
        self.norm2 = LayerNorm(C)
        self.fc1 = Linear(C, cfg.hidden_dim, rng)
        self.fc2 = Linear(cfg.hidden_dim, C, rng)
        self.rel_bias = (
            RelativePositionBias(cfg.grid, cfg.grid, cfg.num_heads, rng)
            if cfg.pos_embed_kind == "relative-2d-bias" else None
        )
        self.drop_path_rate = drop_path_rate
        self._dp_rng = np.random.default_rng(seed)

    def forward(self, x: Tensor, hw: tuple[int, int]) -> Tensor:
        bias = self.rel_bias(*hw) if self.rel_bias is not None else None
        y = self.norm1(x)
        y = self.attn(y, y, y, attn_bias=bias)
        x = x + drop_path(y, self.drop_path_rate, self.training, self._dp_rng)
        y = self.fc2(ops.gelu(self.fc1(self.norm2(x))))
        return x + drop_path(y, self.drop_path_rate, self.training, self._dp_rng)


class PatchEmbed(Module):
    def __init__(self, cfg: ViTConfig, rng):
        super().__init__()
        self.patch_size = cfg.patch_size
        p = ops.ConvParams(cfg.in_chans, cfg.embed_dim, kernel=cfg.patch_size, stride=cfg.patch_size, padding=0)
        fan_in = cfg.in_chans * cfg.patch_size**2
        self.weight = Parameter(trunc_normal((cfg.embed_dim, cfg.in_chans, cfg.patch_size, cfg.patch_size),
                                             (1.0 / fan_in) ** 0.5, rng))
        self.bias = Parameter(np.zeros(cfg.embed_dim, dtype=self.weight.data.dtype))
        self.p = p

    def forward(self, image: Tensor) -> Tensor:
        """[B, 3, H, W] -> tokens [B, N, C] in row-major patch order."""
        B, _, H, W = image.shape
        if H % self.patch_size or W % self.patch_size:
            raise ValueError(f"image {H}x{W} not divisible by patch size {self.patch_size}")
        x = ops.conv2d(image, self.weight, self.bias, stride=self.patch_size)
        C, h, w = x.shape[1:]
        return permute(reshape(x, (B, C, h * w)), (0, 2, 1))


class ViTEncoder(Module):
    """Patch embed -> (+cls, +pos) -> L layers -> final LN -> [B, C, H/p, W/p]."""

    def __init__(self, cfg: ViTConfig, rng: np.random.Generator, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        C = cfg.embed_dim
        self.patch_embed = PatchEmbed(cfg, rng)
        self.cls_token = Parameter(trunc_normal((1, 1, C), 0.02, rng))
        self.pos_embed = (
            Parameter(trunc_normal((1, cfg.grid * cfg.grid + 1, C), 0.02, rng))
            if cfg.pos_embed_kind == "absolute-1d" else None
        )
        rates = np.linspace(0.0, cfg.drop_path_rate, cfg.depth) if cfg.depth else []
        self.blocks = [EncoderLayer(cfg, float(rates[i]), rng, seed=seed * 1000 + i) for i in range(cfg.depth)]
        self.norm = LayerNorm(C)

    def add_position_embedding(self, tokens: Tensor) -> Tensor:
        B = tokens.shape[0]
        cls = self.cls_token * np.ones((B, 1, 1), dtype=tokens.data.dtype)
        x = concat([cls, tokens], axis=1)
        if self.pos_embed is not None:
            if self.pos_embed.shape[1] != x.shape[1]:
                raise ValueError(f"absolute position table sized for {self.pos_embed.shape[1] - 1} tokens, "
                                 f"got {x.shape[1] - 1}")
            x = x + self.pos_embed
        return x

    def forward(self, image: Tensor) -> Tensor:
        B, _, H, W = image.shape
        h, w = H // self.cfg.patch_size, W // self.cfg.patch_size
        x = self.add_position_embedding(self.patch_embed(image))
        for blk in self.blocks:
            x = blk(x, (h, w))
        x = self.norm(x)
        patches = getitem(x, (slice(None), slice(1, None)))
        return reshape(permute(patches, (0, 2, 1)), (B, self.cfg.embed_dim, h, w))

    encode = forward
