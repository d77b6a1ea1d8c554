"""PlainSeg-Hier: a feature pyramid from the last ViT map plus one deformable encoder layer."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .decoder import DecoderConfig, MaskClassOutput, MaskDecoder
from .layers import BatchNorm2d, Conv2d, ConvTranspose2d, LayerNorm, Linear, Module, MSDeformAttn, Parameter
from .tensor import Tensor, concat, get_default_dtype, permute, reshape, split

# pyramid levels, named by stride relative to a patch-16 ViT
LEVELS = ("1/4", "1/8", "1/16", "1/32")


@dataclass
class HierConfig:
    in_ch: int = 768
    width: int = 256
    deform_heads: int = 8
    deform_points: int = 4
    deform_ffn: int = 1024

    def __post_init__(self):
        if self.in_ch % 4:
            raise ValueError(f"encoder width {self.in_ch} must be divisible by 4")

    @property
    def pyramid_widths(self) -> dict:
        C = self.in_ch
        return {"1/4": C // 4, "1/8": C // 2, "1/16": C, "1/32": C}


class FeaturePyramid(dict):
    """Ordered stride -> feature map (fine to coarse)."""


def reference_points(spatial_shapes, dtype=None) -> np.ndarray:
    """Normalised (x, y) pixel centres of every token, levels concatenated: [S, 2]."""
    pts = []
    for H, W in spatial_shapes:
        ys, xs = np.meshgrid((np.arange(H) + 0.5) / H, (np.arange(W) + 0.5) / W, indexing="ij")
        pts.append(np.stack([xs.reshape(-1), ys.reshape(-1)], -1))
    return np.concatenate(pts).astype(dtype or get_default_dtype())


class DeformableEncoderLayer(Module):
    """MS deformable self-attention -> residual+LN -> FFN -> residual+LN."""

    def __init__(self, cfg: HierConfig, n_levels: int, rng):
        super().__init__()
        D = cfg.width
        self.attn = MSDeformAttn(D, n_levels, rng, n_heads=cfg.deform_heads, n_points=cfg.deform_points)
        self.norm1 = LayerNorm(D)
        self.linear1 = Linear(D, cfg.deform_ffn, rng, init="xavier")
        self.linear2 = Linear(cfg.deform_ffn, D, rng, init="xavier")
        self.norm2 = LayerNorm(D)

    def forward(self, src: Tensor, pos: Tensor, ref: np.ndarray, spatial_shapes) -> Tensor:
        src = self.norm1(src + self.attn(src + pos, ref, src, spatial_shapes))
        return self.norm2(src + self.linear2(ops.relu(self.linear1(src))))


class HierNeck(Module):
    """Pyramid -> projection to width -> deformable encoder -> mask-feature fusion."""

    def __init__(self, cfg: HierConfig, rng):
        super().__init__()
        self.cfg = cfg
        C, D = cfg.in_ch, cfg.width
        self.up_1_8 = ConvTranspose2d(C, C // 2, rng)
        self.up_1_4 = ConvTranspose2d(C // 2, C // 4, rng)
        widths = cfg.pyramid_widths
        self.proj = [Conv2d(ops.ConvParams(widths[k], D, kernel=1), rng) for k in ("1/8", "1/16", "1/32")]
        self.proj_norm = [LayerNorm(D, axis=1) for _ in range(3)]
        self.level_embed = Parameter(rng.normal(0, 1.0, (3, D)).astype(get_default_dtype()))
        self.encoder = DeformableEncoderLayer(cfg, 3, rng)
        self.lateral = Conv2d(ops.ConvParams(widths["1/4"], D, kernel=1), rng)
        self.fuse_conv = Conv2d(ops.ConvParams(D, D, kernel=3), rng)
        self.fuse_norm = BatchNorm2d(D)

    def build_pyramid(self, f_vit: Tensor) -> FeaturePyramid:
        f8 = self.up_1_8(f_vit)
        return FeaturePyramid([
            ("1/4", self.up_1_4(f8)),
            ("1/8", f8),
            ("1/16", f_vit),
            ("1/32", ops.max_pool2d(f_vit)),
        ])

    def project_levels(self, pyramid: FeaturePyramid) -> list:
        return [norm(conv(pyramid[k])) for k, conv, norm in zip(("1/8", "1/16", "1/32"), self.proj, self.proj_norm)]

    def deformable_encoder(self, levels: list) -> list:
        B, D = levels[0].shape[:2]
        shapes = [lvl.shape[2:] for lvl in levels]
        flat = [permute(reshape(lvl, (B, D, h * w)), (0, 2, 1)) for lvl, (h, w) in zip(levels, shapes)]
        src = concat(flat, axis=1)
        pos_t = concat([self.level_embed[i] * np.ones((1, h * w, 1), dtype=src.data.dtype)
                        for i, (h, w) in enumerate(shapes)], axis=1)
        ref = reference_points(shapes, src.data.dtype)
        ref = np.broadcast_to(ref[None, :, None, :], (B, ref.shape[0], len(shapes), 2))
        out = self.encoder(src, pos_t, ref, shapes)
        pieces = split(out, [h * w for h, w in shapes], axis=1)
        return [reshape(permute(p, (0, 2, 1)), (B, D, h, w)) for p, (h, w) in zip(pieces, shapes)]

    def fuse_mask_features(self, level_1_4: Tensor, enhanced_1_8: Tensor) -> Tensor:
        lat = self.lateral(level_1_4)
        if lat.shape[2] != 2 * enhanced_1_8.shape[2] or lat.shape[3] != 2 * enhanced_1_8.shape[3]:
            raise ops.ShapeError(f"1/4 map {lat.shape} is not twice the 1/8 map {enhanced_1_8.shape}")
        x = lat + ops.resize_bilinear(enhanced_1_8, lat.shape[2:])
        return ops.relu(self.fuse_norm(self.fuse_conv(x)))

    def forward(self, f_vit: Tensor):
        pyramid = self.build_pyramid(f_vit)
        enhanced = self.deformable_encoder(self.project_levels(pyramid))
        f_mask = self.fuse_mask_features(pyramid["1/4"], enhanced[0])
        # decoder sources ordered coarse to fine: 1/32, 1/16, 1/8
        return [enhanced[2], enhanced[1], enhanced[0]], f_mask


class PlainSegHierHead(Module):
    def __init__(self, cfg: HierConfig, dcfg: DecoderConfig, rng, seed: int = 0):
        super().__init__()
        if dcfg.num_sources != 3:
            raise ValueError("PlainSeg-Hier decodes from exactly 3 scales")
        self.neck = HierNeck(cfg, rng)
        self.decoder = MaskDecoder(dcfg, rng, seed=seed)

    def forward(self, f_vit: Tensor) -> MaskClassOutput:
        sources, f_mask = self.neck(f_vit)
        return self.decoder(sources, f_mask)

    run_hier = forward
