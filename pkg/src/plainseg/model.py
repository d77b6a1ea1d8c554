"""Model configuration and the assembled encoder + head segmenters."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import ops
from .decoder import DecoderConfig, MaskClassOutput, MaskDecoder
from .hier import HierConfig, PlainSegHierHead
from .layers import Module
from .refiner import LinearDecoder, Refiner, RefinerConfig, SimpleUpsampleDecoder
from .tensor import Tensor, no_grad, softmax

VARIANTS = ("plainseg", "plainseg-hier", "linear", "simple-upsample")


@dataclass
class ModelConfig:
    variant: str = "plainseg"
    img_size: int = 512
    patch_size: int = 16
    embed_dim: int = 768
    depth: int = 12
    num_heads: int = 12
    mlp_ratio: float = 4.0
    pos_embed: str = "relative-2d-bias"
    drop_path_rate: float = 0.1
    num_classes: int = 150
    decoder_width: int = 256
    group_count: int = 3
    decoder_layers: int = 6
    num_queries: int = 100
    decoder_heads: int = 8
    ffn_dim: int = 2048
    deform_heads: int = 8
    deform_points: int = 4
    deform_ffn: int = 1024

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "plainseg" and self.decoder_layers % self.group_count:
            raise ValueError(f"decoder_layers {self.decoder_layers} not a multiple of group_count {self.group_count}")
        if self.variant == "plainseg-hier" and self.decoder_layers % 3:
            raise ValueError(f"decoder_layers {self.decoder_layers} not a multiple of 3 scales")
        # raises on inconsistent encoder dims
        self.vit_config()

    @property
    def mask_classification(self) -> bool:
        return self.variant in ("plainseg", "plainseg-hier")

    def vit_config(self):
        from .vit import ViTConfig

        return ViTConfig(self.img_size, self.patch_size, self.embed_dim, self.depth, self.num_heads,
                         self.mlp_ratio, self.pos_embed, self.drop_path_rate)

    def refiner_config(self) -> RefinerConfig:
        return RefinerConfig(self.embed_dim, self.group_count, self.decoder_width)

    def decoder_config(self) -> DecoderConfig:
        sources = self.group_count if self.variant == "plainseg" else 3
        return DecoderConfig(self.decoder_width, self.decoder_layers, self.num_queries, self.decoder_heads,
                             self.ffn_dim, self.num_classes, sources)

    def hier_config(self) -> HierConfig:
        return HierConfig(self.embed_dim, self.decoder_width, self.deform_heads, self.deform_points, self.deform_ffn)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)


def preset(name: str, **overrides) -> ModelConfig:
    """Named configurations used by the accounting checks and the CLI."""
    base = dict(
        beit_base=ModelConfig(),
        beit_large=ModelConfig(embed_dim=1024, depth=24, num_heads=16, drop_path_rate=0.3,
                               group_count=4, decoder_layers=8),
        hier_base=ModelConfig(variant="plainseg-hier", decoder_layers=9),
        hier_large=ModelConfig(variant="plainseg-hier", embed_dim=1024, depth=24, num_heads=16,
                               drop_path_rate=0.3, decoder_layers=6),
        simple_upsample_base=ModelConfig(variant="simple-upsample"),
        linear_base=ModelConfig(variant="linear"),
        tiny=ModelConfig(img_size=64, patch_size=8, embed_dim=64, depth=4, num_heads=4, drop_path_rate=0.0,
                         num_classes=4, decoder_width=32, group_count=2, decoder_layers=4, num_queries=20,
                         decoder_heads=4, ffn_dim=128, deform_heads=4, deform_points=4, deform_ffn=128),
        tiny_hier=ModelConfig(variant="plainseg-hier", img_size=64, patch_size=8, embed_dim=64, depth=4,
                              num_heads=4, drop_path_rate=0.0, num_classes=4, decoder_width=32,
                              decoder_layers=6, num_queries=20, decoder_heads=4, ffn_dim=128,
                              deform_heads=4, deform_points=4, deform_ffn=128),
    )
    if name not in base:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(base)}")
    return replace(base[name], **overrides)


class PlainSegHead(Module):
    def __init__(self, cfg: ModelConfig, rng, seed: int = 0):
        super().__init__()
        self.refiner = Refiner(cfg.refiner_config(), rng)
        self.decoder = MaskDecoder(cfg.decoder_config(), rng, seed=seed)

    def forward(self, f_vit: Tensor) -> MaskClassOutput:
        r = self.refiner(f_vit)
        return self.decoder(r.f_cross_attn, r.f_mask)


class SegModel(Module):
    """Plain ViT encoder followed by one of the decoder heads."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        from .vit import ViTEncoder

        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = ViTEncoder(cfg.vit_config(), rng, seed=seed)
        if cfg.variant == "plainseg":
            self.head = PlainSegHead(cfg, rng, seed=seed + 1)
        elif cfg.variant == "plainseg-hier":
            self.head = PlainSegHierHead(cfg.hier_config(), cfg.decoder_config(), rng, seed=seed + 1)
        elif cfg.variant == "linear":
            self.head = LinearDecoder(cfg.embed_dim, cfg.num_classes, rng)
        else:
            self.head = SimpleUpsampleDecoder(cfg.embed_dim, cfg.num_classes, rng)

    def forward(self, image: Tensor):
        return self.head(self.encoder(image))

    def predict_scores(self, image: np.ndarray) -> np.ndarray:
        """Per-class score maps [B, K, H, W] at input resolution (eval, no tape)."""
        from .evaluation import semantic_scores

        x = Tensor(image)
        H, W = image.shape[-2:]
        with no_grad():
            out = self(x)
            if isinstance(out, MaskClassOutput):
                cls, masks = out.final
                return semantic_scores(cls.data, masks.data, (H, W))
            logits = ops.resize_bilinear(out, (H, W))
            return softmax(logits, axis=1).data


def build_model(cfg: ModelConfig, seed: int = 0) -> SegModel:
    return SegModel(cfg, seed=seed)
