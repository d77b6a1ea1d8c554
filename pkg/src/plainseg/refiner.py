"""Decoders over the last ViT feature map: linear, simple up-sampling, and the Refiner."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .layers import BatchNorm2d, Conv2d, Module, make_norm
from .tensor import Tensor, split


@dataclass
class RefinerConfig:
    in_ch: int = 768
    group_count: int = 3
    decoder_width: int = 256
    refine_norm: str = "ln"
    refine_act: str = "gelu"
    group_norm: str = "ln"
    mask_norm: str = "bn"
    mask_act: str = "relu"

    def __post_init__(self):
        if self.in_ch % self.group_count:
            raise ValueError(f"encoder width {self.in_ch} not divisible by group count {self.group_count}")


@dataclass
class RefinerOutput:
    f_refine: Tensor
    f_cross_attn: list
    f_mask: Tensor


class LinearDecoder(Module):
    """1x1 conv straight from F_vit to class logits at stride 16."""

    def __init__(self, in_ch: int, num_classes: int, rng):
        super().__init__()
        self.cls = Conv2d(ops.ConvParams(in_ch, num_classes, kernel=1), rng)

    def forward(self, f_vit: Tensor) -> Tensor:
        return self.cls(f_vit)


class ConvBNReLU(Module):
    def __init__(self, in_ch: int, out_ch: int, rng, kernel: int = 3):
        super().__init__()
        self.conv = Conv2d(ops.ConvParams(in_ch, out_ch, kernel=kernel), rng)
        self.bn = BatchNorm2d(out_ch)

    def forward(self, x):
        return ops.relu(self.bn(self.conv(x)))


class SimpleUpsampleDecoder(Module):
    """Up x2 -> Conv3x3+BN+ReLU -> Up x2 -> Conv3x3+BN+ReLU -> Conv1x1, widths kept at C."""

    def __init__(self, in_ch: int, num_classes: int, rng):
        super().__init__()
        self.block1 = ConvBNReLU(in_ch, in_ch, rng)
        self.block2 = ConvBNReLU(in_ch, in_ch, rng)
        self.cls = Conv2d(ops.ConvParams(in_ch, num_classes, kernel=1), rng)

    def forward(self, f_vit: Tensor) -> Tensor:
        x = self.block1(ops.bilinear_upsample(f_vit, 2))
        x = self.block2(ops.bilinear_upsample(x, 2))
        return self.cls(x)


class Refiner(Module):
    """Builds F_refine (x2), the grouped cross-attention features and F_mask (x4).

    F_refine = Act(Norm(Conv3x3(Norm(Up(F_vit)))))
    F_cross  = Split(Norm(GroupConv3x3(F_refine)))
    F_mask   = Conv1x1(ReLU(BN(Conv3x3(Up(F_refine)))))
    """

    def __init__(self, cfg: RefinerConfig, rng):
        super().__init__()
        self.cfg = cfg
        C, n, w = cfg.in_ch, cfg.group_count, cfg.decoder_width
        self.up_norm = make_norm(cfg.refine_norm, C)
        self.refine_conv = Conv2d(ops.ConvParams(C, C, kernel=3), rng)
        self.refine_norm = make_norm(cfg.refine_norm, C)
        self.group_conv = Conv2d(ops.ConvParams(C, n * w, kernel=3, groups=n), rng)
        self.group_norm = make_norm(cfg.group_norm, n * w)
        self.mask_conv = Conv2d(ops.ConvParams(C, w, kernel=3), rng)
        self.mask_norm = make_norm(cfg.mask_norm, w)
        self.mask_proj = Conv2d(ops.ConvParams(w, w, kernel=1), rng)

    def refine(self, f_vit: Tensor) -> Tensor:
        x = self.up_norm(ops.bilinear_upsample(f_vit, 2))
        return ops.activation(self.refine_norm(self.refine_conv(x)), self.cfg.refine_act)

    def width_to_depth(self, f_refine: Tensor) -> list:
        return split(self.group_norm(self.group_conv(f_refine)), self.cfg.group_count, axis=1)

    def mask_feature(self, f_refine: Tensor) -> Tensor:
        x = self.mask_conv(ops.bilinear_upsample(f_refine, 2))
        return self.mask_proj(ops.activation(self.mask_norm(x), self.cfg.mask_act))

    def forward(self, f_vit: Tensor) -> RefinerOutput:
        f_refine = self.refine(f_vit)
        return RefinerOutput(f_refine, self.width_to_depth(f_refine), self.mask_feature(f_refine))


def grouped_conv_param_count(in_ch: int, groups: int, width: int = 256, kernel: int = 3, bias: bool = True) -> int:
    return int(np.prod([groups * width, in_ch // groups, kernel, kernel])) + (groups * width if bias else 0)
