"""Analytic parameter and multiply-accumulate accounting from a ModelConfig.

Counts are derived from layer shapes only; no model is instantiated. One MAC
is reported as one "FLOP", the convention under which the up-sampling decoder
comes out at 110.6 G for a ViT-B feature map at 512x512. Normalisation,
activation, interpolation and other elementwise work is not counted.
"""
from __future__ import annotations

from dataclasses import dataclass

from .model import ModelConfig

MAC_CONVENTION = "1 MAC = 1 FLOP; norms, activations and interpolation excluded"


def linear_params(i: int, o: int, bias: bool = True) -> int:
    return i * o + (o if bias else 0)


def conv_params(ci: int, co: int, k: int, groups: int = 1, bias: bool = True) -> int:
    return co * (ci // groups) * k * k + (co if bias else 0)


def deconv_params(ci: int, co: int, bias: bool = True) -> int:
    return ci * co * 4 + (co if bias else 0)


def mha_params(e: int) -> int:
    return 4 * linear_params(e, e)


def conv_macs(ci: int, co: int, k: int, out_hw: tuple, groups: int = 1) -> int:
    return out_hw[0] * out_hw[1] * co * (ci // groups) * k * k


# ---------------------------------------------------------------- parameters


def encoder_params(cfg: ModelConfig) -> int:
    C, p = cfg.embed_dim, cfg.patch_size
    g = cfg.img_size // p
    hid = int(C * cfg.mlp_ratio)
    n = conv_params(3, C, p) + C  # patch embed + cls token
    if cfg.pos_embed == "absolute-1d":
        n += (g * g + 1) * C
    layer = 2 * 2 * C + mha_params(C) + linear_params(C, hid) + linear_params(hid, C)
    if cfg.pos_embed == "relative-2d-bias":
        layer += ((2 * g - 1) ** 2 + 3) * cfg.num_heads
    return n + cfg.depth * layer + 2 * C


def decoder_params(cfg: ModelConfig) -> int:
    w, K = cfg.decoder_width, cfg.num_classes
    sources = cfg.group_count if cfg.variant == "plainseg" else 3
    layer = 3 * 2 * w + 2 * mha_params(w) + linear_params(w, cfg.ffn_dim) + linear_params(cfg.ffn_dim, w)
    heads = 2 * w + linear_params(w, K + 1) + 3 * linear_params(w, w)
    return 2 * cfg.num_queries * w + sources * w + cfg.decoder_layers * layer + heads


def refiner_params(cfg: ModelConfig) -> int:
    C, n, w = cfg.embed_dim, cfg.group_count, cfg.decoder_width
    return (
        2 * C + conv_params(C, C, 3) + 2 * C  # Norm, Conv3x3, Norm
        + conv_params(C, n * w, 3, groups=n) + 2 * n * w  # grouped conv + Norm
        + conv_params(C, w, 3) + 2 * w + conv_params(w, w, 1)  # mask path
    )


def hier_neck_params(cfg: ModelConfig) -> int:
    C, w = cfg.embed_dim, cfg.decoder_width
    h, P, L = cfg.deform_heads, cfg.deform_points, 3
    n = deconv_params(C, C // 2) + deconv_params(C // 2, C // 4)
    n += conv_params(C // 2, w, 1) + 2 * conv_params(C, w, 1) + 3 * 2 * w
    n += L * w  # level embedding
    msda = linear_params(w, h * L * P * 2) + linear_params(w, h * L * P) + 2 * linear_params(w, w)
    n += msda + 2 * 2 * w + linear_params(w, cfg.deform_ffn) + linear_params(cfg.deform_ffn, w)
    n += conv_params(C // 4, w, 1) + conv_params(w, w, 3) + 2 * w
    return n


def head_params(cfg: ModelConfig) -> int:
    C, K = cfg.embed_dim, cfg.num_classes
    if cfg.variant == "linear":
        return conv_params(C, K, 1)
    if cfg.variant == "simple-upsample":
        return 2 * (conv_params(C, C, 3) + 2 * C) + conv_params(C, K, 1)
    if cfg.variant == "plainseg":
        return refiner_params(cfg) + decoder_params(cfg)
    return hier_neck_params(cfg) + decoder_params(cfg)


@dataclass
class CostReport:
    total_params: int
    pretrained_params: int
    random_params: int
    head_gmacs: float | None = None
    encoder_gmacs: float | None = None
    input_shape: tuple | None = None

    @property
    def rp_percent(self) -> float:
        return 100.0 * self.random_params / self.pretrained_params

    @property
    def total_gmacs(self) -> float | None:
        if self.head_gmacs is None:
            return None
        return self.head_gmacs + self.encoder_gmacs

    def as_pairs(self) -> list[tuple[str, str]]:
        pairs = [
            ("total_params", str(self.total_params)),
            ("pretrained_params", str(self.pretrained_params)),
            ("random_params", str(self.random_params)),
            ("rp_percent", f"{self.rp_percent:.2f}"),
        ]
        if self.head_gmacs is not None:
            pairs += [
                ("input_shape", "x".join(str(s) for s in self.input_shape)),
                ("head_gmacs", f"{self.head_gmacs:.3f}"),
                ("encoder_gmacs", f"{self.encoder_gmacs:.3f}"),
                ("total_gmacs", f"{self.total_gmacs:.3f}"),
                ("mac_convention", MAC_CONVENTION),
            ]
        return pairs

    def to_keyvalue(self) -> str:
        return "\n".join(f"{k}={v}" for k, v in self.as_pairs()) + "\n"

    def to_text(self) -> str:
        lines = [
            f"parameters   {self.total_params / 1e6:8.2f}M total",
            f"  pretrained {self.pretrained_params / 1e6:8.2f}M",
            f"  random     {self.random_params / 1e6:8.2f}M  (R/P {self.rp_percent:.1f}%)",
        ]
        if self.head_gmacs is not None:
            shape = "x".join(str(s) for s in self.input_shape)
            lines += [
                f"GMACs @ {shape}",
                f"  head       {self.head_gmacs:8.2f}",
                f"  encoder    {self.encoder_gmacs:8.2f}",
                f"  total      {self.total_gmacs:8.2f}",
                f"  ({MAC_CONVENTION})",
            ]
        return "\n".join(lines) + "\n"


def count_params(cfg: ModelConfig) -> CostReport:
    pre = encoder_params(cfg)
    rnd = head_params(cfg)
    return CostReport(pre + rnd, pre, rnd)


# ---------------------------------------------------------------- MACs


def encoder_macs(cfg: ModelConfig, hw: tuple) -> int:
    C, p = cfg.embed_dim, cfg.patch_size
    h, w = hw[0] // p, hw[1] // p
    n = h * w + 1
    hid = int(C * cfg.mlp_ratio)
    per_layer = 4 * n * C * C + 2 * n * C * hid + 2 * n * n * C
    return conv_macs(3, C, p, (h, w)) + cfg.depth * per_layer


def _decoder_macs(cfg: ModelConfig, source_hw: list, mask_hw: tuple) -> int:
    w, Nq, K = cfg.decoder_width, cfg.num_queries, cfg.num_classes
    mask_px = mask_hw[0] * mask_hw[1]
    heads = Nq * w * (K + 1) + 3 * Nq * w * w + Nq * w * mask_px
    total = heads
    for j in range(cfg.decoder_layers):
        hs, ws = source_hw[j % len(source_hw)]
        nk = hs * ws
        cross = Nq * w * w * 2 + nk * w * w * 2 + 2 * Nq * nk * w
        self_attn = 4 * Nq * w * w + 2 * Nq * Nq * w
        ffn = 2 * Nq * w * cfg.ffn_dim
        total += cross + self_attn + ffn + heads
    return total


def head_macs(cfg: ModelConfig, hw: tuple) -> int:
    C, K, p = cfg.embed_dim, cfg.num_classes, cfg.patch_size
    h, w = hw[0] // p, hw[1] // p
    if cfg.variant == "linear":
        return conv_macs(C, K, 1, (h, w))
    if cfg.variant == "simple-upsample":
        return conv_macs(C, C, 3, (2 * h, 2 * w)) + conv_macs(C, C, 3, (4 * h, 4 * w)) + conv_macs(C, K, 1, (4 * h, 4 * w))
    D = cfg.decoder_width
    if cfg.variant == "plainseg":
        n = cfg.group_count
        h2, w2, h4, w4 = 2 * h, 2 * w, 4 * h, 4 * w
        macs = conv_macs(C, C, 3, (h2, w2)) + conv_macs(C, n * D, 3, (h2, w2), groups=n)
        macs += conv_macs(C, D, 3, (h4, w4)) + conv_macs(D, D, 1, (h4, w4))
        return macs + _decoder_macs(cfg, [(h2, w2)] * n, (h4, w4))
    # plainseg-hier
    shapes = [(2 * h, 2 * w), (h, w), (h // 2, w // 2)]
    s_tok = sum(a * b for a, b in shapes)
    hh, P, L = cfg.deform_heads, cfg.deform_points, 3
    # deconvs: each input pixel writes a 2x2 block
    macs = h * w * C * (C // 2) * 4 + (2 * h) * (2 * w) * (C // 2) * (C // 4) * 4
    macs += conv_macs(C // 2, D, 1, shapes[0]) + conv_macs(C, D, 1, shapes[1]) + conv_macs(C, D, 1, shapes[2])
    msda = s_tok * (2 * D * D + D * hh * L * P * 3) + s_tok * hh * L * P * (D // hh) * 4
    macs += msda + 2 * s_tok * D * cfg.deform_ffn
    macs += conv_macs(C // 4, D, 1, (4 * h, 4 * w)) + conv_macs(D, D, 3, (4 * h, 4 * w))
    return macs + _decoder_macs(cfg, [shapes[2], shapes[1], shapes[0]], (4 * h, 4 * w))


def count_macs(cfg: ModelConfig, input_hw: tuple | None = None) -> CostReport:
    """Parameter counts plus head/encoder GMACs at ``input_hw`` (default: img_size square)."""
    hw = tuple(input_hw) if input_hw is not None else (cfg.img_size, cfg.img_size)
    rep = count_params(cfg)
    rep.head_gmacs = head_macs(cfg, hw) / 1e9
    rep.encoder_gmacs = encoder_macs(cfg, hw) / 1e9
    rep.input_shape = hw
    return rep
