"""Parameter containers and the layers the encoder and heads are built from."""
from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor, get_default_dtype, reshape, softmax


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Minimal module tree: parameters, buffers, children, train/eval flag."""

    def __init__(self):
        object.__setattr__(self, "_buffers", OrderedDict())
        object.__setattr__(self, "training", True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, val in self.__dict__.items():
            if isinstance(val, Module):
                yield name, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(v, Module) for v in val):
                for i, v in enumerate(val):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, val in self.__dict__.items():
            if isinstance(val, Parameter):
                yield prefix + name, val
        for name, child in self.children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, val in self._buffers.items():
            yield prefix + name, val
        for name, child in self.children():
            yield from child.named_buffers(prefix + name + ".")

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        sd = OrderedDict((n, p.data) for n, p in self.named_parameters())
        sd.update(self.named_buffers())
        return sd

    def load_state_dict(self, state: dict, strict: bool = True) -> list[str]:
        """Copy arrays into matching parameters/buffers; returns names left untouched.

        Non-strict mode ignores unknown names and skips shape mismatches.
        """
        targets = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = [n for n in list(targets) + list(buffers) if n not in state]
        unexpected = [n for n in state if n not in targets and n not in buffers]
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        skip = set()
        for name, arr in state.items():
            dst = targets[name].data if name in targets else buffers.get(name)
            if dst is None:
                continue
            if dst.shape != np.shape(arr):
                if strict:
                    raise ValueError(f"shape mismatch for {name}: {dst.shape} vs {np.shape(arr)}")
                skip.add(name)
                missing.append(name)
        for name, arr in state.items():
            if name in skip:
                continue
            if name in targets:
                targets[name].data[...] = arr
            elif name in buffers:
                buffers[name][...] = arr
        return missing


def _init(shape, std, rng):
    return rng.normal(0.0, std, size=shape).astype(get_default_dtype())


def trunc_normal(shape, std, rng):
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std).astype(get_default_dtype())


def xavier_uniform(shape, rng):
    fan_out, fan_in = shape[0], int(np.prod(shape[1:]))
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True,
                 init: str = "trunc_normal"):
        super().__init__()
        shape = (out_features, in_features)
        if init == "zeros":
            w = np.zeros(shape, dtype=get_default_dtype())
        elif init == "xavier":
            w = xavier_uniform(shape, rng)
        else:
            w = trunc_normal(shape, 0.02, rng)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features, dtype=get_default_dtype())) if bias else None

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, p: ops.ConvParams, rng: np.random.Generator):
        super().__init__()
        self.p = p
        fan_in = (p.in_ch // p.groups) * p.kernel * p.kernel
        self.weight = Parameter(_init((p.out_ch, p.in_ch // p.groups, p.kernel, p.kernel), math.sqrt(2.0 / fan_in), rng))
        self.bias = Parameter(np.zeros(p.out_ch, dtype=get_default_dtype())) if p.has_bias else None

    def forward(self, x):
        if x.shape[1] != self.p.in_ch:
            raise ops.ShapeError(f"conv expects {self.p.in_ch} channels, got {x.shape[1]}")
        return ops.conv2d(x, self.weight, self.bias, self.p.stride, self.p.padding, self.p.groups)


class ConvTranspose2d(Module):
    """2x2 stride-2 deconvolution."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = Parameter(_init((in_ch, out_ch, 2, 2), math.sqrt(2.0 / (in_ch * 4)), rng))
        self.bias = Parameter(np.zeros(out_ch, dtype=get_default_dtype())) if bias else None

    def forward(self, x):
        return ops.conv_transpose2d(x, self.weight, self.bias)


class LayerNorm(Module):
    """LayerNorm over one axis (``axis=1`` for channel-wise LN on NCHW maps)."""

    def __init__(self, dim: int, axis: int = -1):
        super().__init__()
        self.axis = axis
        self.weight = Parameter(np.ones(dim, dtype=get_default_dtype()))
        self.bias = Parameter(np.zeros(dim, dtype=get_default_dtype()))

    def forward(self, x):
        return ops.layer_norm(x, self.weight, self.bias, axis=self.axis)


class BatchNorm2d(Module):
    def __init__(self, dim: int, momentum: float = 0.1):
        super().__init__()
        self.momentum = momentum
        self.weight = Parameter(np.ones(dim, dtype=get_default_dtype()))
        self.bias = Parameter(np.zeros(dim, dtype=get_default_dtype()))
        self.register_buffer("running_mean", np.zeros(dim, dtype=np.float64))
        self.register_buffer("running_var", np.ones(dim, dtype=np.float64))

    def forward(self, x):
        return ops.batch_norm(x, self.running_mean, self.running_var, self.weight, self.bias,
                              self.training, self.momentum)


def make_norm(kind: str, dim: int) -> Module:
    if kind == "ln":
        return LayerNorm(dim, axis=1)
    if kind == "bn":
        return BatchNorm2d(dim)
    raise ValueError(f"unknown norm kind {kind!r}")


class MultiheadAttention(Module):
    """Separate q/k/v input projections plus an output projection."""

    def __init__(self, p: ops.AttentionParams, rng: np.random.Generator):
        super().__init__()
        self.p = p
        E = p.embed_dim
        self.q_proj = Linear(E, E, rng, init="xavier")
        self.k_proj = Linear(E, E, rng, init="xavier")
        self.v_proj = Linear(E, E, rng, init="xavier")
        self.out_proj = Linear(E, E, rng, init="xavier")

    def forward(self, q, k, v, attn_mask=None, attn_bias=None, return_weights=False):
        return ops.multi_head_attention(
            q, k, v,
            self.q_proj.weight, self.q_proj.bias, self.k_proj.weight, self.k_proj.bias,
            self.v_proj.weight, self.v_proj.bias, self.out_proj.weight, self.out_proj.bias,
            self.p.num_heads, attn_mask=attn_mask, attn_bias=attn_bias, return_weights=return_weights,
        )


class MLP(Module):
    """Stack of linears with ReLU between them (none after the last)."""

    def __init__(self, dims: list[int], rng: np.random.Generator):
        super().__init__()
        self.layers = [Linear(a, b, rng, init="xavier") for a, b in zip(dims[:-1], dims[1:])]

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ops.relu(x)
        return x


class MSDeformAttn(Module):
    """Multi-scale deformable attention with learned offsets and weights.

    Offsets start at a radial pattern (one direction per head, radius growing
    with point index); attention logits start at zero, i.e. uniform weights.
    """

    def __init__(self, d_model: int, n_levels: int, rng: np.random.Generator, n_heads: int = 8, n_points: int = 4):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.d_model, self.n_levels, self.n_heads, self.n_points = d_model, n_levels, n_heads, n_points
        self.sampling_offsets = Linear(d_model, n_heads * n_levels * n_points * 2, rng, init="zeros")
        thetas = np.arange(n_heads) * (2.0 * math.pi / n_heads)
        grid = np.stack([np.cos(thetas), np.sin(thetas)], -1)
        grid = grid / np.abs(grid).max(-1, keepdims=True)
        grid = np.tile(grid[:, None, None, :], (1, n_levels, n_points, 1))
        grid *= np.arange(1, n_points + 1)[None, None, :, None]
        self.sampling_offsets.bias.data[...] = grid.reshape(-1)
        self.attention_weights = Linear(d_model, n_heads * n_levels * n_points, rng, init="zeros")
        self.value_proj = Linear(d_model, d_model, rng, init="xavier")
        self.output_proj = Linear(d_model, d_model, rng, init="xavier")

    def forward(self, query, reference_points: np.ndarray, value_in, spatial_shapes):
        """query [B,Q,D]; reference_points [B,Q,L,2] normalised (x, y); value_in [B,S,D]."""
        B, Q, _ = query.shape
        S = value_in.shape[1]
        h, L, P = self.n_heads, self.n_levels, self.n_points
        shapes = np.asarray(spatial_shapes, dtype=np.int64).reshape(-1, 2)
        if len(shapes) != L:
            raise ValueError(f"expected {L} levels, got {len(shapes)}")
        value = reshape(self.value_proj(value_in), (B, S, h, self.d_model // h))
        offsets = reshape(self.sampling_offsets(query), (B, Q, h, L, P, 2))
        logits = reshape(self.attention_weights(query), (B, Q, h, L * P))
        weights = reshape(softmax(logits, axis=-1), (B, Q, h, L, P))
        normalizer = shapes[:, ::-1].astype(query.data.dtype)  # (W, H) per level
        ref = np.asarray(reference_points, dtype=query.data.dtype)[:, :, None, :, None, :]
        loc = offsets * (1.0 / normalizer)[None, None, None, :, None, :] + ref
        out = ops.ms_deformable_attention(value, shapes, loc, weights)
        return self.output_proj(out)
