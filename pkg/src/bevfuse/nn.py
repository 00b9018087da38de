"""Layers built on the tensor engine: linear, layernorm, attention, conv.

Modules register parameters as attributes; ``named_parameters`` walks the
attribute insertion order, so names (and checkpoint layout) are deterministic
for a given construction order.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    """Uniform(+-sqrt(1/fan_in)) used by every linear/conv weight and bias."""
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def normal_init(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Module:
    def named_parameters(self, prefix: str = ""):
        for key, value in self.__dict__.items():
            name = f"{prefix}.{key}" if prefix else key
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    def __init__(self, rng, d_in: int, d_out: int):
        self.weight = Parameter(uniform_init(rng, d_in, (d_in, d_out)))
        self.bias = Parameter(uniform_init(rng, d_in, (d_out,)))

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    """Normalize the last axis to zero mean / unit variance, then affine."""

    EPS = 1e-5

    def __init__(self, d: int):
        self.gain = Parameter(np.ones(d))
        self.bias = Parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        mu = T.mean_(x, axis=-1, keepdims=True)
        centered = x - mu
        var = T.mean_(centered * centered, axis=-1, keepdims=True)
        normed = centered / T.sqrt(var + self.EPS)
        return normed * self.gain + self.bias


def channel_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean / unit-variance per channel over the spatial axes of a
    [C, H, W] activation map.  Parameter-free on purpose: its only job is to
    keep the GELU behind a conv trainable.  Early in detection training the
    class imbalance pushes every occupancy logit down at once, and any conv
    bias on that path can absorb the pressure by drifting negative until the
    whole preactivation map sits in the GELU's flat tail, where the gradient
    vanishes and the branch freezes.  Recentring per channel makes that
    degenerate solution unreachable while leaving the conv weights free to
    shape the map."""
    mu = T.mean_(x, axis=(1, 2), keepdims=True)
    centered = x - mu
    var = T.mean_(centered * centered, axis=(1, 2), keepdims=True)
    return centered / T.sqrt(var + eps)


class PositionEmbedding(Module):
    """Learnable per-slot embedding table, N(0, 0.02) initialized."""

    def __init__(self, rng, length: int, d: int):
        self.table = Parameter(normal_init(rng, (length, d)))

    def __call__(self, x: Tensor) -> Tensor:
        # x: [..., length, d]; the table broadcasts over leading axes.
        return x + self.table


class MultiHeadAttention(Module):
    """Scaled dot-product attention, normalized over the key axis.

    With ``tied=True`` all heads share one (d_model, d_model/heads) projection
    for each of Q/K/V: every head computes the same attention pattern and the
    output projection mixes the redundant copies.  Untied heads each own their
    slice of full (d_model, d_model) projections.  Q/K/V parameter count under
    tying is exactly 1/heads of the untied count.
    """

    def __init__(self, rng, d_model: int, heads: int, tied: bool):
        if d_model % heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by heads {heads}")
        self.heads = heads
        self.tied = tied
        self.d_model = d_model
        d_head = d_model // heads
        proj = d_head if tied else d_model
        self.w_q = Parameter(uniform_init(rng, d_model, (d_model, proj)))
        self.b_q = Parameter(uniform_init(rng, d_model, (proj,)))
        self.w_k = Parameter(uniform_init(rng, d_model, (d_model, proj)))
        self.b_k = Parameter(uniform_init(rng, d_model, (proj,)))
        self.w_v = Parameter(uniform_init(rng, d_model, (d_model, proj)))
        self.b_v = Parameter(uniform_init(rng, d_model, (proj,)))
        self.w_o = Parameter(uniform_init(rng, d_model, (d_model, d_model)))
        self.b_o = Parameter(uniform_init(rng, d_model, (d_model,)))

    def __call__(self, query: Tensor, key: Tensor, value: Tensor):
        """query [..., Lq, d], key/value [..., Lk, d].

        Returns (output [..., Lq, d], attention [..., Lq, Lk]) where the
        attention map is averaged over heads (identical across heads when
        tied).  Rows of the map sum to 1; columns are unconstrained.
        """
        d_head = self.d_model // self.heads
        scale = 1.0 / np.sqrt(d_head)

        q = T.matmul(query, self.w_q) + self.b_q
        k = T.matmul(key, self.w_k) + self.b_k
        v = T.matmul(value, self.w_v) + self.b_v

        if self.tied:
            # One head's worth of projections, reused by every head.
            scores = T.matmul(q, _swap_last(k)) * scale
            attn = T.softmax(scores, axis=-1)
            head_out = T.matmul(attn, v)  # [..., Lq, d_head]
            mixed = T.concat([head_out] * self.heads, axis=-1)
            return T.matmul(mixed, self.w_o) + self.b_o, attn

        lead = query.shape[:-2]
        lq, lk = query.shape[-2], key.shape[-2]
        split = lambda t, length: transpose_heads(t, lead, length, self.heads, d_head)
        qh, kh, vh = split(q, lq), split(k, lk), split(v, lk)
        scores = T.matmul(qh, _swap_last(kh)) * scale  # [..., heads, Lq, Lk]
        attn = T.softmax(scores, axis=-1)
        head_out = T.matmul(attn, vh)  # [..., heads, Lq, d_head]
        merged = merge_heads(head_out, lead, lq, self.heads, d_head)
        mean_attn = T.mean_(attn, axis=-3)
        return T.matmul(merged, self.w_o) + self.b_o, mean_attn


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return T.transpose(t, tuple(axes))


def transpose_heads(t: Tensor, lead, length: int, heads: int, d_head: int) -> Tensor:
    """[..., L, heads*d_head] -> [..., heads, L, d_head]."""
    t = T.reshape(t, lead + (length, heads, d_head))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return T.transpose(t, axes)


def merge_heads(t: Tensor, lead, length: int, heads: int, d_head: int) -> Tensor:
    """[..., heads, L, d_head] -> [..., L, heads*d_head]."""
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    t = T.transpose(t, axes)
    return T.reshape(t, lead + (length, heads * d_head))


class FeedForward(Module):
    def __init__(self, rng, d_model: int, d_ff: int):
        self.lin1 = Linear(rng, d_model, d_ff)
        self.lin2 = Linear(rng, d_ff, d_model)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(T.gelu(self.lin1(x)))


class EncoderLayer(Module):
    """Pre-norm self-attention block: x += attn(ln(x)); x += ff(ln(x))."""

    def __init__(self, rng, d_model: int, d_ff: int, heads: int, tied: bool):
        self.norm_attn = LayerNorm(d_model)
        self.attn = MultiHeadAttention(rng, d_model, heads, tied)
        self.norm_ff = LayerNorm(d_model)
        self.ff = FeedForward(rng, d_model, d_ff)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.norm_attn(x)
        out, _ = self.attn(h, h, h)
        x = x + out
        x = x + self.ff(self.norm_ff(x))
        return x


class DecoderLayer(Module):
    """Pre-norm decoder block: self-attention, cross-attention, feed-forward."""

    def __init__(self, rng, d_model: int, d_ff: int, heads: int, tied: bool):
        self.norm_self = LayerNorm(d_model)
        self.self_attn = MultiHeadAttention(rng, d_model, heads, tied)
        self.norm_cross = LayerNorm(d_model)
        self.cross_attn = MultiHeadAttention(rng, d_model, heads, tied)
        self.norm_ff = LayerNorm(d_model)
        self.ff = FeedForward(rng, d_model, d_ff)

    def __call__(self, x: Tensor, memory: Tensor):
        h = self.norm_self(x)
        out, _ = self.self_attn(h, h, h)
        x = x + out
        out, cross = self.cross_attn(self.norm_cross(x), memory, memory)
        x = x + out
        x = x + self.ff(self.norm_ff(x))
        return x, cross


class TransformerEncoder(Module):
    def __init__(self, rng, layers: int, d_model: int, d_ff: int, heads: int, tied: bool):
        if layers < 1:
            raise ValueError(f"encoder needs at least one layer, got {layers}")
        self.layers = [EncoderLayer(rng, d_model, d_ff, heads, tied) for _ in range(layers)]
        self.final_norm = LayerNorm(d_model)

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return self.final_norm(x)


class TransformerDecoder(Module):
    def __init__(self, rng, layers: int, d_model: int, d_ff: int, heads: int, tied: bool):
        if layers < 1:
            raise ValueError(f"decoder needs at least one layer, got {layers}")
        self.layers = [DecoderLayer(rng, d_model, d_ff, heads, tied) for _ in range(layers)]
        self.final_norm = LayerNorm(d_model)

    def __call__(self, x: Tensor, memory: Tensor):
        """Returns (output, cross-attention of the last block, head-averaged)."""
        cross = None
        for layer in self.layers:
            x, cross = layer(x, memory)
        return self.final_norm(x), cross


class Conv2d(Module):
    """Stride-1 'same' convolution over [C, H, W] maps."""

    def __init__(self, rng, c_in: int, c_out: int, kernel: int):
        fan_in = c_in * kernel * kernel
        self.weight = Parameter(uniform_init(rng, fan_in, (c_out, c_in, kernel, kernel)))
        self.bias = Parameter(uniform_init(rng, fan_in, (c_out,)))

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias)
