"""Attention, feed-forward, pre-norm residual layers and bidirectional cross blocks."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import (
    DimensionError,
    Rng,
    Tensor,
    add,
    matmul,
    mul,
    reshape,
    rms_norm,
    scale,
    silu,
    softmax_last,
    transpose,
)

INIT_STD = 0.02


class Module:
    """Parameter container; every Tensor attribute is a parameter.

    Child modules may sit in attributes or in lists. Iteration order is
    attribute insertion order, which fixes checkpoint and init order.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


class Linear(Module):
    """y = x W^T (+ b). ``adapter`` is set by LoRA wrapping and is not a parameter."""

    def __init__(self, in_dim: int, out_dim: int, rng: Rng, bias: bool = False,
                 std: float = INIT_STD):
        self.weight = Tensor(rng.normal((out_dim, in_dim), std), requires_grad=True)
        if bias:
            self.bias = Tensor(np.zeros(out_dim), requires_grad=True)
        self._adapter = None

    @property
    def adapter(self):
        return self._adapter

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def named_parameters(self, prefix: str = ""):
        yield from super().named_parameters(prefix)
        if self._adapter is not None:
            yield f"{prefix}weight.lora_a", self._adapter.a
            yield f"{prefix}weight.lora_b", self._adapter.b

    def __call__(self, x: Tensor, training: bool = False, rng: Rng | None = None) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"linear expects width {self.in_dim}, got shape {x.shape}")
        if self._adapter is not None:
            y = self._adapter.forward(x, training, rng)
        else:
            y = matmul(x, _swap_last(self.weight))
        bias = getattr(self, "bias", None)
        return y if bias is None else add(y, bias)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) v over the last two axes, no mask."""
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"key length {k.shape[-2]} != value length {v.shape[-2]}")
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    d_k = q.shape[-1]
    weights = softmax_last(scale(matmul(q, _swap_last(k)), 1.0 / math.sqrt(d_k)))
    return matmul(weights, v)


def _head_axes(ndim: int) -> list[int]:
    # (..., s, h, dk) <-> (..., h, s, dk)
    lead = list(range(ndim - 2))
    return lead + [ndim - 1, ndim - 2, ndim]


def split_heads(x: Tensor, heads: int) -> Tensor:
    d = x.shape[-1]
    y = reshape(x, x.shape[:-1] + (heads, d // heads))
    return transpose(y, _head_axes(x.ndim))


def merge_heads(x: Tensor) -> Tensor:
    y = transpose(x, _head_axes(x.ndim - 1))
    return reshape(y, y.shape[:-2] + (y.shape[-2] * y.shape[-1],))


class AttentionBlock(Module):
    def __init__(self, d_model: int, heads: int, rng: Rng):
        if heads < 1 or d_model % heads:
            raise ValueError(f"heads={heads} must divide d_model={d_model}")
        self.wq = Linear(d_model, d_model, rng)
        self.wk = Linear(d_model, d_model, rng)
        self.wv = Linear(d_model, d_model, rng)
        self.wo = Linear(d_model, d_model, rng)
        self._heads = heads

    @property
    def heads(self) -> int:
        return self._heads

    @property
    def head_dim(self) -> int:
        return self.wq.out_dim // self._heads


def multi_head_attention(x_q: Tensor, x_kv: Tensor, block: AttentionBlock,
                         training: bool = False, rng: Rng | None = None) -> Tensor:
    d = block.wq.in_dim
    if x_q.shape[-1] != d or x_kv.shape[-1] != d:
        raise DimensionError(f"attention block width {d}, got {x_q.shape} and {x_kv.shape}")
    h = block.heads
    q = split_heads(block.wq(x_q, training, rng), h)
    k = split_heads(block.wk(x_kv, training, rng), h)
    v = split_heads(block.wv(x_kv, training, rng), h)
    return block.wo(merge_heads(attention(q, k, v)), training, rng)


def default_hidden_dim(d_model: int) -> int:
    return max(8, int(round(4 * d_model / 8)) * 8)


class FeedForward(Module):
    def __init__(self, d_model: int, hidden_dim: int, rng: Rng):
        self.w1 = Linear(d_model, hidden_dim, rng)
        self.w2 = Linear(hidden_dim, d_model, rng)
        self.w3 = Linear(d_model, hidden_dim, rng)

    @property
    def hidden_dim(self) -> int:
        return self.w1.out_dim


def feed_forward(x: Tensor, ff: FeedForward, training: bool = False, rng: Rng | None = None,
                 order: str = "product") -> Tensor:
    """W2(silu(W1 x * W3 x)); ``order="swiglu"`` gives W2(silu(W1 x) * W3 x)."""
    a = ff.w1(x, training, rng)
    b = ff.w3(x, training, rng)
    if order == "product":
        inner = silu(mul(a, b))
    elif order == "swiglu":
        inner = mul(silu(a), b)
    else:
        raise ValueError(f"unknown feed-forward order {order!r}")
    return ff.w2(inner, training, rng)


class TransformerLayer(Module):
    def __init__(self, d_model: int, heads: int, hidden_dim: int, rng: Rng):
        self.attn = AttentionBlock(d_model, heads, rng)
        self.ff = FeedForward(d_model, hidden_dim, rng)
        self.norm1 = Tensor(np.ones(d_model), requires_grad=True)
        self.norm2 = Tensor(np.ones(d_model), requires_grad=True)


def layer_forward(x_q: Tensor, x_kv: Tensor | None, layer: TransformerLayer,
                  training: bool = False, rng: Rng | None = None,
                  order: str = "product") -> Tensor:
    """Pre-norm residual layer. ``x_kv=None`` (or ``x_kv is x_q``) means self-attention."""
    nq = rms_norm(x_q, layer.norm1)
    nkv = nq if x_kv is None or x_kv is x_q else rms_norm(x_kv, layer.norm1)
    y = add(x_q, multi_head_attention(nq, nkv, layer.attn, training, rng))
    return add(y, feed_forward(rms_norm(y, layer.norm2), layer.ff, training, rng, order))


class CrossBlock(Module):
    """Two directional layers: text queries vision, vision queries text."""

    def __init__(self, d_model: int, heads: int, hidden_dim: int, rng: Rng):
        self.dir_tv = TransformerLayer(d_model, heads, hidden_dim, rng)
        self.dir_vt = TransformerLayer(d_model, heads, hidden_dim, rng)


def cross_block_forward(t: Tensor, v: Tensor, block: CrossBlock, training: bool = False,
                        rng: Rng | None = None, order: str = "product") -> tuple[Tensor, Tensor]:
    if t.shape[-1] != v.shape[-1]:
        raise DimensionError(f"text width {t.shape[-1]} != vision width {v.shape[-1]}")
    t_out = layer_forward(t, v, block.dir_tv, training, rng, order)
    v_out = layer_forward(v, t, block.dir_vt, training, rng, order)
    return t_out, v_out
