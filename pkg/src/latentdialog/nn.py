"""Transformer building blocks on top of :mod:`latentdialog.tensor`."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor

NEG_INF = -1e9

_dropout_rng = None


class dropout_active:
    """Enable dropout inside the block, drawing masks from ``rng``; outside it dropout is the identity."""

    def __init__(self, rng):
        self.rng = rng

    def __enter__(self):
        global _dropout_rng
        self.prev, _dropout_rng = _dropout_rng, self.rng
        return self

    def __exit__(self, *exc):
        global _dropout_rng
        _dropout_rng = self.prev
        return False


def dropout(x, p):
    """Inverted dropout; a no-op when ``p == 0`` or outside :class:`dropout_active`."""
    if p <= 0.0 or _dropout_rng is None:
        return x
    keep = _dropout_rng.random(x.shape) >= p
    return x * Tensor((keep / (1.0 - p)).astype(x.dtype))


class Module:
    """Parameter container; parameters are discovered from instance attributes in definition order."""

    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return sum(p.size for p in self.parameters())

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, arrays):
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(arrays))
        unexpected = sorted(set(arrays) - set(params))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in params.items():
            arr = np.asarray(arrays[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _normal(rng, shape, std, dtype):
    return (rng.standard_normal(shape) * std).astype(dtype)


class Linear(Module):
    def __init__(self, d_in, d_out, rng, dtype=np.float32, bias=True, std=None):
        std = d_in ** -0.5 if std is None else std
        self.weight = Parameter(_normal(rng, (d_in, d_out), std, dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Embedding(Module):
    def __init__(self, n, d, rng, dtype=np.float32, std=0.02):
        self.weight = Parameter(_normal(rng, (n, d), std, dtype))

    def __call__(self, ids):
        return T.embedding(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, d, dtype=np.float32, eps=1e-5):
        self.gain = Parameter(np.ones(d, dtype=dtype))
        self.bias = Parameter(np.zeros(d, dtype=dtype))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class FeedForward(Module):
    def __init__(self, d, d_ff, rng, dtype=np.float32):
        self.fc1 = Linear(d, d_ff, rng, dtype)
        self.fc2 = Linear(d_ff, d, rng, dtype)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    def __init__(self, d, n_heads, rng, dtype=np.float32, d_kv=None):
        if d % n_heads:
            raise ValueError(f"hidden size {d} not divisible by {n_heads} heads")
        d_kv = d if d_kv is None else d_kv
        self.n_heads = n_heads
        self.q = Linear(d, d, rng, dtype)
        self.k = Linear(d_kv, d, rng, dtype)
        self.v = Linear(d_kv, d, rng, dtype)
        self.o = Linear(d, d, rng, dtype)

    def _split(self, x):
        b, length, d = x.shape
        return x.reshape(b, length, self.n_heads, d // self.n_heads).transpose(0, 2, 1, 3)

    def __call__(self, x_q, x_k, x_v, allowed=None):
        """``allowed`` is a boolean array broadcastable to ``[B, 1, Lq, Lk]``.

        Query rows with no allowed key produce a zero attention output.
        """
        b, lq, d = x_q.shape
        dh = d // self.n_heads
        q = self._split(self.q(x_q))
        k = self._split(self.k(x_k))
        v = self._split(self.v(x_v))
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) * (dh ** -0.5)
        if allowed is not None:
            blocked = ~allowed
            scores = T.masked_fill(scores, blocked, NEG_INF)
            weights = T.scale_by_mask(T.softmax(scores, axis=-1), allowed)
        else:
            weights = T.softmax(scores, axis=-1)
        ctx = T.matmul(weights, v).transpose(0, 2, 1, 3).reshape(b, lq, d)
        return self.o(ctx)


def key_padding_allowed(key_mask):
    """``[B, Lk]`` validity mask -> ``[B, 1, 1, Lk]``."""
    return np.asarray(key_mask, dtype=bool)[:, None, None, :]


def causal_allowed(length, n_prefix=0):
    """``[1, 1, L, n_prefix + L]``: every query sees the prefix slots and keys at or before itself."""
    tri = np.tril(np.ones((length, length), dtype=bool))
    if n_prefix:
        tri = np.concatenate([np.ones((length, n_prefix), dtype=bool), tri], axis=1)
    return tri[None, None]


def sinusoidal_embedding(t, dim, max_period=10000.0):
    """Fixed sinusoidal features for integer timesteps ``t`` -> ``[len(t), dim]`` (float64)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


class EncoderLayer(Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, d, n_heads, d_ff, rng, dtype=np.float32, p_drop=0.0):
        self.ln1 = LayerNorm(d, dtype)
        self.attn = MultiHeadAttention(d, n_heads, rng, dtype)
        self.ln2 = LayerNorm(d, dtype)
        self.ff = FeedForward(d, d_ff, rng, dtype)
        self.p_drop = p_drop

    def __call__(self, x, allowed):
        h = self.ln1(x)
        x = x + dropout(self.attn(h, h, h, allowed), self.p_drop)
        return x + dropout(self.ff(self.ln2(x)), self.p_drop)


class DecoderLayer(Module):
    """Pre-norm causal self-attention (optionally with prefix memory), cross-attention, feed-forward."""

    def __init__(self, d, n_heads, d_ff, rng, dtype=np.float32, d_cross=None, p_drop=0.0):
        self.ln1 = LayerNorm(d, dtype)
        self.self_attn = MultiHeadAttention(d, n_heads, rng, dtype)
        self.ln2 = LayerNorm(d, dtype)
        self.cross_attn = MultiHeadAttention(d, n_heads, rng, dtype, d_kv=d_cross)
        self.ln3 = LayerNorm(d, dtype)
        self.ff = FeedForward(d, d_ff, rng, dtype)
        self.p_drop = p_drop

    def __call__(self, x, self_allowed, memory_states, cross_allowed, mem_key=None, mem_value=None):
        h = self.ln1(x)
        if mem_key is not None:
            keys = T.concat([mem_key, h], axis=1)
            values = T.concat([mem_value, h], axis=1)
        else:
            keys = values = h
        x = x + dropout(self.self_attn(h, keys, values, self_allowed), self.p_drop)
        x = x + dropout(self.cross_attn(self.ln2(x), memory_states, memory_states, cross_allowed), self.p_drop)
        return x + dropout(self.ff(self.ln3(x)), self.p_drop)
