"""Parameterized building blocks shared by the encoder and the planner."""
import math
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from gaussfusion.core.errors import DimensionError
from gaussfusion.core.ops import activation, layer_norm, linear, softmax
from gaussfusion.core.params import ParameterStore
from gaussfusion.core.tensor import NumericArray, lift


class Dense:
    def __init__(self, store: ParameterStore, path: str, fan_in: int, fan_out: int, act: str = 'identity',
                 zero: bool = False, bias: Optional[np.ndarray] = None, use_bias: bool = True, std: Optional[float] = None):
        if std is not None:
            self.w = store.normal(f"{path}.w", (fan_in, fan_out), std)
            self.b = store.add(f"{path}.b", np.zeros(fan_out) if bias is None else bias) if use_bias else None
        elif use_bias:
            self.w, self.b = store.linear(path, fan_in, fan_out, zero=zero, bias=bias)
        else:
            self.w = store.zeros(f"{path}.w", (fan_in, fan_out)) if zero else \
                store.uniform(f"{path}.w", (fan_in, fan_out), 1.0 / math.sqrt(fan_in))
            self.b = None
        self.act = act

    def __call__(self, x) -> NumericArray:
        return activation(self.act)(linear(x, self.w, self.b))

    def as_layer(self):
        return self.w, self.b, self.act


class Mlp:
    """Chain of Dense layers; ``widths`` includes input and output widths."""

    def __init__(self, store: ParameterStore, path: str, widths: Sequence[int], act: str = 'relu',
                 zero_last: bool = False, last_bias: Optional[np.ndarray] = None, last_std: Optional[float] = None):
        self.layers: List[Dense] = []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            last = i == len(widths) - 2
            self.layers.append(Dense(store, f"{path}.fc{i + 1}", fan_in, fan_out,
                                     act='identity' if last else act,
                                     zero=zero_last and last, bias=last_bias if last else None,
                                     std=last_std if last else None))

    def __call__(self, x) -> NumericArray:
        for layer in self.layers:
            x = layer(x)
        return x

    @property
    def last(self) -> Dense:
        return self.layers[-1]


class LayerNorm:
    def __init__(self, store: ParameterStore, path: str, dim: int):
        self.gain, self.bias = store.layer_norm(path, dim)

    def __call__(self, x) -> NumericArray:
        return layer_norm(x, self.gain, self.bias)


class FeedForward:
    """Pre-norm residual FFN with hidden width 4d."""

    def __init__(self, store: ParameterStore, path: str, dim: int, expansion: int = 4):
        self.norm = LayerNorm(store, f"{path}.norm", dim)
        self.mlp = Mlp(store, path, [dim, expansion * dim, dim])

    def __call__(self, x) -> NumericArray:
        return x + self.mlp(self.norm(x))


class Attended(NamedTuple):
    output: NumericArray
    weights: NumericArray


def split_heads(x: NumericArray, heads: int) -> NumericArray:
    """(..., n, d) -> (..., heads, n, d / heads)."""
    *lead, n, dim = x.shape
    return x.reshape(*lead, n, heads, dim // heads).swapaxes(-2, -3)


def merge_heads(x: NumericArray) -> NumericArray:
    """(..., heads, n, dh) -> (..., n, heads * dh)."""
    *lead, heads, n, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, n, heads * dh)


def scaled_dot_attention(q: NumericArray, k: NumericArray, v: NumericArray) -> Attended:
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    weights = softmax(scores, axis=-1)
    return Attended(weights @ v, weights)


class MultiHeadAttention:
    """Scaled dot-product attention with separate query/key/value/output projections.

    Leading batch dimensions of the inputs are carried through.
    """

    def __init__(self, store: ParameterStore, path: str, dim: int, heads: int,
                 key_dim: Optional[int] = None, value_dim: Optional[int] = None):
        if dim % heads:
            raise DimensionError(f"attention width {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = Dense(store, f"{path}.q", dim, dim)
        self.k_proj = Dense(store, f"{path}.k", key_dim or dim, dim)
        self.v_proj = Dense(store, f"{path}.v", value_dim or key_dim or dim, dim)
        self.o_proj = Dense(store, f"{path}.o", dim, dim)

    def __call__(self, query, keys, values) -> Attended:
        q = split_heads(self.q_proj(query), self.heads)
        k = split_heads(self.k_proj(keys), self.heads)
        v = split_heads(self.v_proj(values), self.heads)
        out, weights = scaled_dot_attention(q, k, v)
        return Attended(self.o_proj(merge_heads(out)), weights)


class CrossAttentionBlock:
    """Pre-norm attention with residual, followed by the residual FFN.

    Positional terms are added to the normalized queries and to the keys only.
    """

    def __init__(self, store: ParameterStore, path: str, dim: int, heads: int,
                 key_dim: Optional[int] = None):
        self.norm = LayerNorm(store, f"{path}.norm", dim)
        self.attn = MultiHeadAttention(store, f"{path}.attn", dim, heads, key_dim=key_dim)
        self.ffn = FeedForward(store, f"{path}.ffn", dim)

    def __call__(self, query, keys, values=None, query_pos=None, key_pos=None):
        query = lift(query)
        normed = self.norm(query)
        q_in = normed if query_pos is None else normed + query_pos
        k_in = keys if key_pos is None else keys + key_pos
        update, weights = self.attn(q_in, k_in, keys if values is None else values)
        return self.ffn(query + update), update, weights


class SelfAttentionBlock(CrossAttentionBlock):
    """Self-attention over a set with positional terms on queries and keys."""

    def __call__(self, x, pos=None):
        x = lift(x)
        normed = self.norm(x)
        qk = normed if pos is None else normed + pos
        update, weights = self.attn(qk, qk, normed)
        return self.ffn(x + update), update, weights
