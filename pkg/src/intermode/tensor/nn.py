"""Small layer library on top of :mod:`ops`.

Layers hold only structure (names and sizes). Parameters live in a flat
``dict[str, ndarray]`` produced by :meth:`Module.init` and are read back
through ``Graph.param`` during the forward pass.
"""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .engine import Graph, Node


class Module:
    name: str

    def children(self) -> list["Module"]:
        return [v for v in vars(self).values() if isinstance(v, Module)] + [
            m for v in vars(self).values() if isinstance(v, list) for m in v if isinstance(m, Module)
        ]

    def own_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        return {}

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        out = self.own_params(rng)
        for child in self.children():
            out.update(child.init(rng))
        return out


class Linear(Module):
    def __init__(self, name: str, din: int, dout: int, use_bias: bool = True, init_scale: float = 1.0):
        self.name, self.din, self.dout, self.use_bias = name, din, dout, use_bias
        self.init_scale = init_scale

    def own_params(self, rng):
        std = self.init_scale / math.sqrt(self.din)
        p = {f"{self.name}.w": (rng.standard_normal((self.din, self.dout)) * std).astype(np.float32)}
        if self.use_bias:
            p[f"{self.name}.b"] = np.zeros(self.dout, dtype=np.float32)
        return p

    def __call__(self, g: Graph, x: Node) -> Node:
        y = ops.linear(x, g.param(f"{self.name}.w"))
        if self.use_bias:
            y = ops.bias(y, g.param(f"{self.name}.b"))
        return y


class LayerNorm(Module):
    def __init__(self, name: str, dim: int):
        self.name, self.dim = name, dim

    def own_params(self, rng):
        return {f"{self.name}.gamma": np.ones(self.dim, dtype=np.float32),
                f"{self.name}.beta": np.zeros(self.dim, dtype=np.float32)}

    def __call__(self, g, x):
        return ops.layer_norm(x, g.param(f"{self.name}.gamma"), g.param(f"{self.name}.beta"))


class ResBlock(Module):
    """Pre-norm residual MLP block: ``x + W2 relu(W1 LN(x))``."""

    def __init__(self, name: str, dim: int, hidden: int | None = None):
        hidden = hidden or 2 * dim
        self.name = name
        self.norm = LayerNorm(f"{name}.ln", dim)
        self.fc1 = Linear(f"{name}.fc1", dim, hidden)
        self.fc2 = Linear(f"{name}.fc2", hidden, dim, init_scale=0.5)

    def __call__(self, g, x):
        return x + self.fc2(g, ops.relu(self.fc1(g, self.norm(g, x))))


class ResMLP(Module):
    """Input projection, ``depth`` residual blocks, output projection."""

    def __init__(self, name: str, din: int, hidden: int, dout: int, depth: int = 2):
        self.name = name
        self.inp = Linear(f"{name}.in", din, hidden)
        self.blocks = [ResBlock(f"{name}.block{i}", hidden) for i in range(depth)]
        self.norm = LayerNorm(f"{name}.ln", hidden)
        self.out = Linear(f"{name}.out", hidden, dout)

    def __call__(self, g, x):
        h = self.inp(g, x)
        for blk in self.blocks:
            h = blk(g, h)
        return self.out(g, ops.relu(self.norm(g, h)))


class MultiHeadAttention(Module):
    def __init__(self, name: str, dim: int, heads: int):
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.name, self.dim, self.heads = name, dim, heads
        self.qkv = Linear(f"{name}.qkv", dim, 3 * dim)
        self.proj = Linear(f"{name}.proj", dim, dim, init_scale=0.5)

    def __call__(self, g, x, mask=None):
        b, t, d = x.shape
        h, dh = self.heads, self.dim // self.heads
        qkv = ops.reshape(self.qkv(g, x), (b, t, 3, h, dh))
        qkv = ops.transpose(qkv, (2, 0, 3, 1, 4))  # (3, b, h, t, dh)
        q = ops.slice_(qkv, (0,))
        k = ops.slice_(qkv, (1,))
        v = ops.slice_(qkv, (2,))
        y = ops.attention(q, k, v, mask)
        y = ops.reshape(ops.transpose(y, (0, 2, 1, 3)), (b, t, d))
        return self.proj(g, y)


class TransformerBlock(Module):
    def __init__(self, name: str, dim: int, heads: int, mlp_ratio: int = 2):
        self.name = name
        self.ln1 = LayerNorm(f"{name}.ln1", dim)
        self.attn = MultiHeadAttention(f"{name}.attn", dim, heads)
        self.ln2 = LayerNorm(f"{name}.ln2", dim)
        self.fc1 = Linear(f"{name}.fc1", dim, mlp_ratio * dim)
        self.fc2 = Linear(f"{name}.fc2", mlp_ratio * dim, dim, init_scale=0.5)

    def __call__(self, g, x, mask=None):
        x = x + self.attn(g, self.ln1(g, x), mask)
        return x + self.fc2(g, ops.gelu(self.fc1(g, self.ln2(g, x))))


class Transformer(Module):
    def __init__(self, name: str, dim: int, heads: int, layers: int, mlp_ratio: int = 2):
        self.name = name
        self.blocks = [TransformerBlock(f"{name}.layer{i}", dim, heads, mlp_ratio) for i in range(layers)]
        self.norm = LayerNorm(f"{name}.ln_f", dim)

    def __call__(self, g, x, mask=None):
        for blk in self.blocks:
            x = blk(g, x, mask)
        return self.norm(g, x)
