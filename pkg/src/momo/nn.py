"""Parameter containers and transformer building blocks."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor, get_dtype, parameter


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(get_dtype())


LINEAR_INITS = ("xavier", "trunc_normal")


def linear_weight(rng: np.random.Generator, d_in: int, d_out: int, init: str = "xavier") -> np.ndarray:
    """Xavier-uniform (default) or truncated-normal weights for a dense map."""
    if init == "xavier":
        bound = np.sqrt(6.0 / (d_in + d_out))
        return rng.uniform(-bound, bound, (d_in, d_out)).astype(get_dtype())
    if init == "trunc_normal":
        return trunc_normal(rng, (d_in, d_out))
    raise ValueError(f"unknown linear init {init!r}, expected one of {LINEAR_INITS}")


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        seen: set[int] = set()
        for name, p in self._walk(prefix):
            if id(p) not in seen:
                seen.add(id(p))
                yield name, p

    def _walk(self, prefix: str):
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield name, val
            elif isinstance(val, Module):
                yield from val._walk(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item._walk(f"{name}.{i}.")
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, Module):
                        yield from item._walk(f"{name}.{k}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, init: str = "xavier"):
        self.weight = parameter(linear_weight(rng, d_in, d_out, init))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.weight = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class Attention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, init: str = "xavier"):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng, init=init)
        self.proj = Linear(dim, dim, rng, init=init)

    def __call__(self, x: Tensor, record: list | None = None) -> Tensor:
        b, n, d = x.shape
        h = self.heads
        dh = d // h
        qkv = T.transpose(T.reshape(self.qkv(x), (b, n, 3, h, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (dh ** -0.5)
        probs = T.softmax(scores, axis=-1)
        if record is not None:
            record.append(probs.data.copy())
        out = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (b, n, d))
        return self.proj(out)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, init: str = "xavier"):
        self.fc1 = Linear(dim, hidden, rng, init=init)
        self.fc2 = Linear(hidden, dim, rng, init=init)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4,
                 eps: float = 1e-6, dropout: float = 0.0, init: str = "xavier"):
        self.norm1 = LayerNorm(dim, eps)
        self.attn = Attention(dim, heads, rng, init)
        self.norm2 = LayerNorm(dim, eps)
        self.mlp = MLP(dim, dim * mlp_ratio, rng, init)
        self.dropout = dropout

    def __call__(self, x: Tensor, record: list | None = None, rng: np.random.Generator | None = None) -> Tensor:
        x = x + T.dropout(self.attn(self.norm1(x), record), self.dropout, rng)
        return x + T.dropout(self.mlp(self.norm2(x)), self.dropout, rng)


class Transformer(Module):
    def __init__(self, depth: int, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 4,
                 eps: float = 1e-6, dropout: float = 0.0, init: str = "xavier"):
        self.blocks = [Block(dim, heads, rng, mlp_ratio, eps, dropout, init) for _ in range(depth)]
        self.norm = LayerNorm(dim, eps)

    def __call__(self, x: Tensor, record: list | None = None, rng: np.random.Generator | None = None) -> Tensor:
        for blk in self.blocks:
            x = blk(x, record, rng)
        return self.norm(x)


def sincos_table(n: int, dim: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    freq = 1.0 / 10000 ** (np.arange(0, dim, 2) / dim)
    table = np.zeros((n, dim))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: dim // 2])
    return table.astype(get_dtype())
