"""Shared transformer building blocks: attention, MLP, norms, init.

Parameter structs are plain dataclasses of Tensors; ``named()`` flattens
them into an ordered {name: Tensor} mapping for the optimizer and the
checkpoint writer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import SeededRng, Tensor

INIT_STD = 0.02


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bq: Tensor
    bk: Tensor
    bv: Tensor
    bo: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.wq": self.wq, f"{prefix}.wk": self.wk,
            f"{prefix}.wv": self.wv, f"{prefix}.wo": self.wo,
            f"{prefix}.bq": self.bq, f"{prefix}.bk": self.bk,
            f"{prefix}.bv": self.bv, f"{prefix}.bo": self.bo,
        }


@dataclass
class MlpParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.w1": self.w1, f"{prefix}.b1": self.b1,
            f"{prefix}.w2": self.w2, f"{prefix}.b2": self.b2,
        }


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}


def init_attention(dim: int, rng: SeededRng, zero_output: bool = False) -> AttentionParams:
    """Standard attention init; zero_output zeroes the output projection so
    the sub-layer contributes nothing until trained."""
    def w():
        return Tensor(rng.trunc_normal((dim, dim), std=INIT_STD), requires_grad=True)

    def b():
        return Tensor(np.zeros(dim), requires_grad=True)

    wo = Tensor(np.zeros((dim, dim)), requires_grad=True) if zero_output else w()
    return AttentionParams(wq=w(), wk=w(), wv=w(), wo=wo, bq=b(), bk=b(), bv=b(), bo=b())


def init_mlp(dim: int, hidden: int, rng: SeededRng) -> MlpParams:
    return MlpParams(
        w1=Tensor(rng.trunc_normal((dim, hidden), std=INIT_STD), requires_grad=True),
        b1=Tensor(np.zeros(hidden), requires_grad=True),
        w2=Tensor(rng.trunc_normal((hidden, dim), std=INIT_STD), requires_grad=True),
        b2=Tensor(np.zeros(dim), requires_grad=True),
    )


def init_norm(dim: int) -> NormParams:
    return NormParams(
        gamma=Tensor(np.ones(dim), requires_grad=True),
        beta=Tensor(np.zeros(dim), requires_grad=True),
    )


def multi_head_attention(x: Tensor, p: AttentionParams, heads: int,
                         key_mask: np.ndarray | None = None,
                         return_weights: bool = False):
    """Scaled dot-product self-attention over the second-to-last axis.

    x: [G, T, D] (G independent groups attend internally over T tokens).
    key_mask: optional [G, T] array, 1 for usable keys and 0 for masked
    ones; masked keys receive an additive score that underflows to exactly
    zero weight after softmax.
    """
    if x.array.ndim != 3:
        raise ShapeError(f"attention expects [groups, tokens, dim], got {x.shape}")
    g, t, d = x.shape
    if d % heads != 0:
        raise ShapeError(f"dim {d} not divisible by {heads} heads")
    dh = d // heads

    def split_heads(z):  # [G, T, D] -> [G, heads, T, dh]
        return T.transpose(T.reshape(z, (g, t, heads, dh)), (0, 2, 1, 3))

    q = split_heads(T.linear(x, p.wq, p.bq))
    k = split_heads(T.linear(x, p.wk, p.bk))
    v = split_heads(T.linear(x, p.wv, p.bv))

    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if key_mask is not None:
        bias = np.where(key_mask[:, None, None, :] > 0, 0.0, T.MASK_VALUE)
        scores = T.add(scores, Tensor(np.broadcast_to(bias, scores.shape).copy()))
    weights = T.softmax_lastdim(scores)  # [G, heads, T, T]

    out = T.matmul(weights, v)
    out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (g, t, d))
    out = T.linear(out, p.wo, p.bo)
    if return_weights:
        return out, weights
    return out


def mlp_forward(x: Tensor, p: MlpParams) -> Tensor:
    return T.linear(T.gelu(T.linear(x, p.w1, p.b1)), p.w2, p.b2)
