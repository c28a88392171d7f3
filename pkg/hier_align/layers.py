"""
Parameter factories and transformer building blocks on top of numerics.
"""

from __future__ import annotations

import math
from typing import Any, List, Optional, Tuple

import numpy as np

from hier_align import numerics as nx
from hier_align.numerics import Param, Rng, Tensor


def weight(
    rng: Rng,
    name: str,
    shape: Tuple[int, ...],
    *,
    std: float,
    dtype: Any,
    group: str = "encoder",
    decay: bool = True,
) -> Param:
    data = rng.child(name).truncated_normal(shape, std=std)
    return Param(Tensor(np.ascontiguousarray(data, dtype=dtype), dtype=dtype), name, group=group, decay=decay)


def constant(name: str, shape: Tuple[int, ...], value: float, *, dtype: Any, group: str = "encoder") -> Param:
    return Param(Tensor(np.full(shape, value, dtype=dtype), dtype=dtype), name, group=group, decay=False)


def linear(x: Tensor, w: Param, b: Optional[Param] = None) -> Tensor:
    out = nx.matmul(x, w.value)
    return nx.add(out, b.value) if b is not None else out


def multihead_attention(
    q_in: Tensor,
    kv_in: Tensor,
    w_q: Param,
    w_k: Param,
    w_v: Param,
    heads: int,
    mask: Optional[np.ndarray] = None,
) -> Tuple[Tensor, Tensor]:
    """
    Scaled dot-product attention over [B, Nq, D] queries and [B, Nk, D] keys.
    Returns the merged [B, Nq, D] output and the [B*h, Nq, Nk] weights.
    """
    d = q_in.shape[-1]
    q = nx.split_heads(nx.matmul(q_in, w_q.value), heads)
    k = nx.split_heads(nx.matmul(kv_in, w_k.value), heads)
    v = nx.split_heads(nx.matmul(kv_in, w_v.value), heads)
    scores = nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(d // heads))
    probs = nx.softmax_rows(scores, mask)
    return nx.merge_heads(nx.matmul(probs, v), heads), probs


class Mlp:
    """D -> ratio*D -> D with GELU in between."""

    def __init__(self, prefix: str, dim: int, ratio: int, rng: Rng, *, std: float, dtype: Any, group: str) -> None:
        hidden = dim * ratio
        self.w1 = weight(rng, f"{prefix}.w1", (dim, hidden), std=std, dtype=dtype, group=group)
        self.b1 = constant(f"{prefix}.b1", (hidden,), 0.0, dtype=dtype, group=group)
        self.w2 = weight(rng, f"{prefix}.w2", (hidden, dim), std=std, dtype=dtype, group=group)
        self.b2 = constant(f"{prefix}.b2", (dim,), 0.0, dtype=dtype, group=group)

    def params(self) -> List[Param]:
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, x: Tensor) -> Tensor:
        return linear(nx.gelu(linear(x, self.w1, self.b1)), self.w2, self.b2)


class LayerNorm:
    def __init__(self, prefix: str, dim: int, *, dtype: Any, group: str, eps: float = 1e-5) -> None:
        self.gain = constant(f"{prefix}.gain", (dim,), 1.0, dtype=dtype, group=group)
        self.bias = constant(f"{prefix}.bias", (dim,), 0.0, dtype=dtype, group=group)
        self.eps = eps

    def params(self) -> List[Param]:
        return [self.gain, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.gain.value, self.bias.value, self.eps)


class TransformerBlock:
    """
    Pre-norm self-attention block: x + W_O attn(LN(x)), then x + MLP(LN(x)).
    """

    def __init__(
        self,
        prefix: str,
        dim: int,
        heads: int,
        rng: Rng,
        *,
        mlp_ratio: int = 4,
        std: float = 0.02,
        dtype: Any = np.float32,
    ) -> None:
        if heads < 1 or dim % heads:
            raise ValueError(f"{prefix}: dim={dim} must be divisible by heads={heads}.")
        self.heads = heads
        self.ln1 = LayerNorm(f"{prefix}.ln1", dim, dtype=dtype, group="encoder")
        self.w_q = weight(rng, f"{prefix}.w_q", (dim, dim), std=std, dtype=dtype)
        self.w_k = weight(rng, f"{prefix}.w_k", (dim, dim), std=std, dtype=dtype)
        self.w_v = weight(rng, f"{prefix}.w_v", (dim, dim), std=std, dtype=dtype)
        self.w_o = weight(rng, f"{prefix}.w_o", (dim, dim), std=std, dtype=dtype)
        self.ln2 = LayerNorm(f"{prefix}.ln2", dim, dtype=dtype, group="encoder")
        self.mlp = Mlp(f"{prefix}.mlp", dim, mlp_ratio, rng, std=std, dtype=dtype, group="encoder")

    def params(self) -> List[Param]:
        return [
            *self.ln1.params(),
            self.w_q,
            self.w_k,
            self.w_v,
            self.w_o,
            *self.ln2.params(),
            *self.mlp.params(),
        ]

    def _finish(self, x: Tensor, mixed: Tensor) -> Tensor:
        x = nx.add(x, nx.matmul(mixed, self.w_o.value))
        return nx.add(x, self.mlp(self.ln2(x)))

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        u = self.ln1(x)
        mixed, _ = multihead_attention(u, u, self.w_q, self.w_k, self.w_v, self.heads, mask)
        return self._finish(x, mixed)

    def forward_qk_skip(self, x: Tensor) -> Tensor:
        """
        Token 0 (CLS) attends over every token as usual; every other token keeps
        only its own value projection, so patches do not mix in this block.
        """
        n = x.shape[1]
        u = self.ln1(x)
        cls_mixed, _ = multihead_attention(
            nx.narrow(u, 1, 0, 1), u, self.w_q, self.w_k, self.w_v, self.heads
        )
        if n == 1:
            return self._finish(x, cls_mixed)
        own_values = nx.matmul(nx.narrow(u, 1, 1, n - 1), self.w_v.value)
        return self._finish(x, nx.concat([cls_mixed, own_values], axis=1))
