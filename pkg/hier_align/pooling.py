"""
Text-conditioned cross-attention pooling.

Each text query attends over an image's patches and yields one visual
embedding per query. There is no residual from the query around attention
and no output projection after the head concat.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Any, List, Union

import numpy as np

from hier_align import numerics as nx
from hier_align.encoders import ImageTokens, TextBank
from hier_align.errors import DimensionError
from hier_align.layers import LayerNorm, Mlp, multihead_attention, weight
from hier_align.numerics import Param, Rng, Tensor


class PoolResidual(str, Enum):
    PRE_NORM = "pre_norm"  # pooled + MLP(LN(pooled))
    NORMED = "normed"  # LN(pooled) + MLP(LN(pooled))


def default_pool_heads(dim: int) -> int:
    return 8 if dim >= 64 else 4


@dataclass
class PooledFeatures:
    V: Tensor  # [B, K, D], or [K, D] for a single image
    alphas: np.ndarray  # [B, K, h, N], or [K, h, N]


class PoolBlock:
    def __init__(
        self,
        dim: int,
        heads: int,
        rng: Rng,
        *,
        mlp_ratio: int = 4,
        init_std: float = 0.02,
        residual: PoolResidual = PoolResidual.NORMED,
        dtype: Any = np.float32,
    ) -> None:
        if heads < 1 or dim % heads:
            raise ValueError(f"model.pool_heads={heads} must divide model.dim={dim}.")
        self.dim = dim
        self.heads = heads
        self.residual = PoolResidual(residual)
        self.w_q = weight(rng, "pool.w_q", (dim, dim), std=init_std, dtype=dtype, group="pool")
        self.w_k = weight(rng, "pool.w_k", (dim, dim), std=init_std, dtype=dtype, group="pool")
        self.w_v = weight(rng, "pool.w_v", (dim, dim), std=init_std, dtype=dtype, group="pool")
        self.ln = LayerNorm("pool.ln", dim, dtype=dtype, group="pool")
        self.mlp = Mlp("pool.mlp", dim, mlp_ratio, rng, std=init_std, dtype=dtype, group="pool")

    def params(self) -> List[Param]:
        return [self.w_q, self.w_k, self.w_v, *self.ln.params(), *self.mlp.params()]

    def __call__(self, texts: Tensor, patches: Tensor) -> PooledFeatures:
        if texts.ndim != 3 or patches.ndim != 3:
            raise DimensionError(f"pool expects [B, K, D] and [B, N, D], got {texts.shape} and {patches.shape}")
        b, k, d = texts.shape
        if patches.shape[0] != b or patches.shape[2] != d or d != self.dim:
            raise DimensionError(f"pool inputs disagree: texts {texts.shape}, patches {patches.shape}, D={self.dim}")
        if k < 1 or patches.shape[1] < 1:
            raise DimensionError("pool needs K >= 1 queries and N >= 1 patches")
        pooled, probs = multihead_attention(texts, patches, self.w_q, self.w_k, self.w_v, self.heads)
        normed = self.ln(pooled)
        base = pooled if self.residual == PoolResidual.PRE_NORM else normed
        out = nx.add(base, self.mlp(normed))
        n = patches.shape[1]
        alphas = probs.data.reshape(b, self.heads, k, n).transpose(0, 2, 1, 3)
        return PooledFeatures(V=out, alphas=np.ascontiguousarray(alphas))


def _as_tensor(x: Union[TextBank, Tensor]) -> Tensor:
    return x.T if isinstance(x, TextBank) else x


def cross_attention_pool(
    texts: Union[TextBank, Tensor],
    patches: Tensor,
    block: PoolBlock,
) -> PooledFeatures:
    """
    Pool ``patches`` once per text query. Accepts a single image ([K, D] with
    [N, D]) or a batch ([B, K, D] with [B, N, D]).
    """
    t = _as_tensor(texts)
    if t.ndim == 2 and patches.ndim == 2:
        out = block(nx.reshape(t, (1, *t.shape)), nx.reshape(patches, (1, *patches.shape)))
        return PooledFeatures(V=nx.reshape(out.V, t.shape), alphas=out.alphas[0])
    return block(t, patches)


def tci_embed(image: ImageTokens, text: Tensor, block: PoolBlock, index: int = 0) -> Tensor:
    """Text-conditioned image embedding [D] of image ``index`` for one query [D]."""
    patches = image.patches
    if patches.ndim == 3:
        patches = nx.reshape(nx.narrow(patches, 0, index, 1), patches.shape[1:])
    if text.ndim != 1:
        raise DimensionError(f"tci_embed expects a single [D] query, got {text.shape}")
    pooled = cross_attention_pool(nx.reshape(text, (1, text.shape[0])), patches, block)
    return nx.reshape(pooled.V, (text.shape[0],))
