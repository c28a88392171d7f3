"""
Toy vision and text encoders.

The vision side maps one-hot patch rows to a CLS embedding plus N patch
embeddings; its final block applies the Q-K skip. The text side is a single
causal block whose last real position stands in for the EOS token.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np

from hier_align import numerics as nx
from hier_align.decompose import CaptionHierarchy
from hier_align.errors import DataError, DimensionError
from hier_align.layers import LayerNorm, TransformerBlock, weight
from hier_align.numerics import Param, Rng, Tensor
from hier_align.vocab import Vocabulary


@dataclass
class ImageTokens:
    # batched: cls [B, D], patches [B, N, D]
    cls: Tensor
    patches: Tensor

    @property
    def n_patches(self) -> int:
        return self.patches.shape[1]


@dataclass
class TextBank:
    # [K, D] for one hierarchy, row k is slot k
    T: Tensor

    @property
    def K(self) -> int:
        return self.T.shape[0]


class VisionEncoder:
    def __init__(
        self,
        d_in: int,
        n_patches: int,
        dim: int,
        heads: int,
        layers: int,
        rng: Rng,
        *,
        mlp_ratio: int = 4,
        init_std: float = 0.02,
        qk_skip: bool = True,
        dtype: Any = np.float32,
    ) -> None:
        if layers < 1:
            raise ValueError(f"model.vision_layers={layers} must be >= 1.")
        self.n_patches = n_patches
        self.dim = dim
        self.qk_skip = qk_skip
        self.patch_proj = weight(rng, "vision.patch_proj", (d_in, dim), std=init_std, dtype=dtype)
        self.pos_embed = weight(rng, "vision.pos_embed", (n_patches, dim), std=init_std, dtype=dtype, decay=False)
        self.cls_token = weight(rng, "vision.cls_token", (1, dim), std=init_std, dtype=dtype, decay=False)
        self.blocks = [
            TransformerBlock(f"vision.block{i}", dim, heads, rng, mlp_ratio=mlp_ratio, std=init_std, dtype=dtype)
            for i in range(layers)
        ]
        self.ln_post = LayerNorm("vision.ln_post", dim, dtype=dtype, group="encoder")
        self.proj = weight(rng, "vision.proj", (dim, dim), std=init_std, dtype=dtype)

    def params(self) -> List[Param]:
        out = [self.patch_proj, self.pos_embed, self.cls_token]
        for block in self.blocks:
            out.extend(block.params())
        out.extend(self.ln_post.params())
        out.append(self.proj)
        return out

    def embed_tokens(self, x: Tensor) -> Tensor:
        """[B, N, d_in] -> [B, 1 + N, D] with CLS at position 0."""
        b = x.shape[0]
        patches = nx.add(nx.matmul(x, self.patch_proj.value), self.pos_embed.value)
        cls = nx.add(
            nx.reshape(self.cls_token.value, (1, 1, self.dim)),
            Tensor(np.zeros((b, 1, self.dim), dtype=patches.dtype), dtype=patches.dtype),
        )
        return nx.concat([cls, patches], axis=1)

    def run_block(self, x: Tensor, i: int) -> Tensor:
        block = self.blocks[i]
        if self.qk_skip and i == len(self.blocks) - 1:
            return block.forward_qk_skip(x)
        return block(x)

    def __call__(self, x: Tensor) -> ImageTokens:
        if x.ndim == 2:
            x = nx.reshape(x, (1, *x.shape))
        if x.ndim != 3 or x.shape[1] != self.n_patches:
            raise DimensionError(f"vision input must be [B, {self.n_patches}, d_in], got {x.shape}")
        h = self.embed_tokens(x)
        for i in range(len(self.blocks)):
            h = self.run_block(h, i)
        h = self.ln_post(h)
        b, n = x.shape[0], self.n_patches
        cls = nx.matmul(nx.reshape(nx.narrow(h, 1, 0, 1), (b, self.dim)), self.proj.value)
        patches = nx.matmul(nx.narrow(h, 1, 1, n), self.proj.value)
        return ImageTokens(cls=cls, patches=patches)


class TextEncoder:
    def __init__(
        self,
        vocab_size: int,
        max_len: int,
        dim: int,
        heads: int,
        rng: Rng,
        *,
        mlp_ratio: int = 4,
        init_std: float = 0.02,
        dtype: Any = np.float32,
    ) -> None:
        self.max_len = max_len
        self.dim = dim
        self.tok_embed = weight(rng, "text.tok_embed", (vocab_size, dim), std=init_std, dtype=dtype, decay=False)
        self.pos_embed = weight(rng, "text.pos_embed", (max_len, dim), std=init_std, dtype=dtype, decay=False)
        self.block = TransformerBlock("text.block0", dim, heads, rng, mlp_ratio=mlp_ratio, std=init_std, dtype=dtype)
        self.ln_final = LayerNorm("text.ln_final", dim, dtype=dtype, group="encoder")
        self.proj = weight(rng, "text.proj", (dim, dim), std=init_std, dtype=dtype)

    def params(self) -> List[Param]:
        return [
            self.tok_embed,
            self.pos_embed,
            *self.block.params(),
            *self.ln_final.params(),
            self.proj,
        ]

    def hidden_states(self, ids: np.ndarray) -> Tensor:
        """Causal block output before the final norm: [M, L, D]."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] < 1:
            raise DimensionError(f"token ids must be [M, L] with L >= 1, got {ids.shape}")
        length = ids.shape[1]
        if length > self.max_len:
            raise DimensionError(f"sequence length {length} exceeds max_len={self.max_len}")
        x = nx.add(nx.embed(self.tok_embed.value, ids), nx.narrow(self.pos_embed.value, 0, 0, length))
        causal = np.tril(np.ones((length, length), dtype=bool))
        return self.block(x, causal)

    def __call__(self, ids: np.ndarray, lengths: Sequence[int]) -> Tensor:
        """EOS embeddings [M, D] for right-padded ids [M, L] with true ``lengths``."""
        lengths = np.asarray(lengths, dtype=np.int64)
        h = self.ln_final(self.hidden_states(ids))
        return nx.matmul(nx.take_positions(h, lengths - 1), self.proj.value)


def pad_token_batch(
    slots: Sequence[Sequence[str]],
    vocab: Vocabulary,
    max_len: int,
    counters: Optional[Counter] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Right-pad slot token lists into ids [M, L]; over-length slots are cut to ``max_len``."""
    encoded: List[List[int]] = []
    for i, slot in enumerate(slots):
        if not slot:
            raise DataError(f"text slot {i} is empty")
        ids = vocab.encode(slot)
        if len(ids) > max_len:
            if counters is not None:
                counters["truncated_slots"] += 1
            ids = ids[:max_len]
        encoded.append(ids)
    width = max(len(e) for e in encoded) if encoded else 1
    out = np.full((len(encoded), width), vocab.pad_id, dtype=np.int64)
    for i, ids in enumerate(encoded):
        out[i, : len(ids)] = ids
    return out, np.asarray([len(e) for e in encoded], dtype=np.int64)


def encode_token_batch(
    enc: TextEncoder,
    vocab: Vocabulary,
    slots: Sequence[Sequence[str]],
    counters: Optional[Counter] = None,
) -> Tensor:
    ids, lengths = pad_token_batch(slots, vocab, enc.max_len, counters)
    return enc(ids, lengths)


def encode_image(scene_input: Tensor, enc: VisionEncoder) -> ImageTokens:
    return enc(scene_input)


def encode_texts(
    hierarchy: CaptionHierarchy,
    enc: TextEncoder,
    vocab: Vocabulary,
    counters: Optional[Counter] = None,
) -> TextBank:
    """Every slot is encoded on its own; nothing is sliced out of the caption encoding."""
    return TextBank(T=encode_token_batch(enc, vocab, hierarchy.slots(), counters))
