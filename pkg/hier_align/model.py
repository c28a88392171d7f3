"""
The full model: vision encoder, text encoder, pooling block and shared logit scale.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any, Dict, List

import numpy as np

from hier_align.encoders import TextEncoder, VisionEncoder
from hier_align.errors import DataError
from hier_align.loss import INIT_LOG_SCALE
from hier_align.numerics import Param, Rng, Tensor
from hier_align.pooling import PoolBlock, PoolResidual, default_pool_heads
from hier_align.toyworld import WorldConfig
from hier_align.vocab import Vocabulary

MLP_ACTIVATION = "gelu_tanh"
LAYER_NORM_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 32
    vision_heads: int = 4
    vision_layers: int = 2
    text_heads: int = 4
    pool_heads: int = 0  # 0 picks 8 at dim >= 64, else 4
    max_len: int = 64
    mlp_ratio: int = 4
    init_std: float = 0.02
    pool_residual: PoolResidual = PoolResidual.NORMED
    qk_skip: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "pool_residual", PoolResidual(self.pool_residual))
        if self.dim < 2:
            raise ValueError(f"model.dim={self.dim} must be >= 2.")
        for name, heads in (
            ("vision_heads", self.vision_heads),
            ("text_heads", self.text_heads),
            ("pool_heads", self.effective_pool_heads),
        ):
            if heads < 1 or self.dim % heads:
                raise ValueError(f"model.{name}={heads} must be >= 1 and divide model.dim={self.dim}.")
        if self.pool_heads < 0:
            raise ValueError(f"model.pool_heads={self.pool_heads} must be >= 0.")
        if self.vision_layers < 1:
            raise ValueError(f"model.vision_layers={self.vision_layers} must be >= 1.")
        if self.max_len < 1:
            raise ValueError(f"model.max_len={self.max_len} must be >= 1.")
        if self.mlp_ratio < 1:
            raise ValueError(f"model.mlp_ratio={self.mlp_ratio} must be >= 1.")
        if not self.init_std > 0:
            raise ValueError(f"model.init_std={self.init_std} must be > 0.")

    @property
    def effective_pool_heads(self) -> int:
        return self.pool_heads or default_pool_heads(self.dim)

    def to_dict(self) -> Dict[str, Any]:
        out = asdict(self)
        out["pool_residual"] = self.pool_residual.value
        return out


class Model:
    def __init__(
        self,
        cfg: ModelConfig,
        world: WorldConfig,
        vocab: Vocabulary,
        seed: int = 0,
        dtype: Any = np.float32,
    ) -> None:
        self.cfg = cfg
        self.world = world
        self.vocab = vocab
        self.dtype = np.dtype(dtype)
        rng = Rng(seed, ("init",))
        self.vision = VisionEncoder(
            world.d_in,
            world.n_patches,
            cfg.dim,
            cfg.vision_heads,
            cfg.vision_layers,
            rng.child("vision"),
            mlp_ratio=cfg.mlp_ratio,
            init_std=cfg.init_std,
            qk_skip=cfg.qk_skip,
            dtype=self.dtype,
        )
        self.text = TextEncoder(
            len(vocab),
            cfg.max_len,
            cfg.dim,
            cfg.text_heads,
            rng.child("text"),
            mlp_ratio=cfg.mlp_ratio,
            init_std=cfg.init_std,
            dtype=self.dtype,
        )
        self.pool = PoolBlock(
            cfg.dim,
            cfg.effective_pool_heads,
            rng.child("pool"),
            mlp_ratio=cfg.mlp_ratio,
            init_std=cfg.init_std,
            residual=cfg.pool_residual,
            dtype=self.dtype,
        )
        self.log_scale = Param(
            Tensor(np.asarray(INIT_LOG_SCALE, dtype=self.dtype), dtype=self.dtype),
            "log_scale",
            group="pool",
            decay=False,
        )
        names = [p.name for p in self.params()]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique within a model.")

    def params(self) -> List[Param]:
        return [*self.vision.params(), *self.text.params(), *self.pool.params(), self.log_scale]

    def param_dict(self) -> Dict[str, Param]:
        return {p.name: p for p in self.params()}

    def zero_grad(self) -> None:
        for p in self.params():
            p.value.grad = None

    def ops_header(self) -> Dict[str, Any]:
        return {
            "mlp_activation": MLP_ACTIVATION,
            "layer_norm_eps": LAYER_NORM_EPS,
            "pool_residual": self.cfg.pool_residual.value,
            "pool_output_projection": False,
            "qk_skip": self.cfg.qk_skip,
            "max_logit_scale": 100.0,
        }

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {p.name: p.data for p in self.params()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        for p in self.params():
            if p.name not in arrays:
                raise DataError(f"checkpoint is missing parameter {p.name!r}")
            src = np.asarray(arrays[p.name])
            if src.shape != p.shape:
                raise DataError(f"parameter {p.name!r} has shape {src.shape}, expected {p.shape}")
            p.value.data = np.array(src, dtype=self.dtype)
            p.value.grad = None
