"""
Binary checkpoint format.

    b"BCLP" | u32 version | u32 header length | JSON header | little-endian f32 data

Tensors are stored back to back in the order listed in the header.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from hier_align.errors import DataError
from hier_align.storage import write_bytes

MAGIC = b"BCLP"
VERSION = 1
_OPT_M = "opt.m/"
_OPT_V = "opt.v/"


@dataclass
class Checkpoint:
    header: Dict[str, Any]
    arrays: Dict[str, np.ndarray]

    def params(self) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.arrays.items() if not k.startswith(("opt.",))}

    def moments(self) -> Tuple[Dict[str, np.ndarray], Dict[str, np.ndarray]]:
        m = {k[len(_OPT_M) :]: v for k, v in self.arrays.items() if k.startswith(_OPT_M)}
        v = {k[len(_OPT_V) :]: a for k, a in self.arrays.items() if k.startswith(_OPT_V)}
        return m, v


def encode_checkpoint(header: Dict[str, Any], tensors: List[Tuple[str, np.ndarray]]) -> bytes:
    header = dict(header)
    header["version"] = VERSION
    header["tensors"] = [{"name": name, "shape": list(np.shape(a))} for name, a in tensors]
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in tensors)
    return MAGIC + struct.pack("<I", VERSION) + struct.pack("<I", len(hb)) + hb + body


def decode_checkpoint(blob: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise DataError(f"{source}: not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != VERSION:
        raise DataError(f"{source}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<I", blob[8:12])
    if 12 + hlen > len(blob):
        raise DataError(f"{source}: truncated header")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{source}: unreadable header ({exc})") from exc

    arrays: Dict[str, np.ndarray] = {}
    offset = 12 + hlen
    for entry in header.get("tensors", []):
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(blob):
            raise DataError(f"{source}: truncated data for tensor {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(blob[offset:end], dtype="<f4").reshape(shape).astype(np.float32)
        offset = end
    if offset != len(blob):
        raise DataError(f"{source}: {len(blob) - offset} trailing bytes after tensor data")
    return Checkpoint(header=header, arrays=arrays)


def save_checkpoint(
    path: Path,
    model: Any,
    *,
    state: Optional[Any] = None,
    config: Optional[Dict[str, Any]] = None,
    seed: Optional[int] = None,
) -> None:
    tensors: List[Tuple[str, np.ndarray]] = [(p.name, p.data) for p in model.params()]
    header: Dict[str, Any] = {
        "ops": model.ops_header(),
        "model": model.cfg.to_dict(),
        "world": model.world.to_dict(),
        "vocab": list(model.vocab.tokens),
        "params": [
            {"name": p.name, "group": p.group, "trainable": p.trainable, "decay": p.decay}
            for p in model.params()
        ],
        "config": config or {},
        "optimizer": None,
        "rng": None,
    }
    if state is not None:
        header["optimizer"] = state.header()
        header["rng"] = {"seed": seed, "micro_step": state.micro_step}
        for p in model.params():
            if p.name in state.m:
                tensors.append((_OPT_M + p.name, state.m[p.name]))
                tensors.append((_OPT_V + p.name, state.v[p.name]))
    try:
        write_bytes(path, encode_checkpoint(header, tensors))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc.strerror or exc}") from exc


def load_checkpoint(path: Path) -> Checkpoint:
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    return decode_checkpoint(blob, str(path))


def restore_model(ckpt: Checkpoint) -> Any:
    from hier_align.model import Model, ModelConfig
    from hier_align.toyworld import WorldConfig
    from hier_align.vocab import Vocabulary

    try:
        cfg = ModelConfig(**ckpt.header["model"])
        world = WorldConfig(**ckpt.header["world"])
        vocab = Vocabulary(tuple(ckpt.header["vocab"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"checkpoint header cannot rebuild the model: {exc}") from exc
    model = Model(cfg, world, vocab)
    model.load_arrays(ckpt.params())
    return model
