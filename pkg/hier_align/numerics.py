"""
Dense tensors with a fixed set of differentiable operations.

Every op below records a hand-written backward rule on the tensor it returns;
``Tensor.backward`` replays those rules in reverse topological order. Nothing
outside this op set is traced.
"""

from __future__ import annotations

import contextlib
import contextvars
import hashlib
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from hier_align.errors import DataError, DimensionError, NonFiniteError

MAX_RANK = 3

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "hier_align_grad_enabled", default=True
)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    """
    Rank <= 3 array of float32 (default) or float64 values with a gradient slot.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        dtype: Optional[Any] = None,
    ) -> None:
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype != np.float64 or not isinstance(data, (np.ndarray, np.generic)):
            arr = arr.astype(np.float32, copy=False)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}: shape={arr.shape}")
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = "leaf"

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def __repr__(self) -> str:
        return f"Tensor(op={self._op}, shape={self.shape}, dtype={self.dtype})"

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() needs a single value, got shape={self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.size != 1:
                raise DimensionError(
                    f"backward() without a seed gradient needs a scalar, got shape={self.shape}"
                )
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return

        order: List[Tensor] = []
        seen: set = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        if self._backward is None:
            _accumulate(self, grad)
            return
        self.grad = np.asarray(grad, dtype=self.data.dtype).copy()
        for node in reversed(order):
            if node._backward is None:
                continue
            if node.grad is not None:
                node._backward(node.grad)
            node.grad = None


Operand = Union[Tensor, np.ndarray, float, int]


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.data.shape:
        raise DimensionError(f"gradient shape {g.shape} does not match tensor shape {t.shape}")
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _result(
    op: str,
    data: Any,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], None],
) -> Tensor:
    arr = np.asarray(data)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values (shape={arr.shape})")
    out = Tensor(arr, dtype=arr.dtype)
    out._op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _lift(x: Operand, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None:
        return Tensor(x, dtype=like.dtype)
    return Tensor(x)


def _pair(a: Operand, b: Operand) -> Tuple[Tensor, Tensor]:
    ta = a if isinstance(a, Tensor) else None
    tb = b if isinstance(b, Tensor) else None
    return _lift(a, tb), _lift(b, ta)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a.shape, b.shape))
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


def _sigmoid_array(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Linear algebra and elementwise arithmetic
# ---------------------------------------------------------------------------


def matmul(a: Operand, b: Operand) -> Tensor:
    """
    (Batched) matrix product over the last two axes. A rank-2 operand is shared
    across the batch of a rank-3 one.
    """
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and 1 not in (a.shape[0], b.shape[0]) and a.shape[0] != b.shape[0]:
        raise DimensionError(f"matmul batch extents differ: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _result("matmul", out, (a, b), backward)


def add(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    out = a.data + b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _result("add", out, (a, b), backward)


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    out = a.data - b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))

    return _result("sub", out, (a, b), backward)


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    out = a.data * b.data

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _result("mul", out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = a.data * c

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * c)

    return _result("scale", out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * out)

    return _result("exp", out, (a,), backward)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g / a.data)

    return _result("log", out, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _result("sum", out, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / max(1, a.size))


def clamp_max(a: Tensor, limit: float) -> Tensor:
    limit = float(limit)
    out = np.minimum(a.data, limit)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g * (a.data < limit))

    return _result("clamp_max", out, (a,), backward)


# ---------------------------------------------------------------------------
# Shape plumbing
# ---------------------------------------------------------------------------


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError(f"transpose needs rank >= 2, got shape={a.shape}")
    out = np.swapaxes(a.data, -1, -2)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, np.swapaxes(g, -1, -2))

    return _result("transpose", out, (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    if out.ndim > MAX_RANK:
        raise DimensionError(f"reshape target rank {out.ndim} exceeds {MAX_RANK}")

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g.reshape(a.shape))

    return _result("reshape", out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    parts = [_lift(t, tensors[0]) for t in tensors]
    try:
        out = np.concatenate([t.data for t in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(
            f"concat shapes disagree: {[t.shape for t in parts]} on axis {axis}"
        ) from exc
    bounds = np.cumsum([t.shape[axis] for t in parts])[:-1]

    def backward(g: np.ndarray) -> None:
        for t, piece in zip(parts, np.split(g, bounds, axis=axis)):
            if t.requires_grad:
                _accumulate(t, piece)

    return _result("concat", out, parts, backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    extent = a.shape[axis]
    if start < 0 or length < 0 or start + length > extent:
        raise DimensionError(
            f"narrow [{start}:{start + length}] out of range for axis {axis} of shape {a.shape}"
        )
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    sl = tuple(index)
    out = a.data[sl]

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(a.data)
        full[sl] = g
        _accumulate(a, full)

    return _result("narrow", out, (a,), backward)


def split_heads(a: Tensor, heads: int) -> Tensor:
    """[B, N, D] -> [B*h, N, D/h]."""
    if a.ndim != 3:
        raise DimensionError(f"split_heads needs [B, N, D], got shape={a.shape}")
    b, n, d = a.shape
    if heads < 1 or d % heads:
        raise DimensionError(f"D={d} is not divisible by heads={heads}")
    dh = d // heads
    out = a.data.reshape(b, n, heads, dh).transpose(0, 2, 1, 3).reshape(b * heads, n, dh)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g.reshape(b, heads, n, dh).transpose(0, 2, 1, 3).reshape(b, n, d))

    return _result("split_heads", out, (a,), backward)


def merge_heads(a: Tensor, heads: int) -> Tensor:
    """[B*h, N, D/h] -> [B, N, D]."""
    if a.ndim != 3 or heads < 1 or a.shape[0] % heads:
        raise DimensionError(f"merge_heads cannot fold shape={a.shape} over heads={heads}")
    bh, n, dh = a.shape
    b = bh // heads
    out = a.data.reshape(b, heads, n, dh).transpose(0, 2, 1, 3).reshape(b, n, heads * dh)

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g.reshape(b, n, heads, dh).transpose(0, 2, 1, 3).reshape(bh, n, dh))

    return _result("merge_heads", out, (a,), backward)


def gather_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"gather_rows needs a matrix, got shape={a.shape}")
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise DataError(f"gather_rows index out of range for {a.shape[0]} rows")
    out = a.data[idx]

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accumulate(a, full)

    return _result("gather_rows", out, (a,), backward)


def take_positions(a: Tensor, positions: Sequence[int]) -> Tensor:
    """Pick one sequence position per batch row: [B, L, D] -> [B, D]."""
    if a.ndim != 3:
        raise DimensionError(f"take_positions needs [B, L, D], got shape={a.shape}")
    pos = np.asarray(positions, dtype=np.int64).reshape(-1)
    if pos.size != a.shape[0]:
        raise DimensionError(f"take_positions got {pos.size} positions for batch {a.shape[0]}")
    if pos.size and (pos.min() < 0 or pos.max() >= a.shape[1]):
        raise DataError(f"take_positions position out of range for length {a.shape[1]}")
    rows = np.arange(a.shape[0])
    out = a.data[rows, pos]

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, pos), g)
        _accumulate(a, full)

    return _result("take_positions", out, (a,), backward)


def embed(table: Tensor, ids: Any) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add backward."""
    if table.ndim != 2:
        raise DimensionError(f"embed table must be [V, D], got shape={table.shape}")
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim > 2:
        raise DimensionError(f"embed ids must be rank <= 2, got shape={idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DataError(f"token id out of range for vocabulary of {table.shape[0]}")
    out = table.data[idx]

    def backward(g: np.ndarray) -> None:
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        _accumulate(table, full)

    return _result("embed", out, (table,), backward)


# ---------------------------------------------------------------------------
# Nonlinearities and normalisation
# ---------------------------------------------------------------------------


def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Softmax over the last axis with row-max subtraction. Entries where ``mask``
    is False get exactly zero probability.
    """
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(mask.any(axis=-1)):
            raise DataError("softmax_rows mask leaves a row with no admissible entry")
        z = np.where(mask, z, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _result("softmax_rows", y, (x,), backward)


def log_softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Log-softmax over the last axis. Entries where ``mask`` is False are left
    out of the normaliser; their output is 0 and they receive no gradient.
    """
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(mask.any(axis=-1)):
            raise DataError("log_softmax_rows mask leaves a row with no admissible entry")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    probs = np.exp(out)
    if mask is not None:
        out = np.where(mask, out, 0.0)
        probs = np.where(mask, probs, 0.0)

    def backward(g: np.ndarray) -> None:
        if mask is not None:
            g = np.where(mask, g, 0.0)
        _accumulate(x, g - probs * g.sum(axis=-1, keepdims=True))

    return _result("log_softmax_rows", out, (x,), backward)


def sigmoid_elem(x: Tensor) -> Tensor:
    out = _sigmoid_array(x.data)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * out * (1.0 - out))

    return _result("sigmoid", out, (x,), backward)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def backward(g: np.ndarray) -> None:
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * xd**2)
        _accumulate(x, g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * d_inner))

    return _result("gelu", out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if d < 2:
        raise DimensionError(f"layer_norm needs at least 2 features, got {d}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm gain/bias must be ({d},), got {gain.shape}/{bias.shape}")
    eps = float(eps)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g: np.ndarray) -> None:
        if gain.requires_grad:
            _accumulate(gain, (g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            dx = (inv / d) * (
                d * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
            _accumulate(x, dx)

    return _result("layer_norm", out, (x, gain, bias), backward)


def l2_normalize_rows(x: Tensor) -> Tensor:
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    zero = norms[..., 0] <= np.finfo(x.dtype).tiny
    if np.any(zero):
        where = tuple(int(i) for i in np.argwhere(zero)[0])
        raise DataError(f"zero-norm embedding at index {where[0] if len(where) == 1 else where}")
    y = x.data / norms

    def backward(g: np.ndarray) -> None:
        _accumulate(x, (g - y * (g * y).sum(axis=-1, keepdims=True)) / norms)

    return _result("l2_normalize_rows", y, (x,), backward)


def bce_with_logits(x: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise max(x,0) - x*y + log(1 + exp(-|x|))."""
    xd = x.data
    y = np.asarray(targets, dtype=xd.dtype)
    if y.shape != xd.shape:
        raise DimensionError(f"bce targets {y.shape} do not match logits {xd.shape}")
    out = np.maximum(xd, 0.0) - xd * y + np.log1p(np.exp(-np.abs(xd)))

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * (_sigmoid_array(xd) - y))

    return _result("bce_with_logits", out, (x,), backward)


# ---------------------------------------------------------------------------
# Parameters, randomness, gradient oracle
# ---------------------------------------------------------------------------


@dataclass
class Param:
    value: Tensor
    name: str
    trainable: bool = True
    group: str = "encoder"
    decay: bool = True

    def __post_init__(self) -> None:
        if not self.name:
            raise ValueError("Param name must not be empty.")
        self.value.requires_grad = self.trainable

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def grad(self) -> Optional[np.ndarray]:
        return self.value.grad


def _stream_word(label: Any) -> int:
    if isinstance(label, (int, np.integer)) and not isinstance(label, bool):
        if label < 0:
            raise ValueError(f"rng stream id must be non-negative, got {label}")
        return int(label)
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def _to_jsonable(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": str(obj.dtype), "values": [int(v) for v in obj.reshape(-1)]}
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_jsonable(obj: Any) -> Any:
    if isinstance(obj, dict) and "__ndarray__" in obj:
        return np.asarray(obj["values"], dtype=obj["__ndarray__"])
    if isinstance(obj, dict):
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj


class Rng:
    """
    Seeded Philox stream. ``child`` derives independent streams from labels so
    shards, epochs and steps can be drawn without sharing mutable state.
    """

    def __init__(self, seed: int, stream: Sequence[Any] = ()) -> None:
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed={seed} must fit in an unsigned 64-bit integer.")
        self.seed = seed
        self.stream: Tuple[int, ...] = tuple(_stream_word(s) for s in stream)
        entropy = [len(self.stream), seed, *self.stream]
        key = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def child(self, *stream: Any) -> "Rng":
        return Rng(self.seed, self.stream + tuple(_stream_word(s) for s in stream))

    def integers(self, low: int, high: Optional[int] = None, size: Any = None) -> Any:
        return self._gen.integers(low, high, size=size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size: Any = None) -> Any:
        return self._gen.uniform(low, high, size=size)

    def normal(self, size: Any = None, std: float = 1.0) -> Any:
        return self._gen.normal(0.0, std, size=size)

    def choice(self, n: int, size: Optional[int] = None, replace: bool = True) -> Any:
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def truncated_normal(self, shape: Sequence[int], std: float = 0.02, bound: float = 2.0) -> np.ndarray:
        """Normal draws with anything beyond ``bound`` standard deviations redrawn."""
        out = self._gen.normal(0.0, 1.0, size=tuple(shape))
        bad = np.abs(out) > bound
        while np.any(bad):
            out[bad] = self._gen.normal(0.0, 1.0, size=int(bad.sum()))
            bad = np.abs(out) > bound
        return out * std

    def get_state(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "stream": list(self.stream),
            "bit_generator": _to_jsonable(self._gen.bit_generator.state),
        }

    @classmethod
    def from_state(cls, state: Dict[str, Any]) -> "Rng":
        rng = cls(int(state["seed"]), tuple(int(s) for s in state["stream"]))
        rng._gen.bit_generator.state = _from_jsonable(state["bit_generator"])
        return rng


def _loss_value(f: Callable[[], Any]) -> float:
    out = f()
    value = out.item() if isinstance(out, Tensor) else float(out)
    return value


def grad_check(
    f: Callable[[], Any],
    params: Sequence[Param],
    eps: float = 1e-5,
    *,
    coords_per_param: Optional[int] = None,
    rng: Optional[Rng] = None,
) -> float:
    """
    Compare backward() against central differences.

    Returns the max over checked coordinates of
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 1e-5 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} must be within [1e-5, 1e-3].")
    for p in params:
        p.value.grad = None
    loss = f()
    if not isinstance(loss, Tensor) or loss.size != 1:
        raise DimensionError("grad_check needs f() to return a scalar Tensor")
    if not np.isfinite(loss.item()):
        raise NonFiniteError(f"grad_check: loss is non-finite at the base point ({loss.item()})")
    loss.backward()
    analytic = {
        p.name: (p.value.grad.copy() if p.value.grad is not None else np.zeros_like(p.data))
        for p in params
    }

    worst = 0.0
    with no_grad():
        for p in params:
            data = p.value.data
            coords: Sequence[int] = range(data.size)
            if coords_per_param is not None and coords_per_param < data.size:
                pick = rng if rng is not None else Rng(0, ("grad_check", p.name))
                coords = sorted(int(i) for i in pick.choice(data.size, coords_per_param, replace=False))
            for flat in coords:
                idx = np.unravel_index(flat, data.shape)
                orig = float(data[idx])
                data[idx] = orig + eps
                x_plus = float(data[idx])
                f_plus = _loss_value(f)
                data[idx] = orig - eps
                x_minus = float(data[idx])
                f_minus = _loss_value(f)
                data[idx] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise NonFiniteError(
                        f"grad_check: non-finite loss when perturbing {p.name}{tuple(int(i) for i in idx)} "
                        f"(f+={f_plus}, f-={f_minus})"
                    )
                numeric = (f_plus - f_minus) / (x_plus - x_minus)
                a = float(analytic[p.name][idx])
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    for p in params:
        p.value.grad = None
    return worst
