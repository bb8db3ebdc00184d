"""Dense tensors with a define-by-run gradient tape.

numpy holds the data. Every public op checks its result (NaN and +Inf raise
NonFiniteError; -Inf is allowed as the attention mask sentinel) and, when a
GradTape is active and an input requires grad, records a backward closure on
that tape. Tape state lives in a ContextVar, so threads build disjoint tapes.
"""

from __future__ import annotations

import contextlib
import contextvars
import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Mapping, Optional, Sequence

import numpy as np


class NumericsError(Exception):
    pass


class DimensionError(NumericsError):
    pass


class DegenerateRowError(NumericsError):
    pass


class ContractError(NumericsError):
    pass


class NonFiniteError(NumericsError):
    pass


_DEFAULT_DTYPE: contextvars.ContextVar[type] = contextvars.ContextVar(
    "mate_default_dtype", default=np.float32
)
_ACTIVE_TAPE: contextvars.ContextVar[Optional["GradTape"]] = contextvars.ContextVar(
    "mate_active_tape", default=None
)

Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Switch the dtype used for newly created tensors (float32 or float64)."""
    kind = np.dtype(dtype).type
    if kind not in (np.float32, np.float64):
        raise ContractError(f"unsupported precision {np.dtype(dtype)}; use float32 or float64")
    token = _DEFAULT_DTYPE.set(kind)
    try:
        yield
    finally:
        _DEFAULT_DTYPE.reset(token)


def default_dtype() -> type:
    return _DEFAULT_DTYPE.get()


def _checked(data: np.ndarray, op: str) -> np.ndarray:
    if any(extent <= 0 for extent in data.shape):
        raise DimensionError(f"{op}: tensor extents must be positive, got {data.shape}")
    if not np.isfinite(data).all():
        if np.isnan(data).any() or np.isposinf(data).any():
            raise NonFiniteError(f"{op}: produced NaN or +Inf")
    return data


class Tensor:
    """Immutable value with optional participation in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None and isinstance(data, np.ndarray) and data.dtype.kind == "f":
            arr = data
        else:
            arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE.get())
        self.data: np.ndarray = _checked(arr, "tensor")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[GradTape] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __add__(self, other) -> "Tensor":
        return add(self, other)

    def __radd__(self, other) -> "Tensor":
        return add(other, self)

    def __sub__(self, other) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return mul(other, self)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


@dataclass
class _Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Backward


class GradTape:
    """Ordered record of primitive ops; backward replays it in reverse."""

    def __init__(self):
        self.records: list[_Record] = []
        self._token = None

    def __enter__(self) -> "GradTape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> bool:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: Backward) -> None:
        output._tape = self
        self.records.append(_Record(tuple(inputs), output, backward))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss is not connected to this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            for inp in rec.inputs:
                if inp.requires_grad and inp._tape is None:
                    leaves[id(inp)] = inp
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
        for key, leaf in leaves.items():
            g = grads.get(key)
            leaf.grad = np.zeros_like(leaf.data) if g is None else g.astype(leaf.dtype)
        self.records.clear()


def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad leaf reachable from `loss`."""
    if loss._tape is None:
        raise ContractError("loss is not connected to a tape")
    loss._tape.backward(loss)


def record_op(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Backward, op: str = "op") -> Tensor:
    """Wrap `data` as an op result, registering `backward_fn` when grads are needed."""
    out = Tensor.__new__(Tensor)
    out.data = _checked(np.asarray(data), op)
    out.requires_grad = False
    out.grad = None
    out._tape = None
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(inputs, out, backward_fn)
    return out


# --- constructors ---


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype or _DEFAULT_DTYPE.get()), requires_grad=requires_grad)


def zeros(shape, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or _DEFAULT_DTYPE.get()))


def ones(shape, dtype=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or _DEFAULT_DTYPE.get()))


def generator(seed: int, *stream) -> np.random.Generator:
    """Counter-based Philox generator keyed by (seed, *stream).

    Stream labels may be ints or strings; strings are folded to stable ints so
    the same labels give the same stream on every platform.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for label in stream:
        if isinstance(label, str):
            digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
            words.append(int.from_bytes(digest, "little"))
        else:
            words.append(int(label) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def standard_normal(shape, seed: int, *stream, dtype=None) -> Tensor:
    draws = generator(seed, "normal", *stream).standard_normal(shape)
    return Tensor(np.asarray(draws, dtype=dtype or _DEFAULT_DTYPE.get()))


# --- primitives ---


def _coerce(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _DEFAULT_DTYPE.get()
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _broadcast_shape("add", a, b)
    return record_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _broadcast_shape("sub", a, b)
    return record_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a = _coerce(a, b if isinstance(b, Tensor) else None)
    b = _coerce(b, a)
    _broadcast_shape("mul", a, b)
    return record_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return record_op(a.data * a.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dims disagree ({a.shape} @ {b.shape})")

    def back(g: np.ndarray):
        return (
            _unbroadcast(g @ _swap_last(b.data), a.shape),
            _unbroadcast(_swap_last(a.data) @ g, b.shape),
        )

    return record_op(a.data @ b.data, (a, b), back, "matmul")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return record_op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size
    return record_op(
        np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),), "mean"
    )


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis; -Inf entries receive zero weight."""
    peak = x.data.max(axis=-1, keepdims=True)
    if np.isneginf(peak).any():
        row = int(np.flatnonzero(np.isneginf(peak.reshape(-1)))[0])
        raise DegenerateRowError(f"softmax row {row} is entirely -inf")
    e = np.exp(x.data - peak)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g: np.ndarray):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record_op(y, (x,), back, "softmax_rows")


def layer_norm(x: Tensor, gain: Optional[Tensor] = None, bias: Optional[Tensor] = None, eps: float = 1e-6) -> Tensor:
    """Per-token normalization over the last axis with optional learned gain/bias."""
    d = x.shape[-1]
    for name, p in (("gain", gain), ("bias", bias)):
        if p is not None and p.shape != (d,):
            raise DimensionError(f"layer_norm: {name} shape {p.shape} does not match ({d},)")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    y = xhat
    if gain is not None:
        y = y * gain.data
    if bias is not None:
        y = y + bias.data
    inputs = tuple(t for t in (x, gain, bias) if t is not None)

    def back(g: np.ndarray):
        gx_hat = g * gain.data if gain is not None else g
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        grads = [gx]
        if gain is not None:
            grads.append((g * xhat).reshape(-1, d).sum(axis=0))
        if bias is not None:
            grads.append(g.reshape(-1, d).sum(axis=0))
        return grads

    return record_op(y, inputs, back, "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    v = x.data
    u = _GELU_C * (v + 0.044715 * v**3)
    th = np.tanh(u)

    def back(g: np.ndarray):
        du = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du),)

    return record_op(0.5 * v * (1.0 + th), (x,), back, "gelu")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        if x.ndim < 2:
            raise DimensionError(f"transpose: need at least 2 dims, got {x.shape}")
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return record_op(
        np.ascontiguousarray(np.transpose(x.data, axes)),
        (x,),
        lambda g: (np.transpose(g, inverse),),
        "transpose",
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size or any(s <= 0 for s in shape):
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    return record_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [p for p in parts if p is not None]
    if not parts:
        raise DimensionError("concat_rows: nothing to concatenate")
    tail = parts[0].shape[1:]
    for p in parts[1:]:
        if p.shape[1:] != tail:
            raise DimensionError(f"concat_rows: trailing shape {p.shape[1:]} does not match {tail}")
    bounds = np.cumsum([p.shape[0] for p in parts])[:-1]
    return record_op(
        np.concatenate([p.data for p in parts], axis=0),
        tuple(parts),
        lambda g: tuple(np.split(g, bounds, axis=0)),
        "concat_rows",
    )


def split_rows(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if int(np.sum(sizes)) != x.shape[0] or any(s <= 0 for s in sizes):
        raise DimensionError(f"split_rows: sizes {list(sizes)} do not partition {x.shape[0]} rows")
    out = []
    start = 0
    for size in sizes:
        lo, hi = start, start + size

        def back(g: np.ndarray, lo=lo, hi=hi):
            full = np.zeros_like(x.data)
            full[lo:hi] = g
            return (full,)

        out.append(record_op(x.data[lo:hi], (x,), back, "split_rows"))
        start = hi
    return out


def gather(x: Tensor, indices) -> Tensor:
    """Select rows of `x` by index (repeats allowed)."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= x.shape[0])):
        raise DimensionError(f"gather: indices out of range for {x.shape[0]} rows")

    def back(g: np.ndarray):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return record_op(x.data[idx], (x,), back, "gather")


# --- verification and optimization ---


def gradcheck(
    fn: Callable[[], Tensor],
    tensors: Mapping[str, Tensor],
    h: float = 1e-3,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> dict[str, float]:
    """Compare tape gradients with central differences, per named tensor.

    Returns ‖analytic − numeric‖ / max(‖analytic‖ + ‖numeric‖, 1e-6) for each
    entry of `tensors`. All tensors must be float64 leaves with requires_grad.
    """
    for name, t in tensors.items():
        if t.dtype != np.float64 or not t.requires_grad:
            raise ContractError(f"gradcheck: '{name}' must be a float64 leaf with requires_grad")
    with GradTape() as tape:
        loss = fn()
    tape.backward(loss)
    picker = generator(seed, "gradcheck")
    errors: dict[str, float] = {}
    for name, t in tensors.items():
        analytic = (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
        base = t.data
        picks = np.arange(t.size)
        if max_entries is not None and t.size > max_entries:
            picks = np.sort(picker.choice(t.size, size=max_entries, replace=False))
        numeric = np.empty(len(picks))
        for j, idx in enumerate(picks):
            shifted = base.copy()
            shifted.reshape(-1)[idx] += h
            t.data = shifted
            f_plus = fn().item()
            shifted = base.copy()
            shifted.reshape(-1)[idx] -= h
            t.data = shifted
            f_minus = fn().item()
            numeric[j] = (f_plus - f_minus) / (2 * h)
        t.data = base
        a = analytic[picks]
        denom = max(float(np.linalg.norm(a) + np.linalg.norm(numeric)), 1e-6)
        errors[name] = float(np.linalg.norm(a - numeric)) / denom
    return errors


class Adam:
    """Adaptive-moment optimizer over leaf tensors; updates replace `.data`."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.99), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.steps = 0
        self._m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self._v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.steps += 1
        fix1 = 1.0 - self.beta1**self.steps
        fix2 = 1.0 - self.beta2**self.steps
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / fix1) / (np.sqrt(v / fix2) + self.eps)
            p.data = _checked((p.data - update).astype(p.dtype), "adam")


__all__ = [
    "Adam",
    "ContractError",
    "DegenerateRowError",
    "DimensionError",
    "GradTape",
    "NonFiniteError",
    "NumericsError",
    "Tensor",
    "add",
    "backward",
    "concat_rows",
    "default_dtype",
    "gather",
    "gelu",
    "generator",
    "gradcheck",
    "layer_norm",
    "matmul",
    "mean",
    "mul",
    "ones",
    "precision",
    "record_op",
    "reshape",
    "scale",
    "softmax_rows",
    "split_rows",
    "standard_normal",
    "sub",
    "sum",
    "tensor",
    "transpose",
    "zeros",
]
