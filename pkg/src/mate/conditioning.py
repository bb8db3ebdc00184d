"""Unified-sequence assembly, cross-bias modulation and LoRA algebra.

Streams are concatenated in the fixed order [material, image, depth]. The
cross bias adds log(gamma) to every material<->image and material<->depth
logit (both directions) and leaves the within-stream and image<->depth blocks
at zero, so only the material stream's share of attention is rescaled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional

import numpy as np

from . import numerics as nx
from .numerics import Tensor

GAMMA_MIN = 1e-6


class ConditioningError(Exception):
    pass


class BiasRangeError(ConditioningError):
    pass


@dataclass(frozen=True)
class SequenceLayout:
    material_tokens: int
    image_tokens: int
    depth_tokens: int = 0

    def __post_init__(self):
        if self.material_tokens < 0 or self.image_tokens <= 0:
            raise ConditioningError(
                f"invalid layout: material={self.material_tokens}, image={self.image_tokens}"
            )
        if self.depth_tokens not in (0, self.image_tokens):
            raise ConditioningError(
                f"depth stream must be absent or match the image stream ({self.image_tokens}), "
                f"got {self.depth_tokens}"
            )

    @property
    def total(self) -> int:
        return self.material_tokens + self.image_tokens + self.depth_tokens

    @property
    def boundaries(self) -> tuple[int, int]:
        return self.material_tokens, self.material_tokens + self.image_tokens

    @property
    def has_depth(self) -> bool:
        return self.depth_tokens > 0

    def image_slice(self) -> slice:
        lo, hi = self.boundaries
        return slice(lo, hi)


def default_grid(count: int) -> tuple[int, int]:
    side = math.isqrt(count)
    if side * side == count:
        return side, side
    return 1, count


def grid_positions(count: int, grid: Optional[tuple[int, int]] = None, col_offset: int = 0) -> np.ndarray:
    rows, cols = grid or default_grid(count)
    if rows * cols != count:
        raise ConditioningError(f"grid {rows}x{cols} does not hold {count} tokens")
    r, c = np.divmod(np.arange(count, dtype=np.int64), cols)
    return np.stack([r, c + col_offset], axis=1)


@dataclass(frozen=True, eq=False)
class TokenSequence:
    tokens: Tensor
    layout: SequenceLayout
    positions: np.ndarray = field(repr=False)

    def with_tokens(self, tokens: Tensor) -> "TokenSequence":
        if tokens.shape[0] != self.layout.total:
            raise ConditioningError(f"expected {self.layout.total} rows, got {tokens.shape[0]}")
        return replace(self, tokens=tokens)

    def segments(self) -> tuple[Optional[Tensor], Tensor, Optional[Tensor]]:
        lay = self.layout
        sizes = [s for s in (lay.material_tokens, lay.image_tokens, lay.depth_tokens) if s]
        parts: Iterator[Tensor] = iter(nx.split_rows(self.tokens, sizes))
        material = next(parts) if lay.material_tokens else None
        image = next(parts)
        depth = next(parts) if lay.depth_tokens else None
        return material, image, depth


def assemble_sequence(
    c_m: Optional[Tensor],
    x_img: Tensor,
    c_d: Optional[Tensor],
    image_grid: Optional[tuple[int, int]] = None,
    material_grid: Optional[tuple[int, int]] = None,
) -> TokenSequence:
    """Concatenate [material; image; depth] rows and attach grid positions.

    Image and depth share grid positions; the material grid is shifted right
    by one full image-grid width so it never coincides with the target grid.
    """
    d = x_img.shape[-1]
    for name, part in (("material", c_m), ("depth", c_d)):
        if part is not None and (part.ndim != 2 or part.shape[1] != d):
            raise ConditioningError(f"{name} tokens have shape {part.shape}, expected (*, {d})")
    n = x_img.shape[0]
    if c_d is not None and c_d.shape[0] != n:
        raise ConditioningError(f"depth stream has {c_d.shape[0]} tokens, image stream has {n}")
    m = c_m.shape[0] if c_m is not None else 0
    layout = SequenceLayout(m, n, n if c_d is not None else 0)

    image_grid = image_grid or default_grid(n)
    image_pos = grid_positions(n, image_grid)
    chunks = []
    if m:
        chunks.append(grid_positions(m, material_grid, col_offset=image_grid[1]))
    chunks.append(image_pos)
    if c_d is not None:
        chunks.append(image_pos)
    tokens = nx.concat_rows([c_m, x_img, c_d])
    return TokenSequence(tokens=tokens, layout=layout, positions=np.concatenate(chunks, axis=0))


def cross_bias(gamma: float, layout: SequenceLayout, dtype=None) -> Tensor:
    """Dense T x T bias: log(gamma) on material<->{image, depth} blocks, zero elsewhere."""
    if not gamma >= GAMMA_MIN:
        raise BiasRangeError(f"gamma must be >= {GAMMA_MIN}, got {gamma}")
    total = layout.total
    m = layout.material_tokens
    bias = np.zeros((total, total), dtype=dtype or nx.default_dtype())
    value = math.log(gamma)
    bias[:m, m:] = value
    bias[m:, :m] = value
    return Tensor(bias)


# --- LoRA ---


@dataclass(frozen=True, eq=False)
class LoraAdapter:
    """Low-rank delta B @ A for one n x m weight (A: r x m, B: n x r)."""

    A: Tensor
    B: Tensor

    def __post_init__(self):
        if self.A.ndim != 2 or self.B.ndim != 2 or self.B.shape[1] != self.A.shape[0]:
            raise ConditioningError(f"LoRA factors do not chain: B {self.B.shape}, A {self.A.shape}")
        n, m = self.B.shape[0], self.A.shape[1]
        if self.rank > min(n, m):
            raise ConditioningError(f"LoRA rank {self.rank} exceeds min({n}, {m})")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def target_shape(self) -> tuple[int, int]:
        return self.B.shape[0], self.A.shape[1]


def apply_lora(W: Tensor, adapter: LoraAdapter, w: float) -> Tensor:
    """W + w * (B @ A)."""
    if W.shape != adapter.target_shape:
        raise ConditioningError(f"LoRA delta {adapter.target_shape} does not match weight {W.shape}")
    if w == 0:
        return W
    return nx.add(W, nx.scale(nx.matmul(adapter.B, adapter.A), w))


def lora_delta_rank(adapter: LoraAdapter, tol: float = 1e-9) -> int:
    """Numerical rank of B @ A; never exceeds the adapter rank."""
    delta = adapter.B.data.astype(np.float64) @ adapter.A.data.astype(np.float64)
    return int(np.linalg.matrix_rank(delta, tol=tol))


@dataclass(eq=False)
class LoraParams:
    """Adapters keyed by the name of the base weight they modify."""

    rank: int
    adapters: dict[str, LoraAdapter]

    def get(self, weight_name: str) -> Optional[LoraAdapter]:
        return self.adapters.get(weight_name)

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        for name, adapter in self.adapters.items():
            yield f"{name}.lora_A", adapter.A
            yield f"{name}.lora_B", adapter.B

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def requires_grad_(self, flag: bool = True) -> "LoraParams":
        for t in self.tensors():
            t.requires_grad = flag
        return self


__all__ = [
    "GAMMA_MIN",
    "BiasRangeError",
    "ConditioningError",
    "LoraAdapter",
    "LoraParams",
    "SequenceLayout",
    "TokenSequence",
    "apply_lora",
    "assemble_sequence",
    "cross_bias",
    "default_grid",
    "grid_positions",
    "lora_delta_rank",
]
