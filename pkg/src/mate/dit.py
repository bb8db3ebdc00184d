"""Miniature multi-modal diffusion transformer.

Pixel patches are the latent space: patchify/unpatchify replace a VAE. Each
block is pre-norm with adaptive layer-norm modulation from the timestep
(shift, scale and gate per branch); attention runs over the unified
[material; image; depth] sequence with axial 2-D RoPE and the cross bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Iterator, Optional

import numpy as np

from . import numerics as nx
from .conditioning import (
    GAMMA_MIN,
    BiasRangeError,
    LoraAdapter,
    LoraParams,
    TokenSequence,
    apply_lora,
    assemble_sequence,
    cross_bias,
    default_grid,
)
from .imaging import ImagePlane, round_half_up, to_rgb
from .numerics import Tensor

ROPE_BASE = 10000.0
INIT_STD = 0.02
FUSIONS = ("concat", "add")

MATERIAL, IMAGE, DEPTH = 0, 1, 2


class DitError(Exception):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 64
    heads: int = 4
    depth: int = 6
    mlp_ratio: int = 4
    lora_rank: int = 8

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise DitError(f"{f.name} must be positive, got {getattr(self, f.name)}")
        if self.image_size % self.patch_size:
            raise DitError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise DitError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.head_dim % 4:
            raise DitError(f"head_dim {self.head_dim} must be divisible by 4 for 2-D RoPE")
        if self.lora_rank > self.embed_dim:
            raise DitError(f"lora_rank {self.lora_rank} exceeds embed_dim {self.embed_dim}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def token_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    def values(self) -> tuple[int, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d = config.embed_dim
    hidden = d * config.mlp_ratio
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (config.token_dim, d),
        "patch_embed.bias": (d,),
        "segment_embed": (3, d),
        "null_token": (1, d),
        "t_embed.fc1.weight": (d, d),
        "t_embed.fc1.bias": (d,),
        "t_embed.fc2.weight": (d, d),
        "t_embed.fc2.bias": (d,),
    }
    for i in range(config.depth):
        p = f"blocks.{i}"
        shapes.update(
            {
                f"{p}.adaln.weight": (d, 6 * d),
                f"{p}.adaln.bias": (6 * d,),
                f"{p}.norm1.gain": (d,),
                f"{p}.norm1.bias": (d,),
                f"{p}.qkv.weight": (d, 3 * d),
                f"{p}.qkv.bias": (3 * d,),
                f"{p}.proj.weight": (d, d),
                f"{p}.proj.bias": (d,),
                f"{p}.norm2.gain": (d,),
                f"{p}.norm2.bias": (d,),
                f"{p}.mlp.fc1.weight": (d, hidden),
                f"{p}.mlp.fc1.bias": (hidden,),
                f"{p}.mlp.fc2.weight": (hidden, d),
                f"{p}.mlp.fc2.bias": (d,),
            }
        )
    shapes.update(
        {
            "final.adaln.weight": (d, 2 * d),
            "final.adaln.bias": (2 * d,),
            "final.norm.gain": (d,),
            "final.norm.bias": (d,),
            "head.weight": (d, config.token_dim),
            "head.bias": (config.token_dim,),
        }
    )
    return shapes


# zero-initialized so a fresh block is the identity and a fresh model predicts 0
_ZERO_INIT = (".adaln.", "head.")


class ModelParams:
    """Named base weights; shapes are fully determined by the config."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = param_shapes(config)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise DitError(f"parameter names do not match config (missing {missing[:3]}, extra {extra[:3]})")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise DitError(f"parameter {name} has shape {tensors[name].shape}, expected {shape}")
        self.config = config
        self.tensors = {name: tensors[name] for name in expected}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def values(self) -> list[Tensor]:
        return list(self.tensors.values())

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(v.data.astype(dtype)) for k, v in self.tensors.items()})

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: Tensor(v.data.copy()) for k, v in self.tensors.items()})

    def requires_grad_(self, flag: bool = True) -> "ModelParams":
        for t in self.tensors.values():
            t.requires_grad = flag
        return self

    def groups(self) -> dict[str, list[str]]:
        """Parameter names grouped by component (patch_embed, blocks.0, head, ...)."""
        out: dict[str, list[str]] = {}
        for name in self.tensors:
            parts = name.split(".")
            key = ".".join(parts[:2]) if parts[0] == "blocks" else parts[0]
            out.setdefault(key, []).append(name)
        return out


def _trunc_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    draws = rng.standard_normal(shape)
    outside = np.abs(draws) > 2.0
    while outside.any():
        draws[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(draws) > 2.0
    return draws * std


def init_params(config: ModelConfig, seed: int, dtype=np.float32, zero_init: bool = True) -> ModelParams:
    """Truncated-normal init (std 0.02); norm gains 1, biases 0.

    With zero_init the adaptive modulations and the velocity head start at
    zero. zero_init=False randomizes them too (used by gradient checks).
    """
    rng = nx.generator(seed, "init")
    tensors = {}
    for name, shape in param_shapes(config).items():
        modulated = any(z in name for z in _ZERO_INIT)
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif zero_init and modulated:
            data = np.zeros(shape)
        elif name.endswith(".bias") and not modulated:
            data = np.zeros(shape)
        else:
            data = _trunc_normal(rng, shape, INIT_STD)
        tensors[name] = Tensor(data.astype(dtype))
    return ModelParams(config, tensors)


def lora_targets(config: ModelConfig) -> list[str]:
    targets = []
    for i in range(config.depth):
        targets += [f"blocks.{i}.qkv.weight", f"blocks.{i}.proj.weight"]
    return targets


def init_lora(config: ModelConfig, seed: int, dtype=np.float32, zero_b: bool = True) -> LoraParams:
    """A ~ N(0, 1/n_in), B = 0 so a fresh adapter leaves the base model unchanged."""
    rng = nx.generator(seed, "lora")
    shapes = param_shapes(config)
    r = config.lora_rank
    adapters = {}
    for name in lora_targets(config):
        n, m = shapes[name]
        a = rng.standard_normal((r, m)) / math.sqrt(n)
        b = np.zeros((n, r)) if zero_b else rng.standard_normal((n, r)) * INIT_STD
        adapters[name] = LoraAdapter(A=Tensor(a.astype(dtype)), B=Tensor(b.astype(dtype)))
    return LoraParams(rank=r, adapters=adapters)


# --- latent space ---


def patchify(pixels: np.ndarray, patch_size: int) -> tuple[Tensor, np.ndarray]:
    """(H, W, C) array -> row-major patch tokens (N, p*p*C) and (row, col) positions."""
    if pixels.ndim != 3:
        raise DitError(f"patchify expects (H, W, C), got {pixels.shape}")
    h, w, c = pixels.shape
    if h % patch_size or w % patch_size:
        raise DitError(f"image {w}x{h} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    tokens = (
        pixels.reshape(gh, patch_size, gw, patch_size, c)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * gw, patch_size * patch_size * c)
    )
    r, col = np.divmod(np.arange(gh * gw, dtype=np.int64), gw)
    return Tensor(np.ascontiguousarray(tokens)), np.stack([r, col], axis=1)


def unpatchify(tokens, grid: tuple[int, int], patch_size: int, channels: int) -> np.ndarray:
    data = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens)
    gh, gw = grid
    if data.shape != (gh * gw, patch_size * patch_size * channels):
        raise DitError(f"tokens {data.shape} do not fit a {gh}x{gw} grid of {patch_size}px patches")
    return (
        data.reshape(gh, gw, patch_size, patch_size, channels)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gh * patch_size, gw * patch_size, channels)
    )


def image_to_tokens(img: ImagePlane, config: ModelConfig, dtype=None) -> Tensor:
    """Normalize to [-1, 1] and patchify; single-channel images are replicated to RGB."""
    if img.size != (config.image_size, config.image_size):
        raise DitError(f"image is {img.width}x{img.height}, model expects {config.image_size}px square")
    pixels = to_rgb(img).to_float() / 127.5 - 1.0
    tokens, _ = patchify(pixels.astype(dtype or nx.default_dtype()), config.patch_size)
    return tokens


def material_to_tokens(img: ImagePlane, config: ModelConfig, dtype=None) -> Tensor:
    """Like image_to_tokens but any size divisible by the patch size is accepted."""
    pixels = to_rgb(img).to_float() / 127.5 - 1.0
    tokens, _ = patchify(pixels.astype(dtype or nx.default_dtype()), config.patch_size)
    return tokens


def tokens_to_image(tokens: Tensor, config: ModelConfig) -> ImagePlane:
    pixels = unpatchify(tokens, (config.grid, config.grid), config.patch_size, config.channels)
    return ImagePlane.from_array(round_half_up((pixels.astype(np.float64) + 1.0) * 127.5))


# --- attention ---


def rope_rotate(x: Tensor, positions: np.ndarray, base: float = ROPE_BASE) -> Tensor:
    """Axial 2-D RoPE over the last axis of (..., T, head_dim).

    Adjacent pairs of the first half rotate by the row position, pairs of the
    second half by the column position, with frequencies base^(-2i/half).
    """
    hd = x.shape[-1]
    if hd % 4:
        raise DitError(f"head_dim {hd} must be divisible by 4 for 2-D RoPE")
    positions = np.asarray(positions)
    if positions.shape != (x.shape[-2], 2):
        raise DitError(f"positions {positions.shape} do not match {x.shape[-2]} tokens")
    half = hd // 2
    freqs = base ** (-np.arange(half // 2) * 2.0 / half)
    angles = np.concatenate(
        [positions[:, :1] * freqs[None, :], positions[:, 1:2] * freqs[None, :]], axis=1
    )
    cos = np.cos(angles).astype(x.dtype)
    sin = np.sin(angles).astype(x.dtype)
    pairs = x.data.reshape(*x.shape[:-1], half, 2)
    x0, x1 = pairs[..., 0], pairs[..., 1]
    out = np.stack([x0 * cos - x1 * sin, x0 * sin + x1 * cos], axis=-1).reshape(x.shape)

    def back(g: np.ndarray):
        gp = g.reshape(*g.shape[:-1], half, 2)
        g0, g1 = gp[..., 0], gp[..., 1]
        return (np.stack([g0 * cos + g1 * sin, -g0 * sin + g1 * cos], axis=-1).reshape(g.shape),)

    return nx.record_op(out, (x,), back, "rope_rotate")


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    bias: Optional[Tensor] = None,
    positions: Optional[np.ndarray] = None,
) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(head_dim) + bias) v per head; returns (output, weights).

    q, k, v are (heads, T, head_dim) or (T, head_dim). RoPE is applied to q
    and k when positions are given.
    """
    T, hd = q.shape[-2], q.shape[-1]
    if bias is not None and bias.shape != (T, T):
        raise DitError(f"bias shape {bias.shape} does not match {T} tokens")
    if positions is not None:
        q = rope_rotate(q, positions)
        k = rope_rotate(k, positions)
    scores = nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(hd))
    if bias is not None:
        scores = nx.add(scores, bias)
    weights = nx.softmax_rows(scores)
    return nx.matmul(weights, v), weights


def _linear(x: Tensor, params: ModelParams, prefix: str, lora: Optional[LoraParams] = None, w: float = 1.0) -> Tensor:
    weight = params[f"{prefix}.weight"]
    adapter = lora.get(f"{prefix}.weight") if lora is not None else None
    if adapter is not None:
        weight = apply_lora(weight, adapter, w)
    return nx.add(nx.matmul(x, weight), params[f"{prefix}.bias"])


def mma(
    seq: TokenSequence,
    bias: Optional[Tensor],
    params: ModelParams,
    index: int = 0,
    lora: Optional[LoraParams] = None,
    w: float = 1.0,
) -> Tensor:
    """Multi-modal attention of block `index` over the whole unified sequence."""
    T, d = seq.tokens.shape
    heads = params.config.heads
    hd = d // heads
    if bias is not None and bias.shape != (T, T):
        raise DitError(f"bias shape {bias.shape} does not match sequence length {T}")
    qkv = _linear(seq.tokens, params, f"blocks.{index}.qkv", lora, w)
    qkv = nx.transpose(nx.reshape(qkv, (T, 3, heads, hd)), (1, 2, 0, 3))
    q, k, v = (nx.reshape(part, (heads, T, hd)) for part in nx.split_rows(qkv, [1, 1, 1]))
    out, _ = attention(q, k, v, bias, seq.positions)
    out = nx.reshape(nx.transpose(out, (1, 0, 2)), (T, d))
    return _linear(out, params, f"blocks.{index}.proj", lora, w)


def _modulation(t_vec: Tensor, params: ModelParams, prefix: str, chunks: int) -> list[Tensor]:
    d = params.config.embed_dim
    mod = nx.add(nx.matmul(nx.gelu(t_vec), params[f"{prefix}.weight"]), params[f"{prefix}.bias"])
    return nx.split_rows(nx.reshape(mod, (chunks, d)), [1] * chunks)


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return nx.add(nx.mul(x, nx.add(scale, 1.0)), shift)


def dit_block(
    seq: TokenSequence,
    t_vec: Tensor,
    bias: Optional[Tensor],
    params: ModelParams,
    index: int = 0,
    lora: Optional[LoraParams] = None,
    w: float = 1.0,
) -> TokenSequence:
    p = f"blocks.{index}"
    shift1, scale1, gate1, shift2, scale2, gate2 = _modulation(t_vec, params, f"{p}.adaln", 6)
    x = seq.tokens
    h = _modulate(nx.layer_norm(x, params[f"{p}.norm1.gain"], params[f"{p}.norm1.bias"]), shift1, scale1)
    x = nx.add(x, nx.mul(gate1, mma(seq.with_tokens(h), bias, params, index, lora, w)))
    h = _modulate(nx.layer_norm(x, params[f"{p}.norm2.gain"], params[f"{p}.norm2.bias"]), shift2, scale2)
    h = _linear(nx.gelu(_linear(h, params, f"{p}.mlp.fc1")), params, f"{p}.mlp.fc2")
    return seq.with_tokens(nx.add(x, nx.mul(gate2, h)))


# --- full model ---


def timestep_embedding(t: float, dim: int, dtype=None) -> Tensor:
    """Sinusoidal embedding of 1000*t, shape (1, dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = 1000.0 * float(t) * freqs
    emb = np.concatenate([np.cos(angles), np.sin(angles)])[None, :]
    return Tensor(emb.astype(dtype or nx.default_dtype()))


@dataclass(frozen=True, eq=False)
class Conditions:
    """Raw (patch-space) condition tokens; `dropped` swaps them for the null token."""

    material: Optional[Tensor] = None
    depth: Optional[Tensor] = None
    dropped: bool = False
    material_grid: Optional[tuple[int, int]] = None

    def as_null(self) -> "Conditions":
        return replace(self, dropped=True)

    def without_material(self) -> "Conditions":
        return replace(self, material=None, material_grid=None)


def _embed(raw: Tensor, params: ModelParams, segment: int) -> Tensor:
    config = params.config
    if raw.ndim != 2 or raw.shape[1] != config.token_dim:
        raise DitError(f"tokens {raw.shape} do not match token_dim {config.token_dim}")
    x = _linear(raw, params, "patch_embed")
    return nx.add(x, nx.gather(params["segment_embed"], [segment]))


def _null_rows(params: ModelParams, count: int) -> Tensor:
    return nx.gather(params["null_token"], np.zeros(count, dtype=np.int64))


def predict_velocity(
    x_tokens: Tensor,
    t: float,
    conditions: Optional[Conditions],
    params: ModelParams,
    gamma: float = 1.0,
    w: float = 1.0,
    lora: Optional[LoraParams] = None,
    fusion: str = "concat",
) -> Tensor:
    """Embed, assemble [C_M; X; C_D], run every block, read the image rows back out."""
    config = params.config
    if not gamma >= GAMMA_MIN:
        raise BiasRangeError(f"gamma must be >= {GAMMA_MIN}, got {gamma}")
    if fusion not in FUSIONS:
        raise DitError(f"unknown fusion {fusion!r}; expected one of {FUSIONS}")
    if x_tokens.shape != (config.num_tokens, config.token_dim):
        raise DitError(f"x_tokens {x_tokens.shape} do not match ({config.num_tokens}, {config.token_dim})")
    x = _embed(x_tokens, params, IMAGE)
    c_m = c_d = None
    material_grid = None
    if conditions is not None:
        if conditions.material is not None:
            count = conditions.material.shape[0]
            material_grid = conditions.material_grid or default_grid(count)
            c_m = _null_rows(params, count) if conditions.dropped else _embed(conditions.material, params, MATERIAL)
        if conditions.depth is not None:
            count = conditions.depth.shape[0]
            c_d = _null_rows(params, count) if conditions.dropped else _embed(conditions.depth, params, DEPTH)
    if fusion == "add" and c_d is not None:
        x = nx.add(x, c_d)
        c_d = None

    seq = assemble_sequence(c_m, x, c_d, (config.grid, config.grid), material_grid)
    bias = None
    if seq.layout.material_tokens and gamma != 1.0:
        bias = cross_bias(gamma, seq.layout, x.dtype)

    t_emb = timestep_embedding(t, config.embed_dim, x.dtype)
    t_vec = _linear(nx.gelu(_linear(t_emb, params, "t_embed.fc1")), params, "t_embed.fc2")
    for i in range(config.depth):
        seq = dit_block(seq, t_vec, bias, params, i, lora, w)

    _, image, _ = seq.segments()
    shift, scale = _modulation(t_vec, params, "final.adaln", 2)
    h = _modulate(nx.layer_norm(image, params["final.norm.gain"], params["final.norm.bias"]), shift, scale)
    return _linear(h, params, "head")


@dataclass
class VelocityModel:
    """Binds weights and inference knobs to the (x_t, t, conditions) protocol used by flow."""

    params: ModelParams
    lora: Optional[LoraParams] = None
    gamma: float = 1.0
    lora_weight: float = 1.0
    fusion: str = "concat"

    def __call__(self, x_t: Tensor, t: float, conditions: Optional[Conditions]) -> Tensor:
        return predict_velocity(
            x_t, t, conditions, self.params, self.gamma, self.lora_weight, self.lora, self.fusion
        )


__all__ = [
    "Conditions",
    "DitError",
    "ModelConfig",
    "ModelParams",
    "VelocityModel",
    "attention",
    "dit_block",
    "image_to_tokens",
    "init_lora",
    "init_params",
    "lora_targets",
    "material_to_tokens",
    "mma",
    "param_shapes",
    "patchify",
    "predict_velocity",
    "rope_rotate",
    "timestep_embedding",
    "tokens_to_image",
    "unpatchify",
]
