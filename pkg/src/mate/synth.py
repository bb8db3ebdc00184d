"""Procedural material-transfer scenes and the two-stage training loop.

A scene is one analytic shape on a flat background. The ground truth paints
the shape with a material texture under a directional shading term; the
illumination image paints the same shape with a flat base colour under the
same shading and then greys its foreground.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from . import numerics as nx
from .conditioning import LoraParams
from .dataset_paths import DatasetPaths, ScenePlan
from .dit import (
    Conditions,
    ModelConfig,
    ModelParams,
    VelocityModel,
    image_to_tokens,
    init_lora,
    init_params,
    material_to_tokens,
)
from .flow import cfm_loss
from .imaging import (
    ImagePlane,
    Mask,
    depth_to_rgb,
    illumination_composite,
    load_image,
    load_mask,
    round_half_up,
    save_image,
    save_mask,
)
from .numerics import NumericsError

CANVAS = 32
SHAPES = ("circle", "square", "triangle")
MATERIALS = ("stripes", "checker", "radial-gradient", "noise")
# pairs never seen together during training
HELD_OUT_COMBOS = (("circle", "noise"), ("square", "radial-gradient"), ("triangle", "checker"))
HELD_OUT_FRACTION = 0.2
# divisors of every patch size the models use
TILE_PERIODS = (2, 4)
STAGES = ("base", "depth_lora")

Color = tuple[int, int, int]


class SceneError(Exception):
    pass


class ValidationError(Exception):
    pass


class TrainingError(Exception):
    pass


class TrainingDivergedError(TrainingError):
    def __init__(self, step: int, detail: str = ""):
        self.step = step
        super().__init__(f"training diverged at step {step}" + (f": {detail}" if detail else ""))


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    center: tuple[int, int]
    size: int
    material: str
    palette: tuple[Color, Color]
    period: int
    light_angle: float
    base_color: Color = (200, 100, 0)
    background: Color = (40, 40, 40)
    canvas: int = CANVAS

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise SceneError(f"unknown shape {self.shape!r}; expected one of {SHAPES}")
        if self.material not in MATERIALS:
            raise SceneError(f"unknown material {self.material!r}; expected one of {MATERIALS}")
        if self.period < 2:
            raise SceneError(f"period must be >= 2 px, got {self.period}")
        if self.size < 1:
            raise SceneError(f"size must be positive, got {self.size}")
        cx, cy = self.center
        if cx - self.size < 0 or cy - self.size < 0 or cx + self.size > self.canvas or cy + self.size > self.canvas:
            raise SceneError(f"{self.shape} at {self.center} with size {self.size} leaves the {self.canvas}px canvas")
        for color in (*self.palette, self.base_color, self.background):
            if len(color) != 3 or any(not 0 <= c <= 255 for c in color):
                raise SceneError(f"invalid colour {color}")

    @property
    def combo(self) -> tuple[str, str]:
        return self.shape, self.material

    def to_pairs(self) -> dict[str, str]:
        return {
            "shape": self.shape,
            "cx": str(self.center[0]),
            "cy": str(self.center[1]),
            "size": str(self.size),
            "material": self.material,
            "palette": ";".join(_color_text(c) for c in self.palette),
            "period": str(self.period),
            "light_angle": repr(float(self.light_angle)),
            "base_color": _color_text(self.base_color),
            "background": _color_text(self.background),
            "canvas": str(self.canvas),
        }

    @classmethod
    def from_pairs(cls, pairs: dict[str, str]) -> "SceneSpec":
        try:
            palette = tuple(_parse_color(c) for c in pairs["palette"].split(";"))
            if len(palette) != 2:
                raise SceneError(f"palette needs two colours, got {pairs['palette']!r}")
            return cls(
                shape=pairs["shape"],
                center=(int(pairs["cx"]), int(pairs["cy"])),
                size=int(pairs["size"]),
                material=pairs["material"],
                palette=palette,
                period=int(pairs["period"]),
                light_angle=float(pairs["light_angle"]),
                base_color=_parse_color(pairs["base_color"]),
                background=_parse_color(pairs["background"]),
                canvas=int(pairs.get("canvas", CANVAS)),
            )
        except KeyError as e:
            raise SceneError(f"scene spec lacks key {e.args[0]!r}") from None
        except ValueError as e:
            raise SceneError(f"malformed scene spec: {e}") from None


def _color_text(c: Color) -> str:
    return ",".join(str(int(v)) for v in c)


def _parse_color(text: str) -> Color:
    parts = [int(v) for v in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"colour needs three components, got {text!r}")
    return parts[0], parts[1], parts[2]


@dataclass(frozen=True, eq=False)
class TrainSample:
    illumination: ImagePlane
    material: ImagePlane
    depth: ImagePlane
    mask: Mask
    target: ImagePlane
    spec: Optional[SceneSpec] = None
    seed: int = 0
    index: int = 0
    split: str = "train"


# --- rendering ---


def _pixel_grid(canvas: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:canvas, 0:canvas].astype(np.float64)
    return xs + 0.5, ys + 0.5


def shape_mask(spec: SceneSpec) -> Mask:
    px, py = _pixel_grid(spec.canvas)
    cx, cy, s = float(spec.center[0]), float(spec.center[1]), float(spec.size)
    if spec.shape == "circle":
        inside = (px - cx) ** 2 + (py - cy) ** 2 <= s * s
    elif spec.shape == "square":
        inside = (np.abs(px - cx) <= s) & (np.abs(py - cy) <= s)
    else:
        # apex up, base on the bottom edge of the bounding box
        inside = (py >= cy - s) & (py <= cy + s) & (np.abs(px - cx) <= (py - (cy - s)) / 2.0)
    return Mask.from_array(inside.astype(np.float64))


def shading(spec: SceneSpec) -> np.ndarray:
    """Directional shading in [0.4, 1], brightest on the side facing the light."""
    px, py = _pixel_grid(spec.canvas)
    lx, ly = math.cos(spec.light_angle), math.sin(spec.light_angle)
    u = ((px - spec.center[0]) * lx + (py - spec.center[1]) * ly) / spec.size
    return np.clip(0.7 + 0.3 * u, 0.4, 1.0)


def texture(spec: SceneSpec, seed: int) -> np.ndarray:
    """Unshaded material texture over the whole canvas, float RGB (h, w, 3).

    Every pattern repeats with period `spec.period` along both axes, so a patch
    whose side is a multiple of the period always holds the same tile.
    """
    n, p = spec.canvas, spec.period
    ys, xs = np.mgrid[0:n, 0:n]
    u, v = xs % p, ys % p
    if spec.material == "stripes":
        weight = (((xs + ys) % p) < p / 2).astype(np.float64)
    elif spec.material == "checker":
        weight = ((u < p / 2) != (v < p / 2)).astype(np.float64)
    elif spec.material == "radial-gradient":
        weight = np.hypot(u, v) / math.hypot(p - 1, p - 1)
    else:
        tile = nx.generator(seed, "texture").uniform(size=(p, p))
        weight = tile[v, u]
    c0 = np.asarray(spec.palette[0], dtype=np.float64)
    c1 = np.asarray(spec.palette[1], dtype=np.float64)
    return (1.0 - weight)[:, :, None] * c0 + weight[:, :, None] * c1


def depth_map(mask: Mask) -> ImagePlane:
    """Distance to the nearest background pixel, scaled so the deepest interior pixel is 255."""
    inside = mask.foreground()
    dist = ndimage.distance_transform_edt(inside)
    peak = dist.max()
    scaled = 255.0 * dist / peak if peak > 0 else dist
    return ImagePlane.from_array(round_half_up(scaled))


def _paint(base: np.ndarray, mask: Mask, background: Color) -> ImagePlane:
    fg = mask.foreground()[:, :, None]
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), base.shape)
    return ImagePlane.from_array(round_half_up(np.where(fg, base, bg)))


def render_source(spec: SceneSpec) -> ImagePlane:
    mask = shape_mask(spec)
    flat = np.ones((spec.canvas, spec.canvas, 3)) * np.asarray(spec.base_color, dtype=np.float64)
    return _paint(flat * shading(spec)[:, :, None], mask, spec.background)


def generate_scene(spec: SceneSpec, seed: int, index: int = 0, split: str = "train") -> TrainSample:
    mask = shape_mask(spec)
    if not mask.foreground().any():
        raise SceneError(f"{spec.shape} of size {spec.size} covers no pixels")
    swatch = texture(spec, seed)
    target = _paint(swatch * shading(spec)[:, :, None], mask, spec.background)
    return TrainSample(
        illumination=illumination_composite(render_source(spec), mask),
        material=ImagePlane.from_array(round_half_up(swatch)),
        depth=depth_map(mask),
        mask=mask,
        target=target,
        spec=spec,
        seed=seed,
        index=index,
        split=split,
    )


def _random_color(rng: np.random.Generator) -> Color:
    return tuple(int(v) for v in rng.integers(0, 256, size=3))  # type: ignore[return-value]


def random_spec(rng: np.random.Generator, shape: str, material: str, canvas: int = CANVAS) -> SceneSpec:
    size = int(rng.integers(6, 13))
    cx = int(rng.integers(size, canvas - size + 1))
    cy = int(rng.integers(size, canvas - size + 1))
    c0 = _random_color(rng)
    # keep the two palette entries visibly apart
    c1 = tuple(int((v + 96 + rng.integers(0, 64)) % 256) for v in c0)
    return SceneSpec(
        shape=shape,
        center=(cx, cy),
        size=size,
        material=material,
        palette=(c0, c1),  # type: ignore[arg-type]
        period=int(rng.choice(TILE_PERIODS)),
        light_angle=float(rng.uniform(0.0, 2.0 * math.pi)),
        base_color=_random_color(rng),
        background=_random_color(rng),
        canvas=canvas,
    )


def combos(split: str) -> list[tuple[str, str]]:
    every = [(s, m) for s in SHAPES for m in MATERIALS]
    if split == "held_out":
        return list(HELD_OUT_COMBOS)
    return [c for c in every if c not in HELD_OUT_COMBOS]


def split_of(index: int, count: int) -> str:
    held = int(round(count * HELD_OUT_FRACTION))
    return "held_out" if index >= count - held else "train"


def generate_dataset(count: int, seed: int) -> list[TrainSample]:
    """`count` scenes; the last fifth draws only from held-out shape/material pairs."""
    samples = []
    for index in range(count):
        split = split_of(index, count)
        rng = nx.generator(seed, "scene", index)
        pool = combos(split)
        shape, material = pool[int(rng.integers(len(pool)))]
        spec = random_spec(rng, shape, material)
        samples.append(generate_scene(spec, seed=int(rng.integers(2**31)), index=index, split=split))
    return samples


# --- persistence ---


def write_scene(sample: TrainSample, plan: ScenePlan) -> None:
    plan.ensure_dirs()
    save_image(sample.illumination, plan.illum_path)
    save_image(sample.material, plan.material_path)
    save_image(sample.depth, plan.depth_path)
    save_mask(sample.mask, plan.mask_path)
    save_image(sample.target, plan.target_path)
    pairs = {"index": str(sample.index), "split": sample.split, "seed": str(sample.seed)}
    if sample.spec is not None:
        pairs.update(sample.spec.to_pairs())
    text = "".join(f"{k}={v}\n" for k, v in pairs.items())
    try:
        plan.spec_path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise SceneError(f"cannot write {plan.spec_path}: {e.strerror}") from e


def read_pairs(path: Path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise SceneError(f"cannot read {path}: {e.strerror}") from e
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SceneError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def read_scene(plan: ScenePlan) -> TrainSample:
    missing = plan.missing()
    if missing:
        raise SceneError(f"scene {plan.scene_dir} lacks {missing[0].name}")
    pairs = read_pairs(plan.spec_path)
    spec = SceneSpec.from_pairs(pairs) if "shape" in pairs else None
    try:
        return TrainSample(
            illumination=load_image(plan.illum_path),
            material=load_image(plan.material_path),
            depth=load_image(plan.depth_path),
            mask=load_mask(plan.mask_path),
            target=load_image(plan.target_path),
            spec=spec,
            seed=int(pairs.get("seed", 0)),
            index=int(pairs.get("index", 0)),
            split=pairs.get("split", "train"),
        )
    except ValueError as e:
        raise SceneError(f"{plan.spec_path}: {e}") from None


def write_dataset(samples: Sequence[TrainSample], root: Path) -> list[ScenePlan]:
    paths = DatasetPaths(root)
    plans = []
    for sample in samples:
        plan = paths.plan_scene(sample.index)
        write_scene(sample, plan)
        plans.append(plan)
    return plans


def load_dataset(root: Path, split: Optional[str] = None) -> list[TrainSample]:
    samples = [read_scene(plan) for plan in DatasetPaths(root).plans()]
    if split is not None:
        samples = [s for s in samples if s.split == split]
    return samples


# --- validation ---


def validate_sample(sample: TrainSample) -> list[str]:
    """Construction invariants of one scene; an empty list means it is valid."""
    problems = []
    size = sample.target.size
    for name, item in (
        ("illumination", sample.illumination),
        ("depth", sample.depth),
        ("mask", sample.mask),
    ):
        if item.size != size:
            problems.append(f"{name} is {item.size}, target is {size}")
    if problems:
        return problems
    fg = sample.mask.foreground()
    if not np.isin(sample.mask.values, (0.0, 1.0)).all():
        problems.append("mask is not binary")
    if not fg.any():
        problems.append("mask is empty")
    if not np.array_equal(sample.target.samples[~fg], sample.illumination.samples[~fg]):
        problems.append("target background differs from illumination background")
    illum_fg = sample.illumination.samples[fg]
    if illum_fg.size and not (illum_fg == illum_fg[:, :1]).all():
        problems.append("illumination foreground is not grey")
    depth = sample.depth.samples[:, :, 0]
    if depth[~fg].any():
        problems.append("depth is non-zero outside the mask")
    if fg.any() and depth.max() != 255:
        problems.append("depth is not normalized to 255")
    if sample.spec is not None:
        try:
            expected = generate_scene(sample.spec, sample.seed, sample.index, sample.split)
        except SceneError as e:
            problems.append(f"spec does not render: {e}")
        else:
            for name in ("illumination", "material", "depth", "target"):
                if not getattr(expected, name).same_pixels(getattr(sample, name)):
                    problems.append(f"{name} does not match its spec")
            if not np.array_equal(expected.mask.values, sample.mask.values):
                problems.append("mask does not match its spec")
    return problems


def validate_dataset(samples: Sequence[TrainSample]) -> dict[int, list[str]]:
    """Map scene index -> problems for every invalid scene."""
    report = {}
    for sample in samples:
        problems = validate_sample(sample)
        if problems:
            report[sample.index] = problems
    return report


# --- training ---


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    batch_size: int = 8
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.99)
    eps: float = 1e-8
    cond_dropout: float = 0.1
    log_every: int = 50

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise TrainingError(f"invalid steps={self.steps} / batch_size={self.batch_size}")
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise TrainingError(f"cond_dropout must lie in [0, 1], got {self.cond_dropout}")
        if self.lr <= 0:
            raise TrainingError(f"lr must be positive, got {self.lr}")


@dataclass(eq=False)
class TrainResult:
    params: ModelParams
    lora: Optional[LoraParams]
    losses: list[tuple[int, float]] = field(default_factory=list)


@dataclass(frozen=True, eq=False)
class _Encoded:
    x0: nx.Tensor
    conditions: Conditions


def _encode(sample: TrainSample, config: ModelConfig, with_depth: bool) -> _Encoded:
    material = material_to_tokens(sample.material, config)
    depth = image_to_tokens(depth_to_rgb(sample.depth), config) if with_depth else None
    return _Encoded(x0=image_to_tokens(sample.target, config), conditions=Conditions(material=material, depth=depth))


def train(
    config: TrainConfig,
    model_config: ModelConfig,
    dataset: Sequence[TrainSample],
    stage: str,
    seed: int,
    base: Optional[ModelParams] = None,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """Stage "base" trains every base weight without depth tokens; stage
    "depth_lora" freezes `base` and trains only LoRA factors with depth tokens."""
    if stage not in STAGES:
        raise TrainingError(f"unknown stage {stage!r}; expected one of {STAGES}")
    if not dataset:
        raise TrainingError("training set is empty")
    with_depth = stage == "depth_lora"
    if with_depth:
        if base is None:
            raise TrainingError("stage depth_lora needs a base checkpoint")
        if base.config != model_config:
            raise TrainingError(f"base checkpoint was trained for {base.config}, not {model_config}")
        params = base.copy().requires_grad_(False)
        lora = init_lora(model_config, seed).requires_grad_(True)
        trainable = lora.tensors()
    else:
        params = init_params(model_config, seed).requires_grad_(True)
        lora = None
        trainable = params.values()

    encoded = [_encode(s, model_config, with_depth) for s in dataset]
    model = VelocityModel(params=params, lora=lora)
    opt = nx.Adam(trainable, lr=config.lr, betas=config.betas, eps=config.eps)
    losses: list[tuple[int, float]] = []
    for step in range(config.steps):
        rng = nx.generator(seed, "batch", step)
        picks = rng.choice(len(encoded), size=config.batch_size, replace=len(encoded) < config.batch_size)
        dropped = rng.random(config.batch_size) < config.cond_dropout
        batch = [
            (encoded[i].x0, encoded[i].conditions.as_null() if drop else encoded[i].conditions)
            for i, drop in zip(picks, dropped)
        ]
        try:
            with nx.GradTape() as tape:
                loss = cfm_loss(model, batch, seed=int(rng.integers(2**62)))
            opt.zero_grad()
            tape.backward(loss)
            opt.step()
        except NumericsError as e:
            raise TrainingDivergedError(step, str(e)) from e
        value = loss.item()
        losses.append((step, value))
        if on_step is not None:
            on_step(step, value)
    for t in trainable:
        t.requires_grad = False
    return TrainResult(params=params, lora=lora, losses=losses)


def smooth_losses(losses: Sequence[float], window: int = 25) -> list[float]:
    """Trailing moving average; the first entries average what is available."""
    values = np.asarray(losses, dtype=np.float64)
    if values.size == 0:
        return []
    csum = np.cumsum(np.concatenate([[0.0], values]))
    idx = np.arange(1, values.size + 1)
    lo = np.maximum(idx - window, 0)
    return list((csum[idx] - csum[lo]) / (idx - lo))


def write_loss_log(losses: Sequence[tuple[int, float]], path: Path) -> None:
    lines = ["step,loss"] + [f"{step},{value:.8g}" for step, value in losses]
    try:
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as e:
        raise TrainingError(f"cannot write {path}: {e.strerror}") from e


__all__ = [
    "HELD_OUT_COMBOS",
    "TILE_PERIODS",
    "MATERIALS",
    "SHAPES",
    "STAGES",
    "SceneError",
    "SceneSpec",
    "TrainConfig",
    "TrainResult",
    "TrainSample",
    "TrainingDivergedError",
    "TrainingError",
    "ValidationError",
    "combos",
    "depth_map",
    "generate_dataset",
    "generate_scene",
    "load_dataset",
    "random_spec",
    "read_scene",
    "render_source",
    "shading",
    "shape_mask",
    "smooth_losses",
    "split_of",
    "texture",
    "validate_dataset",
    "validate_sample",
    "write_dataset",
    "write_loss_log",
    "write_scene",
]
