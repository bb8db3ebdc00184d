"""Inference pipeline: single and multi-object transfer plus ablation sweeps.

transfer: composite the illumination image, noise its latent to t_start,
sample with the unified sequence, blend the background back in after every
step and finally copy every background pixel from the input.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

from . import numerics as nx
from .conditioning import GAMMA_MIN, LoraParams
from .dataset_paths import SweepPlan
from .dit import (
    FUSIONS,
    Conditions,
    ModelParams,
    VelocityModel,
    image_to_tokens,
    material_to_tokens,
    tokens_to_image,
)
from .flow import FlowConfig, forward_process, init_from_illumination, init_pure_noise, sample
from .imaging import (
    ImagePlane,
    ImagingError,
    Mask,
    blend_step,
    check_disjoint,
    depth_to_rgb,
    downsample_mask_to_tokens,
    final_background_replace,
    illumination_composite,
    save_image,
    tile_images,
)
from .metrics import masked_ssim, material_similarity, psnr, ssim

INITS = ("illumination", "raw", "noise")
SWEEPS: dict[str, tuple] = {
    "gamma": (0.01, 0.5, 1.0, 1.8, 2.5),
    "lora": (0.7, 0.8, 0.9, 1.0),
    "cfg": (10.0, 20.0, 30.0, 40.0, 50.0),
    "init": INITS,
    "fusion": FUSIONS,
}
OVERRIDABLE_SWEEPS = ("gamma", "cfg")


class PipelineError(Exception):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    gamma: float = 1.8
    lora_weight: float = 1.0
    cfg_scale: float = 30.0
    steps: int = 8
    t_start: float = 0.9
    seed: int = 0
    init: str = "illumination"
    fusion: str = "concat"
    blend: bool = True

    def __post_init__(self):
        if not self.gamma >= GAMMA_MIN:
            raise PipelineError(f"gamma must be >= {GAMMA_MIN}, got {self.gamma}")
        if self.init not in INITS:
            raise PipelineError(f"unknown init {self.init!r}; expected one of {INITS}")
        if self.fusion not in FUSIONS:
            raise PipelineError(f"unknown fusion {self.fusion!r}; expected one of {FUSIONS}")

    def flow_config(self) -> FlowConfig:
        return FlowConfig(num_steps=self.steps, cfg_scale=self.cfg_scale, t_start=self.t_start)


def _check_sizes(params: ModelParams, input_img: ImagePlane, mask: Mask, depth: Optional[ImagePlane]) -> None:
    side = params.config.image_size
    for name, item in (("input", input_img), ("mask", mask), ("depth", depth)):
        if item is not None and item.size != (side, side):
            raise ImagingError(f"{name} is {item.size[0]}x{item.size[1]}, model expects {side}x{side}")
    if input_img.channels != 3:
        raise ImagingError(f"input must be a colour image, got {input_img.channels} channels")


def build_conditions(
    params: ModelParams,
    material: Optional[ImagePlane],
    depth: Optional[ImagePlane],
) -> Optional[Conditions]:
    config = params.config
    material_tokens = depth_tokens = None
    material_grid = None
    if material is not None:
        if material.width % config.patch_size or material.height % config.patch_size:
            raise ImagingError(f"material {material.width}x{material.height} is not divisible by patch size {config.patch_size}")
        material_tokens = material_to_tokens(material, config)
        material_grid = (material.height // config.patch_size, material.width // config.patch_size)
    if depth is not None:
        depth_tokens = image_to_tokens(depth_to_rgb(depth), config)
    if material_tokens is None and depth_tokens is None:
        return None
    return Conditions(material=material_tokens, depth=depth_tokens, material_grid=material_grid)


def transfer(
    params: ModelParams,
    input_img: ImagePlane,
    material: Optional[ImagePlane],
    mask: Mask,
    sampler: SamplerConfig,
    depth: Optional[ImagePlane] = None,
    lora: Optional[LoraParams] = None,
) -> ImagePlane:
    """Paint `material` onto the masked object of `input_img`.

    material=None drops the material stream entirely. The depth stream is
    used only together with a LoRA adapter.
    """
    _check_sizes(params, input_img, mask, depth)
    config = params.config
    dtype = params.dtype
    if sampler.init == "illumination":
        start = illumination_composite(input_img, mask)
    else:
        start = input_img
    z_start = image_to_tokens(start, config, dtype)
    if sampler.init == "noise":
        state = init_pure_noise(z_start.shape, sampler.seed, dtype=dtype)
    else:
        state = init_from_illumination(z_start, sampler.t_start, sampler.seed)

    conditions = build_conditions(params, material, depth if lora is not None else None)
    model = VelocityModel(
        params=params,
        lora=lora,
        gamma=sampler.gamma,
        lora_weight=sampler.lora_weight,
        fusion=sampler.fusion,
    )

    on_step = None
    if sampler.blend:
        z_input = image_to_tokens(input_img, config, dtype)
        m_latent = downsample_mask_to_tokens(mask, config.patch_size)

        def on_step(x: nx.Tensor, t_next: float, step: int) -> nx.Tensor:
            eps = nx.standard_normal(z_input.shape, sampler.seed, "blend", step, dtype=dtype)
            return blend_step(x, forward_process(z_input, eps, t_next), m_latent)

    x0 = sample(model, state, sampler.flow_config(), conditions, on_step=on_step)
    return final_background_replace(tokens_to_image(x0, config), input_img, mask)


def transfer_multi(
    params: ModelParams,
    input_img: ImagePlane,
    materials: Sequence[ImagePlane],
    masks: Sequence[Mask],
    sampler: SamplerConfig,
    depth: Optional[ImagePlane] = None,
    lora: Optional[LoraParams] = None,
) -> ImagePlane:
    """Apply one material per mask in order; object i samples with seed + i."""
    if len(materials) != len(masks):
        raise PipelineError(f"{len(materials)} materials for {len(masks)} masks")
    if not masks:
        raise PipelineError("transfer_multi needs at least one mask")
    check_disjoint(masks)
    current = input_img
    for i, (material, mask) in enumerate(zip(materials, masks)):
        current = transfer(params, current, material, mask, replace(sampler, seed=sampler.seed + i), depth, lora)
    return current


# --- ablation sweeps ---


@dataclass(eq=False)
class SweepRun:
    label: str
    value: object
    image: ImagePlane
    metrics: dict[str, float] = field(default_factory=dict)


def sweep_values(sweep: str, values: Optional[Sequence[float]] = None) -> tuple:
    if sweep not in SWEEPS:
        raise PipelineError(f"unknown sweep {sweep!r}; expected one of {tuple(SWEEPS)}")
    if values:
        if sweep not in OVERRIDABLE_SWEEPS:
            raise PipelineError(f"sweep {sweep!r} has a fixed grid; --values applies to {OVERRIDABLE_SWEEPS}")
        return tuple(float(v) for v in values)
    return SWEEPS[sweep]


def _setting(sampler: SamplerConfig, sweep: str, value) -> SamplerConfig:
    if sweep == "gamma":
        return replace(sampler, gamma=float(value))
    if sweep == "lora":
        return replace(sampler, lora_weight=float(value))
    if sweep == "cfg":
        return replace(sampler, cfg_scale=float(value))
    if sweep == "init":
        return replace(sampler, init=str(value))
    return replace(sampler, fusion=str(value))


def _metrics(
    image: ImagePlane, material: Optional[ImagePlane], mask: Mask, truth: Optional[ImagePlane]
) -> dict[str, float]:
    out: dict[str, float] = {}
    if material is not None and mask.foreground().any():
        out["material_similarity"] = material_similarity(image, material, mask)
    if truth is not None:
        out["ssim"] = ssim(image, truth)
        out["psnr"] = psnr(image, truth)
        if mask.values.sum() > 0:
            out["masked_ssim"] = masked_ssim(image, truth, mask)
    return out


def run_sweep(
    sweep: str,
    params: ModelParams,
    input_img: ImagePlane,
    material: Optional[ImagePlane],
    mask: Mask,
    sampler: SamplerConfig,
    depth: Optional[ImagePlane] = None,
    lora: Optional[LoraParams] = None,
    truth: Optional[ImagePlane] = None,
    values: Optional[Sequence[float]] = None,
) -> list[SweepRun]:
    if sweep == "lora" and lora is None:
        raise PipelineError("the lora sweep needs a LoRA adapter")
    runs = []
    for value in sweep_values(sweep, values):
        setting = _setting(sampler, sweep, value)
        image = transfer(params, input_img, material, mask, setting, depth, lora)
        runs.append(SweepRun(label=f"{sweep}={value}", value=value, image=image, metrics=_metrics(image, material, mask, truth)))
    return runs


def _format(value: float) -> str:
    if math.isinf(value):
        return "inf"
    return f"{value:.6f}"


def sweep_csv(sweep: str, runs: Sequence[SweepRun]) -> str:
    keys: list[str] = []
    for run in runs:
        keys += [k for k in run.metrics if k not in keys]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([sweep, *keys])
    for run in runs:
        writer.writerow([run.value, *(_format(run.metrics[k]) if k in run.metrics else "" for k in keys)])
    return buf.getvalue()


def write_sweep(runs: Sequence[SweepRun], plan: SweepPlan) -> list[Path]:
    """Per-setting images, one contact sheet and the metrics CSV."""
    plan.ensure_dirs()
    written = []
    for run in runs:
        path = plan.image_path(str(run.value))
        save_image(run.image, path)
        written.append(path)
    save_image(tile_images([run.image for run in runs]), plan.sheet_path)
    plan.csv_path.write_text(sweep_csv(plan.sweep, runs), encoding="utf-8")
    return written + [plan.sheet_path, plan.csv_path]


__all__ = [
    "INITS",
    "SWEEPS",
    "PipelineError",
    "SamplerConfig",
    "SweepRun",
    "build_conditions",
    "run_sweep",
    "sweep_csv",
    "sweep_values",
    "transfer",
    "transfer_multi",
    "write_sweep",
]
