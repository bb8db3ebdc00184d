"""mate: generate synthetic scenes, train, transfer materials and run ablations."""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import CheckpointError, load_lora, load_model, save_lora, save_model
from .conditioning import ConditioningError
from .dataset_paths import DatasetPaths, plan_sweep
from .dit import DitError, ModelConfig
from .flow import DivergedSamplingError, FlowError
from .imaging import ImagingError, load_image, load_mask, save_image
from .metrics import MetricsError, masked_mse, mse, psnr, ssim
from .numerics import NumericsError
from .pipeline import INITS, SWEEPS, PipelineError, SamplerConfig, run_sweep, transfer, transfer_multi, write_sweep
from .synth import (
    STAGES,
    SceneError,
    TrainConfig,
    TrainingDivergedError,
    TrainingError,
    ValidationError,
    generate_dataset,
    load_dataset,
    smooth_losses,
    train,
    validate_dataset,
    write_dataset,
    write_loss_log,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGED = 3

_DIVERGENCE = (DivergedSamplingError, TrainingDivergedError, NumericsError)
_USAGE = (PipelineError, FlowError, TrainingError)
_DATA = (
    ImagingError,
    CheckpointError,
    ConditioningError,
    SceneError,
    ValidationError,
    MetricsError,
    DitError,
    OSError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def log_step(msg: str) -> None:
    print(f"[mate] {msg}...")


def log_error(msg: str) -> None:
    print(f"[mate:error] {msg}")


# --- argument parsing ---


def _add_sampler_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ckpt", type=Path, default=None, help="Base model checkpoint (MATE)")
    p.add_argument("--lora", type=Path, default=None, help="Depth LoRA file (LORA)")
    p.add_argument("--depth", type=Path, default=None, help="Depth map PGM (255 = nearest)")
    p.add_argument("--gamma", type=float, default=1.8, help="Material cross-bias strength (default: 1.8)")
    p.add_argument("--lora-weight", type=float, default=1.0, help="LoRA weight w (default: 1.0)")
    p.add_argument("--cfg", type=float, default=30.0, help="Classifier-free guidance scale (default: 30)")
    p.add_argument("--steps", type=int, default=8, help="Euler steps (default: 8)")
    p.add_argument("--t-start", type=float, default=0.9, help="Initial noise strength (default: 0.9)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init", choices=INITS, default="illumination", help="Sampler initialization")
    p.add_argument("--fusion", choices=("concat", "add"), default="concat", help="Depth stream fusion")
    p.add_argument("--no-blend", action="store_true", help="Skip per-step background blending")


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    ap = _Parser(prog="mate", description="Material transfer with a miniature rectified-flow transformer")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    commands: dict[str, argparse.ArgumentParser] = {}

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, default=None, help="key=value file; explicit flags win")
        commands[name] = p
        return p

    p = command("generate", "Write a synthetic scene dataset")
    p.add_argument("--out", type=Path, default=None, help="Dataset directory")
    p.add_argument("--count", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)

    p = command("validate", "Check every scene of a dataset against its construction invariants")
    p.add_argument("--data", type=Path, default=None)

    p = command("train", "Train the base model or the depth LoRA")
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--stage", choices=STAGES, default="base")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--cond-dropout", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None, help="Output checkpoint")
    p.add_argument("--base", type=Path, default=None, help="Base checkpoint (depth_lora stage)")
    p.add_argument("--loss-log", type=Path, default=None, help="Loss CSV (default: <out>.loss.csv)")
    p.add_argument("--log-every", type=int, default=50)
    defaults = ModelConfig()
    p.add_argument("--image-size", type=int, default=defaults.image_size)
    p.add_argument("--patch-size", type=int, default=defaults.patch_size)
    p.add_argument("--embed-dim", type=int, default=defaults.embed_dim)
    p.add_argument("--heads", type=int, default=defaults.heads)
    p.add_argument("--model-depth", type=int, default=defaults.depth, help="Number of transformer blocks")
    p.add_argument("--mlp-ratio", type=int, default=defaults.mlp_ratio)
    p.add_argument("--lora-rank", type=int, default=defaults.lora_rank)

    p = command("transfer", "Transfer a material onto a masked object")
    p.add_argument("--input", type=Path, default=None)
    p.add_argument("--material", type=Path, default=None)
    p.add_argument("--mask", type=Path, default=None)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--no-material", action="store_true", help="Remove the material stream entirely")
    _add_sampler_flags(p)

    p = command("transfer-multi", "Transfer one material per disjoint mask")
    p.add_argument("--input", type=Path, default=None)
    p.add_argument("--materials", default=None, help="Comma-separated PPM list")
    p.add_argument("--masks", default=None, help="Comma-separated PGM list")
    p.add_argument("--out", type=Path, default=None)
    _add_sampler_flags(p)

    p = command("ablate", "Run a parameter sweep and write a contact sheet plus CSV")
    p.add_argument("--sweep", default=None, help=f"One of {', '.join(SWEEPS)}")
    p.add_argument("--values", default=None, help="Comma-separated override grid (gamma, cfg)")
    p.add_argument("--input", type=Path, default=None)
    p.add_argument("--material", type=Path, default=None)
    p.add_argument("--mask", type=Path, default=None)
    p.add_argument("--truth", type=Path, default=None, help="Ground-truth image for SSIM columns")
    p.add_argument("--out", type=Path, default=None, help="Output directory")
    _add_sampler_flags(p)

    p = command("eval", "Score predictions against ground truth")
    p.add_argument("--pred", type=Path, default=None)
    p.add_argument("--truth", type=Path, default=None)
    p.add_argument("--mask", type=Path, default=None)

    return ap, commands


def read_config(path: Path) -> dict[str, str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e.strerror}") from e
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return pairs


def _as_bool(key: str, value: str) -> bool:
    lowered = value.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"config key {key!r} expects a boolean, got {value!r}")


def parse_args(argv: Optional[Sequence[str]]) -> argparse.Namespace:
    ap, commands = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = ap.parse_args(argv)
    if args.command is None:
        raise UsageError(f"a command is required: {', '.join(commands)}")
    if args.config is not None:
        sub = commands[args.command]
        actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
        defaults = {}
        for key, value in read_config(args.config).items():
            action = actions.get(key)
            if action is None:
                raise UsageError(f"unknown config key {key!r} for {args.command}")
            # string defaults pass through the action's type; flags need explicit booleans
            defaults[key] = _as_bool(key, value) if action.nargs == 0 else value
        sub.set_defaults(**defaults)
        args = ap.parse_args(argv)
    return args


def _require(args: argparse.Namespace, *names: str) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"{args.command}: missing {', '.join(missing)}")


def _existing(path: Path, what: str) -> Path:
    if not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _split_list(text: str) -> list[Path]:
    return [Path(p.strip()) for p in text.split(",") if p.strip()]


# --- commands ---


def cmd_generate(args: argparse.Namespace) -> int:
    _require(args, "out")
    if args.count < 0:
        raise UsageError(f"--count must be non-negative, got {args.count}")
    log_step(f"generating {args.count} scenes with seed {args.seed}")
    samples = generate_dataset(args.count, args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    for sample, plan in zip(samples, write_dataset(samples, args.out)):
        spec = sample.spec
        print(f"{plan.scene_dir.name} {sample.split} {spec.shape} {spec.material}")
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    _require(args, "data")
    samples = load_dataset(args.data)
    log_step(f"validating {len(samples)} scenes")
    report = validate_dataset(samples)
    for index, problems in sorted(report.items()):
        for problem in problems:
            log_error(f"{DatasetPaths.scene_name(index)}: {problem}")
    if report:
        raise ValidationError(f"{len(report)} of {len(samples)} scenes are invalid")
    print(f"ok {len(samples)} scenes")
    return EXIT_OK


def _model_config(args: argparse.Namespace) -> ModelConfig:
    return ModelConfig(
        image_size=args.image_size,
        patch_size=args.patch_size,
        embed_dim=args.embed_dim,
        heads=args.heads,
        depth=args.model_depth,
        mlp_ratio=args.mlp_ratio,
        lora_rank=args.lora_rank,
    )


def cmd_train(args: argparse.Namespace) -> int:
    _require(args, "data", "out")
    base = None
    if args.stage == "depth_lora":
        if args.base is None:
            raise UsageError("stage depth_lora needs --base <checkpoint>")
        base = load_model(_existing(args.base, "base checkpoint"))
        model_config = base.config
    else:
        model_config = _model_config(args)
    config = TrainConfig(
        steps=args.steps,
        batch_size=args.batch_size,
        lr=args.lr,
        cond_dropout=args.cond_dropout,
        log_every=args.log_every,
    )
    dataset = load_dataset(args.data, split="train")
    log_step(f"training stage {args.stage} on {len(dataset)} scenes for {config.steps} steps")

    def on_step(step: int, loss: float) -> None:
        if config.log_every > 0 and (step % config.log_every == 0 or step == config.steps - 1):
            log_step(f"step {step} loss {loss:.5f}")

    result = train(config, model_config, dataset, args.stage, args.seed, base=base, on_step=on_step)
    groups = result.params.groups()
    total = sum(result.params[name].data.size for names in groups.values() for name in names)
    log_step(f"{total} base parameters in {len(groups)} groups")
    if args.stage == "depth_lora":
        save_lora(result.lora, model_config, args.out)
    else:
        save_model(result.params, args.out)
    loss_log = args.loss_log or args.out.with_suffix(".loss.csv")
    write_loss_log(result.losses, loss_log)
    if result.losses:
        smoothed = smooth_losses([v for _, v in result.losses])
        log_step(f"smoothed loss {smoothed[0]:.5f} -> {smoothed[-1]:.5f}")
    print(f"wrote {args.out}")
    return EXIT_OK


def _sampler(args: argparse.Namespace) -> SamplerConfig:
    return SamplerConfig(
        gamma=args.gamma,
        lora_weight=args.lora_weight,
        cfg_scale=args.cfg,
        steps=args.steps,
        t_start=args.t_start,
        seed=args.seed,
        init=args.init,
        fusion=args.fusion,
        blend=not args.no_blend,
    )


def _load_weights(args: argparse.Namespace):
    _require(args, "ckpt")
    params = load_model(_existing(args.ckpt, "checkpoint"))
    lora = load_lora(_existing(args.lora, "LoRA file"), params.config) if args.lora else None
    depth = load_image(args.depth) if args.depth else None
    return params, lora, depth


def cmd_transfer(args: argparse.Namespace) -> int:
    _require(args, "input", "mask", "out")
    if args.material is None and not args.no_material:
        raise UsageError("transfer: missing --material (or pass --no-material)")
    sampler = _sampler(args)
    params, lora, depth = _load_weights(args)
    input_img = load_image(args.input)
    mask = load_mask(args.mask)
    material = None if args.no_material else load_image(args.material)
    log_step(f"sampling {sampler.steps} steps (gamma {sampler.gamma}, cfg {sampler.cfg_scale})")
    out = transfer(params, input_img, material, mask, sampler, depth=depth, lora=lora)
    save_image(out, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_transfer_multi(args: argparse.Namespace) -> int:
    _require(args, "input", "materials", "masks", "out")
    materials = _split_list(args.materials)
    masks = _split_list(args.masks)
    if len(materials) != len(masks):
        raise UsageError(f"{len(materials)} materials for {len(masks)} masks")
    sampler = _sampler(args)
    params, lora, depth = _load_weights(args)
    input_img = load_image(args.input)
    log_step(f"transferring {len(masks)} materials")
    out = transfer_multi(
        params,
        input_img,
        [load_image(p) for p in materials],
        [load_mask(p) for p in masks],
        sampler,
        depth=depth,
        lora=lora,
    )
    save_image(out, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    _require(args, "sweep", "input", "material", "mask", "out")
    if args.sweep not in SWEEPS:
        raise UsageError(f"unknown sweep {args.sweep!r}; expected one of {', '.join(SWEEPS)}")
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()] if args.values else None
    except ValueError:
        raise UsageError(f"--values must be comma-separated numbers, got {args.values!r}") from None
    sampler = _sampler(args)
    params, lora, depth = _load_weights(args)
    truth = load_image(args.truth) if args.truth else None
    log_step(f"running {args.sweep} sweep")
    runs = run_sweep(
        args.sweep,
        params,
        load_image(args.input),
        load_image(args.material),
        load_mask(args.mask),
        sampler,
        depth=depth,
        lora=lora,
        truth=truth,
        values=values,
    )
    for path in write_sweep(runs, plan_sweep(args.out, args.sweep)):
        print(f"wrote {path}")
    return EXIT_OK


def _fmt(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.6f}"


def _images_in(folder: Path) -> dict[str, Path]:
    return {p.name: p for p in sorted(folder.iterdir()) if p.suffix in (".ppm", ".pgm") and p.is_file()}


def cmd_eval(args: argparse.Namespace) -> int:
    _require(args, "pred", "truth")
    for flag in ("pred", "truth", "mask"):
        folder = getattr(args, flag)
        if folder is not None and not Path(folder).is_dir():
            raise UsageError(f"--{flag} directory not found: {folder}")
    preds, truths = _images_in(args.pred), _images_in(args.truth)
    unpaired = sorted(set(preds) ^ set(truths))
    if unpaired:
        shown = ", ".join(unpaired[:5]) + (" ..." if len(unpaired) > 5 else "")
        raise ValidationError(f"{len(unpaired)} image(s) present in only one of --pred/--truth: {shown}")
    rows = []
    for name, pred_path in preds.items():
        pred, truth = load_image(pred_path), load_image(truths[name])
        if args.mask is not None:
            mask_path = args.mask / f"{pred_path.stem}.pgm"
            if not mask_path.is_file():
                raise ValidationError(f"no mask for {name} in {args.mask}")
            region = masked_mse(pred, truth, load_mask(mask_path))
        else:
            region = mse(pred, truth)
        rows.append((name, ssim(pred, truth), psnr(pred, truth), region))

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["name", "ssim", "psnr", "masked_mse"])
    for name, *values in rows:
        writer.writerow([name, *(_fmt(v) for v in values)])
    if rows:
        means = np.mean([r[1:] for r in rows], axis=0)
        writer.writerow(["mean", *(_fmt(float(v)) for v in means)])
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "validate": cmd_validate,
    "train": cmd_train,
    "transfer": cmd_transfer,
    "transfer-multi": cmd_transfer_multi,
    "ablate": cmd_ablate,
    "eval": cmd_eval,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as e:
        log_error(str(e))
        return EXIT_USAGE
    except _DIVERGENCE as e:
        log_error(str(e))
        return EXIT_DIVERGED
    except _USAGE as e:
        log_error(str(e))
        return EXIT_USAGE
    except _DATA as e:
        log_error(str(e))
        return EXIT_DATA


if __name__ == "__main__":
    raise SystemExit(main())
