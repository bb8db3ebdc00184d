import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

# Make src importable
ROOT = Path(__file__).resolve().parents[1]
SRC = ROOT / "src"
if str(SRC) not in sys.path:
    sys.path.append(str(SRC))

from mate.dataset_paths import DatasetPaths  # noqa: E402
from mate.dit import ModelConfig, init_params  # noqa: E402
from mate.imaging import ImagePlane  # noqa: E402
from mate.synth import (  # noqa: E402
    HELD_OUT_COMBOS,
    TILE_PERIODS,
    SceneError,
    SceneSpec,
    TrainConfig,
    TrainingDivergedError,
    TrainingError,
    combos,
    generate_dataset,
    generate_scene,
    load_dataset,
    random_spec,
    read_scene,
    smooth_losses,
    texture,
    train,
    validate_dataset,
    validate_sample,
    write_dataset,
    write_loss_log,
)

TINY = ModelConfig(image_size=32, patch_size=8, embed_dim=16, heads=2, depth=1, mlp_ratio=2, lora_rank=2)


def log_feature(name: str):
    print(f"[feature] {name}")


def circle_spec(**overrides):
    fields = dict(
        shape="circle",
        center=(16, 16),
        size=8,
        material="stripes",
        palette=((255, 0, 0), (0, 0, 255)),
        period=4,
        light_angle=0.0,
    )
    fields.update(overrides)
    return SceneSpec(**fields)


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(10, seed=7)


def test_generation_is_deterministic(dataset):
    log_feature("seeded scene generation")
    again = generate_dataset(10, seed=7)
    for a, b in zip(dataset, again):
        assert a.spec == b.spec
        assert a.target.same_pixels(b.target)
        assert a.illumination.same_pixels(b.illumination)
    other = generate_dataset(10, seed=8)
    assert any(a.spec != b.spec for a, b in zip(dataset, other))


def test_held_out_split(dataset):
    splits = [s.split for s in dataset]
    assert splits == ["train"] * 8 + ["held_out"] * 2
    for sample in dataset:
        if sample.split == "held_out":
            assert sample.spec.combo in HELD_OUT_COMBOS
        else:
            assert sample.spec.combo not in HELD_OUT_COMBOS
    assert len(combos("train")) == 9


def test_circle_area():
    sample = generate_scene(circle_spec(), seed=0)
    area = int(sample.mask.foreground().sum())
    assert abs(area - math.pi * 64) <= 0.05 * math.pi * 64


def test_scene_construction_invariants():
    log_feature("scene invariants")
    sample = generate_scene(circle_spec(material="noise"), seed=3)
    fg = sample.mask.foreground()
    assert np.array_equal(sample.target.samples[~fg], sample.illumination.samples[~fg])
    grey = sample.illumination.samples[fg]
    assert (grey == grey[:, :1]).all()
    depth = sample.depth.samples[:, :, 0]
    assert not depth[~fg].any()
    assert depth.max() == 255
    assert depth[16, 16] >= 240
    assert sample.material.size == (32, 32)


def test_noise_material_depends_on_seed():
    a = generate_scene(circle_spec(material="noise"), seed=1)
    b = generate_scene(circle_spec(material="noise"), seed=2)
    assert not a.material.same_pixels(b.material)


@pytest.mark.parametrize("material", ["stripes", "checker", "radial-gradient", "noise"])
@pytest.mark.parametrize("period", TILE_PERIODS)
def test_texture_repeats_every_patch(material, period):
    log_feature("patch-periodic textures")
    swatch = texture(circle_spec(material=material, period=period), seed=3)
    patch = TINY.patch_size
    first = swatch[:patch, :patch]
    for y in range(0, 32, patch):
        for x in range(0, 32, patch):
            assert np.array_equal(swatch[y : y + patch, x : x + patch], first)
    assert swatch.min() >= 0.0 and swatch.max() <= 255.0
    assert len(np.unique(swatch.reshape(-1, 3), axis=0)) > 1


def test_random_specs_use_tile_periods():
    rng = np.random.default_rng(0)
    periods = {random_spec(rng, "circle", "checker").period for _ in range(50)}
    assert periods == set(TILE_PERIODS)


def test_validator_accepts_generated_scenes(dataset):
    assert validate_dataset(dataset) == {}


def test_validator_flags_tampered_scene():
    sample = generate_scene(circle_spec(), seed=0)
    pixels = sample.target.to_array()
    pixels[16, 16] = 255 - pixels[16, 16]
    problems = validate_sample(replace(sample, target=ImagePlane.from_array(pixels)))
    assert "target does not match its spec" in problems

    pixels = sample.target.to_array()
    pixels[0, 0] = 255 - pixels[0, 0]
    problems = validate_sample(replace(sample, target=ImagePlane.from_array(pixels)))
    assert "target background differs from illumination background" in problems


def test_dataset_write_and_reload(tmp_path, dataset):
    plans = write_dataset(dataset, tmp_path)
    assert [p.scene_dir.name for p in plans][:2] == ["scene_00000", "scene_00001"]
    assert DatasetPaths(tmp_path).scene_indices() == list(range(10))
    loaded = load_dataset(tmp_path)
    assert validate_dataset(loaded) == {}
    assert [s.spec for s in loaded] == [s.spec for s in dataset]
    assert len(load_dataset(tmp_path, split="held_out")) == 2


def test_read_scene_reports_missing_file(tmp_path, dataset):
    plan = write_dataset(dataset[:1], tmp_path)[0]
    plan.depth_path.unlink()
    with pytest.raises(SceneError):
        read_scene(plan)


def test_spec_pairs_survive_text_round_trip():
    spec = circle_spec(light_angle=1.2345678901234)
    assert SceneSpec.from_pairs(spec.to_pairs()) == spec
    pairs = spec.to_pairs()
    del pairs["period"]
    with pytest.raises(SceneError):
        SceneSpec.from_pairs(pairs)


@pytest.mark.parametrize(
    "overrides",
    [{"shape": "hexagon"}, {"material": "marble"}, {"period": 1}, {"center": (3, 16)}, {"palette": ((0, 0, 300), (0, 0, 0))}],
)
def test_invalid_scene_spec(overrides):
    with pytest.raises(SceneError):
        circle_spec(**overrides)


def test_zero_steps_returns_initial_weights(dataset):
    result = train(TrainConfig(steps=0), TINY, dataset[:2], "base", seed=4)
    fresh = init_params(TINY, 4)
    for name, tensor in fresh.items():
        assert np.array_equal(result.params[name].data, tensor.data)
    assert result.losses == [] and result.lora is None


def test_training_is_reproducible(dataset):
    log_feature("seeded training")
    config = TrainConfig(steps=3, batch_size=2)
    first = train(config, TINY, dataset[:4], "base", seed=5)
    second = train(config, TINY, dataset[:4], "base", seed=5)
    assert first.losses == second.losses
    assert [step for step, _ in first.losses] == [0, 1, 2]
    for name, tensor in first.params.items():
        assert np.array_equal(second.params[name].data, tensor.data)
        assert not tensor.requires_grad


def test_depth_lora_stage_freezes_base(dataset):
    log_feature("depth LoRA stage")
    base = init_params(TINY, 6, zero_init=False)
    snapshot = base.copy()
    result = train(TrainConfig(steps=2, batch_size=2), TINY, dataset[:3], "depth_lora", seed=6, base=base)
    for name, tensor in snapshot.items():
        assert np.array_equal(result.params[name].data, tensor.data)
        assert np.array_equal(base[name].data, tensor.data)
    assert result.lora is not None
    assert any(adapter.B.data.any() for adapter in result.lora.adapters.values())


def test_training_argument_errors(dataset):
    config = TrainConfig(steps=1, batch_size=1)
    with pytest.raises(TrainingError):
        train(config, TINY, dataset[:1], "finetune", seed=0)
    with pytest.raises(TrainingError):
        train(config, TINY, [], "base", seed=0)
    with pytest.raises(TrainingError):
        train(config, TINY, dataset[:1], "depth_lora", seed=0)
    other = ModelConfig(image_size=32, patch_size=8, embed_dim=16, heads=2, depth=2, mlp_ratio=2, lora_rank=2)
    with pytest.raises(TrainingError):
        train(config, TINY, dataset[:1], "depth_lora", seed=0, base=init_params(other, 0))


@pytest.mark.parametrize("kwargs", [{"batch_size": 0}, {"steps": -1}, {"cond_dropout": 1.5}, {"lr": 0.0}])
def test_invalid_train_config(kwargs):
    with pytest.raises(TrainingError):
        TrainConfig(**kwargs)


def test_huge_learning_rate_diverges(dataset):
    with pytest.raises(TrainingDivergedError) as info:
        train(TrainConfig(steps=5, batch_size=1, lr=1e30, cond_dropout=0.0), TINY, dataset[:1], "base", seed=0)
    assert info.value.step >= 1


def test_smooth_losses():
    assert smooth_losses([1.0, 2.0, 3.0, 4.0], window=2) == [1.0, 1.5, 2.5, 3.5]
    assert smooth_losses([]) == []


def test_loss_log(tmp_path):
    path = tmp_path / "loss.csv"
    write_loss_log([(0, 2.5), (1, 1.25)], path)
    assert path.read_text(encoding="utf-8") == "step,loss\n0,2.5\n1,1.25\n"
