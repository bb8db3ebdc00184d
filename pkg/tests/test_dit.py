import math
import sys
from pathlib import Path

import numpy as np
import pytest

# Make src importable
ROOT = Path(__file__).resolve().parents[1]
SRC = ROOT / "src"
if str(SRC) not in sys.path:
    sys.path.append(str(SRC))

from mate import numerics as nx  # noqa: E402
from mate.conditioning import GAMMA_MIN, BiasRangeError, SequenceLayout, assemble_sequence, cross_bias  # noqa: E402
from mate.dit import (  # noqa: E402
    ROPE_BASE,
    Conditions,
    DitError,
    ModelConfig,
    ModelParams,
    VelocityModel,
    attention,
    dit_block,
    image_to_tokens,
    init_lora,
    init_params,
    lora_targets,
    mma,
    param_shapes,
    patchify,
    predict_velocity,
    rope_rotate,
    tokens_to_image,
    unpatchify,
)
from mate.imaging import ImagePlane  # noqa: E402

TOY = ModelConfig(image_size=8, patch_size=4, embed_dim=16, heads=2, depth=2, mlp_ratio=2, lora_rank=2)


def log_feature(name: str):
    print(f"[feature] {name}")


def randn(shape, seed, grad=False):
    t = nx.standard_normal(shape, seed, "dit-test", dtype=np.float64)
    t.requires_grad = grad
    return t


def random_params(seed=0):
    return init_params(TOY, seed, dtype=np.float64, zero_init=False)


def conditions(seed=1, depth=True):
    return Conditions(
        material=randn((TOY.num_tokens, TOY.token_dim), seed),
        depth=randn((TOY.num_tokens, TOY.token_dim), seed + 1) if depth else None,
    )


@pytest.mark.parametrize(
    "kwargs",
    [
        {"image_size": 10},
        {"heads": 3},
        {"embed_dim": 12, "heads": 2},
        {"depth": 0},
        {"lora_rank": 64},
    ],
)
def test_invalid_model_config(kwargs):
    base = dict(image_size=8, patch_size=4, embed_dim=16, heads=2, depth=2, mlp_ratio=2, lora_rank=2)
    base.update(kwargs)
    with pytest.raises(DitError):
        ModelConfig(**base)


def test_param_names_cover_every_block():
    shapes = param_shapes(TOY)
    assert shapes["blocks.1.qkv.weight"] == (16, 48)
    assert shapes["head.weight"] == (16, TOY.token_dim)
    assert lora_targets(TOY) == [
        "blocks.0.qkv.weight",
        "blocks.0.proj.weight",
        "blocks.1.qkv.weight",
        "blocks.1.proj.weight",
    ]


def test_model_params_reject_wrong_shapes():
    params = init_params(TOY, 0)
    tensors = dict(params.items())
    tensors["head.bias"] = nx.zeros((3,))
    with pytest.raises(DitError):
        ModelParams(TOY, tensors)
    del tensors["head.bias"]
    with pytest.raises(DitError):
        ModelParams(TOY, tensors)


def test_patchify_row_major_tokens():
    log_feature("patchify layout")
    pixels = np.arange(16, dtype=np.float64).reshape(4, 4, 1)
    tokens, positions = patchify(pixels, 2)
    assert tokens.data.tolist() == [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]]
    assert positions.tolist() == [[0, 0], [0, 1], [1, 0], [1, 1]]
    assert np.array_equal(unpatchify(tokens, (2, 2), 2, 1), pixels)


def test_patchify_rejects_indivisible_image():
    with pytest.raises(DitError):
        patchify(np.zeros((5, 4, 3)), 2)


def test_image_tokens_invert_to_pixels():
    img = ImagePlane.from_array(np.random.default_rng(0).integers(0, 256, size=(8, 8, 3), dtype=np.uint8))
    tokens = image_to_tokens(img, TOY)
    assert tokens.shape == (4, 48)
    assert tokens.data.min() >= -1.0 and tokens.data.max() <= 1.0
    assert tokens_to_image(tokens, TOY).same_pixels(img)


def test_rope_zero_position_is_identity():
    x = randn((3, 8), 4)
    out = rope_rotate(x, np.zeros((3, 2), dtype=np.int64))
    assert np.allclose(out.data, x.data, atol=1e-15)


def test_rope_rotates_row_and_column_halves():
    x = nx.tensor([[1.0, 0.0, 1.0, 0.0]], dtype=np.float64)
    out = rope_rotate(x, np.array([[1, 2]]))
    expected = [math.cos(1), math.sin(1), math.cos(2), math.sin(2)]
    assert np.allclose(out.data[0], expected, atol=1e-12)


def test_rope_scores_depend_on_relative_position():
    log_feature("rope shift equivariance")
    q, k = randn((5, 8), 5), randn((5, 8), 6)
    pos = np.array([[0, 0], [0, 1], [1, 0], [2, 3], [1, 4]])
    shifted = pos + np.array([3, 5])

    def scores(p):
        return nx.matmul(rope_rotate(q, p), nx.transpose(rope_rotate(k, p))).data

    assert np.allclose(scores(pos), scores(shifted), atol=1e-10)


def test_rope_rejects_bad_head_dim():
    with pytest.raises(DitError):
        rope_rotate(randn((2, 6), 0), np.zeros((2, 2)))


def test_attention_matches_brute_force():
    q, k, v = randn((4, 8), 1), randn((4, 8), 2), randn((4, 8), 3)
    out, weights = attention(q, k, v)
    scores = q.data @ k.data.T / math.sqrt(8)
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    ref_w = e / e.sum(axis=1, keepdims=True)
    assert np.allclose(weights.data, ref_w, atol=1e-12)
    assert np.allclose(out.data, ref_w @ v.data, atol=1e-12)
    assert np.allclose(weights.data.sum(axis=1), 1.0, atol=1e-12)


def test_attention_neg_inf_bias_blocks_keys():
    q, k, v = randn((3, 4), 1), randn((3, 4), 2), randn((3, 4), 3)
    bias = np.zeros((3, 3))
    bias[:, 2] = -np.inf
    _, weights = attention(q, k, v, nx.tensor(bias, dtype=np.float64))
    assert not weights.data[:, 2].any()
    assert np.allclose(weights.data.sum(axis=1), 1.0)


def test_attention_zero_values_give_zero_output():
    out, _ = attention(randn((3, 4), 1), randn((3, 4), 2), nx.zeros((3, 4), dtype=np.float64))
    assert not out.data.any()


def test_cross_bias_scales_material_attention_share():
    log_feature("cross bias attention oracle")
    layout = SequenceLayout(2, 4)
    rng = np.random.default_rng(17)
    for instance in range(100):
        q, k, v = randn((6, 8), 3 * instance), randn((6, 8), 3 * instance + 1), randn((6, 8), 3 * instance + 2)
        gamma = float(rng.uniform(0.01, 3.0))
        _, weights = attention(q, k, v, cross_bias(gamma, layout, dtype=np.float64))
        scores = q.data @ k.data.T / math.sqrt(8)
        e = np.exp(scores[2:] - scores[2:].max(axis=1, keepdims=True))
        a, b = e[:, :2].sum(axis=1), e[:, 2:].sum(axis=1)
        assert np.allclose(weights.data[2:, :2].sum(axis=1), gamma * a / (gamma * a + b), atol=1e-9)


def test_smallest_gamma_eliminates_material_attention():
    layout = SequenceLayout(2, 4)
    q = nx.scale(randn((6, 8), 40), 0.5)
    k = nx.scale(randn((6, 8), 41), 0.5)
    _, weights = attention(q, k, randn((6, 8), 42), cross_bias(GAMMA_MIN, layout, dtype=np.float64))
    assert weights.data[2:, :2].sum(axis=1).max() < 1e-4


def test_material_share_grows_with_gamma():
    layout = SequenceLayout(2, 4)
    for instance in range(20):
        q, k, v = randn((6, 8), 50 + 3 * instance), randn((6, 8), 51 + 3 * instance), randn((6, 8), 52 + 3 * instance)
        shares = []
        for gamma in (0.5, 1.0, 1.8, 2.5):
            _, weights = attention(q, k, v, cross_bias(gamma, layout, dtype=np.float64))
            shares.append(weights.data[2:, :2].sum(axis=1))
        for lower, higher in zip(shares, shares[1:]):
            assert (higher > lower).all(), instance


def _rope_reference(x, positions):
    quarter = x.shape[1] // 4
    freqs = ROPE_BASE ** (-np.arange(quarter) / quarter)
    out = x.copy()
    for j in range(2 * quarter):
        angle = positions[:, 0] * freqs[j] if j < quarter else positions[:, 1] * freqs[j - quarter]
        a, b = x[:, 2 * j], x[:, 2 * j + 1]
        out[:, 2 * j] = a * np.cos(angle) - b * np.sin(angle)
        out[:, 2 * j + 1] = a * np.sin(angle) + b * np.cos(angle)
    return out


def _dense_mma(tokens, positions, params, index, gamma, m):
    """Per-head softmax with exp(score) multiplied by gamma between material and every other stream."""
    count, d = tokens.shape
    hd = d // TOY.heads
    qkv = tokens @ params[f"blocks.{index}.qkv.weight"].data + params[f"blocks.{index}.qkv.bias"].data
    q, k, v = qkv[:, :d], qkv[:, d : 2 * d], qkv[:, 2 * d :]
    scale = np.ones((count, count))
    scale[:m, m:] = gamma
    scale[m:, :m] = gamma
    heads = []
    for h in range(TOY.heads):
        cols = slice(h * hd, (h + 1) * hd)
        scores = _rope_reference(q[:, cols], positions) @ _rope_reference(k[:, cols], positions).T / math.sqrt(hd)
        e = np.exp(scores - scores.max(axis=1, keepdims=True)) * scale
        heads.append((e / e.sum(axis=1, keepdims=True)) @ v[:, cols])
    out = np.concatenate(heads, axis=1)
    return out @ params[f"blocks.{index}.proj.weight"].data + params[f"blocks.{index}.proj.bias"].data


def test_mma_matches_dense_gamma_oracle():
    log_feature("multi-head attention gamma oracle")
    rng = np.random.default_rng(23)
    for instance in range(100):
        params = random_params(100 + instance)
        m = int(rng.integers(1, 5))
        with_depth = bool(rng.integers(0, 2))
        gamma = float(rng.uniform(0.1, 3.0))
        seq = assemble_sequence(
            randn((m, 16), 4 * instance),
            randn((4, 16), 4 * instance + 1),
            randn((4, 16), 4 * instance + 2) if with_depth else None,
            (2, 2),
        )
        index = instance % TOY.depth
        out = mma(seq, cross_bias(gamma, seq.layout, dtype=np.float64), params, index)
        expected = _dense_mma(seq.tokens.data, seq.positions, params, index, gamma, m)
        assert out.shape == expected.shape
        assert np.max(np.abs(out.data - expected)) < 1e-6, (instance, gamma)


def test_fresh_block_is_identity():
    log_feature("zero-initialized block")
    params = init_params(TOY, 0)
    x = nx.standard_normal((4, 16), 3, "x")
    seq = assemble_sequence(None, x, None, (2, 2))
    t_vec = nx.standard_normal((1, 16), 3, "t")
    out = dit_block(seq, t_vec, None, params, 0)
    assert np.array_equal(out.tokens.data, x.data)


def test_fresh_model_predicts_zero():
    params = init_params(TOY, 0)
    v = predict_velocity(nx.standard_normal((4, 48), 1, "x"), 0.5, None, params)
    assert v.shape == (4, 48)
    assert not v.data.any()


def test_block_gradients_match_finite_differences():
    params = random_params(2).requires_grad_(True)
    x = randn((8, 16), 3, grad=True)
    t_vec = randn((1, 16), 4, grad=True)
    seq = assemble_sequence(nx.split_rows(x, [4, 4])[0], nx.split_rows(x, [4, 4])[1], None, (2, 2))
    bias = cross_bias(1.8, seq.layout, dtype=np.float64)
    w = randn((8, 16), 5)
    names = ["blocks.0.adaln.weight", "blocks.0.qkv.weight", "blocks.0.proj.weight", "blocks.0.mlp.fc1.weight"]

    def loss():
        parts = nx.split_rows(x, [4, 4])
        s = assemble_sequence(parts[0], parts[1], None, (2, 2))
        return nx.sum(nx.mul(dit_block(s, t_vec, bias, params, 0).tokens, w))

    errors = nx.gradcheck(loss, {"x": x, "t": t_vec, **{n: params[n] for n in names}}, max_entries=16)
    assert max(errors.values()) < 1e-4, errors


@pytest.mark.parametrize("dropped", [False, True])
def test_model_gradients_match_finite_differences(dropped):
    log_feature("full model gradient check")
    params = random_params(3).requires_grad_(True)
    lora = init_lora(TOY, 4, dtype=np.float64, zero_b=False).requires_grad_(True)
    x = randn((4, 48), 5, grad=True)
    cond = conditions(6).as_null() if dropped else conditions(6)
    w = randn((4, 48), 8)
    adapter = lora.get("blocks.0.qkv.weight")

    def loss():
        v = predict_velocity(x, 0.4, cond, params, gamma=1.8, w=0.7, lora=lora)
        return nx.sum(nx.mul(v, w))

    groups = params.groups()
    assert sorted(n for names in groups.values() for n in names) == sorted(params)
    tensors = {"x": x, "lora_A": adapter.A, "lora_B": adapter.B, **{n: params[n] for n in params}}
    errors = nx.gradcheck(loss, tensors, max_entries=6)
    for group, names in groups.items():
        worst = max(errors[n] for n in names)
        assert worst < 1e-4, (group, {n: errors[n] for n in names})
    assert max(errors["x"], errors["lora_A"], errors["lora_B"]) < 1e-4, errors
    null_grad = params["null_token"].grad
    assert (null_grad is not None and np.abs(null_grad).sum() > 0) == dropped


def test_prediction_is_deterministic():
    params = random_params()
    x = randn((4, 48), 9)
    a = predict_velocity(x, 0.3, conditions(), params, gamma=1.8)
    b = predict_velocity(x, 0.3, conditions(), params, gamma=1.8)
    assert np.array_equal(a.data, b.data)


def test_smallest_gamma_matches_removed_material():
    log_feature("material stream elimination")
    params = random_params(5)
    x = randn((4, 48), 10)
    cond = conditions(11, depth=False)
    biased = predict_velocity(x, 0.5, cond, params, gamma=GAMMA_MIN)
    removed = predict_velocity(x, 0.5, cond.without_material(), params)
    assert np.max(np.abs(biased.data - removed.data)) < 1e-4


def test_gamma_below_range_rejected():
    with pytest.raises(BiasRangeError):
        predict_velocity(randn((4, 48), 1), 0.5, conditions(), random_params(), gamma=0.0)


def test_dropped_conditions_use_null_token():
    params = random_params(6)
    x = randn((4, 48), 12)
    cond = conditions(13)
    kept = predict_velocity(x, 0.5, cond, params)
    dropped = predict_velocity(x, 0.5, cond.as_null(), params)
    other = predict_velocity(x, 0.5, conditions(40).as_null(), params)
    assert not np.allclose(kept.data, dropped.data)
    assert np.array_equal(dropped.data, other.data)


def test_fusion_modes():
    params = random_params(7)
    x = randn((4, 48), 14)
    concat = predict_velocity(x, 0.5, conditions(15), params, fusion="concat")
    added = predict_velocity(x, 0.5, conditions(15), params, fusion="add")
    assert added.shape == concat.shape
    assert not np.allclose(added.data, concat.data)
    with pytest.raises(DitError):
        predict_velocity(x, 0.5, conditions(15), params, fusion="stack")


def test_zero_lora_weight_is_bitwise_base():
    params = random_params(8)
    lora = init_lora(TOY, 9, dtype=np.float64, zero_b=False)
    x = randn((4, 48), 16)
    base = predict_velocity(x, 0.5, conditions(17), params)
    off = predict_velocity(x, 0.5, conditions(17), params, w=0.0, lora=lora)
    on = predict_velocity(x, 0.5, conditions(17), params, w=1.0, lora=lora)
    assert np.array_equal(base.data, off.data)
    assert not np.array_equal(base.data, on.data)


def test_fresh_lora_is_bitwise_base():
    params = random_params(10)
    lora = init_lora(TOY, 11, dtype=np.float64)
    model = VelocityModel(params=params, lora=lora, lora_weight=0.9)
    x = randn((4, 48), 18)
    assert np.array_equal(model(x, 0.5, conditions(19)).data, predict_velocity(x, 0.5, conditions(19), params).data)


def test_prediction_rejects_wrong_token_shape():
    with pytest.raises(DitError):
        predict_velocity(randn((5, 48), 1), 0.5, None, random_params())
