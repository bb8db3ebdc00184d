import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

ROOT = Path(__file__).resolve().parents[1]
SRC = ROOT / "src"
if str(SRC) not in sys.path:
    sys.path.append(str(SRC))

from mate import numerics as nx  # noqa: E402
from mate.numerics import (  # noqa: E402
    ContractError,
    DegenerateRowError,
    DimensionError,
    GradTape,
    NonFiniteError,
)


def log_feature(name: str):
    print(f"[feature] {name}")


def t64(values, grad=False):
    return nx.tensor(values, requires_grad=grad, dtype=np.float64)


def randn(shape, seed, *stream, grad=True):
    t = nx.standard_normal(shape, seed, "test", *stream, dtype=np.float64)
    t.requires_grad = grad
    return t


def test_matmul_identity():
    out = nx.matmul(t64(np.eye(2)), t64([[1, 2], [3, 4]]))
    assert np.array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_projector_selects_row():
    out = nx.matmul(t64([[1, 0], [0, 0]]), t64([[5, 6], [7, 8]]))
    assert np.array_equal(out.data, [[5, 6], [0, 0]])


def test_matmul_matches_triple_loop():
    log_feature("matmul vs triple loop")
    rng = np.random.default_rng(3)
    a = rng.uniform(-10, 10, size=(3, 4))
    b = rng.uniform(-10, 10, size=(4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    out = nx.matmul(t64(a), t64(b))
    assert np.max(np.abs(out.data - ref)) < 1e-6


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        nx.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


def test_softmax_uniform_row():
    out = nx.softmax_rows(t64([[0.0, 0.0]]))
    assert np.allclose(out.data, [[0.5, 0.5]], atol=1e-12)


def test_softmax_log3_ratio():
    c = 4.2
    out = nx.softmax_rows(t64([[c, c + np.log(3.0)]]))
    assert np.allclose(out.data, [[0.25, 0.75]], atol=1e-6)


def test_softmax_direct_formula():
    row = np.array([1.0, 2.0, 3.0])
    expected = np.exp(row) / np.exp(row).sum()
    out = nx.softmax_rows(t64([row]))
    assert np.max(np.abs(out.data[0] - expected)) < 1e-7


def test_softmax_neg_inf_entries_get_zero_weight():
    out = nx.softmax_rows(t64([[0.0, -np.inf, 0.0]]))
    assert np.array_equal(out.data, [[0.5, 0.0, 0.5]])


def test_softmax_all_neg_inf_row_is_degenerate():
    with pytest.raises(DegenerateRowError):
        nx.softmax_rows(t64([[0.0, 1.0], [-np.inf, -np.inf]]))


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-20, 20), min_size=1, max_size=8),
    st.floats(-50, 50),
)
def test_softmax_rows_sum_to_one_and_ignore_shift(row, shift):
    base = nx.softmax_rows(t64([row]))
    shifted = nx.softmax_rows(t64([[v + shift for v in row]]))
    assert abs(base.data.sum() - 1.0) < 1e-6
    assert np.max(np.abs(base.data - shifted.data)) < 1e-6


def test_backward_sum_gives_ones():
    x = t64(np.arange(6.0).reshape(2, 3), grad=True)
    with GradTape() as tape:
        loss = nx.sum(x)
    tape.backward(loss)
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_square():
    log_feature("quadratic derivative")
    x = t64([1.0, 2.0, 3.0], grad=True)
    with GradTape() as tape:
        loss = nx.sum(nx.mul(x, x))
    nx.backward(loss)
    assert np.array_equal(x.grad, [2.0, 4.0, 6.0])
    assert tape.records == []


def test_backward_requires_scalar():
    x = t64([1.0, 2.0], grad=True)
    with GradTape() as tape:
        y = nx.scale(x, 2.0)
    with pytest.raises(ContractError):
        tape.backward(y)


def test_backward_unreached_leaf_gets_zero_grad():
    x = t64([1.0, 2.0], grad=True)
    y = t64([3.0], grad=True)
    with GradTape() as tape:
        nx.scale(y, 2.0)
        loss = nx.sum(x)
    tape.backward(loss)
    assert np.array_equal(y.grad, [0.0])


def test_no_tape_records_nothing():
    x = t64([1.0], grad=True)
    out = nx.scale(x, 3.0)
    assert out._tape is None
    with pytest.raises(ContractError):
        nx.backward(nx.sum(out))


def test_nan_and_pos_inf_rejected_neg_inf_allowed():
    with pytest.raises(NonFiniteError):
        t64([np.nan])
    with pytest.raises(NonFiniteError):
        nx.scale(t64([1e308]), 10.0)
    assert np.isneginf(t64([-np.inf, 0.0]).data[0])


def test_extents_must_be_positive():
    with pytest.raises(DimensionError):
        nx.zeros((0, 3))


def test_precision_switch_is_scoped():
    assert nx.zeros((1,)).dtype == np.float32
    with nx.precision(np.float64):
        assert nx.zeros((1,)).dtype == np.float64
    assert nx.default_dtype() == np.float32
    with pytest.raises(ContractError):
        with nx.precision(np.int32):
            pass


def test_seeded_streams_are_reproducible():
    a = nx.standard_normal((4, 4), 7, "x")
    b = nx.standard_normal((4, 4), 7, "x")
    c = nx.standard_normal((4, 4), 7, "y")
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)
    assert nx.generator(1, "s", 2).integers(1 << 30) == nx.generator(1, "s", 2).integers(1 << 30)


def _weighted(out):
    w = nx.standard_normal(out.shape, 99, "weights", dtype=np.float64)
    return nx.sum(nx.mul(out, w))


OPS = {
    "add": (lambda a, b: nx.add(a, b), [(3, 4), (4,)]),
    "sub": (lambda a, b: nx.sub(a, b), [(3, 4), (3, 1)]),
    "mul": (lambda a, b: nx.mul(a, b), [(3, 4), (3, 1)]),
    "scale": (lambda a: nx.scale(a, -1.7), [(2, 3)]),
    "matmul": (lambda a, b: nx.matmul(a, b), [(2, 3, 4), (4, 5)]),
    "mean": (lambda a: nx.mul(nx.mean(a), a), [(3, 3)]),
    "softmax_rows": (lambda a: nx.softmax_rows(a), [(3, 5)]),
    "layer_norm": (lambda x, g, b: nx.layer_norm(x, g, b), [(4, 6), (6,), (6,)]),
    "gelu": (lambda a: nx.gelu(a), [(3, 4)]),
    "transpose": (lambda a: nx.transpose(a, (1, 0, 2)), [(2, 3, 4)]),
    "reshape": (lambda a: nx.reshape(a, (6, 2)), [(3, 4)]),
    "concat_rows": (lambda a, b: nx.concat_rows([a, b]), [(2, 3), (1, 3)]),
    "split_rows": (lambda a: nx.mul(*nx.split_rows(a, [2, 2])), [(4, 3)]),
    "gather": (lambda a: nx.gather(a, [0, 2, 2, 1]), [(3, 4)]),
}


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name, seed):
    fn, shapes = OPS[name]
    inputs = {f"in{i}": randn(shape, seed, name, i) for i, shape in enumerate(shapes)}
    errors = nx.gradcheck(lambda: _weighted(fn(*inputs.values())), inputs)
    assert max(errors.values()) < 1e-4, errors


def test_gradcheck_requires_float64_leaves():
    x = nx.tensor([1.0], requires_grad=True, dtype=np.float32)
    with pytest.raises(ContractError):
        nx.gradcheck(lambda: nx.sum(x), {"x": x})


def test_adam_first_step_moves_by_lr():
    log_feature("adam bias-corrected first step")
    x = t64([1.0, -2.0], grad=True)
    opt = nx.Adam([x], lr=0.1)
    with GradTape() as tape:
        loss = nx.sum(nx.mul(x, x))
    tape.backward(loss)
    opt.step()
    assert np.allclose(x.data, [0.9, -1.9], atol=1e-6)


def test_adam_converges_on_quadratic():
    x = t64([0.0, 0.0], grad=True)
    target = t64([3.0, -1.0])
    opt = nx.Adam([x], lr=0.02)
    for _ in range(1000):
        with GradTape() as tape:
            diff = nx.sub(x, target)
            loss = nx.sum(nx.mul(diff, diff))
        opt.zero_grad()
        tape.backward(loss)
        opt.step()
    assert np.max(np.abs(x.data - target.data)) < 0.1
