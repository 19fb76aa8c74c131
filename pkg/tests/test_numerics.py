import numpy as np
import pytest

from tabtoken.errors import ContractViolation, InvalidArgument
from tabtoken.numerics import (
    AdamW,
    AdamWState,
    Tensor,
    adamw_step,
    batch_norm,
    concat,
    cross_entropy,
    dropout_mask,
    layer_norm,
    matmul,
    mean_squared_error,
    no_grad,
    power,
    reduce_mean,
    reduce_sum,
    reglu,
    relu,
    softmax,
    sorted_mean,
    squared_distance,
    take,
)


def away_from_zero(rng, shape, margin=0.1):
    values = rng.normal(size=shape)
    return np.where(np.abs(values) < margin, np.sign(values + 1e-12) * margin, values)


def test_sum_gradient_is_ones():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_mean_relu_gradient():
    x = Tensor([-1.0, 2.0], requires_grad=True)
    reduce_mean(relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.5])


def test_frobenius_of_product_matches_finite_differences(grad_check):
    rng = np.random.default_rng(3)
    a = Tensor(rng.normal(size=(3, 3)), requires_grad=True, name="a")
    b = Tensor(rng.normal(size=(3, 3)), requires_grad=True, name="b")

    def build():
        product = a @ b
        return reduce_sum(product * product)

    grad_check(build, [a, b], tolerance=1e-6)


def _primitive_cases():
    rng = np.random.default_rng(7)
    weights = rng.normal(size=(4, 6))

    def weighted(t):
        return reduce_sum(t * Tensor(weights[: t.shape[0], : t.shape[1]]))

    x = Tensor(away_from_zero(rng, (4, 6)), requires_grad=True, name="x")
    y = Tensor(away_from_zero(rng, (4, 6)), requires_grad=True, name="y")
    row = Tensor(away_from_zero(rng, (1, 6)), requires_grad=True, name="row")
    positive = Tensor(np.abs(rng.normal(size=(4, 6))) + 0.5, requires_grad=True, name="positive")
    gain = Tensor(rng.normal(size=6), requires_grad=True, name="gain")
    shift = Tensor(rng.normal(size=6), requires_grad=True, name="shift")
    batch = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True, name="batch")
    kernel = Tensor(rng.normal(size=(4, 5)), requires_grad=True, name="kernel")
    labels = np.array([0, 2, 5, 1])
    mask = dropout_mask((4, 6), 0.3, rng=5)
    projection = rng.normal(size=(2, 3, 5))

    return {
        "add_broadcast": (lambda: weighted(x + row), [x, row]),
        "sub": (lambda: weighted(x - y), [x, y]),
        "mul_broadcast": (lambda: weighted(x * row), [x, row]),
        "div": (lambda: weighted(x / positive), [x, positive]),
        "power": (lambda: weighted(power(positive, 1.5)), [positive]),
        "relu": (lambda: weighted(relu(x)), [x]),
        "reglu": (lambda: reduce_sum(reglu(x) * Tensor(weights[:, :3])), [x]),
        "softmax": (lambda: weighted(softmax(x, axis=-1)), [x]),
        "cross_entropy": (lambda: cross_entropy(x, labels), [x]),
        "mean_squared_error": (lambda: mean_squared_error(x, weights), [x]),
        "squared_distance": (lambda: reduce_sum(squared_distance(x, y)), [x, y]),
        "layer_norm": (lambda: weighted(layer_norm(x, gain, shift)), [x, gain, shift]),
        "batch_norm": (lambda: weighted(batch_norm(x, gain, shift)[0]), [x, gain, shift]),
        "sorted_mean": (lambda: reduce_sum(sorted_mean(batch, axis=-2) * Tensor(weights[:2, :4])), [batch]),
        "take_repeated": (lambda: weighted(take(x, [0, 0, 3, 1], axis=0)), [x]),
        "concat": (lambda: weighted(concat([x[:2], y[2:]], axis=0)), [x, y]),
        "transpose_reshape": (lambda: weighted(x.transpose(1, 0).reshape(4, 6)), [x]),
        "batched_matmul": (lambda: reduce_sum(matmul(batch, kernel) * Tensor(projection)), [batch, kernel]),
        "dropout_mask": (lambda: weighted(x * mask), [x]),
        "reduce_mean_axis": (lambda: reduce_sum(reduce_mean(x, axis=0) * Tensor(weights[0])), [x]),
    }


@pytest.mark.parametrize("name", sorted(_primitive_cases()))
def test_primitive_gradients_match_finite_differences(name, grad_check):
    build, tensors = _primitive_cases()[name]
    grad_check(build, tensors)


def test_backward_accumulates_without_reset():
    x = Tensor([0.5, -2.0, 3.0], requires_grad=True)
    reduce_sum(x * x).backward()
    once = x.grad.copy()
    reduce_sum(x * x).backward()
    np.testing.assert_array_equal(x.grad, 2.0 * once)


def test_backward_rejects_non_scalar_root():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractViolation):
        (x * 2.0).backward()


def test_nan_propagates_and_is_reported():
    x = Tensor([1.0, np.nan], requires_grad=True)
    out = reduce_sum(x * 3.0)
    assert out.has_nan()


def test_no_grad_builds_no_graph():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with no_grad():
        y = reduce_sum(x * x)
    assert not y.requires_grad
    assert (x * x).requires_grad


def test_frozen_rows_receive_zero_gradient():
    table = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    table.frozen_rows = np.array([False, True, False])
    reduce_sum(take(table, [0, 1, 1, 2], axis=0)).backward()
    np.testing.assert_array_equal(table.grad, [[1.0, 1.0], [0.0, 0.0], [1.0, 1.0]])


def test_softmax_is_stable_for_large_logits():
    probs = softmax(Tensor([[1000.0, -1000.0, 999.0], [-1e3, -1e3, -1e3]]))
    assert not probs.has_nan()
    np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-12)


def test_matmul_rejects_mismatched_shapes():
    with pytest.raises(ContractViolation):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_reglu_rejects_odd_width():
    with pytest.raises(InvalidArgument):
        reglu(Tensor(np.ones((2, 3))))


# --- AdamW ---------------------------------------------------------------

def _param(value, grad):
    p = Tensor([value], requires_grad=True)
    p.grad = np.array([grad])
    return p


def test_adamw_single_step_from_fresh_state():
    p = _param(1.0, 1.0)
    state = AdamWState.for_params([p], learning_rate=1e-3, weight_decay=2e-4)
    adamw_step([p], state)
    expected = 1.0 - 1e-3 * (1.0 / (1.0 + 1e-8) + 2e-4)
    assert p.data[0] == pytest.approx(expected, rel=1e-12)
    assert p.data[0] == pytest.approx(0.9989998, abs=1e-7)
    assert state.step_count == 1


def test_adamw_zero_gradient_zero_decay_is_identity():
    p = _param(1.5, 0.0)
    adamw_step([p], AdamWState.for_params([p], weight_decay=0.0))
    assert p.data[0] == 1.5


def test_adamw_pure_decoupled_decay():
    p = _param(2.0, 0.0)
    adamw_step([p], AdamWState.for_params([p], learning_rate=1.0, weight_decay=0.1))
    assert p.data[0] == pytest.approx(1.8, abs=1e-15)


def test_adamw_zero_learning_rate_is_identity():
    rng = np.random.default_rng(0)
    p = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    before = p.data.copy()
    p.grad = rng.normal(size=(3, 2))
    state = AdamWState.for_params([p], learning_rate=0.0)
    for _ in range(3):
        adamw_step([p], state)
    np.testing.assert_array_equal(p.data, before)
    assert state.step_count == 3


def test_adamw_requires_gradients():
    p = Tensor([1.0], requires_grad=True)
    with pytest.raises(ContractViolation):
        adamw_step([p], AdamWState.for_params([p]))


def test_adamw_leaves_frozen_rows_untouched():
    p = Tensor(np.ones((3, 2)), requires_grad=True)
    p.frozen_rows = np.array([True, False, True])
    p.grad = np.ones((3, 2))
    optimizer = AdamW([p], lr=0.1)
    optimizer.step()
    np.testing.assert_array_equal(p.data[[0, 2]], np.ones((2, 2)))
    assert (p.data[1] < 1.0).all()


def test_adamw_does_not_reset_gradients():
    p = _param(1.0, 0.5)
    AdamW([p]).step()
    assert p.grad[0] == 0.5


# --- dropout -------------------------------------------------------------

def test_dropout_rate_zero_is_all_ones():
    np.testing.assert_array_equal(dropout_mask((5, 4), 0.0, rng=1), np.ones((5, 4)))


def test_dropout_fraction_of_zeros_concentrates():
    mask = dropout_mask(10000, 0.5, rng=42)
    assert 0.48 <= np.mean(mask == 0.0) <= 0.52
    assert set(np.unique(mask)) <= {0.0, 2.0}


def test_dropout_mask_is_deterministic_per_seed():
    np.testing.assert_array_equal(dropout_mask((20,), 0.3, rng=9), dropout_mask((20,), 0.3, rng=9))


@pytest.mark.parametrize("rate", [1.0, 1.5, -0.1])
def test_dropout_rejects_invalid_rate(rate):
    with pytest.raises(InvalidArgument):
        dropout_mask((3,), rate, rng=0)
