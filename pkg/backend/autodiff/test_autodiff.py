import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from backend.autodiff import functional as F
from backend.autodiff.gradcheck import check_gradients, check_parameter_gradients
from backend.autodiff.nn import MLP, Linear, MultiHeadAttention
from backend.autodiff.optim import Adam
from backend.autodiff.tensor import ShapeError, Tensor, backward, no_grad
from backend.verify.gradients import PRIMITIVE_TOLERANCE, primitive_cases


def test_matmul_examples():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((a @ np.eye(2)).data, a.data)
    np.testing.assert_array_equal((a @ Tensor([[5.0, 6.0], [7.0, 8.0]])).data, [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_sum_gradient_is_ones_times_b_transpose():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    (grad_a,) = backward((a @ b).sum(), None, [a])
    np.testing.assert_allclose(grad_a, np.ones((3, 5)) @ b.data.T, atol=1e-12)


def test_every_primitive_matches_finite_differences():
    for name, fn, arrays in primitive_cases(np.random.default_rng(3)):
        errors = check_gradients(fn, arrays)
        assert max(errors) < PRIMITIVE_TOLERANCE, name


def test_broadcast_mismatch_raises_shape_error():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4, 3)))


def test_zero_length_axis_is_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.ones((0, 3)))


def test_item_needs_a_single_element():
    assert Tensor(np.array([[2.5]])).item() == 2.5
    with pytest.raises(ShapeError):
        Tensor(np.ones(3)).item()


def test_identity_gradient_equals_seed_and_fan_out_doubles():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    seed = np.array([0.5, 2.0, -1.0])
    (same,) = backward(x * 1.0, seed, [x])
    (doubled,) = backward(x + x, seed, [x])
    np.testing.assert_allclose(same, seed)
    np.testing.assert_allclose(doubled, 2.0 * seed)
    assert x.grad is None


def test_unreachable_input_gets_none():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(3), requires_grad=True)
    grads = backward((x * 2.0).sum(), None, [x, y])
    assert grads[1] is None


def test_seed_shape_mismatch_raises():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * 2.0, np.ones(4), [x])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = (x * 3.0).sum()
    assert not y.requires_grad


def test_tensor_backward_accumulates():
    x = Tensor(np.ones(2), requires_grad=True)
    (x * 3.0).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_allclose(x.grad, [6.0, 6.0])


def test_softmax_uniform_and_shift_invariant():
    np.testing.assert_allclose(F.softmax(np.zeros(4)).data, np.full(4, 0.25))
    x = np.random.default_rng(1).normal(size=(3, 5))
    np.testing.assert_allclose(F.softmax(x + 7.5).data, F.softmax(x).data, atol=1e-12)


def test_softmax_all_masked_row_is_zero():
    mask = np.array([[True, False], [False, False]])
    out = F.softmax(np.ones((2, 2)), mask=mask).data
    np.testing.assert_allclose(out, [[1.0, 0.0], [0.0, 0.0]])


def test_layer_norm_constant_row_gives_bias_and_zero_mean():
    bias = np.array([0.1, -0.2, 0.3])
    np.testing.assert_allclose(F.layer_norm(np.full((2, 3), 4.0), np.ones(3), bias).data, np.tile(bias, (2, 1)))
    x = np.random.default_rng(2).normal(size=(5, 8))
    out = F.layer_norm(x, np.ones(8), np.zeros(8)).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-10


def test_attention_degenerate_cases():
    rng = np.random.default_rng(4)
    q = rng.normal(size=(2, 3))
    k = rng.normal(size=(1, 3))
    v = rng.normal(size=(1, 4))
    np.testing.assert_allclose(F.attention(q, k, v).data, np.repeat(v, 2, axis=0))
    k3 = rng.normal(size=(3, 3))
    v3 = rng.normal(size=(3, 4))
    mask = np.array([False, True, False])
    np.testing.assert_allclose(F.attention(q, k3, v3, mask=mask).data, np.repeat(v3[1:2], 2, axis=0), atol=1e-12)


def test_attention_matches_loop_reference():
    rng = np.random.default_rng(5)
    q, k, v = rng.normal(size=(4, 6)), rng.normal(size=(5, 6)), rng.normal(size=(5, 3))
    expected = np.zeros((4, 3))
    for i in range(4):
        scores = [sum(q[i, d] * k[j, d] for d in range(6)) / np.sqrt(6) for j in range(5)]
        weights = np.exp(np.array(scores) - max(scores))
        weights /= weights.sum()
        for j in range(5):
            expected[i] += weights[j] * v[j]
    np.testing.assert_allclose(F.attention(q, k, v).data, expected, atol=1e-10)


def test_rope_position_zero_is_identity_and_isometric():
    x = np.random.default_rng(6).normal(size=(3, 8))
    np.testing.assert_allclose(F.rope_apply(x[:1], [0]).data, x[:1])
    rotated = F.rope_apply(x, [0, 5, 11]).data
    np.testing.assert_allclose(np.linalg.norm(rotated, axis=-1), np.linalg.norm(x, axis=-1))


def test_rope_dot_product_depends_on_offset_only():
    rng = np.random.default_rng(7)
    q, k = rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
    by_offset = {}
    for m in range(8):
        for n in range(8):
            dot = float((F.rope_apply(q, [m]).data @ F.rope_apply(k, [n]).data.T)[0, 0])
            by_offset.setdefault(m - n, []).append(dot)
    for values in by_offset.values():
        assert np.ptp(values) < 1e-10


def test_rope_rejects_odd_width():
    with pytest.raises(ShapeError):
        F.rope_apply(np.ones((2, 3)), [0, 1])


@settings(max_examples=20)
@given(rows=st.integers(1, 4), cols=st.integers(1, 4), seed=st.integers(0, 1000))
def test_mlp_gradients_match_finite_differences(rows, cols, seed):
    rng = np.random.default_rng(seed)
    mlp = MLP(cols, 5, 2, rng)
    x = rng.normal(size=(rows, cols))
    errors = check_parameter_gradients(lambda: mlp(x).sum(), list(mlp.named_parameters()))
    assert max(errors.values()) < 1e-4


def test_composite_input_gradient():
    rng = np.random.default_rng(8)
    layer = Linear(4, 3, rng)
    errors = check_gradients(lambda x: layer(x).gelu(), [rng.normal(size=(2, 4))])
    assert errors[0] < 1e-4


def test_state_dict_strict_mismatch_raises_key_error():
    rng = np.random.default_rng(0)
    attn = MultiHeadAttention(8, 2, rng)
    state = attn.state_dict()
    state.pop("q.weight")
    with pytest.raises(KeyError):
        attn.load_state_dict(state)
    attn.load_state_dict(state, strict=False)


def test_state_dict_roundtrip_restores_outputs():
    rng = np.random.default_rng(1)
    a, b = Linear(3, 2, rng), Linear(3, 2, rng)
    b.load_state_dict(a.state_dict())
    x = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(a(x).data, b(x).data)


def test_adam_linear_warmup():
    layer = Linear(2, 1, np.random.default_rng(0))
    adam = Adam(list(layer.named_parameters()), lr=1.0, warmup_steps=4)
    assert [adam.lr_at(s) for s in range(6)] == [0.25, 0.5, 0.75, 1.0, 1.0, 1.0]
    assert Adam(list(layer.named_parameters()), lr=0.3, warmup_steps=0).lr_at(0) == 0.3


def test_adam_reduces_quadratic_loss():
    layer = Linear(2, 1, np.random.default_rng(0))
    adam = Adam(list(layer.named_parameters()), lr=0.05, warmup_steps=0)
    x = np.array([[1.0, 2.0], [3.0, -1.0]])
    y = np.array([[1.0], [0.0]])
    first = float(F.mse(layer(x), y).data)
    for _ in range(100):
        adam.zero_grad()
        F.mse(layer(x), y).backward()
        adam.step()
    assert float(F.mse(layer(x), y).data) < first
