import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deskmae.tensor import (GraphReleasedError, ShapeError, Tensor, add, cross_entropy, gelu, layernorm, matmul,
                            mean, no_grad, softmax, tsum)
from gradcheck import OPS, max_rel_error


@pytest.mark.parametrize("op", sorted(OPS))
@pytest.mark.parametrize("draw", range(5))
def test_gradients_match_finite_differences(op, draw):
    rng = np.random.default_rng(1000 * draw + len(op))
    f, inputs = OPS[op](rng)
    assert max_rel_error(f, inputs, seed=draw) < 1e-4


def test_matmul_hand_values():
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(matmul(Tensor(np.eye(2)), Tensor(x)).data, x)
    assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_layernorm_hand_values():
    one, zero = Tensor(np.ones(2)), Tensor(np.zeros(2))
    assert np.array_equal(layernorm(Tensor([[5.0, 5.0]]), one, zero).data, [[0.0, 0.0]])
    np.testing.assert_allclose(layernorm(Tensor([[1.0, 3.0]]), one, zero, eps=1e-12).data, [[-1.0, 1.0]], atol=1e-9)
    with pytest.raises(ShapeError):
        layernorm(Tensor(np.zeros((2, 3))), one, zero)


def test_softmax_uniform_and_cross_entropy_hand_value():
    np.testing.assert_allclose(softmax(Tensor(np.full((2, 4), 3.0))).data, 0.25)
    loss = cross_entropy(Tensor([[2.0, 0.0]]), [0]).item()
    assert loss == pytest.approx(math.log1p(math.exp(-2)), abs=1e-12)
    assert loss == pytest.approx(0.1269, abs=1e-4)


def test_mean_value_and_gradient():
    x = Tensor([1.0, 2.0, 3.0, 4.0], requires_grad=True)
    m = mean(x)
    assert m.item() == 2.5
    m.backward()
    assert x.grad.tolist() == [0.25] * 4


def test_gelu_is_exact_erf_form():
    xs = np.linspace(-4, 4, 17)
    ref = [0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in xs]
    np.testing.assert_allclose(gelu(Tensor(xs)).data, ref, rtol=0, atol=1e-14)


def test_second_backward_is_an_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = tsum(x * x)
    y.backward()
    with pytest.raises(GraphReleasedError):
        y.backward()


def test_grad_matches_data_shape_and_dtype():
    x = Tensor(np.ones((3, 2), dtype=np.float32), requires_grad=True)
    w = Tensor(np.ones((2, 4), dtype=np.float32), requires_grad=True)
    tsum(matmul(x, w)).backward()
    for t in (x, w):
        assert t.grad.shape == t.shape and t.grad.dtype == t.dtype


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * x
    assert y._backward is None and not y._parents


def test_mixed_dtypes_rejected():
    with pytest.raises(TypeError):
        add(Tensor(np.ones(2, dtype=np.float32)), Tensor(np.ones(2)))


def test_general_broadcasting_rejected():
    with pytest.raises(ShapeError):
        add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))


def test_two_block_chain_has_finite_gradients():
    from deskmae.vit import ViTModel, get_recipe
    m = ViTModel(get_recipe("vit-micro"), seed=0, dtype=np.float64)
    x = np.random.default_rng(0).standard_normal((2, 3, 16, 16))
    tsum(m(x) * m(x)).backward()
    for name, p in m.named_parameters():
        assert p.grad is not None and np.all(np.isfinite(p.grad)), name


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
def test_forward_is_deterministic(b, d, seed):
    rng = np.random.default_rng(seed)
    x, g, be = rng.standard_normal((b, d + 1)), rng.standard_normal(d + 1), rng.standard_normal(d + 1)
    run = lambda: softmax(gelu(layernorm(Tensor(x), Tensor(g), Tensor(be)))).data  # noqa: E731
    assert np.array_equal(run(), run())


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=8))
def test_softmax_rows_sum_to_one(vals):
    assert softmax(Tensor([vals])).data.sum() == pytest.approx(1.0, abs=1e-12)
