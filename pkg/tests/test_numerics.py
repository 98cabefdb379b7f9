import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from foodfuse import numerics as nx
from foodfuse.numerics import NumericalError, RngStream, ShapeError, grad_check

D = torch.float64


def rand(*shape, seed=0):
    return RngStream(seed, ("t",)).normal(shape, D)


def test_softmax_uniform_row():
    assert torch.equal(nx.softmax(torch.zeros(1, 2, dtype=D)), torch.tensor([[0.5, 0.5]], dtype=D))


def test_matmul_identity():
    x = rand(3, 4)
    assert torch.equal(nx.matmul(torch.eye(3, dtype=D), x), x)


def test_mse_gradient_hand_value():
    w = torch.tensor([1.0], dtype=D, requires_grad=True)
    x, y = torch.tensor([2.0], dtype=D), torch.tensor([0.0], dtype=D)
    nx.mse(nx.mul(w, x), y).backward()
    assert w.grad.item() == pytest.approx(8.0)
    h = 1e-5
    fd = (nx.mse((1 + h) * x, y) - nx.mse((1 - h) * x, y)).item() / (2 * h)
    assert fd == pytest.approx(8.0, rel=1e-8)


# one scalar-valued probe per primitive; each is checked against central differences
PRIMITIVES = {
    "add": (lambda x: (nx.add(x, rand(4, 5, seed=1)) ** 2).sum(), (4, 5)),
    "mul": (lambda x: nx.mul(x, rand(4, 5, seed=1)).sum() ** 2, (4, 5)),
    "matmul": (lambda x: nx.matmul(x, rand(5, 3, seed=1)).pow(2).sum(), (4, 5)),
    "conv2d": (lambda x: nx.conv2d(x, rand(3, 2, 3, 3, seed=1), rand(3, seed=2), padding=1).pow(2).sum(), (1, 2, 5, 5)),
    "group_norm": (lambda x: (nx.group_norm(x, 2) * rand(1, 4, 3, 3, seed=1)).sum(), (1, 4, 3, 3)),
    "layer_norm": (lambda x: (nx.layer_norm(x) * rand(3, 6, seed=1)).sum(), (3, 6)),
    "softmax": (lambda x: (nx.softmax(x) * rand(3, 5, seed=1)).sum(), (3, 5)),
    "silu": (lambda x: nx.silu(x).sum(), (10,)),
    "gelu": (lambda x: nx.gelu(x).sum(), (10,)),
    "nearest_upsample": (lambda x: (nx.nearest_upsample(x) * rand(1, 2, 6, 6, seed=1)).sum(), (1, 2, 3, 3)),
    "avg_downsample": (lambda x: nx.avg_downsample(x).pow(2).sum(), (1, 2, 4, 4)),
    "reshape": (lambda x: (nx.reshape(x, (6, 2)) * rand(6, 2, seed=1)).sum() ** 2, (3, 4)),
    "concat": (lambda x: nx.concat([x, x * 2.0], axis=1).pow(2).sum(), (2, 3)),
    "transpose": (lambda x: (nx.transpose(x) * rand(4, 3, seed=1)).sum() ** 2, (3, 4)),
    "slice": (lambda x: nx.slice_(x, 1, 1, 3).pow(3).sum(), (3, 4)),
    "embed_lookup": (lambda x: nx.embed_lookup(x, torch.tensor([0, 2, 2])).pow(2).sum(), (4, 3)),
    "mse": (lambda x: nx.mse(x, rand(3, 3, seed=1)), (3, 3)),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    f, shape = PRIMITIVES[name]
    assert grad_check(f, rand(*shape, seed=7)) < 1e-4


def test_grad_check_quadratic_is_tight():
    assert grad_check(lambda x: (x ** 2).sum(), rand(6, seed=3)) < 1e-6


def test_grad_check_disconnected_input():
    assert grad_check(lambda x: torch.tensor(3.0, dtype=D) + x.detach().sum() * 0, rand(4)) == 0.0


def test_grad_check_requires_float64():
    with pytest.raises(TypeError):
        grad_check(lambda x: x.sum(), torch.zeros(2))


def test_grad_check_non_finite_raises():
    with pytest.raises(NumericalError):
        grad_check(lambda x: (x / 0.0).sum(), torch.ones(2, dtype=D))


@pytest.mark.parametrize("call", [
    lambda: nx.matmul(torch.zeros(2, 3), torch.zeros(4, 2)),
    lambda: nx.add(torch.zeros(2, 3), torch.zeros(3, 2)),
    lambda: nx.concat([torch.zeros(2, 3), torch.zeros(3, 4)], axis=0),
    lambda: nx.reshape(torch.zeros(6), (4, 2)),
    lambda: nx.slice_(torch.zeros(3), 0, 2, 5),
    lambda: nx.conv2d(torch.zeros(1, 2, 4, 4), torch.zeros(3, 1, 3, 3)),
    lambda: nx.group_norm(torch.zeros(1, 3, 2, 2), 2),
    lambda: nx.avg_downsample(torch.zeros(1, 1, 3, 3)),
    lambda: nx.embed_lookup(torch.zeros(3, 2), torch.tensor([3])),
    lambda: nx.mse(torch.zeros(2), torch.zeros(3)),
])
def test_shape_errors_are_raised_before_compute(call):
    with pytest.raises(ShapeError):
        call()


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as info:
        nx.matmul(torch.zeros(2, 3), torch.zeros(4, 2))
    assert "matmul" in str(info.value) and "(2, 3)" in str(info.value)


def test_precision_context_restores_dtype():
    before = torch.get_default_dtype()
    with nx.precision("float64"):
        assert torch.zeros(1).dtype == torch.float64
    assert torch.get_default_dtype() == before


def test_rng_stream_keyed_and_reproducible():
    a = RngStream(5, ("x",)).normal((8,))
    assert torch.equal(a, RngStream(5, ("x",)).normal((8,)))
    assert not torch.equal(a, RngStream(5, ("y",)).normal((8,)))
    assert not torch.equal(a, RngStream(6, ("x",)).normal((8,)))
    assert RngStream(5, ("x",)).child(1).seed != RngStream(5, ("x",)).child(2).seed


def test_rng_stream_order_independent():
    root = RngStream(0, ("r",))
    first = root.child("b").normal((4,))
    _ = root.child("a").normal((100,))
    assert torch.equal(first, root.child("b").normal((4,)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12))
def test_softmax_is_distribution_and_shift_invariant(row):
    x = torch.tensor(row, dtype=D)
    p = nx.softmax(x)
    assert torch.all(p >= 0) and p.sum().item() == pytest.approx(1.0)
    assert torch.allclose(p, nx.softmax(x + 7.5), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
def test_concat_then_slice_roundtrip(a, b, c):
    x, y = rand(a, c, seed=1), rand(b, c, seed=2)
    z = nx.concat([x, y], axis=0)
    assert z.shape == (a + b, c)
    assert torch.equal(nx.slice_(z, 0, 0, a), x) and torch.equal(nx.slice_(z, 0, a, a + b), y)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.integers(1, 64))
def test_mse_nonnegative(seed, n):
    a, b = RngStream(seed, ("a",)).normal((n,)), RngStream(seed, ("b",)).normal((n,))
    assert nx.mse(a, b).item() >= 0.0
    assert nx.mse(a, a).item() == 0.0


def test_numpy_stream_deterministic():
    assert np.array_equal(RngStream(1, ("n",)).numpy().random(5), RngStream(1, ("n",)).numpy().random(5))
