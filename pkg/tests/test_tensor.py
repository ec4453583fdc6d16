import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from branchformer.errors import ContractError, ShapeError
from branchformer.gradcheck import check_primitives
from branchformer.nn import softmax_rows
from branchformer.tensor import (
    PRIMITIVES,
    Tensor,
    concat,
    elementwise,
    expand,
    matmul,
    mul,
    no_grad,
    parameter,
    split,
    tensor_sum,
)

finite = st.floats(-2, 2, allow_nan=False)


def test_matmul_examples():
    I = Tensor(np.eye(2))
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(I, a).data, a.data)
    assert matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]
    out = matmul(Tensor(np.zeros((2, 3))), Tensor(np.random.default_rng(0).normal(size=(3, 4))))
    assert np.array_equal(out.data, np.zeros((2, 4)))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_elementwise_examples():
    assert elementwise("mul", Tensor([1.0, 2, 3]), Tensor([0.0, 0, 0])).data.tolist() == [0, 0, 0]
    assert elementwise("add", Tensor([1.0, 2]), Tensor([3.0, 4])).data.tolist() == [4, 6]
    assert elementwise("mul", Tensor([2.0, 3]), Tensor([4.0, 5])).data.tolist() == [8, 15]
    assert elementwise("sub", Tensor([2.0, 3]), Tensor([4.0, 5])).data.tolist() == [-2, -2]


def test_no_implicit_broadcasting():
    with pytest.raises(ShapeError):
        elementwise("add", Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    # 0-d tensors are the one allowed exception
    out = elementwise("mul", Tensor(np.ones((2, 3))), Tensor(2.0))
    assert np.array_equal(out.data, np.full((2, 3), 2.0))


def test_split_concat_examples():
    a, b = split(Tensor([[1.0, 2, 3, 4]]))
    assert a.data.tolist() == [[1, 2]] and b.data.tolist() == [[3, 4]]
    assert concat([Tensor([[1.0]]), Tensor([[2.0]])]).data.tolist() == [[1, 2]]


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 4).map(lambda k: 2 * k)), elements=finite))
def test_split_concat_round_trip(x):
    halves = split(Tensor(x), 2, axis=-1)
    assert np.array_equal(concat(halves, axis=-1).data, x)


def test_backward_examples():
    x = parameter(np.ones((2, 3)))
    tensor_sum(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))

    x = parameter([1.0, 2.0])
    tensor_sum(mul(x, x)).backward()
    assert x.grad.tolist() == [2.0, 4.0]

    x = parameter([[0.3, -1.2, 2.0]])
    tensor_sum(softmax_rows(x)).backward()
    assert np.abs(x.grad).max() < 1e-15


def test_backward_needs_scalar():
    x = parameter(np.ones(3))
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_gradients_accumulate_through_shared_use():
    x = parameter([3.0])
    y = x * x + x  # x used three times
    tensor_sum(y).backward()
    assert x.grad.tolist() == [7.0]


def test_no_grad_records_nothing():
    x = parameter([1.0, 2.0])
    with no_grad():
        y = x * x
    assert y.node is None and not y.requires_grad


def test_expand_gradient_sums():
    x = parameter([1.0, 2.0])
    tensor_sum(expand(x, 0, 3)).backward()
    assert x.grad.tolist() == [3.0, 3.0]


def test_replay_determinism():
    def run():
        rng = np.random.default_rng(5)
        w = parameter(rng.normal(size=(4, 3)))
        x = Tensor(rng.normal(size=(2, 5, 4)))
        loss = tensor_sum(softmax_rows(matmul(x, w)) * 3.0)
        loss.backward()
        return loss.data.copy(), w.grad.copy()

    (l1, g1), (l2, g2) = run(), run()
    assert np.array_equal(l1, l2) and np.array_equal(g1, g2)


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    errors = check_primitives(seed=0, names=[name])
    assert errors[name] < 1e-4, errors


@pytest.mark.parametrize("seed", [1, 2])
def test_primitive_gradients_other_seeds(seed):
    worst = max(check_primitives(seed=seed).values())
    assert worst < 1e-4
