import numpy as np
import pytest

from tab2img import tensor as T
from tab2img.errors import ShapeError, UsageError
from tab2img.tensor import Tensor

from fd import numeric_grad, relative_error


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    eye = Tensor(np.eye(2, dtype=np.float32))
    assert np.allclose(T.matmul(eye, a).data, a.data)


def test_matmul_hand_case():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[0.0], [1.0]])
    assert np.array_equal(T.matmul(a, b).data, [[2.0], [4.0]])


def test_matmul_zero_annihilates():
    z = Tensor(np.zeros((3, 4), dtype=np.float32))
    b = Tensor(np.random.default_rng(0).normal(size=(4, 5)).astype(np.float32))
    assert np.array_equal(T.matmul(z, b).data, np.zeros((3, 5)))


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_square_analytic():
    x = Tensor(np.asarray(3.0), requires_grad=True)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_backward_accumulates_without_reset():
    x = Tensor(np.asarray(2.0), requires_grad=True)
    loss = x * x
    loss.backward()
    loss.backward()
    assert x.grad == pytest.approx(8.0)


def test_backward_shared_subexpression_two_paths():
    # hand-built DAG: u = x*y used twice, loss = u + u  =>  dx = 2y
    x = Tensor(np.asarray(3.0), requires_grad=True)
    y = Tensor(np.asarray(5.0), requires_grad=True)
    u = x * y
    (u + u).backward()
    assert x.grad == pytest.approx(10.0)
    assert y.grad == pytest.approx(6.0)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(UsageError):
        (x * x).backward()


def test_softmax_uniform_on_equal_inputs():
    s = T.softmax(Tensor([[4.0, 4.0, 4.0]]))
    assert np.allclose(s.data, 1.0 / 3.0)


@pytest.mark.parametrize("scale", [1.0, 1e2, 1e4])
def test_softmax_rows_are_distributions(scale):
    rng = np.random.default_rng(7)
    x = Tensor((rng.normal(size=(16, 9)) * scale).astype(np.float32))
    s = T.softmax(x).data
    assert (s >= 0).all()
    assert np.abs(s.sum(axis=-1) - 1.0).max() < 1e-6


def test_sigmoid_at_zero():
    assert T.sigmoid(Tensor(np.asarray(0.0))).item() == pytest.approx(0.5)


def test_relu_definition():
    out = T.relu(Tensor([-3.0, 3.0]))
    assert np.array_equal(out.data, [0.0, 3.0])


def test_broadcast_add_gradient_reduces():
    x = Tensor(np.ones((4, 3)), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    (x + b).sum().backward()
    assert np.array_equal(x.grad, np.ones((4, 3)))
    assert np.array_equal(b.grad, np.full(3, 4.0))


def test_concat_splits_gradient():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    out = T.concat([a, b], axis=0)
    (out * Tensor(np.arange(5.0))).sum().backward()
    assert np.array_equal(a.grad, [0.0, 1.0])
    assert np.array_equal(b.grad, [2.0, 3.0, 4.0])


def test_getitem_gradient_scatters():
    x = Tensor(np.arange(5.0), requires_grad=True)
    x[1:3].sum().backward()
    assert np.array_equal(x.grad, [0.0, 1.0, 1.0, 0.0, 0.0])


def test_no_grad_blocks_graph():
    x = Tensor(np.asarray(2.0), requires_grad=True)
    with T.no_grad():
        y = x * x
    assert not y.requires_grad and y._backward is None


PRIMITIVES = [
    ("mul", lambda t: (t * t).sum()),
    ("div", lambda t: (t / (t * t + 2.0)).sum()),
    ("exp", lambda t: T.exp(t * 0.3).sum()),
    ("log", lambda t: T.log(t * t + 1.5).sum()),
    ("sigmoid", lambda t: T.sigmoid(t).sum()),
    ("softplus", lambda t: T.softplus(t).sum()),
    ("softmax", lambda t: (T.softmax(t) * T.softmax(t)).sum()),
    ("matmul", lambda t: T.matmul(t, t.T).sum()),
    ("mean", lambda t: (t * t).mean()),
    ("pow", lambda t: (t ** 3).sum()),
]


@pytest.mark.parametrize("name,fn", PRIMITIVES)
def test_primitive_gradients_match_finite_differences(name, fn):
    rng = np.random.default_rng(hash(name) % 2 ** 31)
    x0 = rng.normal(size=(3, 4)) + 0.1  # offset avoids relu/log kinks at 0

    def scalar(x):
        return fn(Tensor(x)).item()

    t = Tensor(x0.copy(), requires_grad=True, dtype=np.float64)
    fn(t).backward()
    assert relative_error(t.grad, numeric_grad(scalar, x0)) < 1e-4


def test_relu_gradient_away_from_kink():
    rng = np.random.default_rng(11)
    x0 = rng.normal(size=(4, 4))
    x0[np.abs(x0) < 0.1] = 0.5

    def scalar(x):
        return T.relu(Tensor(x)).sum().item()

    t = Tensor(x0.copy(), requires_grad=True, dtype=np.float64)
    T.relu(t).sum().backward()
    assert relative_error(t.grad, numeric_grad(scalar, x0)) < 1e-4


def test_float32_default_storage():
    t = Tensor([1.0, 2.0])
    assert t.dtype == np.float32
    t64 = Tensor(np.zeros(3, dtype=np.float64))
    assert t64.dtype == np.float64
