import numpy as np
import pytest
from hypothesis import given, strategies as st

from ldru import autodiff as ad
from ldru.autodiff import Tape, Tensor, backward, grad_check, precision
from ldru.errors import ShapeError

EPS = 1e-3
TOL = 1e-4


def _t(rng, *shape, away_from_zero=False):
    x = rng.uniform(-2, 2, size=shape)
    if away_from_zero:
        x = np.where(np.abs(x) < 0.05, np.sign(x + 1e-12) * 0.05, x)
    return Tensor(x, requires_grad=True)


def _weights(rng, shape):
    # random projection so the scalar depends on every output coordinate differently
    return Tensor(rng.uniform(-1, 1, size=shape))


PRIMITIVES = {
    "add": (lambda a, b: ad.add(a, b), [(3, 4), (3, 4)]),
    "add_broadcast": (lambda a, b: ad.add(a, b), [(3, 4), (4,)]),
    "sub": (lambda a, b: ad.sub(a, b), [(3, 4), (3, 4)]),
    "elementwise_mul": (lambda a, b: ad.elementwise_mul(a, b), [(3, 4), (3, 4)]),
    "matmul": (lambda a, b: ad.matmul(a, b), [(3, 4), (4, 5)]),
    "concat_last_dim": (lambda a, b: ad.concat_last_dim([a, b]), [(3, 2), (3, 3)]),
    "split_last_dim": (lambda a: ad.split_last_dim(a, [2, 3])[1], [(3, 5)]),
    "tanh": (lambda a: ad.tanh(a), [(3, 4)]),
    "sigmoid": (lambda a: ad.sigmoid(a), [(3, 4)]),
    "silu": (lambda a: ad.silu(a), [(3, 4)]),
    "layer_norm": (lambda a, s, b: ad.layer_norm(a, s, b), [(3, 6), (6,), (6,)]),
    "embedding_lookup": (lambda t: ad.embedding_lookup(t, np.array([2, 0, 2, 1])), [(3, 4)]),
    "reduce_sum": (lambda a: ad.reduce_sum(a, axis=1), [(3, 4)]),
    "reduce_mean": (lambda a: ad.reduce_mean(a, axis=0), [(3, 4)]),
    "cosine_similarity": (lambda a, b: ad.cosine_similarity(a, b), [(3, 4), (3, 4)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    fn, shapes = PRIMITIVES[name]
    rng = np.random.default_rng(sorted(PRIMITIVES).index(name))
    with precision(np.float64):
        inputs = [_t(rng, *s) for s in shapes]
        out_shape = fn(*inputs).shape
        w = _weights(rng, out_shape)
        err = grad_check(lambda *xs: ad.reduce_sum(ad.mul(fn(*xs), w)), inputs, eps=EPS)
    assert err < TOL, err


def test_relu_gradient():
    rng = np.random.default_rng(0)
    with precision(np.float64):
        x = _t(rng, 4, 5, away_from_zero=True)
        w = _weights(rng, (4, 5))
        assert grad_check(lambda a: ad.reduce_sum(ad.relu(a) * w), [x], eps=EPS) < TOL


def test_softmax_cross_entropy_gradient():
    rng = np.random.default_rng(1)
    with precision(np.float64):
        x = _t(rng, 5, 3)
        labels = np.array([0, 2, 1, 1, 0])
        assert grad_check(lambda a: ad.softmax_cross_entropy(a, labels), [x], eps=EPS) < TOL


def test_where_gradient():
    rng = np.random.default_rng(2)
    mask = np.array([[True], [False], [True]])
    with precision(np.float64):
        a, b = _t(rng, 3, 4), _t(rng, 3, 4)
        w = _weights(rng, (3, 4))
        assert grad_check(lambda x, y: ad.reduce_sum(ad.where(mask, x, y) * w), [a, b], eps=EPS) < TOL


def test_examples():
    assert ad.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0, 0, 2]
    ln = ad.layer_norm(Tensor(np.full((2, 5), 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
    assert np.array_equal(ln.data, np.zeros((2, 5)))
    x = Tensor(np.array([0.3, -1.2, 4.0]))
    assert ad.cosine_similarity(x, x).data == pytest.approx(1.0, abs=1e-6)

    s = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        loss = s * s
    assert float(backward(tape, loss)[s]) == 6.0

    logits = Tensor(np.zeros((1, 2)), requires_grad=True)
    with Tape() as tape:
        loss = ad.softmax_cross_entropy(logits, np.array([0]))
    assert backward(tape, loss)[logits].tolist() == [[-0.5, 0.5]]


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ShapeError):
        backward(tape, y)


def test_shape_errors_name_primitive():
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError, match="add"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_dropout_eval_is_identity():
    x = Tensor(np.random.default_rng(0).normal(size=(8, 8)))
    assert ad.dropout(x, 0.5, np.random.default_rng(1), train=False) is x


def test_dropout_preserves_expectation():
    x = Tensor(np.full(100_000, 2.0))
    y = ad.dropout(x, 0.25, np.random.default_rng(3), train=True)
    assert abs(y.data.mean() - 2.0) / 2.0 < 0.01
    kept = y.data[y.data != 0]
    assert np.allclose(kept, 2.0 / 0.75)


def test_float32_by_default():
    assert ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4)))).data.dtype == np.float32
    with precision(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64


def test_backward_is_deterministic():
    rng = np.random.default_rng(5)
    w = Tensor(rng.normal(size=(16, 8)), requires_grad=True)
    x = Tensor(rng.normal(size=(32, 16)))

    def grads():
        with Tape() as tape:
            loss = ad.reduce_mean(ad.tanh(x @ w))
        return backward(tape, loss)[w]

    assert np.array_equal(grads(), grads())


def test_no_tape_records_nothing():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        with ad.no_tape():
            ad.matmul(w, w)
    assert len(tape) == 0


@given(rows=st.integers(1, 40), seed=st.integers(0, 10_000))
def test_matmul_rows_do_not_depend_on_batch(rows, seed):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(size=(64, 128)))
    x = rng.normal(size=(rows, 64))
    full = ad.matmul(Tensor(x), w).data
    for r in range(rows):
        assert np.array_equal(ad.matmul(Tensor(x[r : r + 1]), w).data[0], full[r])


def test_gradient_accumulates_over_reuse():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = ad.reduce_sum(x * x + x)
    assert backward(tape, loss)[x].tolist() == [3.0, 5.0]
