import math

import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from protclip import tensor as T
from protclip.errors import DetachedTensor, NonFinite, NotScalar, ShapeMismatch
from protclip.tensor import Tape, Tensor

H = 1e-5


def numeric_grad(f, xs, h=H):
    grads = []
    for x in xs:
        g = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + h
            plus = f()
            x[idx] = orig - h
            minus = f()
            x[idx] = orig
            g[idx] = (plus - minus) / (2 * h)
        grads.append(g)
    return grads


def check_grad(build, *shapes, rng, positive=False, floor=1e-6):
    """build(*tensors) -> scalar Tensor. Compare tape gradients with central differences."""
    data = [rng.uniform(0.5, 2.0, s) if positive else rng.standard_normal(s) for s in shapes]
    leaves = [Tensor(d, requires_grad=True) for d in data]
    with Tape():
        T.backward(build(*leaves))
    numeric = numeric_grad(lambda: build(*[Tensor(d) for d in data]).item(), data)
    for leaf, num in zip(leaves, numeric):
        err = np.abs(leaf.grad - num) / np.maximum(np.maximum(np.abs(leaf.grad), np.abs(num)), floor)
        assert err.max() < 1e-4


def weighted(x, rng_seed=0):
    w = np.random.default_rng(rng_seed).standard_normal(x.shape)
    return T.sum(T.mul(x, Tensor(w))) if x.ndim else T.scale(x, float(w))


PRIMITIVES = {
    "matmul": (lambda a, b: weighted(T.matmul(a, b)), [(3, 4), (4, 2)], False),
    "matvec": (lambda a, b: weighted(T.matmul(a, b)), [(4,), (4, 3)], False),
    "dot": (lambda a, b: T.matmul(a, b), [(4,), (4,)], False),
    "transpose": (lambda a: weighted(T.transpose(a)), [(3, 2)], False),
    "add": (lambda a, b: weighted(T.add(a, b)), [(2, 3), (2, 3)], False),
    "sub": (lambda a, b: weighted(T.sub(a, b)), [(2, 3), (2, 3)], False),
    "add_row": (lambda a, b: weighted(T.add_row(a, b)), [(2, 3), (3,)], False),
    "mul": (lambda a, b: weighted(T.mul(a, b)), [(2, 3), (2, 3)], False),
    "scale": (lambda a: weighted(T.scale(a, -1.7)), [(4,)], False),
    "div_rows": (lambda a, b: weighted(T.div_rows(a, b)), [(3, 2), (3,)], True),
    "exp": (lambda a: weighted(T.exp(a)), [(2, 3)], False),
    "log": (lambda a: weighted(T.log(a)), [(2, 3)], True),
    "gelu": (lambda a: weighted(T.gelu(a)), [(2, 5)], False),
    "concat": (lambda a, b: weighted(T.concat([a, b], axis=1)), [(2, 3), (2, 2)], False),
    "stack": (lambda a, b: weighted(T.stack([a, b])), [(3,), (3,)], False),
    "slice": (lambda a: weighted(a[1:3, ::2]), [(4, 5)], False),
    "take_rows": (lambda a: weighted(a[np.array([2, 0, 2])]), [(3, 2)], False),
    "embedding_lookup": (lambda a: weighted(T.embedding_lookup(a, np.array([1, 1, 3]))), [(4, 3)], False),
    "sum": (lambda a: weighted(T.sum(a, axis=0)), [(3, 2)], False),
    "mean": (lambda a: weighted(T.mean(a, axis=1)), [(3, 2)], False),
    "layer_norm": (lambda a, g, b: weighted(T.layer_norm(a, g, b)), [(3, 4), (4,), (4,)], False),
    "softmax_rows": (lambda a: weighted(T.softmax_rows(a)), [(3, 4)], False),
    "cross_entropy_rows": (lambda a: weighted(T.cross_entropy_rows(a, np.array([0, 3, 1]))), [(3, 4)], False),
    "cosine_similarity_rows": (lambda a, b: weighted(T.cosine_similarity_rows(a, b)), [(3, 4), (2, 4)], False),
    "min_max_normalize_rows": (lambda a: weighted(T.min_max_normalize_rows(a)), [(2, 5)], False),
    "threshold_rows": (lambda a: weighted(T.threshold_rows(T.min_max_normalize_rows(a), 0.3)), [(2, 6)], False),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", range(5))
def test_primitive_gradients(name, seed):
    build, shapes, positive = PRIMITIVES[name]
    check_grad(build, *shapes, rng=np.random.default_rng(seed), positive=positive)


def test_random_three_layer_composition():
    rng = np.random.default_rng(9)

    def f(x, w1, w2, w3):
        h = T.gelu(T.matmul(x, w1))
        h = T.layer_norm(T.matmul(h, w2))
        return T.mean(T.cross_entropy_rows(T.matmul(h, w3), np.array([0, 2, 1, 1])))

    check_grad(f, (4, 5), (5, 6), (6, 6), (6, 3), rng=rng)


def test_documented_values():
    assert T.softmax_rows(Tensor([[0.0, 0.0]])).data.tolist() == [[0.5, 0.5]]
    assert T.gelu(Tensor([0.0])).data.tolist() == [0.0]
    assert np.all(T.layer_norm(Tensor([[3.0, 3.0, 3.0]])).data == 0.0)
    assert T.min_max_normalize_rows(Tensor([[2.0, 4.0, 6.0]])).data.tolist() == [[0.0, 0.5, 1.0]]
    assert T.threshold_rows(Tensor([[0.0, 0.2, 0.5, 1.0]]), 0.3).data.tolist() == [[0.0, 0.0, 0.5, 1.0]]
    logits = np.zeros((1, 4))
    logits[0, 2] = 20.0
    assert T.cross_entropy_rows(Tensor(logits), [2]).item() < 1e-8


def test_gelu_tanh_constants():
    x = 1.3
    expected = 0.5 * x * (1 + math.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))
    assert T.gelu(Tensor([x])).data[0] == pytest.approx(expected, abs=1e-15)


def test_backward_examples():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    with Tape():
        T.backward(T.sum(x))
    assert x.grad.tolist() == [1.0, 1.0, 1.0]
    x.grad = None
    with Tape():
        T.backward(T.matmul(x, x))
    assert x.grad.tolist() == [2.0, -4.0, 6.0]


def test_gradient_accumulates_over_reuse():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with Tape():
        T.backward(T.sum(T.add(T.mul(x, x), x)))
    assert x.grad.tolist() == [5.0]


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        v = T.scale(x, 2.0)
        with pytest.raises(NotScalar):
            T.backward(v)
        s = T.sum(x)
        T.backward(s)
        with pytest.raises(DetachedTensor):
            T.backward(s)
    with pytest.raises(DetachedTensor):
        T.backward(T.sum(x))


def test_tape_append_order_is_topological():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = T.exp(x)
        z = T.sum(T.mul(y, x))
        assert len(tape) == 3
        assert [n[0] for n in tape.nodes] == [y, tape.nodes[1][0], z]
        assert all(p._index < node._index for node, parents, *_ in tape.nodes for p in parents if p._tape is tape)


def test_no_tape_means_no_recording():
    x = Tensor(np.ones(2), requires_grad=True)
    y = T.exp(x)
    assert not y.requires_grad and y.is_leaf


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeMismatch):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))
    with pytest.raises(ShapeMismatch):
        T.cosine_similarity_rows(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))


def test_nonfinite_debug_flag():
    with np.errstate(all="ignore"):
        assert np.isnan(T.log(Tensor([-1.0])).data[0])
        with T.debug_nonfinite(), pytest.raises(NonFinite):
            T.log(Tensor([-1.0]))


def test_corrupt_backward_hook_changes_gradient():
    x = Tensor(np.array([0.3, -0.2]), requires_grad=True)
    with Tape():
        T.backward(T.sum(T.gelu(x)))
    clean = x.grad.copy()
    x.grad = None
    with T.corrupt_backward("gelu"), Tape():
        T.backward(T.sum(T.gelu(x)))
    assert np.allclose(x.grad, 1.5 * clean)


def test_degenerate_row_counter():
    from collections import Counter

    counters = Counter()
    out = T.min_max_normalize_rows(Tensor([[1.0, 1.0, 1.0], [0.0, 1.0, 2.0]]), counters)
    assert out.data[0].tolist() == [0.0, 0.0, 0.0]
    assert counters["degenerate_rows"] == 1


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 8)),
                     elements=st.floats(-50, 50, allow_nan=False))


@given(finite_rows)
def test_softmax_rows_sum_to_one(x):
    assert np.all(np.abs(T.softmax_rows(Tensor(x)).data.sum(axis=1) - 1.0) < 1e-12)


@given(finite_rows)
def test_layer_norm_moments(x):
    assume(np.all(np.ptp(x, axis=1) > 1e-3))  # constant rows normalize to zeros by definition
    y = T.layer_norm(Tensor(x)).data
    assert np.all(np.abs(y.mean(axis=1)) < 1e-10)
    assert np.all(np.abs(y.var(axis=1) - 1.0) < 1e-8)


@given(finite_rows)
def test_min_max_range(x):
    y = T.min_max_normalize_rows(Tensor(x)).data
    assert np.all((y >= 0) & (y <= 1))
    for row_in, row_out in zip(x, y):
        if np.ptp(row_in) > 0:
            assert row_out.min() == 0.0 and row_out.max() == 1.0
