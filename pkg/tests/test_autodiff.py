import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chanadv import autodiff as ad
from chanadv.autodiff import AutodiffError, ShapeError, Tape, Tensor, gradcheck
from chanadv.losses import softmax_loss


def test_relu_sigmoid_add_values():
    assert ad.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert ad.sigmoid(Tensor([0.0])).data.tolist() == [0.5]
    assert ad.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data.tolist() == [4.0, 6.0]


def test_elementwise_dispatch():
    x = Tensor([1.0, 2.0])
    assert ad.elementwise("scale-by-constant", x, 3.0).data.tolist() == [3.0, 6.0]
    assert ad.elementwise("negate", x).data.tolist() == [-1.0, -2.0]
    assert ad.elementwise("mul", x, x).data.tolist() == [1.0, 4.0]
    with pytest.raises(ValueError):
        ad.elementwise("pow", x)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
        ad.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_matmul_examples():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(Tensor(np.eye(2)), a).data, a.data)
    assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_with_ones():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(np.ones((4, 2)))
    with Tape() as tape:
        loss = ad.sum_(ad.matmul(a, b))
    tape.backward(loss)
    # each entry of dL/dA is a row-sum of B (= 2 here)
    assert np.array_equal(tape.grad(a), np.full((3, 4), 2.0))
    assert gradcheck(lambda x: ad.sum_(ad.matmul(x, b)), a) <= 1e-8


def test_backward_examples():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(x)
    tape.backward(loss)
    assert np.array_equal(tape.grad(x), np.ones((2, 3)))

    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.sum_(ad.mul(x, x))
    grads = tape.backward(loss)
    assert tape.grad(x).tolist() == [2.0, 4.0]
    assert grads[loss.node_id].data == 1.0


def test_backward_rejects_non_scalar_and_second_call():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ad.scale(x, 2.0)
        loss = ad.sum_(y)
    with pytest.raises(AutodiffError):
        tape.backward(y)
    tape.backward(loss)
    with pytest.raises(AutodiffError):
        tape.backward(loss)


def test_unvisited_nodes_get_zero_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        unused = ad.exp(x)
        loss = ad.sum_(x)
    grads = tape.backward(loss)
    assert np.array_equal(grads[unused.node_id].data, np.zeros(2))


def test_tensor_from_other_tape_rejected():
    x = Tensor([1.0], requires_grad=True)
    with Tape():
        y = ad.scale(x, 2.0)
    with Tape():
        with pytest.raises(AutodiffError):
            ad.exp(y)


def test_no_tape_means_no_recording():
    x = Tensor([1.0], requires_grad=True)
    y = ad.exp(x)
    assert y.node_id is None and y.tape is None


def test_ops_do_not_mutate_input_shape():
    x = Tensor(np.ones((2, 3)), requires_grad=True)
    with Tape():
        ad.reshape(x, (3, 2))
        ad.transpose(x)
        ad.sum_(x, axis=0)
    assert x.shape == (2, 3)


def test_gradcheck_sum_is_exact():
    x = Tensor(np.random.default_rng(1).normal(size=(3, 3)))
    assert gradcheck(ad.sum_, x, 1e-5) <= 1e-10


def test_gradcheck_rejects_bad_eps():
    with pytest.raises(ValueError):
        gradcheck(ad.sum_, Tensor([1.0]), 0.1)


def test_gradcheck_rejects_non_finite():
    with pytest.raises(FloatingPointError), np.errstate(over="ignore"):
        gradcheck(lambda x: ad.sum_(ad.exp(ad.scale(x, 1e6))), Tensor([1.0]), 1e-5)


def test_gradcheck_softmax_loss():
    rng = np.random.default_rng(2)
    logits = Tensor(rng.normal(size=(4, 5)))
    labels = rng.integers(0, 5, size=4)
    assert gradcheck(lambda z: softmax_loss(z, labels), logits) <= 1e-4


UNARY = {
    "relu": ad.relu,
    "sigmoid": ad.sigmoid,
    "tanh": ad.tanh,
    "exp": ad.exp,
    "negate": ad.neg,
    "scale": lambda x: ad.scale(x, -1.7),
    "log": lambda x: ad.log(ad.exp(x)),
    "l2_normalize": lambda x: ad.l2_normalize(ad.reshape(x, (2, 3))),
    "transpose": lambda x: ad.transpose(ad.reshape(x, (2, 3))),
    "mean": lambda x: ad.mean(ad.reshape(x, (2, 3)), axis=1),
    "take": lambda x: ad.take(ad.reshape(x, (3, 2)), [0, 2, 2, 1]),
    "concat": lambda x: ad.concat([x, ad.scale(x, 2.0)], axis=0),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_gradcheck_every_op_at_five_points(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    f = UNARY[name]
    weights = rng.normal(size=64)
    for _ in range(5):
        x = rng.normal(size=6)
        x[np.abs(x) < 1e-3] = 0.5  # keep relu away from its kink
        out_w = None

        def loss(t):
            nonlocal out_w
            y = f(t)
            if out_w is None:
                out_w = Tensor(weights[: y.size].reshape(y.shape))
            return ad.sum_(ad.mul(y, out_w))

        assert gradcheck(loss, Tensor(x), 1e-5) <= 1e-4


@pytest.mark.parametrize("kind", ["add", "sub", "mul"])
def test_gradcheck_binary_ops(kind):
    rng = np.random.default_rng(3)
    for _ in range(5):
        a = Tensor(rng.normal(size=(2, 3)))
        b = Tensor(rng.normal(size=(2, 3)))
        w = Tensor(rng.normal(size=(2, 3)))
        f = lambda x: ad.sum_(ad.mul(ad.elementwise(kind, x, b), w))  # noqa: E731
        g = lambda x: ad.sum_(ad.mul(ad.elementwise(kind, a, x), w))  # noqa: E731
        assert gradcheck(f, a) <= 1e-4
        assert gradcheck(g, b) <= 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_composite_graph_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(size=(4, 3)) * 0.5)
    v = Tensor(rng.normal(size=(3, 2)))

    def f(x):
        h = ad.tanh(ad.matmul(x, v))
        h = ad.mul(h, ad.sigmoid(h))
        return ad.sum_(ad.exp(ad.scale(h, 0.3)))

    assert gradcheck(f, w) <= 1e-4
