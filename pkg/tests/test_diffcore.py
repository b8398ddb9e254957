import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from evicvr import diffcore as dc
from evicvr.diffcore import Tensor

from gradcheck import max_rel_error

floats = st.floats(-30, 30, allow_nan=False)


def test_matmul_identity_and_hand_case():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(dc.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)
    assert dc.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch_reports_dimensions():
    with pytest.raises(ValueError, match=r"\[2x3\] @ \[2x2\]"):
        dc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(-2, 2, (3, 4)), rng.uniform(-2, 2, (4, 2))
    assert max_rel_error(lambda x, y: dc.sum_(dc.matmul(x, y)), [a, b]) < 1e-4


def test_sigmoid_values_and_saturation():
    assert dc.sigmoid(Tensor(0.0)).item() == 0.5
    hi = dc.sigmoid(Tensor(500.0)).item()
    assert 1 - 1e-12 < hi < 1
    lo = dc.sigmoid(Tensor(-500.0)).item()
    assert 0 < lo < 1e-12
    assert np.all(np.isfinite(dc.sigmoid(Tensor(np.array([-1e4, 1e4]))).data))


def test_sigmoid_gradient_at_zero():
    w = Tensor(0.0, requires_grad=True)
    dc.backward(dc.sigmoid(w))
    assert w.grad == pytest.approx(0.25, abs=1e-15)
    assert max_rel_error(lambda x: dc.sum_(dc.sigmoid(x)), [np.array([0.0, 1.3, -0.7])]) < 1e-4


def test_softplus_values_and_gradient():
    assert dc.softplus(Tensor(0.0)).item() == pytest.approx(math.log(2), abs=1e-15)
    assert dc.softplus(Tensor(50.0)).item() == pytest.approx(50.0, abs=1e-12)
    x = np.array([-1.5, 0.2, 1.9])
    t = Tensor(x, requires_grad=True)
    dc.backward(dc.sum_(dc.softplus(t)))
    assert np.allclose(t.grad, dc.sigmoid(Tensor(x)).data, rtol=0, atol=1e-15)
    assert max_rel_error(lambda z: dc.sum_(dc.softplus(z)), [x]) < 1e-4


def test_softmax_examples():
    assert np.allclose(dc.softmax(Tensor([0.0, 0.0, 0.0])).data, 1 / 3, atol=1e-15)
    out = dc.softmax(Tensor([2.0, 2.0 + 800.0])).data
    assert out[1] == pytest.approx(1.0) and out[0] < 1e-300
    x = np.array([0.3, -1.2, 2.5, 0.0])
    assert np.allclose(dc.softmax(Tensor(x)).data, dc.softmax(Tensor(x + 7.3)).data, rtol=0, atol=1e-12)


@given(arrays(np.float64, st.integers(1, 12), elements=floats))
def test_softmax_sums_to_one_and_is_shift_invariant(x):
    out = dc.softmax(Tensor(x)).data
    assert np.all(out >= 0)
    assert abs(out.sum() - 1) < 1e-12
    assert np.allclose(out, dc.softmax(Tensor(x + 7.3)).data, rtol=0, atol=1e-12)


@given(floats, floats)
def test_sigmoid_and_softplus_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    if hi - lo < 1e-9:
        return
    assert dc.sigmoid(Tensor(lo)).item() <= dc.sigmoid(Tensor(hi)).item()
    assert dc.softplus(Tensor(lo)).item() < dc.softplus(Tensor(hi)).item()


def test_sigmoid_strictly_monotone_on_moderate_inputs():
    x = np.sort(np.random.default_rng(1).uniform(-30, 30, 500))
    assert np.all(np.diff(dc.sigmoid(Tensor(x)).data) > 0)


def test_binary_cross_entropy_examples():
    assert dc.binary_cross_entropy(Tensor(0.5), Tensor(1.0)).item() == pytest.approx(math.log(2), abs=1e-15)
    for y in (0.0, 1.0):
        assert dc.binary_cross_entropy(Tensor(y), Tensor(y)).item() <= -math.log(1 - 1e-7) + 1e-15
    expected = -(0.3 * math.log(0.8) + 0.7 * math.log(0.2))
    assert expected == pytest.approx(1.193550, abs=1e-6)
    assert dc.binary_cross_entropy(Tensor(0.8), Tensor(0.3)).item() == pytest.approx(expected, abs=1e-12)


def test_binary_cross_entropy_gradient_soft_targets():
    rng = np.random.default_rng(2)
    p, y = rng.uniform(0.05, 0.95, 6), rng.uniform(0, 1, 6)
    assert max_rel_error(lambda a, b: dc.sum_(dc.binary_cross_entropy(a, b)), [p, y]) < 1e-4


def test_outer_product_examples():
    x, y, z = 1.5, -2.0, 0.25
    assert dc.outer_product(Tensor([1.0, 0.0]), Tensor([x, y, z])).data.tolist() == [x, y, z, 0, 0, 0]
    assert dc.outer_product(Tensor([2.0]), Tensor([3.0])).data.tolist() == [6.0]
    batched = dc.outer_product(Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0, 5.0]])).data
    assert batched.tolist() == [[3.0, 4.0, 5.0, 6.0, 8.0, 10.0]]


def test_outer_product_gradient():
    rng = np.random.default_rng(3)
    w = rng.uniform(-2, 2, 6)
    build = lambda a, b: dc.sum_(dc.outer_product(a, b) * Tensor(w))
    assert max_rel_error(build, [rng.uniform(-2, 2, 2), rng.uniform(-2, 2, 3)]) < 1e-4
    wb = rng.uniform(-2, 2, (4, 6))
    build_b = lambda a, b: dc.sum_(dc.outer_product(a, b) * Tensor(wb))
    assert max_rel_error(build_b, [rng.uniform(-2, 2, (4, 2)), rng.uniform(-2, 2, (4, 3))]) < 1e-4


def test_backward_linear_case():
    x = np.array([[1.0, -2.0, 0.5]])
    W = Tensor(np.ones((3, 2)), requires_grad=True)
    dc.backward(dc.sum_(dc.matmul(Tensor(x), W)))
    assert np.array_equal(W.grad, np.repeat(x.T, 2, axis=1))


def test_backward_product_rule():
    w = Tensor(0.0, requires_grad=True)
    dc.backward(dc.sigmoid(w) * w)
    assert w.grad == pytest.approx(0.5, abs=1e-15)


def test_backward_rejects_bad_roots():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        dc.backward(w * 2.0)
    with pytest.raises(ValueError, match="detached"):
        dc.backward(dc.sum_(Tensor(np.ones(3))))
    root = dc.sum_(w * w)
    dc.backward(root)
    with pytest.raises(RuntimeError):
        dc.backward(root)


def test_backward_visits_shared_nodes_once():
    w = Tensor(2.0, requires_grad=True)
    h = w * w
    dc.backward(h + h + h)
    assert w.grad == pytest.approx(12.0)


def test_detach_cuts_gradient_and_keeps_values():
    w = Tensor(np.array([0.3, -0.4]), requires_grad=True)
    g = dc.sigmoid(w)
    d = dc.detach(g)
    assert d.data.tobytes() == g.data.tobytes()
    root = dc.sum_(d * d) + dc.sum_(w) * 0.0
    dc.backward(root)
    assert np.array_equal(w.grad, np.zeros(2))


def test_detach_only_path_gives_zero_gradient():
    w = Tensor(1.0, requires_grad=True)
    f = dc.square(dc.detach(dc.sigmoid(w)))
    assert not f.requires_grad


def test_embedding_and_mixture_gradients():
    rng = np.random.default_rng(4)
    idx = np.array([0, 2, 2, 1])
    table = rng.uniform(-2, 2, (3, 2))
    weights = rng.uniform(-2, 2, (4, 2))
    assert max_rel_error(lambda t: dc.sum_(dc.embedding(t, idx) * Tensor(weights)), [table]) < 1e-4
    g = rng.uniform(-2, 2, (4, 3))
    e = rng.uniform(-2, 2, (4, 3, 5))
    wm = rng.uniform(-2, 2, (4, 5))
    build = lambda a, b: dc.sum_(dc.mix_experts(dc.softmax(a, axis=1), b) * Tensor(wm))
    assert max_rel_error(build, [g, e]) < 1e-4


def test_mixture_is_convex_combination():
    rng = np.random.default_rng(5)
    gates = dc.softmax(Tensor(rng.normal(size=(6, 4))), axis=1)
    experts = rng.normal(size=(6, 4, 3))
    out = dc.mix_experts(gates, Tensor(experts)).data
    assert np.allclose(out, np.einsum("be,beh->bh", gates.data, experts))
    assert np.all(out <= experts.max(axis=1) + 1e-12) and np.all(out >= experts.min(axis=1) - 1e-12)


def test_broadcast_add_gradient_sums_over_rows():
    b = Tensor(np.zeros(3), requires_grad=True)
    dc.backward(dc.sum_(Tensor(np.ones((4, 3))) + b))
    assert np.array_equal(b.grad, np.full(3, 4.0))


def test_tape_replay_is_deterministic():
    def run():
        rng = np.random.default_rng(9)
        W = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        x = Tensor(rng.normal(size=(7, 5)))
        p = dc.sigmoid(dc.sum_(dc.relu(dc.matmul(x, W)), axis=1))
        loss = dc.mean(dc.binary_cross_entropy(p, Tensor(rng.integers(0, 2, 7))))
        dc.backward(loss)
        return loss.data.tobytes(), W.grad.tobytes()

    assert run() == run()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_composite_graph_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2, 2, (4, 3))
    W1 = rng.uniform(-2, 2, (3, 5))
    W2 = rng.uniform(-2, 2, (5, 1))
    y = rng.integers(0, 2, 4).astype(float)

    def build(w1, w2):
        h = dc.softplus(dc.matmul(Tensor(x), w1))
        p = dc.sigmoid(dc.reshape(dc.matmul(h, w2), (4,)))
        return dc.mean(dc.binary_cross_entropy(p, Tensor(y)))

    assert max_rel_error(build, [W1, W2]) < 1e-4
