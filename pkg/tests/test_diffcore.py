import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tshamo import diffcore as dc
from tshamo.diffcore import Tape, Tensor

from conftest import check_grads


def test_matmul_identity():
    a = np.array([[1.5, -2.0], [0.25, 4.0]])
    np.testing.assert_array_equal(dc.matmul(np.eye(2), a).data, a)


def test_softmax_uniform():
    np.testing.assert_allclose(dc.softmax(np.zeros(3)).data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_gelu_exact_erf():
    # x * Phi(x) via math.erf
    want = 1.0 * 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
    assert abs(dc.gelu(np.array([1.0])).data[0] - want) < 1e-15
    assert abs(want - 0.8413) < 1e-4


def test_tanh_values():
    x = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_allclose(dc.tanh(x).data, np.tanh(x))


def test_sum_backward_is_ones():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = dc.sum(x)
    np.testing.assert_array_equal(tape.backward(loss)[x].data, [1.0, 1.0, 1.0])


def test_mse_gradient_by_hand():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = dc.squared_error(x, Tensor([0.0, 0.0]))
    # d/dx_i mean((x - y)^2) = 2 (x_i - y_i) / n
    np.testing.assert_allclose(tape.backward(loss)[x].data, [1.0, 2.0])


def test_fan_out_accumulates():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = dc.sum(x * x + x)
    assert tape.backward(loss)[x].data[0] == pytest.approx(7.0)


def test_backward_errors():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = x * x
        loss = dc.sum(y)
    with pytest.raises(dc.TapeError):
        tape.backward(y)
    tape.backward(loss)
    with pytest.raises(dc.TapeError):
        tape.backward(loss)
    tape.reset()


def test_shape_error_names_primitive():
    with pytest.raises(dc.ShapeError, match="matmul"):
        dc.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(dc.ShapeError, match="add"):
        dc.add(np.ones((2, 3)), np.ones((3, 2)))


def test_non_finite_is_hard_error():
    with pytest.raises(dc.NonFiniteError), np.errstate(over="ignore"):
        dc.scale(np.array([1e308]), 10.0)
    with pytest.raises(dc.NonFiniteError):
        Tensor([np.nan])


def test_no_grad_outside_tape_and_for_constants():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([5.0, 5.0])
    with Tape() as tape:
        loss = dc.sum(x * c)
    g = tape.backward(loss)
    assert c not in g
    y = x * x
    assert y._tape is None


# --- finite-difference checks for every primitive

rng = np.random.default_rng(0)


def R(*shape):
    return rng.standard_normal(shape)


PRIMITIVE_CASES = {
    "matmul": (lambda t: dc.sum(dc.matmul(t["a"], t["b"]) * t["w"]), dict(a=R(3, 3), b=R(3, 2), w=R(3, 2))),
    "matmul_batched": (lambda t: dc.sum(dc.matmul(t["a"], t["b"]) * t["w"]),
                       dict(a=R(2, 3, 3), b=R(3, 3), w=R(2, 3, 3))),
    "add": (lambda t: dc.sum((t["a"] + t["b"]) * t["a"]), dict(a=R(3, 3), b=R(3))),
    "subtract": (lambda t: dc.sum((t["a"] - t["b"]) * t["a"]), dict(a=R(3, 3), b=R(3, 3))),
    "multiply": (lambda t: dc.sum(t["a"] * t["b"]), dict(a=R(3, 3), b=R(3, 3))),
    "scale": (lambda t: dc.sum(dc.scale(t["a"], -2.5) * t["a"]), dict(a=R(3, 3))),
    "sum": (lambda t: dc.sum(dc.sum(t["a"], axis=0) * t["w"]), dict(a=R(3, 3), w=R(3))),
    "mean": (lambda t: dc.sum(dc.mean(t["a"], axis=1, keepdims=True) * t["w"]), dict(a=R(3, 3), w=R(3, 1))),
    "concat": (lambda t: dc.sum(dc.concat([t["a"], t["b"]], axis=1) * t["w"]),
               dict(a=R(3, 3), b=R(3, 2), w=R(3, 5))),
    "slice": (lambda t: dc.sum(t["a"][1:, ::2] * t["w"]), dict(a=R(3, 3), w=R(2, 2))),
    "reshape": (lambda t: dc.sum(t["a"].reshape(9) * t["w"]), dict(a=R(3, 3), w=R(9))),
    "transpose": (lambda t: dc.sum(t["a"].transpose(1, 0) * t["w"]), dict(a=R(3, 3), w=R(3, 3))),
    "gelu": (lambda t: dc.sum(dc.gelu(t["a"]) * t["w"]), dict(a=R(3, 3), w=R(3, 3))),
    "tanh": (lambda t: dc.sum(dc.tanh(t["a"]) * t["w"]), dict(a=R(3, 3), w=R(3, 3))),
    "softmax": (lambda t: dc.sum(dc.softmax(t["a"]) * t["w"]), dict(a=R(3, 3), w=R(3, 3))),
    "layer_norm": (lambda t: dc.sum(dc.layer_norm(t["a"], t["g"], t["b"]) * t["w"]),
                   dict(a=R(3, 3), g=R(3), b=R(3), w=R(3, 3))),
    "embedding": (lambda t: dc.sum(dc.embedding(t["a"], [0, 2, 2, 1]) * t["w"]), dict(a=R(3, 3), w=R(4, 3))),
    "squared_error": (lambda t: dc.squared_error(t["a"], t["b"], np.array([[1.0, 0, 1]] * 3)),
                      dict(a=R(3, 3), b=R(3, 3))),
    "cross_entropy": (lambda t: dc.cross_entropy(t["a"], [0, 2, 1]), dict(a=R(3, 3))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients(name):
    build, inputs = PRIMITIVE_CASES[name]
    assert check_grads(build, {k: v.copy() for k, v in inputs.items()}) <= 1e-4


UNARY = [dc.gelu, dc.tanh, dc.softmax, lambda a: a * a, lambda a: a.transpose(1, 0), lambda a: a[:, 1:]]


@settings(max_examples=25, deadline=None)
@given(ops=st.lists(st.integers(0, len(UNARY) - 1), min_size=1, max_size=3), seed=st.integers(0, 10_000))
def test_random_composites_match_finite_differences(ops, seed):
    r = np.random.default_rng(seed)

    def build(t):
        h = t["x"]
        for o in ops:
            h = UNARY[o](h)
        return dc.mean(h * h)

    assert check_grads(build, {"x": r.standard_normal((3, 3))}) <= 1e-4


def test_backward_is_linear():
    r = np.random.default_rng(4)
    x0 = r.standard_normal((3, 3))

    def grad(fn):
        x = Tensor(x0, requires_grad=True)
        with Tape() as tape:
            loss = fn(x)
        return tape.backward(loss)[x].data

    f = lambda x: dc.sum(dc.gelu(x))  # noqa: E731
    g = lambda x: dc.mean(dc.softmax(x) * x)  # noqa: E731
    both = grad(lambda x: dc.scale(f(x), 2.0) + dc.scale(g(x), -0.5))
    np.testing.assert_allclose(both, 2.0 * grad(f) - 0.5 * grad(g), rtol=1e-12, atol=1e-14)


def test_determinism_bit_identical():
    def run():
        r = np.random.default_rng(9)
        w = Tensor(r.standard_normal((4, 4)), requires_grad=True)
        with Tape() as tape:
            loss = dc.mean(dc.gelu(Tensor(r.standard_normal((2, 4))) @ w))
        return loss.data.copy(), tape.backward(loss)[w].data.copy()

    a, b = run(), run()
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_separate_tapes_on_threads():
    out = {}

    def work(k):
        x = Tensor(np.full(3, float(k)), requires_grad=True)
        with Tape() as tape:
            loss = dc.sum(x * x)
        out[k] = tape.backward(loss)[x].data

    threads = [threading.Thread(target=work, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for k in range(4):
        np.testing.assert_array_equal(out[k], 2.0 * k)


def test_adam_zero_grad_keeps_params_and_decays_moments():
    p = {"w": Tensor(np.array([1.0, -1.0]), requires_grad=True)}
    state = dc.adam_init(p)
    state.m["w"][:] = 0.5
    state.v["w"][:] = 0.25
    fresh = dc.adam_init(p)
    dc.adam_step(p, {"w": np.zeros(2)}, fresh, 1e-3)
    np.testing.assert_array_equal(p["w"].data, [1.0, -1.0])
    dc.adam_step(p, {"w": np.zeros(2)}, state, 0.0)
    np.testing.assert_allclose(state.m["w"], 0.45)
    np.testing.assert_allclose(state.v["w"], 0.25 * 0.999)


def test_adam_first_step_by_hand():
    p = {"w": Tensor(np.array([0.3]), requires_grad=True)}
    state = dc.adam_init(p)
    dc.adam_step(p, {"w": np.array([1.0])}, state, 1e-5)
    # m_hat = v_hat = 1 -> update = lr * 1 / (1 + eps)
    assert p["w"].data[0] == pytest.approx(0.3 - 1e-5 / (1 + 1e-8), abs=1e-15)


def test_adam_identical_params_identical_updates():
    p = {"a": Tensor(np.ones(3), requires_grad=True), "b": Tensor(np.ones(3), requires_grad=True)}
    state = dc.adam_init(p)
    g = np.array([0.1, -2.0, 3.0])
    for _ in range(3):
        dc.adam_step(p, {"a": g, "b": g}, state, 0.01)
    np.testing.assert_array_equal(p["a"].data, p["b"].data)


def test_adam_shape_mismatch():
    p = {"w": Tensor(np.ones(3), requires_grad=True)}
    with pytest.raises(dc.ShapeError):
        dc.adam_step(p, {"w": np.ones(2)}, dc.adam_init(p), 0.1)
