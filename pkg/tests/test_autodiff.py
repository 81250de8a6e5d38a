import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ttt4rec.autodiff import NonFiniteError, ShapeError, Trace, grad_check


def test_rmsnorm_of_constant_vector():
    tr = Trace()
    out = tr.rmsnorm(tr.const([3.0, 3.0, 3.0]), tr.const(np.ones(3)), eps=0.0)
    np.testing.assert_array_equal(out.value, [1.0, 1.0, 1.0])


def test_matmul_identity():
    tr = Trace()
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(tr.matmul(tr.const(np.eye(2)), tr.const(A)).value, A)


def test_dot():
    tr = Trace()
    assert tr.dot(tr.const([1.0, 2.0, 3.0]), tr.const([4.0, 5.0, 6.0])).value == 32.0


def test_generic_op_entry_point():
    tr = Trace()
    a = tr.leaf([[1.0, 2.0]])
    out = tr.op("matmul", a, tr.const([[1.0], [1.0]]))
    assert out.value.shape == (1, 1) and out.value[0, 0] == 3.0
    with pytest.raises(ValueError, match="unknown primitive"):
        tr.op("conv2d", a)


def test_shape_error_names_kind_and_shapes():
    tr = Trace()
    with pytest.raises(ShapeError) as info:
        tr.matmul(tr.const(np.ones((2, 3))), tr.const(np.ones((2, 3))))
    msg = str(info.value)
    assert "matmul" in msg and "(2, 3)" in msg
    with pytest.raises(ShapeError, match="add"):
        tr.add(tr.const(np.ones(3)), tr.const(np.ones(4)))


def test_square_derivative():
    tr = Trace()
    x = tr.leaf(3.0)
    y = x * x
    assert tr.backward(y)[x.id] == pytest.approx(6.0)


def test_reconstruction_gradient_at_zero():
    # d/dW ||W k - v||^2 = 2 (W k - v) k^T = -2 at W=0, k=v=1
    tr = Trace()
    W = tr.leaf([[0.0]])
    loss = tr.sqnorm(tr.sub(tr.matmul(W, tr.const([[1.0]])), tr.const([[1.0]])))
    np.testing.assert_allclose(tr.backward(loss)[W.id], [[-2.0]])


def test_constant_output_gives_zero_gradients():
    tr = Trace()
    a = tr.leaf(np.ones((2, 2)))
    b = tr.leaf(np.ones(3))
    c = tr.sum(tr.const(np.ones(4)))
    g = tr.backward(c)
    np.testing.assert_array_equal(g[a.id], np.zeros((2, 2)))
    np.testing.assert_array_equal(g[b.id], np.zeros(3))


def test_backward_needs_scalar():
    tr = Trace()
    with pytest.raises(ValueError, match="scalar"):
        tr.backward(tr.leaf(np.ones(2)))


def test_debug_mode_flags_non_finite():
    tr = Trace(debug=True)
    with pytest.raises(NonFiniteError):
        tr.scale(tr.leaf([1e308]), 10.0)


def test_trace_inputs_precede_nodes():
    tr = Trace()
    x = tr.leaf(np.ones((2, 2)))
    y = tr.gelu(tr.matmul(x, x))
    tr.sum(tr.mul(y, x))
    for i, node in enumerate(tr.nodes):
        assert all(j < i for j in node.inputs)


def test_grad_check_exact_for_linear():
    a = np.array([0.5, -1.0, 2.0])
    err = grad_check(lambda tr, v: tr.dot(tr.const(a), v["x"]), {"x": np.array([1.0, 2.0, 3.0])}, epsilon=1e-3)
    assert err <= 1e-9


def test_grad_check_reconstruction_4x4(rng):
    pt = {"W": rng.normal(size=(4, 4)), "k": rng.normal(size=(4, 1)), "v": rng.normal(size=(4, 1))}
    err = grad_check(lambda tr, p: tr.sqnorm(tr.sub(tr.matmul(p["W"], p["k"]), p["v"])), pt, 1e-5)
    assert err <= 1e-6


def test_grad_check_rejects_bad_epsilon():
    with pytest.raises(ValueError):
        grad_check(lambda tr, v: tr.sum(v["x"]), {"x": np.ones(2)}, epsilon=0.1)


def test_grad_check_reports_non_finite_coordinate():
    def f(tr, v):
        # log-free blowup: scale pushes values past float range after perturbation
        return tr.sum(tr.scale(tr.mul(v["x"], v["x"]), 1e308))

    with pytest.raises(NonFiniteError, match=r"x\[0\]"):
        grad_check(f, {"x": np.array([1.5])}, 1e-5)


# --- per-primitive finite-difference property (>= 100 seeds each) -----------

def _prim(kind):
    """Scalar function exercising one primitive; the random readout weights make
    every output coordinate matter."""

    def f(tr, v):
        if kind == "matmul":
            out = tr.matmul(v["a"], v["b"])
        elif kind == "batched_matmul":
            out = tr.matmul(v["a3"], v["b"])
        elif kind == "add":
            out = tr.add(v["a"], v["bias"])
        elif kind == "sub":
            out = tr.sub(v["a"], v["a2"])
        elif kind == "mul":
            out = tr.mul(v["a"], v["a2"])
        elif kind == "scale":
            out = tr.scale(v["a"], -1.7)
        elif kind == "sigmoid":
            out = tr.sigmoid(v["a"])
        elif kind == "relu":
            out = tr.relu(v["a"])
        elif kind == "gelu":
            out = tr.gelu(v["a"])
        elif kind == "softplus":
            out = tr.softplus(v["a"])
        elif kind == "rmsnorm":
            out = tr.rmsnorm(v["a"], v["gain"], 1e-6)
        elif kind == "sum":
            out = tr.sum(v["a"], axis=0)
        elif kind == "sqnorm":
            return tr.sqnorm(v["a"])
        elif kind == "dot":
            return tr.sum(tr.dot(v["a"], v["a2"]))
        elif kind == "gather":
            out = tr.gather(v["a"], np.array([[2, 0], [2, 1]]))
        elif kind == "slice":
            out = tr.slice(v["a"], (slice(None), 1))
        elif kind == "reshape":
            out = tr.reshape(v["a"], (-1,))
        elif kind == "transpose":
            out = tr.transpose(v["a"])
        else:
            raise KeyError(kind)
        w = np.random.default_rng(99).normal(size=out.shape)
        return tr.sum(tr.mul(out, w))

    return f


PRIMITIVES = ["matmul", "batched_matmul", "add", "sub", "mul", "scale", "sigmoid", "relu", "gelu",
              "softplus", "rmsnorm", "sum", "sqnorm", "dot", "gather", "slice", "reshape", "transpose"]

INPUTS = {
    "matmul": ("a", "b"), "batched_matmul": ("a3", "b"), "add": ("a", "bias"), "sub": ("a", "a2"),
    "mul": ("a", "a2"), "rmsnorm": ("a", "gain"), "dot": ("a", "a2"),
}


def _point(seed):
    r = np.random.default_rng(seed)
    a = r.normal(size=(3, 4))
    # keep relu away from its kink so central differences are valid
    a = np.where(np.abs(a) < 1e-3, 0.1, a)
    return {
        "a": a, "a2": r.normal(size=(3, 4)), "b": r.normal(size=(4, 2)),
        "a3": r.normal(size=(2, 3, 4)), "bias": r.normal(size=(4,)), "gain": r.normal(size=(4,)),
    }


@pytest.mark.parametrize("kind", PRIMITIVES)
def test_primitive_gradients_match_finite_differences(kind):
    f = _prim(kind)
    worst = 0.0
    for seed in range(100):
        full = _point(seed)
        pt = {k: full[k] for k in INPUTS.get(kind, ("a",))}
        worst = max(worst, grad_check(f, pt, 1e-5))
    assert worst <= 1e-6, f"{kind}: {worst:.2e}"


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_backward_is_linear_in_summed_outputs(seed):
    r = np.random.default_rng(seed)
    x0, W0 = r.normal(size=(3,)), r.normal(size=(3, 3))

    def build():
        tr = Trace()
        x, W = tr.leaf(x0), tr.leaf(W0)
        y1 = tr.sqnorm(tr.matmul(W, tr.reshape(x, (3, 1))))
        y2 = tr.sum(tr.gelu(x))
        return tr, x, W, y1, y2

    tr, x, W, y1, y2 = build()
    g_sum = tr.backward(tr.add(y1, y2))
    tr1, x1, W1, a1, _ = build()
    tr2, x2, W2, _, b2 = build()
    g1, g2 = tr1.backward(a1), tr2.backward(b2)
    np.testing.assert_allclose(g_sum[x.id], g1[x1.id] + g2[x2.id], rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(g_sum[W.id], g1[W1.id] + g2[W2.id], rtol=1e-12, atol=1e-12)


def test_forward_is_deterministic(rng):
    A, B = rng.normal(size=(5, 5)), rng.normal(size=(5,))

    def run():
        tr = Trace()
        return tr.rmsnorm(tr.gelu(tr.matmul(tr.leaf(A), tr.leaf(A))), tr.leaf(B)).value

    assert run().tobytes() == run().tobytes()
