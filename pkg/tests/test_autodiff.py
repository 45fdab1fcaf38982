import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from georecon import autodiff as ad
from georecon.autodiff import ADError, Tape, Tensor


def two_layer(params, x):
    h = ad.tanh(ad.matmul(x, params["w1"]) + ad.broadcast_to(params["b1"], (x.shape[0], params["w1"].shape[1])))
    return ad.matmul(h, params["w2"])


def test_backward_square_sum():
    with Tape():
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        grads = ad.backward((x * x).sum())
    np.testing.assert_array_equal(grads[x], [2.0, 4.0, 6.0])
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_backward_constant_root_is_empty():
    with Tape():
        assert ad.backward(Tensor(5.0)) == {}


def test_backward_rejects_non_scalar_and_detached():
    with Tape():
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ADError):
            ad.backward(x * x)
    y = Tensor([1.0], requires_grad=True)
    detached = (y * y).sum()
    with pytest.raises(ADError):
        ad.backward(detached)


def test_no_implicit_broadcasting():
    with pytest.raises(ADError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones(3))
    # scalar-tensor is allowed
    assert (Tensor(np.ones(3)) * 2.0).shape == (3,)


def test_mse_two_layer_matches_finite_differences():
    rng = np.random.default_rng(0)
    params = {"w1": rng.standard_normal((4, 5)), "b1": rng.standard_normal(5), "w2": rng.standard_normal((5, 2))}
    x = rng.standard_normal((1, 4))
    y = rng.standard_normal((1, 2))

    def loss(p):
        d = two_layer(p, Tensor(x)) - y
        return ad.mean(d * d)

    with Tape():
        leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
        grads = ad.backward(loss(leaves))
    h = 1e-5
    for k, v in params.items():
        fd = np.zeros_like(v)
        for i in np.ndindex(v.shape):
            plus = {kk: vv.copy() for kk, vv in params.items()}
            minus = {kk: vv.copy() for kk, vv in params.items()}
            plus[k][i] += h
            minus[k][i] -= h
            fd[i] = (float(loss({a: Tensor(b) for a, b in plus.items()}).data)
                     - float(loss({a: Tensor(b) for a, b in minus.items()}).data)) / (2 * h)
        g = grads[leaves[k]]
        assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(fd)


# every primitive against central differences, forward and reverse
PRIMITIVES = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (b * b + 1.0),
    "relu": lambda a, b: ad.relu(a) * b,
    "silu": lambda a, b: ad.silu(a) + b,
    "tanh": lambda a, b: ad.tanh(a * b),
    "exp": lambda a, b: ad.exp(a) - b,
    "sqrt": lambda a, b: ad.sqrt(a * a + 1.0) * b,
    "cos": lambda a, b: ad.cos(a) * b,
    "pow": lambda a, b: (a * a + 1.0) ** 1.5 + b,
    "cross": lambda a, b: ad.cross(ad.reshape(a, (2, 3)), ad.reshape(b, (2, 3))).reshape(6),
    "norm": lambda a, b: ad.broadcast_to(ad.norm(ad.reshape(a, (2, 3)), axis=1, keepdims=True), (2, 3)).reshape(6) * b,
    "matmul": lambda a, b: ad.matmul(ad.reshape(a, (2, 3)), ad.reshape(b, (3, 2))).reshape(4),
    "sum_mean": lambda a, b: ad.concat([ad.sum(a * b, keepdims=True).reshape(1), ad.mean(ad.reshape(a, (2, 3)), axis=0)]),
    "slice_take": lambda a, b: ad.concat([a[1:4], ad.take(ad.reshape(b, (3, 2)), [2, 0, 2], axis=0).reshape(6)]),
    "transpose": lambda a, b: ad.transpose(ad.reshape(a * b, (2, 3))).reshape(6),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_jvp_vjp_against_fd(name):
    fn = PRIMITIVES[name]
    rng = np.random.default_rng(hash(name) % 2**32)
    b_val = rng.standard_normal(6)

    def f(x):
        return fn(x, Tensor(b_val))

    x = rng.standard_normal(6)
    v = rng.standard_normal(6)
    fd = ad.jvp_fd(lambda z: f(Tensor(z)).data, x, v)
    np.testing.assert_allclose(ad.jvp(f, x, v), fd, rtol=1e-6, atol=1e-8)
    u = rng.standard_normal(fd.shape)
    assert ad.vjp(f, x, u) @ v == pytest.approx(u @ fd, rel=1e-6, abs=1e-8)


def test_jvp_vjp_identity_and_linear():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(4)
    v = rng.standard_normal(4)
    np.testing.assert_allclose(ad.jvp(lambda t: t * 1.0, x, v), v)
    np.testing.assert_allclose(ad.vjp(lambda t: t * 1.0, x, v), v)
    a = rng.standard_normal((3, 4))
    lin = lambda t: ad.matmul(ad.reshape(t, (1, 4)), Tensor(a.T)).reshape(3)
    np.testing.assert_allclose(ad.jvp(lin, x, np.eye(4)[0]), a[:, 0], rtol=1e-14)
    np.testing.assert_allclose(ad.vjp(lin, x, np.eye(3)[0]), a[0], rtol=1e-14)


def test_jvp_dimension_mismatch():
    with pytest.raises(ADError):
        ad.jvp(lambda t: t * 2.0, np.ones(3), np.ones(4))
    with pytest.raises(ADError):
        ad.vjp(lambda t: t * 2.0, np.ones(3), np.ones(4))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_jvp_nonfinite_output_raises():
    with pytest.raises(ADError):
        ad.jvp(lambda t: ad.exp(t * 1e4), np.ones(2), np.ones(2))


def test_jvp_matches_dense_fd_jacobian_of_trained_net():
    rng = np.random.default_rng(2)
    p = {"w1": rng.standard_normal((5, 7)), "b1": rng.standard_normal(7), "w2": rng.standard_normal((7, 3))}
    # a few plain gradient steps so the net is not at initialisation
    xs, ys = rng.standard_normal((16, 5)), rng.standard_normal((16, 3))
    for _ in range(20):
        with Tape():
            lv = {k: Tensor(v, requires_grad=True) for k, v in p.items()}
            d = two_layer(lv, Tensor(xs)) - ys
            g = ad.backward(ad.mean(d * d))
        p = {k: p[k] - 0.1 * g[lv[k]] for k in p}
    f = lambda t: two_layer({k: Tensor(v) for k, v in p.items()}, ad.reshape(t, (1, 5))).reshape(3)
    x = rng.standard_normal(5)
    jac = np.stack([ad.jvp_fd(lambda z: f(Tensor(z)).data, x, e) for e in np.eye(5)], axis=1)
    v = rng.standard_normal(5)
    out = ad.jvp(f, x, v)
    assert np.linalg.norm(out - jac @ v) <= 1e-4 * np.linalg.norm(jac @ v)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), width=st.integers(1, 12), depth=st.integers(1, 3))
def test_adjoint_identity(seed, width, depth):
    rng = np.random.default_rng(seed)
    n_in, n_out = rng.integers(1, 8), rng.integers(1, 8)
    sizes = [n_in] + [width] * depth + [n_out]
    ws = [rng.standard_normal((a, b)) / np.sqrt(a) for a, b in zip(sizes[:-1], sizes[1:])]
    assert sum(w.size for w in ws) <= 500

    def f(t):
        h = ad.reshape(t, (1, n_in))
        for j, w in enumerate(ws):
            h = ad.matmul(h, Tensor(w))
            if j < len(ws) - 1:
                h = ad.silu(h)
        return h.reshape(n_out)

    x, v, u = rng.standard_normal(n_in), rng.standard_normal(n_in), rng.standard_normal(n_out)
    lhs = u @ ad.jvp(f, x, v)
    rhs = ad.vjp(f, x, u) @ v
    assert abs(lhs - rhs) <= 1e-6 * max(abs(lhs), abs(rhs), 1e-12)


def test_backward_is_linear_in_roots():
    rng = np.random.default_rng(4)
    x0 = rng.standard_normal(5)

    def grad_of(build):
        with Tape():
            x = Tensor(x0, requires_grad=True)
            return ad.backward(build(x))[x]

    f = lambda x: ad.sum(ad.tanh(x) * x)
    g = lambda x: ad.sum(ad.exp(x * 0.3))
    combo = grad_of(lambda x: f(x) * 2.5 + g(x) * -0.7)
    np.testing.assert_allclose(combo, 2.5 * grad_of(f) - 0.7 * grad_of(g), rtol=0, atol=1e-12)


def test_tape_is_topological_and_replay_deterministic():
    rng = np.random.default_rng(5)
    x0 = rng.standard_normal((3, 4))
    w0 = rng.standard_normal((4, 2))
    outs = []
    for _ in range(2):
        with Tape() as tape:
            x = Tensor(x0, requires_grad=True)
            y = ad.sum(ad.silu(ad.matmul(x, Tensor(w0))) * 3.0)
        position = {n.uid: i for i, n in enumerate(tape.nodes)}
        for node in tape.nodes:
            for p in node.parents:
                assert p.tape is None or position[p.uid] < position[node.uid]
        outs.append(y.data.tobytes())
    assert outs[0] == outs[1]


def test_check_gradients_passes_on_linear_regression():
    rng = np.random.default_rng(6)
    xs, ys = rng.standard_normal((20, 3)), rng.standard_normal(20)

    def loss(p):
        pred = ad.matmul(Tensor(xs), ad.reshape(p["w"], (3, 1))).reshape(20) + ad.broadcast_to(p["b"], (20,))
        d = pred - ys
        return ad.mean(d * d)

    rep = ad.check_gradients(loss, {"w": rng.standard_normal(3), "b": np.array(0.3)}, 1e-4)
    assert rep.passed and set(rep) == {"w", "b"}


def test_check_gradients_empty_params():
    rep = ad.check_gradients(lambda p: Tensor(1.0), {}, 1e-4)
    assert rep == {} and rep.passed


def test_check_gradients_flags_corrupted_rule(monkeypatch):
    real_tanh = ad.tanh

    def bad_tanh(a):
        out = real_tanh(a)
        if out._vjp is not None:
            fn = out._vjp
            out._vjp = lambda g: tuple(2.0 * x for x in fn(g))
        return out

    monkeypatch.setattr(ad, "tanh", bad_tanh)
    rep = ad.check_gradients(lambda p: ad.sum(ad.tanh(p["w"])), {"w": np.array([0.1, -0.4])}, 1e-4)
    assert not rep.passed and rep.failures == ["w"]
