import math

import numpy as np
import pytest

from adaptst import tensor as T
from adaptst.tensor import DimensionError, Parameter, Tensor, TapeError


def naive_matmul(a, b):
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += float(a[i, t]) * float(b[t, j])
            out[i, j] = s
    return out


def naive_layer_norm(x, g, b, eps=1e-5):
    out = np.zeros(x.shape)
    for r in range(x.shape[0]):
        row = [float(v) for v in x[r]]
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        for c, v in enumerate(row):
            out[r, c] = (v - mu) / math.sqrt(var + eps) * float(g[c]) + float(b[c])
    return out


def naive_softmax(x):
    out = np.zeros(x.shape)
    for r in range(x.shape[0]):
        m = max(float(v) for v in x[r])
        e = [math.exp(float(v) - m) for v in x[r]]
        s = sum(e)
        out[r] = [v / s for v in e]
    return out


def naive_conv1d(x, w, b, stride, pad):
    B, Tn, Cin = x.shape
    K, _, Cout = w.shape
    xp = np.zeros((B, Tn + 2 * pad, Cin))
    xp[:, pad : pad + Tn] = x
    T_out = (Tn + 2 * pad - K) // stride + 1
    out = np.zeros((B, T_out, Cout))
    for bb in range(B):
        for t in range(T_out):
            for o in range(Cout):
                s = float(b[o])
                for k in range(K):
                    for c in range(Cin):
                        s += xp[bb, t * stride + k, c] * w[k, c, o]
                out[bb, t, o] = s
    return out


# ---------------------------------------------------------------------------
# forward values


def test_matmul_hand_cases():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((eye @ m).data, [[1, 2], [3, 4]])
    assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_naive_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
    got = T.matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(got, naive_matmul(a, b), rtol=1e-6, atol=1e-6)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError) as e:
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    assert "(2, 3)" in str(e.value) and "(4, 5)" in str(e.value)


def test_layer_norm_hand_cases():
    one, zero = Tensor(np.ones(4)), Tensor(np.zeros(4))
    out = T.layer_norm(Tensor(np.ones((1, 4))), one, zero)
    np.testing.assert_array_equal(out.data, np.zeros((1, 4)))
    out = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-6)


def test_layer_norm_scalar_loop_oracle():
    rng = np.random.default_rng(1)
    x, g, b = rng.standard_normal((3, 8)), rng.standard_normal(8), rng.standard_normal(8)
    got = T.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data
    np.testing.assert_allclose(got, naive_layer_norm(x, g, b), rtol=1e-5, atol=1e-6)


def test_layer_norm_dim_mismatch():
    with pytest.raises(DimensionError):
        T.layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


@pytest.mark.parametrize("seed", range(5))
def test_float32_ops_match_loop_oracles(seed):
    rng = np.random.default_rng(seed)
    m, k, n = rng.integers(1, 7, size=3)
    a = rng.standard_normal((m, k)).astype(np.float32)
    b = rng.standard_normal((k, n)).astype(np.float32)
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), rtol=1e-5, atol=1e-5)
    x = rng.standard_normal((m, 6)).astype(np.float32)
    g, bb = np.ones(6, np.float32), np.zeros(6, np.float32)
    np.testing.assert_allclose(T.layer_norm(Tensor(x), Tensor(g), Tensor(bb)).data, naive_layer_norm(x, g, bb), rtol=1e-5, atol=1e-5)
    np.testing.assert_allclose(T.softmax(Tensor(x)).data, naive_softmax(x), rtol=1e-5, atol=1e-7)


def test_cross_entropy_hand_cases():
    assert float(T.softmax_cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3]).data) == pytest.approx(math.log(4), abs=1e-6)
    logits = np.full((1, 5), -1e4)
    logits[0, 2] = 1e4
    assert float(T.softmax_cross_entropy(Tensor(logits), [2]).data) == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_explicit_exponential_oracle():
    rng = np.random.default_rng(3)
    logits, tgt = rng.standard_normal((2, 5)), [4, 1]
    want = 0.0
    for r, t in enumerate(tgt):
        z = sum(math.exp(float(v)) for v in logits[r])
        want -= math.log(math.exp(float(logits[r, t])) / z)
    want /= 2
    with T.precision(np.float64):
        got = float(T.softmax_cross_entropy(Tensor(logits), tgt).data)
    assert got == pytest.approx(want, rel=1e-12)


def test_cross_entropy_ignore_index_and_range():
    logits = Tensor(np.random.default_rng(0).standard_normal((3, 4)))
    full = float(T.softmax_cross_entropy(logits, [1, 2, 3]).data)
    part = float(T.softmax_cross_entropy(logits, [1, 0, 3], ignore_index=0).data)
    only = float(T.softmax_cross_entropy(Tensor(logits.data[[0, 2]]), [1, 3]).data)
    assert part == pytest.approx(only, rel=1e-6) and full != part
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(logits, [0, 4, 1])
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(logits, [0, -1, 1])


@pytest.mark.parametrize("seed", range(20))
def test_cross_entropy_shift_invariance(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((4, 7)) * 3
    shift = rng.uniform(-50, 50, size=(4, 1))
    tgt = rng.integers(0, 7, size=4)
    a = float(T.softmax_cross_entropy(Tensor(logits), tgt).data)
    b = float(T.softmax_cross_entropy(Tensor(logits + shift), tgt).data)
    assert b == pytest.approx(a, rel=1e-6)


def test_conv1d_naive_oracle():
    rng = np.random.default_rng(4)
    x, w, b = rng.standard_normal((2, 9, 3)), rng.standard_normal((5, 3, 4)), rng.standard_normal(4)
    with T.precision(np.float64):
        got = T.conv1d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=2).data
    np.testing.assert_allclose(got, naive_conv1d(x, w, b, 2, 2), rtol=1e-10, atol=1e-10)


# ---------------------------------------------------------------------------
# backward


def test_backward_quadratic_and_linear():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.backward((x * x).sum())
    np.testing.assert_allclose(x.grad, [2, 4, 6])
    A = np.arange(6.0).reshape(2, 3)
    x = Tensor(np.ones((3, 1)), requires_grad=True)
    T.backward((Tensor(A) @ x).sum())
    np.testing.assert_allclose(x.grad[:, 0], A.sum(axis=0))


def test_backward_errors():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(TapeError):
        T.backward(x * x)
    with pytest.raises(TapeError):
        T.backward(Tensor(3.0))


def test_grads_accumulate_until_zeroed():
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.backward((x * x).sum())
    T.backward((x * x).sum())
    np.testing.assert_allclose(x.grad, [4, 8])
    x.zero_grad()
    assert x.grad is None


def test_frozen_parameter_still_gets_grad():
    p = Parameter("w", Tensor(np.ones(3), requires_grad=True), trainable=False)
    T.backward((p.tensor * p.tensor).sum())
    np.testing.assert_allclose(p.grad, [2, 2, 2])


def _fd_max_err(f, arrays, h=1e-5):
    """Worst relative error between tape gradients and central differences over every element."""
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    T.backward(f(*ts))
    worst = 0.0
    for t in ts:
        flat = t.data.reshape(-1)
        g = t.grad.reshape(-1)
        for i in range(flat.size):
            o = flat[i]
            with T.no_grad():
                flat[i] = o + h
                fp = float(f(*ts).data)
                flat[i] = o - h
                fm = float(f(*ts).data)
            flat[i] = o
            num = (fp - fm) / (2 * h)
            worst = max(worst, abs(num - g[i]) / max(abs(num), abs(g[i]), 1e-6))
    return worst


def _weighted(y, w):
    return (y * Tensor(w)).sum()


PRIMITIVES = {
    "matmul": (lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((4, 3))], lambda w: (lambda a, b: _weighted(a @ b, w))),
    "layer_norm": (
        lambda r: [r.standard_normal((3, 5)), r.standard_normal(5), r.standard_normal(5)],
        lambda w: (lambda x, g, b: _weighted(T.layer_norm(x, g, b), w)),
    ),
    "softmax": (lambda r: [r.standard_normal((3, 5))], lambda w: (lambda x: _weighted(T.softmax(x), w))),
    "relu_exp_log": (
        lambda r: [r.uniform(0.2, 2.0, (2, 4)) * r.choice([-1, 1], (2, 4))],
        lambda w: (lambda x: _weighted(T.log(T.exp(T.relu(x)) + Tensor(np.ones((2, 4)))), w)),
    ),
    "conv1d": (
        lambda r: [r.standard_normal((2, 7, 3)), r.standard_normal((5, 3, 2)), r.standard_normal(2)],
        lambda w: (lambda x, k, b: _weighted(T.conv1d(x, k, b, stride=2, padding=2), w)),
    ),
    "broadcast_mul_div": (
        lambda r: [r.standard_normal((3, 4)), r.standard_normal((1, 4))],
        lambda w: (lambda a, b: _weighted(a * b - b / 2.0 + a, w)),
    ),
    "getitem_transpose_reshape": (
        lambda r: [r.standard_normal((3, 4, 2))],
        lambda w: (lambda a: _weighted(a[[0, 2, 0]].transpose(0, 2, 1).reshape(3, 8), w)),
    ),
    "concat_mean": (
        lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 2))],
        lambda w: (lambda a, b: _weighted(T.concat([a, b], axis=1).mean(axis=0), w)),
    ),
}
OUT_SHAPES = {
    "matmul": (2, 3, 3),
    "layer_norm": (3, 5),
    "softmax": (3, 5),
    "relu_exp_log": (2, 4),
    "conv1d": (2, 4, 2),
    "broadcast_mul_div": (3, 4),
    "getitem_transpose_reshape": (3, 8),
    "concat_mean": (5,),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_over_100_seeds(name):
    make_inputs, make_f = PRIMITIVES[name]
    worst = 0.0
    with T.precision(np.float64):
        for seed in range(100):
            r = np.random.default_rng([seed, 99])
            inputs = make_inputs(r)
            w = r.standard_normal(OUT_SHAPES[name])
            worst = max(worst, _fd_max_err(make_f(w), inputs))
    assert worst < 1e-4, f"{name}: {worst}"


@pytest.mark.parametrize("seed", range(100))
def test_cross_entropy_and_embedding_gradients(seed):
    r = np.random.default_rng(seed)
    ids = r.integers(0, 6, size=(2, 3))
    tgt = r.integers(0, 4, size=6)
    tgt[r.integers(0, 6)] = -100

    def f(E, W):
        h = T.embedding(E, ids).reshape(6, 3)
        return T.softmax_cross_entropy(h @ W, tgt, ignore_index=-100)

    with T.precision(np.float64):
        assert _fd_max_err(f, [r.standard_normal((6, 3)), r.standard_normal((3, 4))]) < 1e-4


def test_grad_check_scalar_square():
    with T.precision(np.float64):
        p = Parameter("theta", Tensor(np.array([3.0]), requires_grad=True), trainable=False)
        rep = T.grad_check(lambda: (p.tensor * p.tensor).sum(), [p], step=1e-5, tol=1e-4)
    assert rep.passed and rep.per_param["theta"] < 1e-8 and rep.n_checked == 1


def test_grad_check_requires_float64_and_finite_loss():
    p = Parameter("w", Tensor(np.ones(2, np.float32), requires_grad=True))
    with pytest.raises(TypeError):
        T.grad_check(lambda: (p.tensor * p.tensor).sum(), [p])
    with T.precision(np.float64):
        q = Parameter("w", Tensor(np.zeros(2), requires_grad=True))
        with pytest.raises(FloatingPointError):
            with np.errstate(divide="ignore"):
                T.grad_check(lambda: T.log(q.tensor).sum(), [q])


def test_grad_check_subsample_is_deterministic_and_bounded():
    with T.precision(np.float64):
        r = np.random.default_rng(0)
        ps = [Parameter(f"p{i}", Tensor(r.standard_normal(s), requires_grad=True)) for i, s in enumerate([(40,), (3,), (7, 9)])]
        f = lambda: sum(((p.tensor * p.tensor).sum() for p in ps), Tensor(0.0))
        a = T.grad_check(f, ps, max_coords=20, seed=5)
        b = T.grad_check(f, ps, max_coords=20, seed=5)
    assert a.per_param == b.per_param and a.n_checked == b.n_checked
    assert 3 <= a.n_checked <= 20 + len(ps)
    assert set(a.per_param) == {"p0", "p1", "p2"}


def test_determinism_bit_identical():
    def run():
        r = np.random.default_rng(7)
        x = Tensor(r.standard_normal((4, 6)).astype(np.float32), requires_grad=True)
        W = Tensor(r.standard_normal((6, 5)).astype(np.float32), requires_grad=True)
        g = Tensor(np.ones(5, np.float32), requires_grad=True)
        b = Tensor(np.zeros(5, np.float32), requires_grad=True)
        loss = T.softmax_cross_entropy(T.layer_norm(T.relu(x @ W), g, b), [0, 1, 2, 3])
        T.backward(loss)
        return loss.data.tobytes(), x.grad.tobytes(), W.grad.tobytes(), g.grad.tobytes()

    assert run() == run()


def test_dtype_default_and_precision_switch():
    assert Tensor([1.0]).dtype == np.float32
    with T.precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert T.get_dtype() == np.float32
