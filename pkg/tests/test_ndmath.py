import numpy as np
import pytest

from sabl import ndmath as nd


def test_softmax_examples():
    m = nd.softmax_along("y", np.zeros((4, 4)))
    assert np.all(m == 0.25)
    z = np.zeros((3, 3))
    z[1, 2] = 1000.0
    assert nd.softmax_along("y", z)[1, 2] == pytest.approx(1.0)
    m = nd.softmax_along("y", np.array([[0.0, np.log(3.0)], [0.0, 0.0]]))
    assert m[:, 1] == pytest.approx([0.75, 0.25], abs=1e-15)
    with pytest.raises(ValueError):
        nd.softmax_along("z", z)


def test_softmax_sums(rng):
    for _ in range(200):
        z = rng.normal(scale=rng.uniform(0.1, 50), size=(7, 7))
        assert np.allclose(nd.softmax_along("y", z).sum(axis=0), 1.0, rtol=0, atol=1e-9)
        assert np.allclose(nd.softmax_along("x", z).sum(axis=1), 1.0, rtol=0, atol=1e-9)
        assert (nd.softmax_along("x", z) >= 0).all()


def aggregate_loops(F, mx, my):
    k, _, c = F.shape
    fx = np.zeros((k, c))
    fy = np.zeros((k, c))
    for ch in range(c):
        for j in range(k):
            for y in range(k):
                fx[j, ch] += F[y, j, ch] * mx[y, j]
        for i in range(k):
            for x in range(k):
                fy[i, ch] += F[i, x, ch] * my[i, x]
    return fx, fy


def test_aggregate_examples(rng):
    F = rng.normal(size=(3, 3, 1))
    mx = nd.softmax_along("y", rng.normal(size=(3, 3)))
    my = nd.softmax_along("x", rng.normal(size=(3, 3)))
    fx, fy = nd.aggregate(F, mx, my)
    ox, oy = aggregate_loops(F, mx, my)
    assert np.allclose(fx, ox, rtol=0, atol=1e-12) and np.allclose(fy, oy, rtol=0, atol=1e-12)
    u = np.full((3, 3), 1 / 3)
    assert np.allclose(nd.aggregate(F, u, u)[0], F.mean(axis=0), atol=1e-15)
    sel = np.zeros((3, 3))
    sel[2] = 1.0
    assert np.array_equal(nd.aggregate(F, sel, u)[0], F[2])
    with pytest.raises(ValueError):
        nd.aggregate(F, np.ones((2, 2)), u)


def test_aggregate_linear(rng):
    F, G = rng.normal(size=(2, 5, 5, 3))
    mx = nd.softmax_along("y", rng.normal(size=(5, 5)))
    my = nd.softmax_along("x", rng.normal(size=(5, 5)))
    a, b = 1.7, -0.4
    lhs = nd.aggregate(a * F + b * G, mx, my)
    f, g = nd.aggregate(F, mx, my), nd.aggregate(G, mx, my)
    for i in range(2):
        assert np.allclose(lhs[i], a * f[i] + b * g[i], rtol=0, atol=1e-12)


def conv_loops(x, w, b):
    n, _ = x.shape
    kk, cin, cout = w.shape
    pad = kk // 2
    out = np.zeros((n, cout))
    for i in range(n):
        for o in range(cout):
            s = b[o]
            for t in range(kk):
                src = i + t - pad
                if 0 <= src < n:
                    for c in range(cin):
                        s += x[src, c] * w[t, c, o]
            out[i, o] = s
    return out


def test_conv1d_examples(rng):
    x = rng.normal(size=(5, 1))
    ident = np.array([0.0, 1.0, 0.0]).reshape(3, 1, 1)
    assert np.array_equal(nd.conv1d(x, ident, np.zeros(1)), x)
    avg = np.full((3, 1, 1), 1 / 3)
    out = nd.conv1d(np.array([[1.0], [2.0], [3.0]]), avg, np.zeros(1))
    assert out[:, 0] == pytest.approx([1.0, 2.0, 5 / 3], abs=1e-15)
    x2 = rng.normal(size=(7, 2))
    w = rng.normal(size=(3, 2, 1))
    b = rng.normal(size=1)
    assert np.allclose(nd.conv1d(x2, w, b), conv_loops(x2, w, b), rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        nd.conv1d(x2, rng.normal(size=(2, 2, 1)), b)
    with pytest.raises(ValueError):
        nd.conv1d(x2, rng.normal(size=(3, 3, 1)), b)


def test_deconv_examples(rng):
    x = rng.normal(size=(4, 1))
    dup = nd.deconv1d_x2(x, np.ones((2, 1, 1)), np.zeros(1))
    assert np.array_equal(dup[:, 0], np.repeat(x[:, 0], 2))
    inter = nd.deconv1d_x2(x, np.array([1.0, 0.0]).reshape(2, 1, 1), np.zeros(1))
    assert np.array_equal(inter[0::2], x) and np.all(inter[1::2] == 0)
    x = rng.normal(size=(7, 3))
    w = rng.normal(size=(2, 3, 2))
    b = rng.normal(size=2)
    out = nd.deconv1d_x2(x, w, b)
    assert out.shape == (14, 2)
    for i in range(7):
        for t in range(2):
            assert np.allclose(out[2 * i + t], x[i] @ w[t] + b, rtol=0, atol=1e-12)


def test_split_halves():
    x = np.arange(14.0).reshape(14, 1)
    a, b = nd.split_halves(x)
    assert a.shape == b.shape == (7, 1)
    assert np.array_equal(np.concatenate([a, b]), x)
    a, b = nd.split_halves(np.array([[1.0], [2.0], [3.0], [4.0]]))
    assert a[:, 0].tolist() == [1.0, 2.0] and b[:, 0].tolist() == [3.0, 4.0]
    with pytest.raises(ValueError):
        nd.split_halves(np.zeros((5, 1)))


def test_dense_examples(rng):
    x = rng.normal(size=3)
    assert np.array_equal(nd.dense(x, np.eye(3), np.zeros(3)), x)
    assert np.array_equal(nd.dense(x, np.zeros((3, 2)), np.array([1.0, 2.0])), [1.0, 2.0])
    w = rng.normal(size=(3, 2))
    b = rng.normal(size=2)
    loop = [sum(x[i] * w[i, j] for i in range(3)) + b[j] for j in range(2)]
    assert np.allclose(nd.dense(x, w, b), loop, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        nd.dense(x, np.zeros((4, 2)), b)


def test_finite_diff_examples():
    p = {"t": np.array([3.0])}
    g = nd.finite_diff_grad(lambda: float(p["t"][0] ** 2), p)
    assert g["t"][0] == pytest.approx(6.0, abs=1e-6)
    assert p["t"][0] == 3.0
    q = {"a": np.ones((2, 2))}
    assert np.all(nd.finite_diff_grad(lambda: 4.0, q)["a"] == 0)


def test_sigmoid_stable():
    z = np.array([-1000.0, 0.0, 1000.0])
    s = nd.sigmoid(z)
    assert s.tolist() == [0.0, 0.5, 1.0]


def test_params_json_roundtrip(rng):
    p = {"b": rng.normal(size=(2, 3)), "a": rng.normal(size=4)}
    text = nd.params_to_json(p)
    q = nd.params_from_json(text)
    assert list(q) == ["a", "b"]
    for k in p:
        assert q[k].shape == p[k].shape and np.array_equal(q[k], p[k])
    assert nd.params_to_json(q) == text
