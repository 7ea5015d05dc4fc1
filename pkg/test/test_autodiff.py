import math

import numpy as np
import pytest
from scipy import integrate, stats

from evf.autodiff import (
    CheckpointFormatError,
    GaussianParams,
    Graph,
    NonFiniteError,
    ParamStore,
    ShapeError,
    adam_step,
    finite_difference_gradient,
    kl_diag_gaussian,
    load_checkpoint,
    read_records,
    reparameterize,
    save_checkpoint,
)


def test_sigmoid_zero():
    g = Graph()
    assert g.sigmoid(g.input("x", 0.0)).value == pytest.approx(0.5)


def test_matmul_identity():
    g = Graph()
    x = np.array([0.3, -1.2, 4.0])
    out = g.matmul(g.input("x", x), g.constant(np.eye(3)))
    np.testing.assert_array_equal(out.value, x.astype(np.float32))


def test_tanh_softplus_oracle():
    g = Graph()
    out = g.tanh(g.softplus(g.input("x", 1.0)))
    expected = math.tanh(math.log1p(math.e))
    assert float(out.value) == pytest.approx(expected, rel=1e-6)


def test_forward_deterministic_and_rebinding():
    rng = np.random.default_rng(0)
    g = Graph()
    x = g.input("x", rng.normal(size=(4, 3)))
    w = g.param("w", rng.normal(size=(3, 2)))
    out = g.mark("out", g.sum(g.tanh(g.matmul(x, w))))
    first = g.forward()["out"].copy()
    assert g.forward()["out"] == first
    assert first == out.value
    other = g.forward({"x": np.zeros((4, 3))})["out"]
    assert other == 0.0


def test_backward_square():
    g = Graph()
    w = g.param("w", [1.0, 2.0])
    grads = g.backward(g.sum(g.square(w)))
    np.testing.assert_allclose(grads["w"], [2.0, 4.0])


def test_backward_sigmoid_times_constant():
    k = 3.5
    g = Graph()
    x = g.input("x", 0.0)
    grads = g.backward(g.sigmoid(x) * k)
    assert float(grads["x"]) == pytest.approx(0.25 * k)


def test_backward_fanout_sums():
    g = Graph()
    w = g.param("w", 2.0)
    loss = w * w + w
    assert float(g.backward(loss)["w"]) == pytest.approx(5.0)


def test_backward_unreached_param_gets_zero():
    g = Graph()
    w = g.param("w", [1.0, 2.0])
    g.param("unused", np.ones((2, 2)))
    grads = g.backward(g.sum(w))
    np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))


def test_backward_non_scalar_loss():
    g = Graph()
    w = g.param("w", [1.0, 2.0])
    with pytest.raises(ShapeError, match="scalar"):
        g.backward(g.square(w))


def test_shape_error_names_node():
    g = Graph()
    a = g.input("a", np.ones((2, 3)))
    b = g.input("b", np.ones((2, 3)))
    with pytest.raises(ShapeError, match=r"node 2 \(matmul\)"):
        g.matmul(a, b)


def test_unsupported_broadcast():
    g = Graph()
    with pytest.raises(ShapeError):
        g.add(np.ones((2, 3)), np.ones((2, 1)))


def test_non_finite_is_an_error():
    g = Graph()
    x = g.input("x", [1.0, 0.0])
    with pytest.raises(NonFiniteError, match="log"):
        g.log(x)


def _random_net(g, rng, sizes=(5, 4, 3, 1)):
    h = g.input("x", rng.normal(size=(2, sizes[0])))
    acts = [g.tanh, g.sigmoid, g.softplus]
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = g.param("w%d" % i, rng.normal(scale=0.7, size=(n_in, n_out)))
        b = g.param("b%d" % i, rng.normal(scale=0.1, size=(n_out,)))
        h = acts[i % len(acts)](g.dense(h, w, b))
    return g.mean(g.square(h))


@pytest.mark.parametrize("seed", range(5))
def test_three_layer_net_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    g = Graph(dtype=np.float64)
    loss = _random_net(g, rng)
    grads = g.backward(loss)
    for name in ("w0", "b0", "w1", "b2", "x"):
        numeric = finite_difference_gradient(g, name, h=1e-3, loss=loss)
        np.testing.assert_allclose(grads[name], numeric, rtol=1e-3, atol=1e-7)


def _unary_graph(op, rng):
    g = Graph(dtype=np.float64)
    if op == "relu":
        # away from the kink
        x0 = rng.uniform(0.1, 1.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4))
    elif op == "log":
        x0 = rng.uniform(0.5, 2.0, size=(3, 4))
    else:
        x0 = rng.normal(size=(3, 4))
    x = g.param("x", x0)
    y = g.input("y", rng.normal(size=(4,)))
    if op in ("sigmoid", "tanh", "relu", "softplus", "exp", "log", "square"):
        out = getattr(g, op)(x)
    elif op == "add":
        out = x + y
    elif op == "sub":
        out = y - x
    elif op == "mul":
        out = x * y
    elif op == "matmul":
        out = g.matmul(x, g.param("w", rng.normal(size=(4, 2))))
    elif op == "concat":
        out = g.concat(x, g.broadcast(y, (3, 4)))
    elif op == "stack":
        out = g.stack(x, g.square(x))
    elif op == "slice":
        out = g.slice(x, 1, 3)
    elif op == "sum":
        out = g.sum(x, axis=0)
    elif op == "mean":
        out = g.mean(x, axis=-1)
    elif op == "broadcast":
        out = g.broadcast(g.slice(x, 0, 4), (2, 3, 4))
    elif op == "clip":
        out = g.clip(x, -5.0, 5.0)
    else:
        raise AssertionError(op)
    # weight the output so every component matters differently
    weights = rng.normal(size=out.shape)
    return g, g.sum(out * weights)


OPS = [
    "add", "sub", "mul", "matmul", "concat", "stack", "slice", "sigmoid", "tanh", "relu",
    "softplus", "exp", "log", "square", "sum", "mean", "broadcast", "clip",
]


@pytest.mark.parametrize("op", OPS)
def test_op_gradients_match_finite_differences(op):
    for seed in range(6):
        rng = np.random.default_rng([seed, OPS.index(op)])
        g, loss = _unary_graph(op, rng)
        grads = g.backward(loss)
        for name in g.params():
            numeric = finite_difference_gradient(g, name, h=1e-3, loss=loss)
            np.testing.assert_allclose(grads[name], numeric, rtol=1e-3, atol=1e-6)


@pytest.mark.parametrize(
    ["fn", "x", "expected"],
    (
        pytest.param(lambda g, x: g.square(x), 3.0, 6.0, id="square"),
        pytest.param(lambda g, x: g.exp(x), 0.0, 1.0, id="exp"),
    ),
)
def test_finite_difference_scalar(fn, x, expected):
    g = Graph()
    fn(g, g.param("x", x))
    assert float(finite_difference_gradient(g, "x", h=1e-3)) == pytest.approx(expected, abs=1e-6)


def test_finite_difference_restores_graph():
    g = Graph()
    x = g.param("x", [1.0, 2.0])
    loss = g.sum(g.square(x))
    finite_difference_gradient(g, "x")
    assert g.dtype == np.float32
    assert loss.value == pytest.approx(5.0)


def test_finite_difference_step_must_be_positive():
    g = Graph()
    g.square(g.param("x", 1.0))
    with pytest.raises(ValueError):
        finite_difference_gradient(g, "x", h=0.0)


def _gaussian(g, mean, log_var):
    return GaussianParams.from_heads(g.input("mean", mean), g.input("log_var", log_var))


def test_reparameterize_zero_noise():
    g = Graph()
    q = _gaussian(g, [0.5, -1.0], [0.3, 2.0])
    out = reparameterize(q, np.zeros(2))
    np.testing.assert_array_equal(out.value, q.mean.value)


def test_reparameterize_clamped_variance():
    g = Graph()
    noise = np.array([1.5, -2.0])
    q = _gaussian(g, [0.5, -1.0], [-1e6, -1e6])
    out = reparameterize(q, noise)
    assert np.all(np.abs(out.value - q.mean.value) < 0.01 * np.abs(noise))


def test_reparameterize_moments():
    n = 10**5
    g = Graph(dtype=np.float64)
    q = _gaussian(g, np.zeros(n), np.zeros(n))
    out = reparameterize(q, np.random.default_rng(0).standard_normal(n))
    assert abs(out.value.mean()) < 3 / math.sqrt(n)
    assert out.value.var() == pytest.approx(1.0, rel=0.05)


def test_reparameterize_mean_gradient_is_one():
    g = Graph()
    q = _gaussian(g, [0.5, -1.0, 2.0], [0.3, 2.0, -4.0])
    out = reparameterize(q, np.array([0.4, -1.0, 2.2]))
    np.testing.assert_allclose(g.backward(g.sum(out))["mean"], np.ones(3))


def test_reparameterize_shape_mismatch():
    g = Graph()
    q = _gaussian(g, [0.5, -1.0], [0.3, 2.0])
    with pytest.raises(ShapeError):
        reparameterize(q, np.zeros(3))


def test_kl_identity():
    g = Graph()
    mean, log_var = [0.3, -2.0, 1.0], [0.5, -3.0, 2.0]
    q = GaussianParams(g.constant(mean), g.constant(log_var))
    p = GaussianParams(g.constant(mean), g.constant(log_var))
    assert float(kl_diag_gaussian(q, p).value) == pytest.approx(0.0, abs=1e-7)


def test_kl_unit_shift():
    g = Graph()
    q = GaussianParams(g.constant([1.0]), g.constant([0.0]))
    assert float(kl_diag_gaussian(q, GaussianParams.standard(g, (1,))).value) == pytest.approx(0.5)
    assert float(kl_diag_gaussian(q).value) == pytest.approx(0.5)


def test_kl_quadrature():
    g = Graph(dtype=np.float64)
    q = GaussianParams(g.constant([0.0]), g.constant([math.log(4.0)]))
    closed = float(kl_diag_gaussian(q).value)

    def integrand(x):
        return stats.norm.pdf(x, scale=2.0) * (
            stats.norm.logpdf(x, scale=2.0) - stats.norm.logpdf(x))

    numeric, _ = integrate.quad(integrand, -20, 20)
    assert closed == pytest.approx(numeric, abs=1e-4)


def test_kl_non_negative_on_random_pairs():
    rng = np.random.default_rng(1)
    g = Graph(dtype=np.float64)
    shape = (10**4, 3)
    q = GaussianParams(g.constant(rng.normal(size=shape)), g.constant(rng.uniform(-5, 5, shape)))
    p = GaussianParams(g.constant(rng.normal(size=shape)), g.constant(rng.uniform(-5, 5, shape)))
    assert np.all(kl_diag_gaussian(q, p, axis=-1).value >= 0)


def test_adam_zero_gradient_keeps_parameters():
    store = ParamStore({"w": [1.0, -2.0]})
    adam_step(store, {"w": np.zeros(2)}, lr=0.1)
    np.testing.assert_array_equal(store["w"], [1.0, -2.0])
    assert store.step == 1


def test_adam_first_step_moves_by_lr():
    store = ParamStore({"w": [1.0, -2.0, 0.5]})
    adam_step(store, {"w": np.array([3.0, -0.2, 1e-2])}, lr=0.01)
    np.testing.assert_allclose(store["w"], [0.99, -1.99, 0.49], atol=1e-5)


def test_adam_converges_on_square():
    store = ParamStore({"w": [1.0]})
    for _ in range(100):
        adam_step(store, {"w": 2 * store["w"]}, lr=0.1)
    assert abs(float(store["w"][0])) < 0.05


def test_adam_rejects_non_finite_before_update():
    store = ParamStore({"a": [1.0], "b": [2.0]})
    with pytest.raises(NonFiniteError, match="'b'"):
        adam_step(store, {"a": np.ones(1), "b": np.array([np.nan])})
    np.testing.assert_array_equal(store["a"], [1.0])
    assert store.step == 0


def test_adam_clip_norm():
    clipped = ParamStore({"w": [0.0, 0.0]})
    adam_step(clipped, {"w": np.array([30.0, 40.0])}, lr=1.0, clip_norm=5.0)
    # sign-like first step is unaffected by a global rescale
    np.testing.assert_allclose(clipped["w"], [-1.0, -1.0], atol=1e-6)
    np.testing.assert_allclose(clipped.m["w"], [0.3, 0.4], rtol=1e-5)


def _store_with_state():
    rng = np.random.default_rng(3)
    store = ParamStore({"theta/w": rng.normal(size=(3, 2)), "theta/b": rng.normal(size=2),
                        "s": np.float32(1.5)})
    for _ in range(3):
        adam_step(store, {k: rng.normal(size=v.shape) for k, v in store.params.items()})
    return store


def test_checkpoint_round_trip(tmp_path):
    store = _store_with_state()
    path = tmp_path / "model.evfp"
    save_checkpoint(path, store)
    loaded = load_checkpoint(path)
    assert list(loaded) == list(store)
    assert loaded.step == store.step == 3
    for name in store:
        np.testing.assert_array_equal(loaded[name], store[name])
        np.testing.assert_array_equal(loaded.m[name], store.m[name])
        np.testing.assert_array_equal(loaded.v[name], store.v[name])
    assert not (tmp_path / "model.evfp.tmp").exists()


def test_checkpoint_size(tmp_path):
    store = _store_with_state()
    path = tmp_path / "model.evfp"
    save_checkpoint(path, store)
    # magic + version, then per record: name length, name, rank, dims, data
    expected = 4 + 2 + sum(4 + len(n) + 1 + 4 * a.ndim + 4 * a.size for n, a in store.params.items())
    assert path.stat().st_size == expected


@pytest.mark.parametrize(
    ["corrupt", "offset"],
    (
        pytest.param(lambda b: b"XXXX" + b[4:], 0, id="magic"),
        pytest.param(lambda b: b[:4] + b"\x02\x00" + b[6:], 4, id="version"),
        pytest.param(lambda b: b[:-3], 6, id="truncated"),
    ),
)
def test_checkpoint_corruption(tmp_path, corrupt, offset):
    path = tmp_path / "p.evfp"
    save_checkpoint(path, ParamStore({"w": np.ones(4)}))
    path.write_bytes(corrupt(path.read_bytes()))
    with pytest.raises(CheckpointFormatError) as excinfo:
        read_records(path)
    assert excinfo.value.offset == offset
