import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neuralbp import diff_engine as de
from neuralbp.factor_graph import Factor, build_graph


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def taped_grad(op, x):
    t = de.Tensor(x, requires_grad=True)
    with de.Tape() as tape:
        y = de.total(op(t))
        tape.backward(y)
    return t.grad


def away_from_kinks(r, shape):
    x = r.normal(0, 1.5, size=shape)
    return np.where(np.abs(x) < 1e-2, 0.5, x)


@pytest.mark.parametrize("op", [de.selu, de.leaky_relu, de.sigmoid, de.tanh, de.softplus,
                                de.exp, lambda t: de.log(de.exp(t) + 1.0),
                                lambda t: de.clamp(t, -0.7, 0.9),
                                lambda t: de.mul(t, t), lambda t: de.column(t, 1),
                                lambda t: de.columns(t, 1, 3), lambda t: de.mean(t)])
def test_primitive_gradients(op, rng):
    x = away_from_kinks(rng, (4, 3))
    x = np.where(np.abs(np.abs(x) - 0.8) < 1e-2, 0.3, x)
    a = taped_grad(op, x)
    n = numeric_grad(lambda v: float(de.total(op(de.Tensor(v))).value), x.copy())
    np.testing.assert_allclose(a, n, rtol=1e-6, atol=1e-8)


def test_selu_constants():
    assert de.selu(de.Tensor([0.0])).value[0] == 0.0
    assert abs(de.selu(de.Tensor([1.0])).value[0] - 1.0507010) < 1e-7


def test_segment_sum_example():
    # variable 0 owns edges 0 and 2, variable 1 owns edge 1
    g = build_graph(2, [Factor.parity([0, 1]), Factor.parity([0])])
    v = de.Tensor(np.array([[1.0], [3.0], [2.0]]))  # per-edge values
    np.testing.assert_array_equal(de.segment_sum(v, g.by_variable).value.ravel(), [3.0, 3.0])


def test_segment_sum_three_values():
    g = build_graph(3, [Factor.parity([0, 1]), Factor.parity([1, 2])])
    # by_factor: edges {0,1} -> factor 0, {2,3} -> factor 1
    out = de.segment_sum(de.Tensor([[1.0], [2.0], [3.0], [0.0]]), g.by_factor).value
    np.testing.assert_array_equal(out.ravel(), [3.0, 3.0])


def test_fan_out_accumulates():
    x = de.Tensor(np.array([1.5, -0.5]), requires_grad=True)
    with de.Tape() as tape:
        y = de.total(de.mul(x, de.sigmoid(x)))
        tape.backward(y)
    s = 1 / (1 + np.exp(-x.value))
    np.testing.assert_allclose(x.grad, s + x.value * s * (1 - s))


def test_shape_mismatch():
    with pytest.raises(de.ShapeMismatch):
        de.affine(de.Tensor(np.ones((2, 3))), de.Tensor(np.ones((4, 2))), de.Tensor(np.zeros(2)))
    with pytest.raises(de.ShapeMismatch):
        de.add(de.Tensor(np.ones((2, 3))), de.Tensor(np.ones((3, 2))))


def make_mlp(rng, n_in=3, n_h=5, n_out=2):
    p = de.ModelParams()
    de.init_mlp2(p, "m", n_in, n_h, n_out, rng)
    return p


def test_mlp_zero_params_output_zero(rng):
    p = make_mlp(rng)
    for t in p.tensors.values():
        t.value[...] = 0
    assert np.all(de.mlp2(p, "m", rng.normal(size=(4, 3))).value == 0)


def test_mlp_identity_passthrough(rng):
    p = make_mlp(rng, 3, 3, 3)
    for k in ("m.0.W", "m.1.W"):
        p[k].value[...] = np.eye(3)
    x = np.abs(rng.normal(size=(5, 3))) + 0.1
    np.testing.assert_allclose(de.mlp2(p, "m", x, "leaky_relu").value, x)


@pytest.mark.parametrize("activation", ["selu", "leaky_relu"])
def test_mlp_gradient_check(activation, rng):
    p = make_mlp(rng)
    x = rng.normal(size=(6, 3))
    err, recs = de.gradient_check(lambda q: de.total(de.mlp2(q, "m", x, activation)), p,
                                  n_coords=40, h=1e-6, rng=rng)
    assert err < 1e-5
    assert len(recs) == min(40, p.num_parameters())


def make_gru(rng, n_in=3, H=4):
    p = de.ModelParams()
    de.init_gru(p, "g", n_in, H, rng)
    return p


def test_gru_gate_closed_and_open(rng):
    p = make_gru(rng)
    h = rng.normal(size=(2, 4))
    x = rng.normal(size=(2, 3))
    p["g.bx"].value[:4] = -800.0       # z -> 0
    np.testing.assert_allclose(de.gru_cell(p, "g", h, x).value, h)
    p["g.bx"].value[:4] = 800.0        # z -> 1: output equals the candidate
    out = de.gru_cell(p, "g", h, x).value
    xw = x @ p["g.Wx"].value + p["g.bx"].value
    r = 1 / (1 + np.exp(-(xw[:, 4:8] + h @ p["g.Uzr"].value[:, 4:8])))
    cand = np.tanh(xw[:, 8:] + (r * h) @ p["g.Uh"].value)
    np.testing.assert_allclose(out, cand)


def test_gru_gradient_check(rng):
    p = make_gru(rng)
    h, x = rng.normal(size=(3, 4)), rng.normal(size=(3, 3))
    err, _ = de.gradient_check(lambda q: de.total(de.gru_cell(q, "g", h, x)), p,
                               n_coords=50, h=1e-6, rng=rng)
    assert err < 1e-5


def test_gru_shape_mismatch(rng):
    with pytest.raises(de.ShapeMismatch):
        de.gru_cell(make_gru(rng), "g", np.zeros((2, 5)), np.zeros((2, 3)))


def test_adam_zero_gradient_is_noop():
    p = de.ModelParams()
    p.add("w", [1.0, -2.0])
    for _ in range(3):
        de.adam_step(p, {"w": np.zeros(2)}, lr=0.1)
    np.testing.assert_array_equal(p["w"].value, [1.0, -2.0])


def test_adam_first_step():
    p = de.ModelParams()
    p.add("w", [0.0])
    de.adam_step(p, {"w": np.array([1.0])}, lr=0.1)
    np.testing.assert_allclose(p["w"].value, [-0.1], rtol=1e-7)


def test_adam_lr_zero_bit_identical(rng):
    p = make_mlp(rng)
    before = {k: t.value.copy() for k, t in p.tensors.items()}
    de.adam_step(p, {k: rng.normal(size=t.value.shape) for k, t in p.tensors.items()}, lr=0.0)
    for k, t in p.tensors.items():
        assert np.array_equal(t.value, before[k])


def test_adam_rejects_non_finite():
    p = de.ModelParams()
    p.add("w", [0.0])
    with pytest.raises(de.NonFiniteGradient):
        de.adam_step(p, {"w": np.array([np.nan])})


def test_gradient_check_quadratic():
    p = de.ModelParams()
    p.add("p", [1.0, 2.0])
    err, recs = de.gradient_check(lambda q: de.total(de.mul(q["p"], q["p"])), p, n_coords=2)
    assert err < 1e-8
    assert sorted(r[2] for r in recs) == pytest.approx([2.0, 4.0])


def test_checkpoint_roundtrip(tmp_path, rng):
    p = make_mlp(rng)
    p.meta["kind"] = "test"
    de.adam_step(p, {k: rng.normal(size=t.value.shape) for k, t in p.tensors.items()})
    path = tmp_path / "m.ckpt"
    de.save_checkpoint(p, path)
    q = de.load_checkpoint(path)
    assert q.meta["kind"] == "test" and q.step == 1
    for k in p.names():
        assert np.array_equal(p[k].value, q[k].value)
        assert np.array_equal(p.m[k], q.m[k])
    de.save_checkpoint(q, tmp_path / "again.ckpt")
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    f = tmp_path / "bad"
    f.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        de.load_checkpoint(f)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_bce_matches_closed_form(seed):
    r = np.random.default_rng(seed)
    p = r.uniform(0.01, 0.99, size=7)
    y = r.integers(0, 2, size=7).astype(float)
    got = float(de.bce(de.Tensor(p), y).value)
    ref = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert got == pytest.approx(ref, rel=1e-12)


def test_determinism(rng):
    seed_rng = np.random.default_rng(3)
    p = make_mlp(seed_rng)
    x = rng.normal(size=(4, 3))

    def run():
        p.zero_grad()
        with de.Tape() as tape:
            y = de.total(de.mlp2(p, "m", x))
            tape.backward(y)
        return y.value.copy(), p["m.0.W"].grad.copy()
    a, b = run(), run()
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_matmul_vector_gradient(rng):
    a = de.Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    w = de.Tensor(rng.normal(size=3), requires_grad=True)
    with de.Tape() as tape:
        out = de.total(de.mul(de.matmul(a, w), np.arange(5.0)))
        tape.backward(out)
    np.testing.assert_allclose(a.grad, np.outer(np.arange(5.0), w.value))
    np.testing.assert_allclose(w.grad, a.value.T @ np.arange(5.0))
