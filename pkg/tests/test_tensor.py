import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mtlmammo import functional as F
from mtlmammo.tensor import Graph, GraphError, Tensor, default_dtype, precision, rng_for, normal, uniform

from oracles import bilinear_point, central_diff, conv2d_naive, matmul_naive, max_rel_err


def grad_of(fn, *arrays):
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Graph() as g:
        out = fn(*ts)
    g.backward(out)
    return [t.grad for t in ts]


# ---- Tensor / Graph ------------------------------------------------------------

def test_scalar_is_shape_one_and_default_dtype():
    t = Tensor(3.0)
    assert t.shape == (1,)
    assert t.dtype == default_dtype() == np.float32
    with precision(np.float64):
        assert Tensor([1.0, 2.0]).dtype == np.float64


def test_backward_sum_gives_ones():
    (g,) = grad_of(F.sum, np.array([1.0, 2.0, 3.0], dtype=np.float32))
    np.testing.assert_array_equal(g, [1, 1, 1])


def test_backward_sum_of_squares():
    (g,) = grad_of(lambda x: F.sum(F.mul(x, x)), np.array([1.0, 2.0], dtype=np.float32))
    np.testing.assert_array_equal(g, [2, 4])


def test_backward_rejects_non_scalar_root():
    x = Tensor(np.ones(3, np.float32), requires_grad=True)
    with Graph() as g:
        y = F.scale(x, 2.0)
    with pytest.raises(GraphError, match="scalar"):
        g.backward(y)


def test_backward_twice_rejected_until_reset():
    x = Tensor(np.ones(2, np.float32), requires_grad=True)
    with Graph() as g:
        y = F.sum(x)
    g.backward(y)
    with pytest.raises(GraphError, match="already"):
        g.backward(y)
    g.reset()
    assert len(g) == 0


def test_root_from_other_graph_rejected():
    x = Tensor(np.ones(2, np.float32), requires_grad=True)
    with Graph():
        y = F.sum(x)
    with pytest.raises(GraphError):
        Graph().backward(y)


def test_parents_precede_children_and_every_reached_node_has_grad():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3)).astype(np.float32), requires_grad=True)
    with Graph() as g:
        a = F.relu(x)
        b = F.mul(a, x)
        loss = F.sum(F.add(b, a))
    for i, node in enumerate(g.nodes):
        assert all(p < i for p in node.parents)
    g.backward(loss)
    for t in (x, a, b, loss):
        assert g.grad(t).shape == t.shape


def test_fanout_accumulates_over_paths():
    (gx,) = grad_of(lambda x: F.sum(F.add(F.scale(x, 3.0), F.mul(x, x))), np.array([2.0], np.float32))
    assert gx[0] == pytest.approx(3 + 4)


def test_seeded_fills_are_reproducible_and_streams_independent():
    a = normal((3, 4), rng_for(5, "init")).data
    b = normal((3, 4), rng_for(5, "init")).data
    c = normal((3, 4), rng_for(5, "shuffle")).data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    u = uniform((100,), rng_for(1, "x"), -1, 1).data
    assert u.min() >= -1 and u.max() < 1


# ---- conv2d ------------------------------------------------------------------------

def test_conv_identity_1x1():
    x = np.ones((1, 1, 3, 3), np.float32)
    out = F.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1), np.float32)), Tensor(np.zeros(1, np.float32)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_sum_of_nine():
    out = F.conv2d(Tensor(np.ones((1, 1, 3, 3), np.float32)), Tensor(np.ones((1, 1, 3, 3), np.float32)),
                   Tensor(np.zeros(1, np.float32)))
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 9.0


def test_conv_matches_loops_stride2_pad1():
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    got = F.conv2d(Tensor(x.astype(np.float32)), Tensor(w.astype(np.float32)),
                   Tensor(b.astype(np.float32)), 2, 1).data
    assert got.shape == (2, 4, 4, 4)
    np.testing.assert_allclose(got, conv2d_naive(x, w, b, 2, 1), atol=1e-5)


@settings(max_examples=25, deadline=None)
@given(k=st.sampled_from([1, 3]), stride=st.sampled_from([1, 2]), pad=st.sampled_from([0, 1]),
       n=st.integers(1, 2), c=st.integers(1, 3), f=st.integers(1, 3), h=st.integers(3, 7),
       w=st.integers(3, 7), seed=st.integers(0, 2**16))
def test_conv_property_matches_loops(k, stride, pad, n, c, f, h, w, seed):
    rng = np.random.default_rng(seed)
    x, wt, b = rng.normal(size=(n, c, h, w)), rng.normal(size=(f, c, k, k)), rng.normal(size=f)
    with precision(np.float64):
        got = F.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride, pad).data
    np.testing.assert_allclose(got, conv2d_naive(x, wt, b, stride, pad), atol=1e-5)


def test_conv_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(1, 2, 4, 4\).*\(3, 3, 3, 3\)"):
        F.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 3, 3, 3))))


def test_conv_empty_output_rejected():
    with pytest.raises(ValueError, match="empty"):
        F.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


# ---- relu / bn / gap / upsample / linear ----------------------------------------------

def test_relu_values_and_kink_subgradient():
    np.testing.assert_array_equal(F.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    (g,) = grad_of(lambda x: F.sum(F.relu(x)), np.array([-1.0, 2.0, 0.0], np.float32))
    np.testing.assert_array_equal(g, [0, 1, 0])
    pos = np.array([0.5, 3.0], np.float32)
    np.testing.assert_array_equal(F.relu(Tensor(pos)).data, pos)


def test_batch_norm_constant_input_gives_zeros():
    x = np.full((2, 3, 2, 2), 0.7, np.float32)
    out = F.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), training=True)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)


def test_batch_norm_zero_gamma_gives_beta():
    x = np.random.default_rng(1).normal(size=(2, 3, 2, 2)).astype(np.float32)
    beta = np.array([0.5, -1.0, 2.0], np.float32)
    out = F.batch_norm(Tensor(x), Tensor(np.zeros(3, np.float32)), Tensor(beta), training=True)
    np.testing.assert_array_equal(out.data, np.broadcast_to(beta[None, :, None, None], x.shape))


def test_batch_norm_output_moments():
    x = np.random.default_rng(2).normal(3.0, 2.0, size=(4, 2, 3, 3)).astype(np.float32)
    out = F.batch_norm(Tensor(x), Tensor(np.ones(2, np.float32)), Tensor(np.zeros(2, np.float32))).data
    m = out.mean(axis=(0, 2, 3))
    v = out.var(axis=(0, 2, 3))
    np.testing.assert_allclose(m, 0, atol=1e-5)
    np.testing.assert_allclose(v, 1, atol=1e-3)


def test_batch_norm_single_element_rejected_in_train_mode():
    with pytest.raises(ValueError, match="N\\*H\\*W"):
        F.batch_norm(Tensor(np.ones((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


def test_batch_norm_running_stats_momentum_and_eval_mode():
    x = np.random.default_rng(3).normal(size=(4, 2, 3, 3))
    rm, rv = np.zeros(2), np.ones(2)
    F.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3), ddof=1))
    out = F.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=False).data
    np.testing.assert_allclose(out, (x - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5))


def test_gap_values():
    out = F.global_avg_pool(Tensor(np.array([1.0, 2.0, 3.0, 4.0], np.float32).reshape(1, 1, 2, 2)))
    assert out.shape == (1, 1) and out.data.item() == 2.5
    c = np.full((2, 3, 4, 5), 1.25, np.float32)
    np.testing.assert_array_equal(F.global_avg_pool(Tensor(c)).data, np.full((2, 3), 1.25))
    x = np.random.default_rng(0).normal(size=(2, 3, 1, 1)).astype(np.float32)
    np.testing.assert_array_equal(F.global_avg_pool(Tensor(x)).data, x.reshape(2, 3))


def test_gap_backward_is_uniform():
    (g,) = grad_of(lambda x: F.sum(F.global_avg_pool(x)), np.zeros((1, 2, 2, 3), np.float32))
    np.testing.assert_allclose(g, 1 / 6)


def test_upsample_identity_is_bit_exact():
    x = np.random.default_rng(4).normal(size=(2, 3, 5, 6)).astype(np.float32)
    assert F.upsample_bilinear(Tensor(x), 5, 6).data.tobytes() == x.tobytes()


def test_upsample_constant_stays_constant():
    out = F.upsample_bilinear(Tensor(np.full((1, 2, 3, 3), 0.3)), 7, 11).data
    np.testing.assert_allclose(out, 0.3, rtol=1e-6)


def test_upsample_matches_scalar_formula():
    img = np.array([[0.0, 1.0], [2.0, 3.0]])
    out = F.upsample_bilinear(Tensor(img.reshape(1, 1, 2, 2).astype(np.float64)), 4, 4).data[0, 0]
    ref = np.array([[bilinear_point(img, y, x, 4, 4) for x in range(4)] for y in range(4)])
    np.testing.assert_allclose(out, ref, atol=1e-12)
    assert out[0, 0] == 0.0 and out[-1, -1] == 3.0


def test_upsample_rejects_shrinking():
    with pytest.raises(ValueError):
        F.upsample_bilinear(Tensor(np.zeros((1, 1, 4, 4))), 2, 4)


def test_linear_cases():
    x = np.random.default_rng(5).normal(size=(3, 4))
    out = F.linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data
    np.testing.assert_array_equal(out, x)
    b = np.array([1.0, -2.0])
    np.testing.assert_array_equal(F.linear(Tensor(np.zeros((3, 4))), Tensor(np.ones((4, 2))), Tensor(b)).data,
                                  np.tile(b, (3, 1)))
    w = np.random.default_rng(6).normal(size=(4, 2))
    np.testing.assert_allclose(F.linear(Tensor(x), Tensor(w), Tensor(b)).data, matmul_naive(x, w) + b,
                               atol=1e-5)
    with pytest.raises(ValueError, match="mismatch"):
        F.linear(Tensor(x), Tensor(np.zeros((3, 2))))


# ---- gradients ----------------------------------------------------------------------

def _check(op, arrays, tol=1e-6):
    """Projected-sum gradient of op vs central differences of each input, float64."""
    with precision(np.float64):
        ref_out = op(*[Tensor(a) for a in arrays]).data
        proj = np.random.default_rng(42).normal(size=ref_out.shape)
        grads = grad_of(lambda *ts: F.sum(F.mul(op(*ts), Tensor(proj))), *arrays)
        for i, a in enumerate(arrays):
            def f(v, i=i):
                args = [Tensor(v if j == i else arrays[j]) for j in range(len(arrays))]
                return float((op(*args).data * proj).sum())

            assert max_rel_err(grads[i], central_diff(f, a)) < tol, f"input {i}"


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("k,stride,pad", [(1, 1, 0), (3, 1, 1), (3, 2, 1), (3, 2, 0), (1, 2, 0)])
def test_conv_gradients(seed, k, stride, pad):
    rng = np.random.default_rng(seed)
    _check(lambda x, w, b: F.conv2d(x, w, b, stride, pad),
           [rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, k, k)), rng.normal(size=3)])


@pytest.mark.parametrize("seed", range(3))
def test_layer_gradients(seed):
    rng = np.random.default_rng(100 + seed)
    _check(lambda x, g, b: F.batch_norm(x, g, b), [rng.normal(size=(3, 2, 2, 3)), rng.normal(size=2),
                                                   rng.normal(size=2)])
    off_kink = rng.normal(size=(3, 4))
    off_kink += np.sign(off_kink) * 0.1
    _check(F.relu, [off_kink])
    _check(lambda x: F.upsample_bilinear(x, 5, 7), [rng.normal(size=(1, 2, 3, 4))])
    _check(F.linear, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)])
    _check(F.global_avg_pool, [rng.normal(size=(2, 3, 2, 2))])
    _check(F.sigmoid, [rng.normal(size=5) * 3])
    _check(lambda x: F.log_softmax(x, 1), [rng.normal(size=(2, 4, 3))])
    _check(lambda x: F.reshape(x, (6, 2)), [rng.normal(size=(3, 4))])
    _check(lambda a, b: F.add(F.mul(a, b), F.scale(a, -0.3)), [rng.normal(size=(3,)), rng.normal(size=(3,))])
    _check(F.mean, [rng.normal(size=(2, 3))])


def test_backward_is_linear(f64):
    rng = np.random.default_rng(9)
    x0 = rng.normal(size=(2, 3, 4, 4))
    w = Tensor(rng.normal(size=(2, 3, 3, 3)))

    def f(x):
        return F.mean(F.relu(F.conv2d(x, w, None, 1, 1)))

    def g(x):
        return F.sum(F.mul(x, x))

    (gf,) = grad_of(f, x0)
    (gg,) = grad_of(g, x0)
    (gc,) = grad_of(lambda x: F.add(F.scale(f(x), 2.5), F.scale(g(x), -0.7)), x0)
    np.testing.assert_allclose(gc, 2.5 * gf - 0.7 * gg, atol=1e-6)


def test_forward_backward_bit_deterministic():
    def run():
        rng = np.random.default_rng(11)
        x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
        w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        g = grad_of(lambda x, w: F.sum(F.relu(F.conv2d(x, w, None, 2, 1))), x, w)
        return [a.tobytes() for a in g]

    assert run() == run()
