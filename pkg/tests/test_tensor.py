import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dltm import kernels
from dltm import tensor as T
from dltm.errors import ContractError, DimensionError, NumericError
from dltm.gradcheck import check_gradients
from dltm.tensor import Tape, Tensor

GRAD_TOL = 1e-4


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


@pytest.fixture(params=sorted(kernels.BACKENDS))
def backend(request):
    with T.use_backend(request.param):
        yield request.param


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor(np.eye(2)), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])

    def test_dot(self):
        assert T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), atol=1e-12, rtol=0)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_identity_both_sides(self):
        a = np.random.default_rng(1).normal(size=(6, 6))
        eye = Tensor(np.eye(6))
        np.testing.assert_allclose(T.matmul(eye, Tensor(a)).data, a, rtol=1e-15, atol=0)
        np.testing.assert_allclose(T.matmul(Tensor(a), eye).data, a, rtol=1e-15, atol=0)

    def test_gradients_batched(self):
        rng = np.random.default_rng(2)
        err = check_gradients(T.matmul, [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))])
        assert err < GRAD_TOL


class TestSoftmax:
    def test_uniform(self, backend):
        np.testing.assert_allclose(T.softmax_lastdim(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)

    def test_large_logit_no_overflow(self, backend):
        y = T.softmax_lastdim(Tensor([1000.0, 0.0])).data
        assert y[0] == 1.0 and 0.0 <= y[1] < 1e-300

    def test_high_precision_oracle(self, backend):
        with mpmath.workdps(40):
            es = [mpmath.e ** k for k in (1, 2, 3)]
            expected = [float(e / sum(es)) for e in es]
        np.testing.assert_allclose(expected, [0.09003057, 0.24472847, 0.66524096], atol=5e-9)
        np.testing.assert_allclose(T.softmax_lastdim(Tensor([1.0, 2.0, 3.0])).data, expected, rtol=1e-15)

    def test_non_finite_input_raises(self):
        with pytest.raises(NumericError):
            T.softmax_lastdim(Tensor([np.nan, 1.0]))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 7), elements=st.floats(-50, 50)))
    def test_rows_are_distributions(self, x):
        y = T.softmax_lastdim(Tensor(x)).data
        assert (y >= 0).all()
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)

    def test_gradients(self, backend):
        x = np.random.default_rng(3).normal(size=(2, 3, 6))
        assert check_gradients(T.softmax_lastdim, [x]) < GRAD_TOL


class TestLayerNorm:
    def test_constant_slice_maps_to_zero(self, backend):
        y = T.layer_norm(Tensor(np.full((2, 4), 3.5)), Tensor(np.ones(4)), Tensor(np.zeros(4)), 1e-5)
        assert (y.data == 0).all()

    def test_two_point(self, backend):
        y = T.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), 1e-300)
        np.testing.assert_allclose(y.data, [-1.0, 1.0], atol=1e-12)

    def test_moments_oracle(self, backend):
        x = np.random.default_rng(4).normal(3.0, 2.0, size=(3, 8))
        y = T.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8)), 1e-12).data
        mu = x.mean(axis=1, keepdims=True)
        expected = (x - mu) / np.sqrt(((x - mu) ** 2).mean(axis=1, keepdims=True) + 1e-12)
        np.testing.assert_allclose(y, expected, atol=1e-12)
        np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-10)
        np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-10)

    def test_bad_eps(self):
        with pytest.raises(ContractError):
            T.layer_norm(Tensor(np.ones(2)), Tensor(np.ones(2)), Tensor(np.zeros(2)), 0.0)

    def test_gradients(self, backend):
        rng = np.random.default_rng(5)
        err = check_gradients(lambda x, g, b: T.layer_norm(x, g, b, 1e-5),
                              [rng.normal(size=(4, 6)), rng.normal(size=6), rng.normal(size=6)])
        assert err < GRAD_TOL


class TestElementwise:
    def test_gelu_matches_erf_definition(self, backend):
        import math
        x = np.linspace(-4, 4, 17)
        expected = [0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in x]
        np.testing.assert_allclose(T.gelu(Tensor(x)).data, expected, atol=1e-15)

    def test_gelu_gradients(self, backend):
        assert check_gradients(T.gelu, [np.random.default_rng(6).normal(size=(3, 5))]) < GRAD_TOL

    def test_add_mul_broadcast_gradients(self):
        rng = np.random.default_rng(7)
        err = check_gradients(lambda a, b, c: (a + b) * c,
                              [rng.normal(size=(2, 3, 4)), rng.normal(size=4), rng.normal(size=(3, 1))])
        assert err < GRAD_TOL

    def test_mean_and_sum_gradients(self):
        x = np.random.default_rng(8).normal(size=(3, 4, 5))
        assert check_gradients(lambda a: a.mean(axis=1), [x]) < GRAD_TOL
        assert check_gradients(lambda a: a.sum(axis=(0, 2), keepdims=True), [x]) < GRAD_TOL

    def test_dropout_mask_apply(self):
        x = np.arange(6.0).reshape(2, 3)
        mask = np.array([[2.0, 0.0, 2.0], [0.0, 2.0, 2.0]])
        assert check_gradients(lambda a: T.dropout_mask_apply(a, mask), [x]) < GRAD_TOL
        np.testing.assert_array_equal(T.dropout_mask_apply(Tensor(x), mask).data, x * mask)

    def test_dropout_zero_rate_is_identity(self):
        x = Tensor(np.ones(3))
        assert T.dropout(x, 0.0, np.random.default_rng(0)) is x

    def test_shape_ops_gradients(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(2, 3, 4))
        assert check_gradients(lambda a: T.transpose(a, (2, 0, 1)).reshape(4, 6), [x]) < GRAD_TOL
        assert check_gradients(lambda a: T.take(a, [[2, 0], [1, 1]], axis=1), [x]) < GRAD_TOL
        assert check_gradients(lambda a, b: T.concat([a, b], axis=1), [x, rng.normal(size=(2, 2, 4))]) < GRAD_TOL


class TestMaxPool:
    def test_small(self, backend):
        assert T.max_lastdim_window(Tensor([1.0, 5, 2, 2, 9, 0]), 2).data.tolist() == [5, 2, 9]

    def test_constant(self, backend):
        np.testing.assert_array_equal(T.max_lastdim_window(Tensor(np.full(12, 0.25)), 3).data, np.full(4, 0.25))

    def test_naive_oracle(self, backend):
        x = np.random.default_rng(10).normal(size=250)
        expected = [max(x[i * 5:(i + 1) * 5]) for i in range(50)]
        np.testing.assert_array_equal(T.max_lastdim_window(Tensor(x), 5).data, expected)

    def test_non_divisible(self):
        with pytest.raises(DimensionError):
            T.max_lastdim_window(Tensor(np.ones(7)), 2)

    def test_gradients(self, backend):
        x = np.random.default_rng(11).normal(size=(3, 12))
        assert check_gradients(lambda a: T.max_lastdim_window(a, 4), [x]) < GRAD_TOL


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3)), requires_grad=True)
        with Tape() as tape:
            tape.backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_quadratic(self):
        data = np.random.default_rng(1).normal(size=5)
        x = Tensor(data, requires_grad=True)
        with Tape() as tape:
            tape.backward((x * x).sum() / 2)
        np.testing.assert_allclose(x.grad, data, rtol=1e-15)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
            with pytest.raises(ContractError):
                tape.backward(y)

    def test_reused_input_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            y = x * x
            tape.backward((y + x).sum())
        np.testing.assert_allclose(x.grad, [7.0])

    def test_no_tape_no_record(self):
        x = Tensor(np.ones(2), requires_grad=True)
        assert not (x * 2.0).requires_grad

    def test_tape_is_topological_and_resettable(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            y = T.gelu(x * 2.0).sum()
        seen = set()
        produced = {r.output_id for r in tape.records}
        for rec in tape.records:
            for i in rec.inputs:
                if i.node_id in produced:
                    assert i.node_id in seen
            seen.add(rec.output_id)
        assert y.node_id in seen
        tape.reset()
        assert len(tape) == 0

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(42)
            a = Tensor(rng.normal(size=(8, 8)), requires_grad=True)
            with Tape() as tape:
                loss = T.softmax_lastdim(T.gelu(a @ a)).sum()
                tape.backward(T.layer_norm(a, Tensor(np.ones(8)), Tensor(np.zeros(8))).mean() + loss)
            return a.grad

        assert run().tobytes() == run().tobytes()


@pytest.mark.skipif("cython" not in kernels.BACKENDS, reason="compiled kernels not built")
def test_backends_agree():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(7, 20))
    g = rng.normal(size=(7, 20))
    c, p = kernels.BACKENDS["cython"], kernels.BACKENDS["numpy"]
    np.testing.assert_allclose(c.softmax_forward(x), p.softmax_forward(x), atol=1e-15)
    y = p.softmax_forward(x)
    np.testing.assert_allclose(c.softmax_backward(y, g), p.softmax_backward(y, g), atol=1e-14)
    gamma, beta = rng.normal(size=20), rng.normal(size=20)
    for a, b in zip(c.layer_norm_forward(x, gamma, beta, 1e-5), p.layer_norm_forward(x, gamma, beta, 1e-5)):
        np.testing.assert_allclose(a, b, atol=1e-13)
    _, xhat, rstd = p.layer_norm_forward(x, gamma, beta, 1e-5)
    for a, b in zip(c.layer_norm_backward(g, xhat, rstd, gamma), p.layer_norm_backward(g, xhat, rstd, gamma)):
        np.testing.assert_allclose(a, b, atol=1e-12)
    np.testing.assert_allclose(c.gelu_forward(x), p.gelu_forward(x), atol=1e-15)
    np.testing.assert_allclose(c.gelu_backward(x, g), p.gelu_backward(x, g), atol=1e-14)
    yc, ac = c.max_pool_forward(x, 5)
    yp, ap = p.max_pool_forward(x, 5)
    np.testing.assert_array_equal(yc, yp)
    np.testing.assert_array_equal(ac, ap)
    np.testing.assert_array_equal(c.max_pool_backward(yc, ac, 20), p.max_pool_backward(yp, ap, 20))
