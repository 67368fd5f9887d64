import numpy as np
import pytest

from evorender import diffcore as dc


def scalar(v):
    return dc.param(np.array(v, dtype=np.float64))


class TestBasicAdjoints:
    def test_square(self):
        x = scalar(3.0)
        out = dc.record_and_eval(lambda t: t * t, [x])
        assert out.item() == 9.0
        dc.backward(out)
        assert x.grad == pytest.approx(6.0)

    def test_exp_zero(self):
        x = scalar(0.0)
        out = dc.record_and_eval(dc.exp, [x])
        dc.backward(out)
        assert out.item() == 1.0
        assert x.grad == pytest.approx(1.0)

    def test_sigmoid_zero(self):
        x = scalar(0.0)
        out = dc.record_and_eval(dc.sigmoid, [x])
        dc.backward(out)
        assert out.item() == 0.5
        assert x.grad == pytest.approx(0.25)

    def test_sum_vector(self):
        x = dc.param([1.0, 2.0, 3.0])
        out = dc.record_and_eval(dc.sum, [x])
        dc.backward(out)
        assert np.allclose(x.grad, 1.0)

    def test_softmax_gather(self):
        # softmax([0,0]) . [1,0] -> grads +-0.25
        x = dc.param([0.0, 0.0])
        out = dc.record_and_eval(lambda t: dc.softmax(t)[0], [x])
        dc.backward(out)
        assert np.allclose(x.grad, [0.25, -0.25])

    def test_unused_param_grad_zero(self):
        x = dc.param([1.0])
        y = dc.param([2.0])
        out = dc.record_and_eval(lambda a, b: dc.sum(a * a), [x, y])
        dc.backward(out)
        assert y.grad is None or np.allclose(y.grad, 0.0)


class TestTapeContract:
    def test_backward_twice_errors(self):
        x = scalar(1.0)
        out = dc.record_and_eval(lambda t: t * t, [x])
        dc.backward(out)
        with pytest.raises(dc.DeadTapeError):
            dc.backward(out)

    def test_nonscalar_root_errors(self):
        x = dc.param([1.0, 2.0])
        out = dc.record_and_eval(lambda t: t * t, [x])
        with pytest.raises(dc.DiffError):
            dc.backward(out)

    def test_accumulation_additive(self):
        x = scalar(2.0)
        f = dc.record_and_eval(lambda t: t * t, [x])
        dc.backward(f)
        g = dc.record_and_eval(lambda t: t * t * t, [x])
        dc.backward(g)
        # d(x^2)/dx + d(x^3)/dx at x=2 -> 4 + 12
        assert x.grad == pytest.approx(16.0)

    def test_nonfinite_intermediate_raises(self):
        x = scalar(-1.0)
        with pytest.raises(dc.NonFiniteError, match="log"):
            dc.record_and_eval(dc.log, [x])


class TestPrimitiveGradients:
    """Every registered primitive matches central differences (rel 1e-6)."""

    CASES = [
        ("add", lambda t: dc.sum(t + dc.constant([0.3, -0.2, 0.1]))),
        ("sub", lambda t: dc.sum(dc.constant(1.0) - t)),
        ("mul", lambda t: dc.sum(t * t)),
        ("div", lambda t: dc.sum(1.0 / (t + 3.0))),
        ("neg", lambda t: dc.sum(-t)),
        ("pow", lambda t: dc.sum((t + 3.0) ** 1.7)),
        ("exp", lambda t: dc.sum(dc.exp(t))),
        ("log", lambda t: dc.sum(dc.log(t + 3.0))),
        ("sqrt", lambda t: dc.sum(dc.sqrt(t + 3.0))),
        ("sin", lambda t: dc.sum(dc.sin(t))),
        ("cos", lambda t: dc.sum(dc.cos(t))),
        ("tanh", lambda t: dc.sum(dc.tanh(t))),
        ("sigmoid", lambda t: dc.sum(dc.sigmoid(t))),
        ("softplus", lambda t: dc.sum(dc.softplus(t))),
        ("softmax", lambda t: dc.sum(dc.softmax(t) * dc.constant([1.0, 2.0, -1.0]))),
        ("cumsum", lambda t: dc.sum(dc.cumsum(t) * dc.constant([1.0, -2.0, 0.5]))),
        ("clamp", lambda t: dc.sum(dc.clamp(t * 2.0, -0.5, 0.5))),
        ("max", lambda t: dc.max_reduce(t)),
        ("min", lambda t: dc.min_reduce(t)),
        ("gather", lambda t: dc.sum(dc.gather(t, np.array([2, 0, 0]), axis=0))),
        ("getitem", lambda t: dc.sum(t[1:])),
    ]

    @pytest.mark.parametrize("name,f", CASES, ids=[c[0] for c in CASES])
    def test_primitive_matches_fd(self, name, f):
        rng = np.random.default_rng(hash(name) % 2**32)
        worst = 0.0
        for _ in range(100):
            x = dc.param(rng.uniform(-1.0, 1.0, size=3))
            rep = dc.finite_diff_check(f, x, eps=1e-5)
            worst = max(worst, rep.max_rel_err)
        assert worst < 1e-6, f"{name}: rel err {worst}"

    def test_matmul_fd(self):
        rng = np.random.default_rng(7)
        b = dc.constant(rng.normal(size=(3, 2)))
        for _ in range(20):
            x = dc.param(rng.normal(size=(2, 3)))
            rep = dc.finite_diff_check(lambda t: dc.sum(t @ b), x, eps=1e-6)
            assert rep.max_rel_err < 1e-6

    def test_batched_matmul_fd(self):
        rng = np.random.default_rng(8)
        b = dc.constant(rng.normal(size=(4, 3, 2)))
        x = dc.param(rng.normal(size=(4, 2, 3)))
        rep = dc.finite_diff_check(lambda t: dc.sum(t @ b), x, eps=1e-6)
        assert rep.max_rel_err < 1e-6

    def test_scatter_ops_fd(self):
        rng = np.random.default_rng(9)
        base = dc.constant(rng.normal(size=(5, 2)))
        idx = np.array([1, 3])

        def f_rows(t):
            return dc.sum(dc.scatter_rows(base, idx, t) ** 2.0)

        def f_add(t):
            return dc.sum(dc.scatter_add(t, np.array([0, 0, 4]), 5) ** 2.0)

        x = dc.param(rng.normal(size=(2, 2)))
        assert dc.finite_diff_check(f_rows, x, eps=1e-6).max_rel_err < 1e-6
        y = dc.param(rng.normal(size=(3, 2)))
        assert dc.finite_diff_check(f_add, y, eps=1e-6).max_rel_err < 1e-6

    def test_broadcasting_grad(self):
        rng = np.random.default_rng(10)
        b = dc.constant(rng.normal(size=(4, 3)))
        x = dc.param(rng.normal(size=(3,)))
        rep = dc.finite_diff_check(lambda t: dc.sum(t * b), x, eps=1e-6)
        assert rep.max_rel_err < 1e-6

    def test_determinism(self):
        rng = np.random.default_rng(11)
        xv = rng.normal(size=(16,))

        def run():
            x = dc.param(xv.copy())
            out = dc.record_and_eval(
                lambda t: dc.sum(dc.softmax(dc.sin(t) * dc.exp(t * 0.1))), [x])
            dc.backward(out)
            return out.values.copy(), x.grad.copy()

        v1, g1 = run()
        v2, g2 = run()
        assert np.array_equal(v1, v2) and np.array_equal(g1, g2)


class TestTieBreaking:
    def test_max_tie_lowest_index(self):
        x = dc.param([2.0, 2.0, 1.0])
        out = dc.record_and_eval(dc.max_reduce, [x])
        dc.backward(out)
        assert np.array_equal(x.grad, [1.0, 0.0, 0.0])

    def test_elementwise_max_tie_first_operand(self):
        a = dc.param([1.0])
        b = dc.param([1.0])
        out = dc.record_and_eval(lambda u, v: dc.sum(dc.maximum(u, v)), [a, b])
        dc.backward(out)
        assert a.grad[0] == 1.0 and (b.grad is None or b.grad[0] == 0.0)


class TestAdam:
    def test_zero_grad_no_change(self):
        p = dc.param([1.0, -2.0])
        opt = dc.Adam([p], lr=1e-2)
        p.zero_grad()
        before = p.values.copy()
        opt.step()
        assert np.array_equal(p.values, before)

    def test_first_step_magnitude(self):
        # grad 1, step 1: m_hat = 1, v_hat = 1 -> update = lr/(1+eps)
        p = dc.param([0.0])
        opt = dc.Adam([p], lr=1e-2)
        p.grad = np.array([1.0])
        opt.step()
        assert p.values[0] == pytest.approx(-1e-2, rel=1e-6)

    def test_identical_params_identical_updates(self):
        p1, p2 = dc.param([0.5]), dc.param([0.5])
        opt = dc.Adam([p1, p2], lr=3e-3)
        p1.grad = np.array([0.7])
        p2.grad = np.array([0.7])
        opt.step()
        assert np.array_equal(p1.values, p2.values)


class TestFiniteDiffCheck:
    def test_quadratic(self):
        x = dc.param([1.0])
        rep = dc.finite_diff_check(lambda t: dc.sum(t * t), x, eps=1e-5)
        assert rep.max_rel_err < 1e-8

    def test_constant_function(self):
        x = dc.param([1.0, 2.0])
        rep = dc.finite_diff_check(lambda t: dc.constant(5.0) * 1.0, x, eps=1e-5)
        assert rep.max_abs_err == 0.0
