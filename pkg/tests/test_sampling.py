import numpy as np
import pytest

from evorender import diffcore as dc
from evorender import sampling as sp


def make_segments(rng, n_rays=4, n_bounds=9, t0=0.5, t1=4.0, low=0.05, high=3.0):
    t = np.linspace(t0, t1, n_bounds)
    t = np.broadcast_to(t[None, :], (n_rays, n_bounds)).copy()
    sigma = dc.param(rng.uniform(low, high, size=(n_rays, n_bounds)))
    return sp.RaySegments(t, sigma)


# -- construction ------------------------------------------------------------

def test_segments_reject_bad_input():
    with pytest.raises(ValueError):
        sp.RaySegments(np.array([[0.0, 0.0, 1.0]]), np.zeros((1, 3)))
    with pytest.raises(ValueError):
        sp.RaySegments(np.array([[0.0, 1.0]]), np.array([[-0.1, 1.0]]))
    with pytest.raises(ValueError):
        sp.RaySegments(np.array([[0.0, 1.0]]), np.zeros((1, 3)))


def test_ray_requires_unit_direction():
    with pytest.raises(ValueError):
        sp.Ray(np.zeros(3), np.array([0.0, 0.0, 2.0]), 0.1, 4.0)
    sp.Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), 0.1, 4.0)


# -- optical depth against an independent quadrature oracle -------------------

def quad_tau(t, sigma, tq, n=200001):
    """Composite-trapezoid integral of the piecewise-linear density."""
    grid = np.linspace(t[0], tq, n)
    vals = np.interp(grid, t, sigma)
    return np.trapezoid(vals, grid)


def test_optical_depth_matches_quadrature():
    rng = np.random.default_rng(7)
    seg = make_segments(rng, n_rays=1)
    t, s = seg.t[0], seg.sigma.values[0]
    queries = np.array([0.5, 0.9, 1.7, 2.3, 3.99, 4.0])
    with dc.Tape():
        got = sp.optical_depth(seg, queries).values[0]
    want = np.array([quad_tau(t, s, q) for q in queries])
    np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-10)


def test_optical_depth_zero_at_origin_monotone():
    rng = np.random.default_rng(3)
    seg = make_segments(rng, n_rays=3)
    tq = np.linspace(0.5, 4.0, 57)
    with dc.Tape():
        tau = sp.optical_depth(seg, tq).values
    assert np.all(np.abs(tau[:, 0]) < 1e-15)
    assert np.all(np.diff(tau, axis=1) >= 0)


def test_sigma_linear_interpolates_and_clamps():
    t = np.array([[0.0, 1.0, 2.0]])
    sigma = dc.constant(np.array([[1.0, 3.0, 2.0]]))
    seg = sp.RaySegments(t, sigma)
    with dc.Tape():
        v = sp.sigma_linear(seg, np.array([0.5, 1.5, -1.0, 5.0])).values[0]
    np.testing.assert_allclose(v, [2.0, 2.5, 1.0, 2.0], atol=1e-15)


# -- CDF properties ------------------------------------------------------------

def test_cdf_endpoints_and_monotone():
    rng = np.random.default_rng(11)
    seg = make_segments(rng, n_rays=2)
    tq = np.linspace(0.5, 4.0, 101)
    with dc.Tape():
        F = sp.continuous_cdf(seg, tq).values
    np.testing.assert_allclose(F[:, 0], 0.0, atol=1e-15)
    np.testing.assert_allclose(F[:, -1], 1.0, atol=1e-12)
    assert np.all(np.diff(F, axis=1) >= 0)


def test_cdf_raises_on_empty_ray():
    t = np.array([[0.0, 1.0, 2.0]])
    seg = sp.RaySegments(t, dc.constant(np.zeros((1, 3))))
    with dc.Tape(), pytest.raises(sp.EmptyRayError):
        sp.continuous_cdf(seg, np.array([1.0]))


# -- inverse CDF ----------------------------------------------------------------

def test_inverse_cdf_matches_bisection_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for trial in range(10):
        seg = make_segments(rng, n_rays=4, n_bounds=rng.integers(3, 17),
                            low=0.0 if trial % 2 else 0.05)
        # guarantee nonzero mass when densities may touch zero
        if np.all(seg.sigma.values < 1e-3):
            continue
        u = rng.uniform(1e-4, 1.0 - 1e-4, size=(4, 25))
        with dc.Tape():
            try:
                got = sp.inverse_cdf_sample(seg, u).values
            except sp.EmptyRayError:
                continue
            want = sp.bisect_inverse_cdf(seg, u, tol=1e-13)
        worst = max(worst, float(np.max(np.abs(got - want))))
    assert worst <= 1e-8


def test_inverse_cdf_roundtrip():
    rng = np.random.default_rng(5)
    seg = make_segments(rng, n_rays=3)
    u = rng.uniform(0.01, 0.99, size=(3, 40))
    with dc.Tape():
        t_hat = sp.inverse_cdf_sample(seg, u)
        F = sp.continuous_cdf(seg, t_hat.values).values
    np.testing.assert_allclose(F, u, atol=1e-10)


def test_inverse_cdf_zero_density_bins():
    # density exactly zero across a middle bin: no samples land inside it
    t = np.array([[0.0, 1.0, 2.0, 3.0, 4.0]])
    sigma = dc.constant(np.array([[1.0, 0.0, 0.0, 1.0, 1.0]]))
    seg = sp.RaySegments(t, sigma)
    u = np.linspace(0.01, 0.99, 99)[None, :]
    with dc.Tape():
        t_hat = sp.inverse_cdf_sample(seg, u).values[0]
        want = sp.bisect_inverse_cdf(seg, u, tol=1e-13)[0]
    assert not np.any((t_hat > 1.0 + 1e-9) & (t_hat < 2.0 - 1e-9))
    np.testing.assert_allclose(t_hat, want, atol=1e-8)


def test_inverse_cdf_gradient_finite_difference():
    rng = np.random.default_rng(17)
    t = np.linspace(0.2, 3.0, 7)[None, :]
    sigma0 = rng.uniform(0.3, 2.0, size=(1, 7))
    u = rng.uniform(0.05, 0.95, size=(1, 9))

    def f(sig):
        seg = sp.RaySegments(t, sig)
        return dc.sum(sp.inverse_cdf_sample(seg, u))

    with dc.Tape():
        sig = dc.param(sigma0)
        report = dc.finite_diff_check(f, sig, eps=1e-6)
    assert report.max_rel_err < 1e-5


def test_inverse_cdf_monotone_response():
    # raising density in an early bin pulls samples toward it
    t = np.linspace(0.0, 4.0, 9)[None, :]
    base = np.full((1, 9), 0.5)
    bumped = base.copy()
    bumped[0, 1] = 3.0
    u = np.linspace(0.05, 0.95, 19)[None, :]
    with dc.Tape():
        a = sp.inverse_cdf_sample(sp.RaySegments(t, dc.constant(base)), u).values
        b = sp.inverse_cdf_sample(sp.RaySegments(t, dc.constant(bumped)), u).values
    assert np.mean(b) < np.mean(a)


def test_inverse_cdf_empirical_distribution():
    # KS check: drawn samples follow the continuous CDF
    rng = np.random.default_rng(99)
    seg = make_segments(rng, n_rays=1)
    u = rng.uniform(0.0, 1.0, size=(1, 4000))
    with dc.Tape():
        t_hat = np.sort(sp.inverse_cdf_sample(seg, u).values[0])
        F = sp.continuous_cdf(seg, t_hat[None, :]).values[0]
    emp = (np.arange(1, 4001) - 0.5) / 4000
    ks = np.max(np.abs(np.sort(F) - emp))
    assert ks < 0.03


# -- discrete weights -----------------------------------------------------------

def test_weights_conservation():
    rng = np.random.default_rng(31)
    seg = make_segments(rng, n_rays=5, n_bounds=33)
    with dc.Tape():
        w, tail, _, empty = sp.weights_from_density(seg)
    total = np.sum(w.values, axis=1) + tail.values
    np.testing.assert_allclose(total, 1.0, atol=1e-12)
    assert not np.any(empty)


def test_weights_empty_ray_uniform():
    t = np.linspace(0.0, 1.0, 5)[None, :]
    seg = sp.RaySegments(t, dc.constant(np.zeros((1, 5))))
    with dc.Tape():
        w, tail, norm, empty = sp.weights_from_density(seg)
    assert empty[0]
    np.testing.assert_allclose(norm.values[0], 0.25, atol=1e-15)
    np.testing.assert_allclose(tail.values[0], 1.0, atol=1e-15)


# -- samplers -------------------------------------------------------------------

def test_stratified_sample_in_bins():
    ray = sp.Ray(np.zeros(3), np.array([0.0, 0.0, 1.0]), 0.5, 2.5)
    s = sp.stratified_sample(ray, 8, np.random.default_rng(0))
    edges = np.linspace(0.5, 2.5, 9)
    pos = s.values[0]
    assert np.all(pos >= edges[:-1]) and np.all(pos <= edges[1:])
    assert s.provenance == "stratified" and not s.differentiable


def test_draw_variates_midpoints_without_rng():
    u = sp.draw_variates(2, 4)
    np.testing.assert_allclose(u, [[0.125, 0.375, 0.625, 0.875]] * 2)


def _blob_sigma(center, scale=6.0):
    def fn(pts):
        d2 = np.sum((pts - center) ** 2, axis=-1)
        return dc.constant(scale * np.exp(-8.0 * d2))
    return fn


def test_hierarchical_modes_concentrate_samples():
    rng = np.random.default_rng(4)
    o = np.zeros((6, 3))
    d = np.tile(np.array([[0.0, 0.0, 1.0]]), (6, 1))
    center = np.array([0.0, 0.0, 2.0])
    for mode in ("heuristic", "evolutive"):
        s, seg = sp.hierarchical_sample(_blob_sigma(center), o, d, 0.0, 4.0,
                                        n_coarse=33, n_fine=32, mode=mode,
                                        rng=np.random.default_rng(8),
                                        union_coarse=False)
        pos = s.values
        frac_near = np.mean(np.abs(pos - 2.0) < 0.5)
        assert frac_near > 0.5, (mode, frac_near)
        assert np.all(np.diff(pos, axis=1) >= 0)
        assert s.differentiable == (mode == "evolutive")


def test_hierarchical_evolutive_carries_gradient():
    o = np.zeros((2, 3))
    d = np.tile(np.array([[0.0, 0.0, 1.0]]), (2, 1))
    amp = dc.param(np.array(4.0))

    def fn(pts):
        d2 = dc.constant(np.sum((pts - np.array([0, 0, 2.0])) ** 2, axis=-1))
        return amp * dc.exp(-4.0 * d2)

    with dc.Tape():
        s, _ = sp.hierarchical_sample(fn, o, d, 0.0, 4.0, n_coarse=17,
                                      n_fine=8, mode="evolutive",
                                      union_coarse=False)
        loss = dc.sum(s.positions)
        dc.backward(loss)
    assert amp.grad is not None and abs(float(amp.grad)) > 0


def test_hierarchical_heuristic_detached():
    o = np.zeros((2, 3))
    d = np.tile(np.array([[0.0, 0.0, 1.0]]), (2, 1))
    amp = dc.param(np.array(4.0))

    def fn(pts):
        d2 = dc.constant(np.sum((pts - np.array([0, 0, 2.0])) ** 2, axis=-1))
        return amp * dc.exp(-4.0 * d2)

    with dc.Tape():
        s, _ = sp.hierarchical_sample(fn, o, d, 0.0, 4.0, n_coarse=17,
                                      n_fine=8, mode="heuristic",
                                      rng=np.random.default_rng(1))
    assert not isinstance(s.positions, dc.Tensor) or not s.differentiable


def test_hierarchical_empty_ray_fallback():
    o = np.zeros((2, 3))
    d = np.tile(np.array([[0.0, 0.0, 1.0]]), (2, 1))

    def fn(pts):
        # mass only along the second ray's segment (none anywhere here)
        return dc.constant(np.zeros(pts.shape[0]))

    for mode in ("heuristic", "evolutive"):
        s, _ = sp.hierarchical_sample(fn, o, d, 0.0, 4.0, n_coarse=9,
                                      n_fine=6, mode=mode,
                                      rng=np.random.default_rng(2),
                                      union_coarse=False)
        assert s.fallback_mask is not None and s.fallback_mask.all()
        pos = s.values
        assert np.all((pos >= 0.0) & (pos <= 4.0))
