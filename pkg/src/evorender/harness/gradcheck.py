"""Finite-difference verification suites over random small instances.

Each suite draws fresh random inputs, runs reverse mode against central
differences, and reports the worst relative error. The CLI prints one line
per suite; the acceptance tests assert the documented tolerances
(1e-4 everywhere, 1e-3 for the rasterizer).
"""

from __future__ import annotations

import numpy as np

from .. import diffcore as dc
from .. import fields as fl
from .. import gauge as gg
from .. import primitives as pr
from .. import sampling as sp
from .. import volren as vr

TOL_DEFAULT = 1e-4
TOL_RASTER = 1e-3


def _interior(rng, n, lo=0.2, hi=0.8, margin=0.02, res=None):
    """Points inside the unit interval, kept away from interpolation knots
    so central differences stay on one smooth piece."""
    pts = rng.uniform(lo, hi, size=n)
    if res is not None:
        cell = 1.0 / (res - 1)
        k = np.round(pts / cell)
        near = np.abs(pts - k * cell) < margin * cell
        pts[near] += 0.5 * cell * np.where(pts[near] < k[near] * cell, -1, 1) * 0.2
    return pts


def suite_composite(rng, n):
    worst = 0.0
    for _ in range(n):
        m = int(rng.integers(2, 6))
        c0 = rng.uniform(size=(1, m, 3))
        a0 = rng.uniform(0.05, 0.9, size=(1, m))
        pick = rng.uniform(size=(1, 3))

        def f_a(a):
            rgb, _, _ = vr.composite(dc.constant(c0), a, background=vr.WHITE)
            return dc.sum(rgb * dc.constant(pick))

        def f_c(c):
            rgb, _, _ = vr.composite(c, dc.constant(a0), background=vr.WHITE)
            return dc.sum(rgb * dc.constant(pick))

        with dc.Tape():
            worst = max(worst, dc.finite_diff_check(f_a, dc.param(a0), eps=1e-6).max_rel_err)
            worst = max(worst, dc.finite_diff_check(f_c, dc.param(c0.copy()), eps=1e-6).max_rel_err)
    return worst


def suite_render_sigma(rng, n):
    worst = 0.0
    for _ in range(n):
        field = fl.GridField(rng, resolution=2, feature_dim=1)
        o = np.array([[rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7), 2.0]])
        d = np.array([[0.0, 0.0, -1.0]])
        t = np.sort(rng.uniform(1.25, 1.75, size=(1, 6)), axis=1)
        pick = rng.uniform(size=(1, 3))

        def f(raw):
            field.grid.data = raw
            rgb, _, _ = vr.render_rays(field, o, d, t, 2.0)
            return dc.sum(rgb * dc.constant(pick))

        with dc.Tape():
            raw = dc.param(rng.uniform(-1.0, 1.0, size=field.grid.data.shape))
            worst = max(worst, dc.finite_diff_check(f, raw, eps=1e-6).max_rel_err)
    return worst


def suite_render_gauge(rng, n):
    worst = 0.0
    for _ in range(n):
        field = fl.PlaneField(rng, resolution=4, feature_dim=2)
        gauge = gg.EvolutiveGauge.plane_backed(4, offset_scale=0.05)
        gauge.enabled = True
        o = np.array([[_interior(rng, 1, res=4)[0], _interior(rng, 1, res=4)[0], 2.0]])
        d = np.array([[0.0, 0.0, -1.0]])
        t = np.sort(2.0 - _interior(rng, 4, res=4))[None, :]
        pick = rng.uniform(size=(1, 3))
        target = gauge.offset_maps[0].plane.data

        def f(raw):
            gauge.offset_maps[0].plane.data = raw
            rgb, _, _ = vr.render_rays(field, o, d, t, 2.0, gauge=gauge)
            return dc.sum(rgb * dc.constant(pick))

        with dc.Tape():
            raw = dc.param(target.values.copy())
            # eps large enough that FD roundoff stays below tolerance on
            # the small-magnitude offset gradients
            worst = max(worst, dc.finite_diff_check(f, raw, eps=1e-5).max_rel_err)
    return worst


def suite_inverse_cdf(rng, n):
    worst = 0.0
    for _ in range(n):
        nb = int(rng.integers(3, 9))
        t = np.sort(rng.uniform(0.1, 3.0, size=nb))
        while np.min(np.diff(t)) < 1e-3:
            t = np.sort(rng.uniform(0.1, 3.0, size=nb))
        sigma0 = rng.uniform(0.3, 2.5, size=(1, nb))
        u = rng.uniform(0.05, 0.95, size=(1, 5))

        def f(sig):
            seg = sp.RaySegments(t[None, :], sig)
            return dc.sum(sp.inverse_cdf_sample(seg, u))

        with dc.Tape():
            worst = max(worst, dc.finite_diff_check(f, dc.param(sigma0), eps=1e-6).max_rel_err)
    return worst


def suite_interpolation(rng, n):
    worst = 0.0
    for _ in range(n):
        plane = fl.FeaturePlane(5, 2, rng=rng, init_scale=1.0)
        grid = fl.FeatureGrid3D(4, 2, rng=rng, init_scale=1.0)
        uv0 = np.stack([_interior(rng, 3, res=5), _interior(rng, 3, res=5)], axis=1)
        p0 = np.stack([_interior(rng, 3, res=4) for _ in range(3)], axis=1)
        pick2 = rng.uniform(size=(3, 2))

        def f_uv(uv):
            return dc.sum(fl.bilinear_sample(plane, uv) * dc.constant(pick2))

        def f_p(p):
            return dc.sum(fl.trilinear_sample(grid, p) * dc.constant(pick2))

        with dc.Tape():
            worst = max(worst, dc.finite_diff_check(f_uv, dc.param(uv0), eps=1e-6).max_rel_err)
            worst = max(worst, dc.finite_diff_check(f_p, dc.param(p0), eps=1e-6).max_rel_err)
    return worst


def suite_rasterize(rng, n):
    worst = 0.0
    cam = vr.Camera.look_at([0, 0, 3.0], [0, 0, 0], [0, 1, 0], 6, 6, 6.0)
    for _ in range(n):
        prims = [pr.GaussianPrimitive(mu=rng.uniform(-0.4, 0.4, 3),
                                      scale=rng.uniform(0.2, 0.5, 3),
                                      rot=rng.normal(size=4),
                                      opacity=rng.uniform(0.3, 0.8),
                                      color=rng.uniform(0.2, 0.8, 3), n_dirs=4)
                 for _ in range(2)]
        target = rng.uniform(size=(6, 6, 3))

        def loss_fn():
            img = pr.rasterize(cam, [pr._attrs_leaf(p) for p in prims],
                               background=np.ones(3))
            diff = img - dc.constant(target)
            return dc.sum(diff * diff)

        for p in prims:
            for attr in ("mu", "scale_raw", "rot_raw", "opacity_raw", "color_raw"):
                with dc.Tape():
                    rep = dc.finite_diff_check(lambda _t: loss_fn(),
                                               getattr(p, attr), eps=1e-6)
                worst = max(worst, rep.max_rel_err)
    return worst


def suite_reparam_select(rng, n):
    worst = 0.0
    for _ in range(n):
        k = int(rng.integers(2, 8))
        q0 = rng.normal(size=k)
        table = rng.normal(size=(k, 3))
        g = rng.normal(size=3)
        with dc.Tape():
            q = dc.param(q0)
            out = pr.reparam_select(q, table)
            dc.backward(dc.sum(out * dc.constant(g)))
        m = np.exp(q0 - q0.max())
        s = m / m.sum()
        v = table @ g
        want = s * (v - s @ v)
        err = np.max(np.abs(q.grad - want))
        denom = max(np.max(np.abs(want)), 1e-6)
        worst = max(worst, err / denom)
    return worst


SUITES = [
    ("composite", suite_composite, TOL_DEFAULT, "volren"),
    ("render_ray/sigma", suite_render_sigma, TOL_DEFAULT, "volren"),
    ("render_ray/gauge-offset", suite_render_gauge, TOL_DEFAULT, "fields"),
    ("inverse_cdf_sample", suite_inverse_cdf, TOL_DEFAULT, "sampling"),
    ("bilinear/trilinear", suite_interpolation, TOL_DEFAULT, "fields"),
    ("rasterize", suite_rasterize, TOL_RASTER, "primitives"),
    ("reparam_select", suite_reparam_select, 1e-10, "primitives"),
]


def run_suites(only=None, n=50, seed=0):
    """Returns [(name, worst_rel_err, passed)]."""
    results = []
    for name, fn, tol, module in SUITES:
        if only is not None and module != only and only != "diffcore":
            continue
        rng = np.random.default_rng(seed)
        worst = fn(rng, n)
        results.append((name, worst, worst < tol))
    if only == "diffcore":
        # diffcore is exercised through every suite; run them all
        return run_suites(only=None, n=n, seed=seed)
    return results
