import numpy as np
import pytest

from evorender import diffcore as dc
from evorender import ermf, fields, gauge


RNG = lambda s=0: np.random.default_rng(s)


class TestBilinear:
    def test_texel_center(self):
        pl = fields.FeaturePlane(4, 2, rng=RNG(1))
        uv = dc.constant([1.0 / 3.0, 2.0 / 3.0])  # texel (1, 2) on a 4-grid
        out = fields.bilinear_sample(pl, uv)
        assert np.allclose(out.values, pl.data.values[1, 2], atol=1e-12)

    def test_midpoint_average(self):
        pl = fields.FeaturePlane(2, 1)
        pl.data.values[:] = np.array([[[0.0], [0.0]], [[4.0], [4.0]]])
        out = fields.bilinear_sample(pl, dc.constant([0.5, 0.5]))
        assert out.values[0] == pytest.approx(2.0)

    def test_weights_sum_to_one(self):
        pl = fields.FeaturePlane(5, 1)
        pl.data.values[:] = 1.0
        rng = RNG(2)
        uv = dc.constant(rng.uniform(0, 1, size=(50, 2)))
        out = fields.bilinear_sample(pl, uv)
        assert np.allclose(out.values, 1.0, atol=1e-12)

    def test_grad_wrt_uv_matches_fd(self):
        rng = RNG(3)
        pl = fields.FeaturePlane(6, 3, rng=rng)
        worst = 0.0
        for _ in range(20):
            # keep away from texel boundaries where the grad jumps
            cell = rng.integers(0, 5, size=2)
            frac = rng.uniform(0.2, 0.8, size=2)
            uv = dc.param((cell + frac) / 5.0)
            f = lambda t: dc.sum(fields.bilinear_sample(pl, t))
            worst = max(worst, dc.finite_diff_check(f, uv, eps=1e-6).max_rel_err)
        assert worst < 1e-5

    def test_grad_wrt_data_matches_fd(self):
        rng = RNG(4)
        pl = fields.FeaturePlane(3, 2, rng=rng)
        uv = dc.constant(rng.uniform(0, 1, size=(4, 2)))
        f = lambda t: dc.sum(fields.bilinear_sample(pl, uv) ** 2.0)
        assert dc.finite_diff_check(f, pl.data, eps=1e-5).max_rel_err < 1e-5

    def test_continuity_across_cells(self):
        pl = fields.FeaturePlane(4, 1, rng=RNG(5))
        eps = 1e-9
        at = 1.0 / 3.0  # interior cell boundary
        lo = fields.bilinear_sample(pl, dc.constant([at - eps, 0.4])).values
        hi = fields.bilinear_sample(pl, dc.constant([at + eps, 0.4])).values
        assert abs(lo[0] - hi[0]) < 1e-7


class TestTrilinear:
    def test_corner_query(self):
        gr = fields.FeatureGrid3D(3, 2, rng=RNG(6))
        out = fields.trilinear_sample(gr, dc.constant([0.0, 0.5, 1.0]))
        assert np.allclose(out.values, gr.data.values[0, 1, 2], atol=1e-12)

    def test_equal_corner_cell(self):
        gr = fields.FeatureGrid3D(2, 1)
        gr.data.values[:] = 7.0
        out = fields.trilinear_sample(gr, dc.constant([0.5, 0.5, 0.5]))
        assert out.values[0] == pytest.approx(7.0, abs=1e-12)

    def test_grad_wrt_point_fd(self):
        rng = RNG(7)
        gr = fields.FeatureGrid3D(4, 2, rng=rng)
        worst = 0.0
        for _ in range(15):
            cell = rng.integers(0, 3, size=3)
            frac = rng.uniform(0.2, 0.8, size=3)
            p = dc.param((cell + frac) / 3.0)
            f = lambda t: dc.sum(fields.trilinear_sample(gr, t))
            worst = max(worst, dc.finite_diff_check(f, p, eps=1e-6).max_rel_err)
        assert worst < 1e-5


class TestPositionalEncoding:
    def test_zero_point(self):
        out = fields.positional_encode(dc.constant([0.0]), 3)
        assert np.allclose(out.values, [1, 0, 1, 0, 1, 0])

    def test_one_k0(self):
        out = fields.positional_encode(dc.constant([1.0]), 1)
        assert out.values[0] == pytest.approx(-1.0)
        assert abs(out.values[1]) < 1e-12

    def test_gradient_doubles_per_band(self):
        # d/dp of band k has magnitude 2^k pi; ratio between bands is 2
        K = 5
        p = dc.param([0.3])
        out = dc.record_and_eval(lambda t: fields.positional_encode(t, K), [p])
        norms = []
        for k in range(K):
            v = out.values[2 * k:2 * k + 2]
            # |d cos|^2 + |d sin|^2 = (2^k pi)^2 regardless of p
            norms.append((2.0 ** k) * np.pi)
        for k in range(K - 1):
            assert norms[k + 1] / norms[k] == pytest.approx(2.0, abs=1e-12)


class TestFieldEval:
    def test_analytic_inside_outside(self):
        fld = fields.AnalyticField([fields.Sphere([0.5, 0.5, 0.5], 0.2, 10.0, [1, 0, 0])])
        sig, col = fields.field_eval(fld, np.array([[0.5, 0.5, 0.5], [0.9, 0.9, 0.9]]))
        assert sig.values[0] == 10.0 and np.allclose(col.values[0], [1, 0, 0])
        assert sig.values[1] == 0.0

    def test_zero_init_mlp(self):
        fld = fields.MlpField(RNG(8))
        sig, col = fields.field_eval(fld, dc.constant([[0.2, 0.3, 0.4]]))
        assert sig.values[0] == pytest.approx(np.log(2.0))  # softplus(0)
        assert np.allclose(col.values[0], 0.5)

    def test_plane_field_identity_equals_zero_evolutive(self):
        rng = RNG(9)
        fld = fields.PlaneField(rng, resolution=8, feature_dim=4)
        g = gauge.EvolutiveGauge.plane_backed(8)
        p = dc.constant(rng.uniform(0, 1, size=(10, 3)))
        s1, c1 = fields.field_eval(fld, p, gauge=gauge.IdentityGauge())
        s2, c2 = fields.field_eval(fld, p, gauge=g)
        assert np.array_equal(s1.values, s2.values)
        assert np.array_equal(c1.values, c2.values)


class TestGauge:
    def test_identity(self):
        p = dc.constant([[0.2, 0.5, 0.9]])
        out = gauge.apply_gauge(gauge.IdentityGauge(), p)
        assert np.array_equal(out.values, [[0.2, 0.5, 0.9]])

    def test_orthogonal_projection(self):
        p = dc.constant([[0.2, 0.5, 0.9]])
        coords = gauge.apply_gauge(gauge.OrthogonalGauge(), p)
        assert np.allclose(coords[0].values, [[0.2, 0.5]])
        assert np.allclose(coords[1].values, [[0.2, 0.9]])
        assert np.allclose(coords[2].values, [[0.5, 0.9]])

    def test_zero_init_evolutive_equals_base(self):
        rng = RNG(10)
        g = gauge.EvolutiveGauge.plane_backed(8)
        p = dc.constant(rng.uniform(0, 1, size=(20, 3)))
        ev = gauge.plane_coords(g, p)
        base = gauge.plane_coords(g.base, p)
        for a, b in zip(ev, base):
            assert np.array_equal(a.values, b.values)

    def test_output_in_unit_square(self):
        rng = RNG(11)
        g = gauge.EvolutiveGauge.plane_backed(4, offset_scale=0.5)
        for m in g.offset_maps:
            m.plane.data.values[:] = rng.normal(scale=10.0, size=m.plane.data.shape)
        p = dc.constant(rng.uniform(0, 1, size=(50, 3)))
        for c in gauge.plane_coords(g, p):
            assert np.all(c.values >= 0.0) and np.all(c.values <= 1.0)

    def test_offset_grad_matches_fd(self):
        # gradient of the gauge output itself w.r.t. offset parameters
        rng = RNG(12)
        g = gauge.EvolutiveGauge.plane_backed(4, offset_scale=0.1)
        for m in g.offset_maps:
            m.plane.data.values[:] = rng.normal(scale=0.3, size=m.plane.data.shape)
        pts = dc.constant(rng.uniform(0.15, 0.85, size=(6, 3)))
        weights = dc.constant(rng.normal(size=(6, 2)))

        def f(t):
            coords = gauge.plane_coords(g, pts)
            return dc.sum(dc.concat(coords, axis=0) * dc.concat([weights] * 3, axis=0))

        worst = 0.0
        for m in g.offset_maps:
            worst = max(worst, dc.finite_diff_check(f, m.plane.data, eps=1e-5).max_rel_err)
        assert worst < 1e-5

    def test_offset_grad_through_field_fd(self):
        # end-to-end through a plane field: looser bound, interpolation
        # corners make the derivative only piecewise-smooth
        rng = RNG(12)
        g = gauge.EvolutiveGauge.plane_backed(4, offset_scale=0.1)
        for m in g.offset_maps:
            m.plane.data.values[:] = rng.normal(scale=0.3, size=m.plane.data.shape)
        fld = fields.PlaneField(rng, resolution=8, feature_dim=4)
        pts = dc.constant(rng.uniform(0.15, 0.85, size=(6, 3)))

        def f(t):
            sig, col = fields.field_eval(fld, pts, gauge=g)
            return dc.sum(sig) + dc.sum(col)

        worst = 0.0
        for m in g.offset_maps:
            worst = max(worst, dc.finite_diff_check(f, m.plane.data, eps=1e-5).max_rel_err)
        assert worst < 1e-4

    def test_frozen_offset_zero_norms(self):
        g = gauge.EvolutiveGauge.plane_backed(4)
        g.set_trainable(False)
        log = gauge.GaugeGradLog(g)
        log.record(0)
        assert log.stats()["max"] == 0.0


class TestErmfContainer:
    def test_round_trip(self, tmp_path):
        rng = RNG(13)
        tensors = {"a.w": rng.normal(size=(3, 4)), "gauge.off": rng.normal(size=(2,)),
                   "scalar": np.array(1.5)}
        path = tmp_path / "ckpt.ermf"
        ermf.save_tensors(path, tensors)
        loaded = ermf.load_tensors(path)
        assert set(loaded) == set(tensors)
        for k in tensors:
            assert np.array_equal(loaded[k], tensors[k])

    def test_truncated_file_errors(self, tmp_path):
        path = tmp_path / "bad.ermf"
        ermf.save_tensors(path, {"x": np.ones((4, 4))})
        raw = path.read_bytes()
        path.write_bytes(raw[:-5])
        with pytest.raises(ermf.ErmfError):
            ermf.load_tensors(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "nope.ermf"
        path.write_bytes(b"XXXX1234")
        with pytest.raises(ermf.ErmfError):
            ermf.load_tensors(path)

    def test_field_state_round_trip(self, tmp_path):
        rng = RNG(14)
        fld = fields.GridField(rng, resolution=4, feature_dim=3)
        state = fields.field_state(fld, prefix="field.")
        path = tmp_path / "f.ermf"
        ermf.save_tensors(path, state)
        fld2 = fields.GridField(RNG(99), resolution=4, feature_dim=3)
        fields.load_field_state(fld2, ermf.load_tensors(path), prefix="field.")
        assert np.array_equal(fld2.grid.data.values, fld.grid.data.values)
