import numpy as np
import pytest

from emucal.design import (
    DesignSet,
    ParameterSpace,
    clip_to_box,
    halton_points,
    load_design,
    radical_inverse,
    save_design,
    scale_to_box,
    stretch_sample,
)
from emucal.timeseries import TimeSeries


def l2_star_discrepancy(points):
    """Warnock's closed form for the L2-star discrepancy (oracle)."""
    x = np.atleast_2d(points)
    n, d = x.shape
    term1 = 3.0**-d
    term2 = np.prod((1.0 - x**2) / 2.0, axis=1).sum() * 2.0 / n
    prod = np.prod(1.0 - np.maximum(x[:, None, :], x[None, :, :]), axis=2)
    term3 = prod.sum() / n**2
    return np.sqrt(term1 - term2 + term3)


class TestRadicalInverse:
    def test_definition_values(self):
        assert radical_inverse(1, 2) == 0.5
        assert radical_inverse(3, 2) == 0.75
        assert radical_inverse(2, 3) == pytest.approx(2.0 / 3.0, rel=1e-15)

    def test_rejects_bad_base(self):
        with pytest.raises(ValueError):
            radical_inverse(1, 4)
        with pytest.raises(ValueError):
            radical_inverse(1, 1)
        with pytest.raises(ValueError):
            radical_inverse(0, 2)


class TestHaltonPoints:
    def test_first_points(self):
        pts = halton_points(2, 2, skip=1)
        expected = np.array([[0.5, 1.0 / 3.0], [0.25, 2.0 / 3.0]])
        np.testing.assert_allclose(pts, expected, rtol=1e-15)

    def test_skip(self):
        pts = halton_points(1, 1, skip=4)
        assert pts[0, 0] == 0.125

    def test_deterministic(self):
        a = halton_points(50, 5, skip=1)
        b = halton_points(50, 5, skip=1)
        np.testing.assert_array_equal(a, b)

    def test_dimension_limit(self):
        with pytest.raises(ValueError):
            halton_points(4, 9)

    def test_beats_random_discrepancy(self):
        # Monte Carlo oracle: Halton should have lower L2-star discrepancy
        # than the average of seeded uniform random samples of equal size.
        halton = halton_points(128, 4, skip=1)
        d_halton = l2_star_discrepancy(halton)
        rng = np.random.default_rng(20240101)
        d_random = [
            l2_star_discrepancy(rng.random((128, 4))) for _ in range(100)
        ]
        assert d_halton < np.mean(d_random)


class TestScaleToBox:
    def setup_method(self):
        self.space = ParameterSpace([("a", 0.5, 1.5), ("b", 1.0, 1.5)])

    def test_lower_edge_with_overreach(self):
        pts = scale_to_box(np.array([[0.0, 0.0]]), self.space, overreach=1.05)
        assert pts[0, 0] == pytest.approx(0.475, abs=1e-12)

    def test_center_fixed_point(self):
        for overreach in (1.0, 1.05, 1.3):
            pts = scale_to_box(np.array([[0.5, 0.5]]), self.space, overreach)
            np.testing.assert_allclose(pts[0], [1.0, 1.25], rtol=1e-14)

    def test_upper_edge_with_overreach(self):
        # affine map oracle: center 1.25, half-width 0.25*1.05 = 0.2625
        pts = scale_to_box(np.array([[1.0, 1.0]]), self.space, overreach=1.05)
        assert pts[0, 1] == pytest.approx(1.5125, abs=1e-12)

    def test_monotone_per_dimension(self):
        u = np.linspace(0, 1, 33)
        pts = scale_to_box(np.column_stack([u, u]), self.space, 1.2)
        assert np.all(np.diff(pts[:, 0]) > 0)
        assert np.all(np.diff(pts[:, 1]) > 0)

    def test_rejects_small_overreach(self):
        with pytest.raises(ValueError):
            scale_to_box(np.array([[0.5, 0.5]]), self.space, overreach=0.9)


class TestStretchSample:
    def test_one_dimensional_example(self):
        pts = np.array([[0.0], [2.0]])
        out = stretch_sample(pts, 1.1)
        np.testing.assert_allclose(out.ravel(), [-0.1, 2.1], atol=1e-14)

    def test_identity_at_one(self):
        rng = np.random.default_rng(3)
        pts = rng.normal(size=(40, 3))
        np.testing.assert_array_equal(stretch_sample(pts, 1.0), pts)

    def test_covariance_scaling(self):
        rng = np.random.default_rng(7)
        pts = rng.normal(size=(500, 2))
        out = stretch_sample(pts, 1.1)
        ratio = np.diag(np.cov(out.T)) / np.diag(np.cov(pts.T))
        np.testing.assert_allclose(ratio, 1.21, rtol=0.05)

    def test_mean_preserved(self):
        rng = np.random.default_rng(11)
        pts = rng.normal(size=(100, 4)) + 3.0
        out = stretch_sample(pts, 1.4)
        np.testing.assert_allclose(out.mean(axis=0), pts.mean(axis=0), rtol=1e-12)

    def test_round_trip(self):
        rng = np.random.default_rng(13)
        pts = rng.normal(size=(64, 3))
        back = stretch_sample(stretch_sample(pts, 1.1), 1.0 / 1.1)
        np.testing.assert_allclose(back, pts, rtol=1e-12, atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            stretch_sample(np.empty((0, 2)), 1.1)


class TestDesignSetPersistence:
    def make_design(self):
        space = ParameterSpace([("width", 0.5, 1.5), ("slope", 0.5, 1.5)])
        pts = scale_to_box(halton_points(4, 2), space, 1.05)
        times = np.arange(5) * 120.0
        outputs = [
            TimeSeries(times, np.full(5, float(i)), "m3/s") for i in range(4)
        ]
        return DesignSet(space, pts, outputs, ["halton"] * 4, 1.05)

    def test_round_trip(self, tmp_path):
        design = self.make_design()
        save_design(tmp_path / "d", design, meta={"k": 1.0, "t0_s": 0.0,
                                                  "A_m2": 2.0, "gamma": 5.0,
                                                  "sigma": 0.1})
        loaded, meta = load_design(tmp_path / "d")
        np.testing.assert_allclose(loaded.points, design.points, rtol=1e-15)
        assert loaded.origins == design.origins
        assert meta["k"] == 1.0 and meta["sigma"] == 0.1
        for a, b in zip(loaded.outputs, design.outputs):
            np.testing.assert_array_equal(a.values, b.values)

    def test_byte_identical_rewrite(self, tmp_path):
        design = self.make_design()
        save_design(tmp_path / "a", design)
        save_design(tmp_path / "b", design)
        a = (tmp_path / "a" / "design.csv").read_bytes()
        b = (tmp_path / "b" / "design.csv").read_bytes()
        assert a == b

    def test_outside_point_rejected(self):
        space = ParameterSpace([("a", 0.0, 1.0)])
        with pytest.raises(ValueError):
            DesignSet(space, np.array([[1.5]]), [], ["halton"], 1.05)

    def test_clip_to_box(self):
        space = ParameterSpace([("a", 0.0, 1.0)])
        out = clip_to_box(np.array([[1.4], [-0.5], [0.6]]), space, 1.05)
        lo, hi = space.overreached_bounds(1.05)
        assert np.all(out >= lo) and np.all(out <= hi)
        assert out[2, 0] == 0.6


class TestParameterSpace:
    def test_duplicate_names_rejected(self):
        with pytest.raises(ValueError):
            ParameterSpace([("a", 0, 1), ("a", 0, 1)])

    def test_bad_bounds_rejected(self):
        with pytest.raises(ValueError):
            ParameterSpace([("a", 1.0, 1.0)])

    def test_spans(self):
        space = ParameterSpace([("a", 0.5, 1.1), ("b", 1.0, 1.5)])
        np.testing.assert_allclose(space.spans, [0.6, 0.5])
