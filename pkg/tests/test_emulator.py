import numpy as np
import pytest
from scipy.integrate import quad

from emucal.design import DesignSet, ParameterSpace, halton_points, scale_to_box
from emucal.emulator import (
    Emulator,
    correlation_matrix,
    dense_condition,
    discretize,
    estimate_sigma,
    predicted_rmse,
    sigma_quadform_dense,
    unit_prior_scale,
)
from emucal.emulator import EmulatorPrediction, _greens_integral
from emucal.reservoir import (
    AuxiliaryParameters,
    CatchmentAggregates,
    simulate_linear,
    simulate_linear_batch,
)
from emucal.timeseries import TimeSeries


def toy_setup(n_design=3, n_t=20, sigma=0.4, seed=0, ndim=2, gamma=5.0):
    """Small coupled-replica instance sized for the dense oracle."""
    rng = np.random.default_rng(seed)
    agg = CatchmentAggregates(
        width_m=900.0, slope=0.08, manning=0.12, imperviousness=0.36,
        mapping={"width": "width", "slope": "slope",
                 "manning": "manning_impervious",
                 "imperviousness": "imperviousness"},
    )
    dims = [("width", 0.5, 1.5), ("slope", 0.5, 1.5),
            ("manning_impervious", 0.5, 1.5), ("imperviousness", 0.5, 1.1)][:ndim]
    space = ParameterSpace(dims)
    pts = scale_to_box(rng.random((n_design, ndim)), space, 1.05)
    aux = AuxiliaryParameters(k=0.14, t0_s=0.0, A_m2=3.0e6, gamma=gamma, sigma=sigma)
    t = np.arange(n_t) * 600.0
    rain_vals = 2e-6 * np.exp(-0.5 * ((t - 0.35 * t[-1]) / (0.2 * t[-1])) ** 2)
    rain = TimeSeries(t, rain_vals, "m/s")
    z = simulate_linear_batch(pts, aux, rain, agg, space.names)
    # perturb the linear outputs so the design is not a perfect prior-model fit
    y = z * (1.0 + 0.2 * rng.standard_normal(z.shape) * np.linspace(0, 1, n_t))
    outputs = [TimeSeries(t, row, "m3/s") for row in y]
    design = DesignSet(space, pts, outputs, ["halton"] * n_design, 1.05)
    return design, aux, rain, agg


class TestCorrelationMatrix:
    def test_unit_diagonal(self):
        thetas = np.array([[0.1, 0.2], [0.5, 0.9]])
        C = correlation_matrix(thetas, 5.0, [1.0, 1.0])
        np.testing.assert_allclose(np.diag(C), 1.0)

    def test_three_four_five(self):
        thetas = np.array([[0.0, 0.0], [3.0, 4.0]])
        C = correlation_matrix(thetas, 5.0, [1.0, 1.0])
        assert C[0, 1] == pytest.approx(np.exp(-1.0), rel=1e-12)
        assert C[0, 1] == pytest.approx(0.367879, rel=1e-5)

    def test_monotone_decay(self):
        seps = np.linspace(0, 50, 20)
        vals = [
            correlation_matrix(np.array([[0.0], [s]]), 5.0, [1.0])[0, 1]
            for s in seps
        ]
        assert np.all(np.diff(vals) < 0)
        assert vals[-1] < 1e-4


class TestDiscretize:
    def test_small_step_limit(self):
        for dt in (1e-4, 1e-6):
            _, Q = discretize([-1.0], np.eye(1), 2.0, dt)
            assert Q[0, 0] == pytest.approx(4.0 * dt, rel=1e-3)

    def test_closed_form_ln2(self):
        corr = np.array([[1.0, 0.5], [0.5, 1.0]])
        phis, Q = discretize([-1.0, -1.0], corr, 1.5, np.log(2.0))
        np.testing.assert_allclose(phis, 0.5, rtol=1e-14)
        np.testing.assert_allclose(Q, 1.5**2 * corr * (3.0 / 8.0), rtol=1e-12)

    def test_quadrature_oracle(self):
        kappas = np.array([-2.3e-4, -7.1e-4, -1.2e-3])
        corr = correlation_matrix(np.array([[0.0], [0.4], [1.1]]), 5.0, [1.0])
        sigma, dt = 0.8, 600.0
        _, Q = discretize(kappas, corr, sigma, dt)
        for a in range(3):
            for b in range(3):
                integral, _ = quad(
                    lambda u: np.exp(kappas[a] * u) * np.exp(kappas[b] * u), 0, dt
                )
                expected = sigma**2 * corr[a, b] * integral
                assert Q[a, b] == pytest.approx(expected, rel=1e-10)

    def test_degenerate_rate_sum(self):
        _, Q = discretize([0.0], np.eye(1), 1.0, 0.5)
        assert Q[0, 0] == pytest.approx(0.5)

    def test_psd(self):
        design, aux, rain, agg = toy_setup(4, 12, seed=3)
        from emucal.reservoir import release_rate

        kappas = np.array([
            release_rate(p, aux, agg, design.space.names) for p in design.points
        ])
        corr = correlation_matrix(design.points, 5.0, design.space.spans)
        _, Q = discretize(kappas, corr, 1.0, rain.dt)
        assert np.linalg.eigvalsh(Q).min() > -1e-12 * np.abs(Q).max()


class TestGreensIntegral:
    def test_diagonal_closed_form(self):
        kappa = -3.0e-4
        t = np.arange(15) * 600.0
        I = _greens_integral(kappa, kappa, t)
        expected = (1.0 - np.exp(2 * kappa * t)) / (-2 * kappa)
        np.testing.assert_allclose(np.diag(I), expected, rtol=1e-12)

    def test_quadrature_oracle(self):
        a, b = -2.0e-4, -9.0e-4
        t = np.array([0.0, 700.0, 2500.0])
        I = _greens_integral(a, b, t)
        for i, ti in enumerate(t):
            for j, tj in enumerate(t):
                val, _ = quad(
                    lambda u: np.exp(a * (ti - u)) * np.exp(b * (tj - u)),
                    0.0, min(ti, tj),
                )
                assert I[i, j] == pytest.approx(val, abs=1e-12, rel=1e-10)


class TestConditioning:
    def test_interpolates_design_points(self):
        design, aux, rain, agg = toy_setup(3, 20, sigma=0.4, seed=1)
        emu = Emulator(design, aux, rain, agg)
        scale = emu.output_scale
        for i in range(len(design)):
            pred = emu.predict(design.points[i])
            np.testing.assert_allclose(
                pred.mean.values, design.outputs[i].values,
                atol=1e-6 * scale, rtol=0,
            )
            assert np.all(pred.variance <= 1e-8 * aux.sigma**2)

    def test_prior_reversion_far_away(self):
        # a query decorrelated from every design point falls back to the
        # linear-model mean
        design, aux, rain, agg = toy_setup(3, 20, sigma=0.4, seed=2, gamma=0.01)
        emu = Emulator(design, aux, rain, agg)
        theta = np.array([1.49, 1.49])
        far = min(
            np.linalg.norm((design.points - theta) / design.space.spans, axis=1)
        )
        assert np.exp(-far / 0.01) < 1e-12
        pred = emu.predict(theta)
        z = simulate_linear(theta, aux, rain, agg, design.space.names).values
        np.testing.assert_allclose(pred.mean.values, z,
                                   atol=1e-6 * emu.output_scale)

    def test_kalman_matches_dense_oracle(self):
        for seed in range(50):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(1, 5))
            n_t = int(rng.integers(6, 21))
            sigma = float(rng.uniform(0.05, 1.0))
            design, aux, rain, agg = toy_setup(n, n_t, sigma=sigma, seed=seed)
            emu = Emulator(design, aux, rain, agg)
            theta = scale_to_box(rng.random((1, 2)), design.space, 1.0)[0]
            k = emu.predict(theta)
            d = dense_condition(design, aux, rain, agg, theta)
            m_scale = np.max(np.abs(d.mean.values)) + 1e-30
            v_scale = np.max(d.variance) + 1e-30
            np.testing.assert_allclose(
                k.mean.values, d.mean.values, rtol=1e-8, atol=1e-8 * m_scale
            )
            np.testing.assert_allclose(
                k.variance, d.variance, rtol=1e-7, atol=1e-8 * v_scale
            )

    def test_fast_mean_matches_predict(self):
        for seed in range(20):
            rng = np.random.default_rng(100 + seed)
            design, aux, rain, agg = toy_setup(
                int(rng.integers(1, 5)), int(rng.integers(6, 21)),
                sigma=float(rng.uniform(0.05, 1.0)), seed=seed)
            emu = Emulator(design, aux, rain, agg)
            theta = scale_to_box(rng.random((1, 2)), design.space, 1.0)[0]
            fast = emu.mean(theta)
            full = emu.predict(theta).mean.values
            np.testing.assert_allclose(
                fast, full, rtol=1e-7, atol=1e-8 * emu.output_scale
            )

    def test_variance_shrinks_with_added_point(self):
        design, aux, rain, agg = toy_setup(4, 16, sigma=0.5, seed=5)
        smaller = DesignSet(design.space, design.points[:3], design.outputs[:3],
                            design.origins[:3], design.overreach)
        theta = np.array([1.1, 0.9])
        v_small = Emulator(smaller, aux, rain, agg).predict(theta).variance
        v_full = Emulator(design, aux, rain, agg).predict(theta).variance
        assert np.all(v_full <= v_small + 1e-9 * max(v_small.max(), 1e-30))

    def test_permutation_invariance(self):
        design, aux, rain, agg = toy_setup(4, 14, sigma=0.5, seed=6)
        perm = [2, 0, 3, 1]
        shuffled = DesignSet(design.space, design.points[perm],
                             [design.outputs[i] for i in perm],
                             [design.origins[i] for i in perm], design.overreach)
        theta = np.array([0.8, 1.2])
        p1 = Emulator(design, aux, rain, agg).predict(theta)
        p2 = Emulator(shuffled, aux, rain, agg).predict(theta)
        scale = np.max(np.abs(p1.mean.values))
        np.testing.assert_allclose(p1.mean.values, p2.mean.values,
                                   rtol=1e-10, atol=1e-10 * scale)
        np.testing.assert_allclose(p1.variance, p2.variance,
                                   rtol=1e-8, atol=1e-10 * np.max(p1.variance))

    def test_sigma_zero_reverts_to_linear_model(self):
        design, aux, rain, agg = toy_setup(3, 18, sigma=0.0, seed=7)
        emu = Emulator(design, aux, rain, agg)
        rng = np.random.default_rng(8)
        for _ in range(5):
            theta = scale_to_box(rng.random((1, 2)), design.space, 1.0)[0]
            z = simulate_linear(theta, aux, rain, agg, design.space.names).values
            pred = emu.predict(theta)
            np.testing.assert_allclose(pred.mean.values, z, rtol=1e-10,
                                       atol=1e-12 * emu.output_scale)
            np.testing.assert_array_equal(pred.variance, 0.0)
            np.testing.assert_allclose(emu.mean(theta), z, rtol=1e-10,
                                       atol=1e-12 * emu.output_scale)

    def test_dense_sigma_zero(self):
        design, aux, rain, agg = toy_setup(2, 10, sigma=0.0, seed=9)
        theta = np.array([1.0, 1.0])
        pred = dense_condition(design, aux, rain, agg, theta)
        z = simulate_linear(theta, aux, rain, agg, design.space.names).values
        np.testing.assert_allclose(pred.mean.values, z, rtol=1e-12)
        np.testing.assert_array_equal(pred.variance, 0.0)

    def test_dense_refuses_large(self):
        design, aux, rain, agg = toy_setup(3, 20, seed=10)
        big = TimeSeries(np.arange(800) * 600.0, np.zeros(800))
        with pytest.raises(ValueError, match="refused"):
            dense_condition(design, aux, big, agg, design.points[0])

    def test_nonfinite_outputs_rejected(self):
        design, aux, rain, agg = toy_setup(2, 10, seed=11)
        design.outputs[0].values[3] = np.nan
        with pytest.raises(ValueError):
            Emulator(design, aux, rain, agg)


class TestPredictedRmse:
    def test_all_ones(self):
        ts = TimeSeries(np.arange(3) * 1.0, np.zeros(3))
        assert predicted_rmse(EmulatorPrediction(ts, np.ones(3), 0.0)) == 1.0

    def test_mean_of_zero_two(self):
        ts = TimeSeries(np.arange(2) * 1.0, np.zeros(2))
        pred = EmulatorPrediction(ts, np.array([0.0, 2.0]), 0.0)
        assert predicted_rmse(pred) == pytest.approx(1.0)


class TestEstimateSigma:
    def test_zero_residual(self):
        design, aux, rain, agg = toy_setup(3, 15, seed=12)
        z = simulate_linear_batch(design.points, aux, rain, agg,
                                  design.space.names)
        design = DesignSet(design.space, design.points,
                           [TimeSeries(rain.times, row) for row in z],
                           design.origins, design.overreach)
        assert estimate_sigma(design, aux, rain, agg) == pytest.approx(0.0, abs=1e-9)

    def test_scalar_formula(self):
        # 1 residual entry, unit covariance: sigma^2 = 2^2 / 1
        assert sigma_quadform_dense([2.0], [[1.0]]) == pytest.approx(4.0)

    def test_innovation_form_matches_dense(self):
        from emucal.emulator import _innovation_quadform
        from emucal.reservoir import output_gain, release_rate

        for seed in range(10):
            design, aux, rain, agg = toy_setup(3, 12, sigma=0.5, seed=20 + seed)
            names = design.space.names
            kappas = np.array([release_rate(p, aux, agg, names)
                               for p in design.points])
            gains = np.array([output_gain(p, aux, agg, names)
                              for p in design.points])
            corr = correlation_matrix(design.points, aux.gamma,
                                      design.space.spans)
            t_rel = rain.times - rain.times[0]
            z = simulate_linear_batch(design.points, aux, rain, agg, names)
            resid = design.output_matrix - z
            n, N = resid.shape
            # dense unit-sigma covariance over observed indices (>= 1)
            M = N - 1
            Sigma = np.zeros((n * M, n * M))
            for a in range(n):
                for b in range(n):
                    blk = corr[a, b] * gains[a] * gains[b] * _greens_integral(
                        kappas[a], kappas[b], t_rel)
                    Sigma[a * M:(a + 1) * M, b * M:(b + 1) * M] = blk[1:, 1:]
            r = resid[:, 1:].reshape(-1)
            unit_scale = unit_prior_scale(kappas, gains, t_rel[-1])
            eps = 1e-10 * unit_scale
            dense = r @ np.linalg.solve(Sigma + eps * np.eye(n * M), r)
            quad, count = _innovation_quadform(kappas, corr, gains, resid,
                                               rain.dt, eps)
            assert quad == pytest.approx(dense, rel=1e-8)
            assert count == n * M

    def test_monte_carlo_consistency(self):
        # synthetic designs drawn from the prior model: estimates recover
        # the generating sigma within 20% on average over seeded draws
        design0, aux, rain, agg = toy_setup(6, 30, sigma=0.0, seed=30)
        names = design0.space.names
        from emucal.reservoir import output_gain, release_rate

        kappas = np.array([release_rate(p, aux, agg, names)
                           for p in design0.points])
        gains = np.array([output_gain(p, aux, agg, names)
                          for p in design0.points])
        corr = correlation_matrix(design0.points, aux.gamma,
                                  design0.space.spans)
        t_rel = rain.times - rain.times[0]
        unit_scale = unit_prior_scale(kappas, gains, t_rel[-1])
        sigma_true = 0.6
        sigma_int = sigma_true / np.sqrt(unit_scale)
        z = simulate_linear_batch(design0.points, aux, rain, agg, names)
        n, N = z.shape
        M = N - 1
        Sigma = np.zeros((n * M, n * M))
        for a in range(n):
            for b in range(n):
                blk = sigma_int**2 * corr[a, b] * gains[a] * gains[b] * (
                    _greens_integral(kappas[a], kappas[b], t_rel))
                Sigma[a * M:(a + 1) * M, b * M:(b + 1) * M] = blk[1:, 1:]
        L = np.linalg.cholesky(Sigma + 1e-12 * unit_scale * np.eye(n * M))
        rng = np.random.default_rng(31)
        estimates = []
        aux_s = AuxiliaryParameters(k=aux.k, t0_s=aux.t0_s, A_m2=aux.A_m2,
                                    gamma=aux.gamma, sigma=sigma_true)
        for _ in range(50):
            noise = (L @ rng.standard_normal(n * M)).reshape(n, M)
            y = z.copy()
            y[:, 1:] += noise
            design = DesignSet(design0.space, design0.points,
                               [TimeSeries(rain.times, row) for row in y],
                               design0.origins, design0.overreach)
            estimates.append(estimate_sigma(design, aux_s, rain, agg))
        assert np.mean(estimates) == pytest.approx(sigma_true, rel=0.2)
