"""Gaussian-process emulation of a simulator via coupled linear reservoirs.

One linear reservoir replica is attached to each of the n design
parameter vectors plus one to the query vector; the replicas share a
multivariate white-noise forcing whose correlation decays with parameter
distance. Conditioning the resulting joint normal distribution on the
design outputs yields a predictive mean and variance for the query
output series.

Two equivalent conditioning routes are provided:

* :class:`Emulator` discretizes the coupled system exactly and runs a
  Kalman filter / RTS smoother over the (n+1)-replica state, which scales
  to realistic design sizes;
* :func:`dense_condition` assembles the full joint covariance from the
  closed-form Green's-function integrals and conditions by direct linear
  solves. It is quadratic in n*N_t and deliberately refuses large inputs;
  its role is to cross-check the filter on small instances.

The reservoir state is pinned to zero at the first grid point, so design
observations enter the conditioning from the second grid point onward;
the first point carries no information under the model.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numba import njit

from .design import DesignSet
from .errors import NumericalError
from .reservoir import (
    AuxiliaryParameters,
    CatchmentAggregates,
    integrate_reservoir,
    lag_series,
    output_gain,
    release_rate,
    simulate_linear_batch,
    step_coefficients,
)
from .timeseries import TimeSeries

#: relative observation-noise floor on design outputs, as a fraction of
#: the squared output scale; keeps filter covariances invertible while
#: staying far below every stated tolerance
DEFAULT_JITTER_REL = 1e-10

#: size guard for the dense conditioning oracle
DENSE_LIMIT = 2000


@dataclass
class EmulatorPrediction:
    """Predictive mean series, per-time variances and their RMS."""

    mean: TimeSeries
    variance: np.ndarray
    rmse_estimate: float


def predicted_rmse(prediction: EmulatorPrediction) -> float:
    """Root of the mean per-time predictive variance."""
    return float(np.sqrt(np.mean(prediction.variance)))


def unit_prior_scale(kappas, gains, t_end: float) -> float:
    """Largest prior output variance produced by unit process noise.

    The noise scale sigma is carried in output units: a value of sigma
    means the coupled noise process reaches a prior standard deviation of
    sigma (in output units) at its largest point over the design replicas
    and the time window. This factor converts between that convention and
    the raw state-noise scale entering the discretized system.
    """
    kappas = np.asarray(kappas, dtype=float)
    gains = np.asarray(gains, dtype=float)
    var = gains**2 * (1.0 - np.exp(2.0 * kappas * t_end)) / (-2.0 * kappas)
    return float(np.max(var))


def _jitter_floor(jitter_rel: float, scale: float, sigma_out: float) -> float:
    """Observation-noise floor on design outputs.

    Kept at or below ``jitter_rel * scale**2`` and also at or below one
    tenth of ``100 * jitter_rel * sigma_out**2`` so interpolation variance
    stays two orders below the ``1e-8 * sigma**2`` contract.
    """
    cap = min(jitter_rel * scale**2, 10.0 * jitter_rel * sigma_out**2)
    return max(cap, 1e-30 * scale**2, 1e-300)


def correlation_matrix(thetas, gamma: float, spans) -> np.ndarray:
    """Replica coupling matrix exp(-||delta_theta / spans|| / gamma).

    Distances are Euclidean after dividing each dimension by the span of
    the calibration hypercube; entries are 1 on the diagonal and decay to
    0 with parameter separation.
    """
    if gamma <= 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    spans = np.asarray(spans, dtype=float)
    if np.any(spans <= 0):
        raise ValueError("all spans must be > 0")
    pts = np.atleast_2d(np.asarray(thetas, dtype=float)) / spans
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    return np.exp(-dist / gamma)


def discretize(kappas, corr, sigma: float, dt: float):
    """Exact one-step transition and process-noise increment.

    Returns ``(phis, Q)`` with ``phis[a] = exp(kappa_a*dt)`` and

        Q[a,b] = sigma^2 * corr[a,b] * (exp((k_a+k_b)*dt) - 1)/(k_a+k_b),

    the covariance accumulated by the coupled noise over one grid step
    (analytic limit sigma^2*corr*dt when kappa_a + kappa_b == 0).
    Q is symmetric positive semi-definite.
    """
    kappas = np.asarray(kappas, dtype=float)
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    phis = np.exp(kappas * dt)
    ksum = kappas[:, None] + kappas[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        integral = np.where(np.abs(ksum) < 1e-300, dt, np.expm1(ksum * dt) / ksum)
    Q = sigma**2 * np.asarray(corr, dtype=float) * integral
    return phis, 0.5 * (Q + Q.T)


def _greens_integral(a: float, b: float, t: np.ndarray):
    """Integral of G_a(t_i, u) * G_b(t_j, u) du over [0, min(t_i, t_j)].

    Closed form with all exponents kept non-positive for stability;
    ``a`` and ``b`` are (negative) release rates, ``t`` grid times
    relative to the first grid point.
    """
    ti = t[:, None]
    tj = t[None, :]
    m = np.minimum(ti, tj)
    full = np.exp(a * ti + b * tj)
    rest = np.exp(a * (ti - m) + b * (tj - m))
    return (full - rest) / (a + b)


@njit(cache=True)
def _cross_mean_kernel(kq, kappas, q, g_all, t_rel, dt, out):
    """Accumulate sum_j Cov(query_i, obs_j) * weight_j for all times i.

    For each design replica the double sum over observation times splits
    at j <= i / j > i into two stable one-pass recursions (decaying
    exponentials only), giving O(n * N_t) total work.
    """
    n = kappas.shape[0]
    N = t_rel.shape[0]
    for a in range(n):
        phiq = np.exp(kq * dt)
        phia = np.exp(kappas[a] * dt)
        s = 0.0
        for i in range(1, N):
            s = phiq * s + g_all[a, i] * q[i, a]
            out[i] += s
        b_acc = 0.0
        for i in range(N - 2, -1, -1):
            b_acc = phia * (b_acc + q[i + 1, a])
            out[i] += g_all[a, i] * b_acc
    return out


class Emulator:
    """Conditioned coupled-reservoir emulator for one design set.

    Construction precomputes everything that depends on the design only:
    the design-replica covariance structures, one Kalman filter/smoother
    pass over the design outputs, and the observation-space weight vector
    it implies. Each query then costs one (n+1)-replica filter pass
    (:meth:`predict`, mean and variance) or an O(n*N_t) covariance
    contraction (:meth:`mean`, mean only — the path MCMC uses).

    Instances are immutable after construction and safe for concurrent
    read-only prediction.
    """

    def __init__(self, design: DesignSet, aux: AuxiliaryParameters, rain: TimeSeries,
                 aggregates: CatchmentAggregates, jitter_rel: float = DEFAULT_JITTER_REL):
        if not design.outputs:
            raise ValueError("design set has no simulated outputs to condition on")
        y = design.output_matrix
        if not np.all(np.isfinite(y)):
            raise ValueError("design outputs contain non-finite values")
        self.design = design
        self.aux = aux
        self.rain = rain
        self.aggregates = aggregates
        self._names = design.space.names
        self._spans = design.space.spans
        self._t_rel = rain.times - rain.times[0]
        self._dt = rain.dt
        self._lagged = lag_series(rain, aux.t0_s)
        self._y = y
        self._n = len(design)
        self._Nt = len(rain)

        self._kappas = np.array([
            release_rate(p, aux, aggregates, self._names) for p in design.points
        ])
        self._gains = np.array([
            output_gain(p, aux, aggregates, self._names) for p in design.points
        ])
        self._corr = correlation_matrix(design.points, aux.gamma, self._spans)
        self._z = simulate_linear_batch(design.points, aux, rain, aggregates, self._names)

        self._unit_scale = unit_prior_scale(self._kappas, self._gains, self._t_rel[-1])
        self._sigma_int = aux.sigma / np.sqrt(self._unit_scale)
        scale = float(np.max(np.abs(y))) if y.size else 0.0
        self.output_scale = max(scale, 1e-30)
        self._jitter = _jitter_floor(jitter_rel, self.output_scale, aux.sigma)

        self._phis_d, self._Q_d = discretize(self._kappas, self._corr, self._sigma_int, self._dt)
        self._weights = self._observation_weights()

    # -- design-only Kalman pass ------------------------------------------

    def _observation_weights(self) -> np.ndarray:
        """Solve (Cov[y] + jitter*I)^{-1} (y - z) via smoothing errors.

        Runs the filter over the n design replicas and accumulates the
        backward (Bryson-Frazier style) recursion, whose per-step output
        stacks to exactly the dense solve without ever dividing by the
        jitter.
        """
        n, N = self._n, self._Nt
        H = self._gains
        eps = self._jitter
        phis, Q = self._phis_d, self._Q_d
        resid = (self._y - self._z).T  # (N, n)

        a = np.zeros(n)  # predicted residual-state mean at step i
        P = Q.copy()
        vs = np.empty((N, n))
        Finv_vs = np.empty((N, n))
        Ks = np.empty((N, n, n))
        for i in range(1, N):
            v = resid[i] - H * a
            F = (P * np.outer(H, H)) + eps * np.eye(n)
            try:
                cho = np.linalg.cholesky(F)
            except np.linalg.LinAlgError as exc:
                raise NumericalError(f"innovation covariance not PD at step {i}") from exc
            Finv_v = _cho_solve(cho, v)
            PHt = P * H[None, :]
            K = phis[:, None] * _cho_solve_mat(cho, PHt.T).T  # Phi P H' F^{-1}
            vs[i] = v
            Finv_vs[i] = Finv_v
            Ks[i] = K
            m = a + PHt @ Finv_v
            C = P - PHt @ _cho_solve_mat(cho, PHt.T)
            a = phis * m
            P = (phis[:, None] * C) * phis[None, :] + Q
            P = 0.5 * (P + P.T)

        u = np.zeros((N, n))
        r = np.zeros(n)
        for i in range(N - 1, 0, -1):
            K = Ks[i]
            u[i] = Finv_vs[i] - K.T @ r
            L_T_r = phis * r - H * (K.T @ r)  # (Phi - K H)^T r with diagonal Phi, H
            r = H * Finv_vs[i] + L_T_r
        return u

    # -- per-query paths ----------------------------------------------------

    def _query_quantities(self, theta):
        theta = np.asarray(theta, dtype=float)
        if not self.design.space.contains(theta[None, :], self.design.overreach)[0]:
            warnings.warn(f"query {theta} outside the over-reached hypercube")
        kq = release_rate(theta, self.aux, self.aggregates, self._names)
        hq = output_gain(theta, self.aux, self.aggregates, self._names)
        diff = (self.design.points - theta) / self._spans
        c = np.exp(-np.sqrt(np.sum(diff * diff, axis=1)) / self.aux.gamma)
        return kq, hq, c

    def mean(self, theta) -> np.ndarray:
        """Predictive mean only; the fast path for MCMC likelihoods."""
        kq, hq, c = self._query_quantities(theta)
        phi, gain = step_coefficients(kq, self._dt)
        u = np.concatenate([[0.0], gain * self._lagged[:-1]])
        d = _iir_first_order(phi, u)
        zq = hq * d
        ksum = kq + self._kappas
        with np.errstate(over="ignore"):
            g_all = np.expm1(ksum[:, None] * self._t_rel[None, :]) / ksum[:, None]
        q = self._weights * (self._gains * c)[None, :]
        out = np.zeros(self._Nt)
        _cross_mean_kernel(kq, self._kappas, q, g_all, self._t_rel, self._dt, out)
        return zq + self._sigma_int**2 * hq * out

    def predict(self, theta) -> EmulatorPrediction:
        """Predictive mean and per-time variance via filter + smoother."""
        kq, hq, c = self._query_quantities(theta)
        kappas = np.concatenate([self._kappas, [kq]])
        gains_full = np.concatenate([self._gains, [hq]])
        corr = np.empty((self._n + 1, self._n + 1))
        corr[: self._n, : self._n] = self._corr
        corr[self._n, : self._n] = c
        corr[: self._n, self._n] = c
        corr[self._n, self._n] = 1.0
        phis, Q = discretize(kappas, corr, self._sigma_int, self._dt)

        mean_states, var_states = _filter_smoother(
            phis, Q, self._gains, self._y, self._lagged, kappas, self._dt, self._jitter
        )
        mean = gains_full[self._n] * mean_states[:, self._n]
        var = gains_full[self._n] ** 2 * var_states[:, self._n]
        var = _clip_variance(var, self._sigma_int, hq, kappas[self._n], self._t_rel)
        pred = EmulatorPrediction(
            TimeSeries(self.rain.times, mean, "m3/s"), var, 0.0
        )
        pred.rmse_estimate = predicted_rmse(pred)
        return pred


def _clip_variance(var, sigma, hq, kq, t_rel):
    """Zero-clip small negative round-off; fail on structural negativity."""
    if len(t_rel) > 1:
        prior_scale = sigma**2 * hq**2 * max(
            (1.0 - np.exp(2 * kq * t_rel[-1])) / max(-2 * kq, 1e-300), 0.0
        )
    else:
        prior_scale = sigma**2 * hq**2
    tol = 1e-6 * max(prior_scale, 1e-300)
    if np.any(var < -tol):
        raise NumericalError(
            f"predictive variance lost positive semi-definiteness: min {var.min()}"
        )
    return np.maximum(var, 0.0)


def _iir_first_order(phi: float, u: np.ndarray) -> np.ndarray:
    from scipy.signal import lfilter

    return lfilter([1.0], [1.0, -phi], u)


def _cho_solve(cho, b):
    z = np.linalg.solve(cho, b)
    return np.linalg.solve(cho.T, z)


def _cho_solve_mat(cho, B):
    Z = np.linalg.solve(cho, B)
    return np.linalg.solve(cho.T, Z)


def _filter_smoother(phis, Q, H_gains, y, lagged_rain, kappas, dt, eps):
    """Kalman filter + RTS smoother over the coupled replica state.

    State dimension is n+1 (n design replicas plus the query); the n
    design outputs are observed at every grid point after the first.
    Returns smoothed state means (N, n+1) and marginal variances.
    """
    n = len(H_gains)
    m = len(phis)  # n + 1
    N = y.shape[1]
    gains_in = np.array([step_coefficients(k, dt)[1] for k in kappas])

    a_pred = np.zeros((N, m))
    P_pred = np.zeros((N, m, m))
    a_filt = np.zeros((N, m))
    P_filt = np.zeros((N, m, m))
    x = np.zeros(m)
    P = np.zeros((m, m))
    a_filt[0] = x
    P_filt[0] = P
    eye_n = np.eye(n)
    for i in range(1, N):
        u_in = gains_in * lagged_rain[i - 1]
        x = phis * x + u_in
        P = (phis[:, None] * P) * phis[None, :] + Q
        P = 0.5 * (P + P.T)
        a_pred[i] = x
        P_pred[i] = P
        v = y[:, i] - H_gains * x[:n]
        F = (P[:n, :n] * np.outer(H_gains, H_gains)) + eps * eye_n
        try:
            cho = np.linalg.cholesky(F)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"innovation covariance not PD at step {i}") from exc
        PHt = P[:, :n] * H_gains[None, :]
        K = _cho_solve_mat(cho, PHt.T).T
        x = x + K @ v
        # Joseph form keeps P symmetric PSD under round-off
        IKH = np.eye(m)
        IKH[:, :n] -= K * H_gains[None, :]
        P = IKH @ P @ IKH.T + eps * (K @ K.T)
        P = 0.5 * (P + P.T)
        a_filt[i] = x
        P_filt[i] = P

    means = np.zeros((N, m))
    variances = np.zeros((N, m))
    xs = a_filt[N - 1]
    Ps = P_filt[N - 1]
    means[N - 1] = xs
    variances[N - 1] = np.diag(Ps)
    for i in range(N - 2, -1, -1):
        Pp = P_pred[i + 1]
        G = P_filt[i] @ (phis[:, None] * np.linalg.pinv(Pp, rcond=1e-13, hermitian=True))
        xs = a_filt[i] + G @ (xs - a_pred[i + 1])
        Ps = P_filt[i] + G @ (Ps - Pp) @ G.T
        Ps = 0.5 * (Ps + Ps.T)
        means[i] = xs
        variances[i] = np.diag(Ps)
    return means, variances


def condition(design: DesignSet, aux: AuxiliaryParameters, rain: TimeSeries,
              aggregates: CatchmentAggregates, theta,
              jitter_rel: float = DEFAULT_JITTER_REL) -> EmulatorPrediction:
    """One-shot conditioning at a single query point.

    Convenience wrapper; build an :class:`Emulator` directly when several
    queries share one design set.
    """
    return Emulator(design, aux, rain, aggregates, jitter_rel).predict(theta)


def dense_condition(design: DesignSet, aux: AuxiliaryParameters, rain: TimeSeries,
                    aggregates: CatchmentAggregates, theta,
                    jitter_rel: float = DEFAULT_JITTER_REL) -> EmulatorPrediction:
    """Conditioning by explicit joint-covariance assembly (oracle).

    Builds the stacked mean and covariance of all replica outputs from
    the closed-form Green's-function integrals, then conditions the query
    block on the design block by direct solves. Refuses instances with
    n * N_t beyond the oracle size limit.
    """
    n = len(design)
    N = len(rain)
    if n * N > DENSE_LIMIT:
        raise ValueError(
            f"dense_condition refused: n*N_t = {n * N} exceeds {DENSE_LIMIT}"
        )
    y = design.output_matrix
    names = design.space.names
    theta = np.asarray(theta, dtype=float)
    spans = design.space.spans
    t_rel = rain.times - rain.times[0]

    all_thetas = np.vstack([design.points, theta[None, :]])
    kappas = np.array([release_rate(p, aux, aggregates, names) for p in all_thetas])
    gains = np.array([output_gain(p, aux, aggregates, names) for p in all_thetas])
    corr = correlation_matrix(all_thetas, aux.gamma, spans)
    z = simulate_linear_batch(all_thetas, aux, rain, aggregates, names)
    unit_scale = unit_prior_scale(kappas[:n], gains[:n], t_rel[-1])
    sigma_int = aux.sigma / np.sqrt(unit_scale)

    obs = slice(1, N)  # first grid point is deterministic
    M = N - 1

    def block(alpha, beta):
        I = _greens_integral(kappas[alpha], kappas[beta], t_rel)
        return sigma_int**2 * gains[alpha] * gains[beta] * corr[alpha, beta] * I

    Sigma_dd = np.zeros((n * M, n * M))
    for a in range(n):
        for b in range(n):
            Sigma_dd[a * M : (a + 1) * M, b * M : (b + 1) * M] = block(a, b)[obs, obs]
    Sigma_qd = np.zeros((N, n * M))
    for b in range(n):
        Sigma_qd[:, b * M : (b + 1) * M] = block(n, b)[:, obs]
    Sigma_qq = block(n, n)

    scale = max(float(np.max(np.abs(y))) if y.size else 0.0, 1e-30)
    eps = _jitter_floor(jitter_rel, scale, aux.sigma)
    resid = (y[:, obs] - z[:n, obs]).reshape(-1)
    A = Sigma_dd + eps * np.eye(n * M)
    sol = np.linalg.solve(A, resid)
    mean = z[n] + Sigma_qd @ sol
    cov = Sigma_qq - Sigma_qd @ np.linalg.solve(A, Sigma_qd.T)
    var = _clip_variance(np.diag(cov).copy(), sigma_int, gains[n], kappas[n], t_rel)
    pred = EmulatorPrediction(TimeSeries(rain.times, mean, "m3/s"), var, 0.0)
    pred.rmse_estimate = predicted_rmse(pred)
    return pred


def estimate_sigma(design: DesignSet, aux: AuxiliaryParameters, rain: TimeSeries,
                   aggregates: CatchmentAggregates) -> float:
    """Process-noise scale from the design misfit of the linear model.

    Computes sigma^2 = r' C^{-1} r / len(r) where r stacks the design
    residuals (y - z) over replicas and observed time points and C is the
    unit-sigma covariance of the n coupled replicas. The quadratic form
    is evaluated through whitened Kalman innovations, never by a dense
    inversion.

    The returned value is expressed in output units (see
    :func:`unit_prior_scale`): it equals the largest prior output standard
    deviation the fitted noise process reaches over the window.
    """
    names = design.space.names
    y = design.output_matrix
    z = simulate_linear_batch(design.points, aux, rain, aggregates, names)
    kappas = np.array([release_rate(p, aux, aggregates, names) for p in design.points])
    gains = np.array([output_gain(p, aux, aggregates, names) for p in design.points])
    corr = correlation_matrix(design.points, aux.gamma, design.space.spans)
    t_rel = rain.times - rain.times[0]
    unit_scale = unit_prior_scale(kappas, gains, t_rel[-1])
    eps = 1e-10 * max(unit_scale, 1e-30)
    quad, count = _innovation_quadform(kappas, corr, gains, (y - z), rain.dt, eps)
    return float(np.sqrt(unit_scale * quad / count))


def sigma_quadform_dense(resid, Sigma_star) -> float:
    """sigma^2 from an explicit residual vector and unit-sigma covariance.

    Small-instance oracle for :func:`estimate_sigma`: evaluates
    r' Sigma*^{-1} r / len(r) by a direct solve.
    """
    r = np.asarray(resid, dtype=float).reshape(-1)
    Sigma_star = np.asarray(Sigma_star, dtype=float)
    return float(r @ np.linalg.solve(Sigma_star, r) / len(r))


def _innovation_quadform(kappas, corr, gains, resid, dt, eps):
    """Sum of v' F^{-1} v over the unit-sigma design-replica filter."""
    n = len(kappas)
    N = resid.shape[1]
    phis, Q = discretize(kappas, corr, 1.0, dt)
    rT = resid.T
    a = np.zeros(n)
    P = Q.copy()
    quad = 0.0
    count = 0
    for i in range(1, N):
        v = rT[i] - gains * a
        F = (P * np.outer(gains, gains)) + eps * np.eye(n)
        try:
            cho = np.linalg.cholesky(F)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular replica covariance at step {i}") from exc
        Finv_v = _cho_solve(cho, v)
        quad += float(v @ Finv_v)
        count += n
        PHt = P * gains[None, :]
        m = a + PHt @ Finv_v
        C = P - PHt @ _cho_solve_mat(cho, PHt.T)
        a = phis * m
        P = (phis[:, None] * C) * phis[None, :] + Q
        P = 0.5 * (P + P.T)
    return quad, count
