"""Single linear-reservoir approximation of a rainfall-runoff simulator.

The reservoir state ``d(t)`` (water level, m) obeys

    d'(t) = kappa * d(t) + p(t - t0),      d(0) = 0,

where ``p`` is rain intensity in m/s and the release rate

    kappa = -k * w * sqrt(s) / (A * n * r)

aggregates catchment width ``w``, slope ``s``, Manning roughness ``n``
and imperviousness ``r``, with linearization constant ``k``, lag ``t0``
and effective area ``A`` estimated from design data. The discretized flow
output is

    Q_i = k * (w * sqrt(s) / n) * d(t_i)    [m^3/s],

so that at steady state under constant rain ``p0`` the outflow equals
``p0 * A * r`` (rain rate times effective impervious area).

Rain is treated as piecewise constant per grid interval and the state is
stepped with the exact exponential integrator, so the recursion is the
exact solution of the ODE for that input.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize
from scipy.signal import lfilter

from .design import DesignSet
from .errors import EstimationError
from .timeseries import TimeSeries


@dataclass
class CatchmentAggregates:
    """Aggregate catchment descriptors and their parameter mapping.

    Base values are multiplied by the matching scaling factor of a
    parameter vector; ``mapping`` sends aggregate keys (``"width"``,
    ``"slope"``, ``"manning"``, ``"imperviousness"``) to parameter names,
    or omits them for aggregates no parameter controls.
    """

    width_m: float
    slope: float
    manning: float
    imperviousness: float
    mapping: dict

    def __post_init__(self):
        for key in ("width_m", "slope", "manning", "imperviousness"):
            if getattr(self, key) <= 0:
                raise ValueError(f"{key} must be > 0, got {getattr(self, key)}")
        known = {"width", "slope", "manning", "imperviousness"}
        unknown = set(self.mapping) - known
        if unknown:
            raise ValueError(f"unknown aggregate keys in mapping: {sorted(unknown)}")

    def at(self, theta, names):
        """(w, s, n, r) after applying the scaling factors in ``theta``."""
        theta = np.asarray(theta, dtype=float)
        lookup = dict(zip(names, theta))
        base = {
            "width": self.width_m,
            "slope": self.slope,
            "manning": self.manning,
            "imperviousness": self.imperviousness,
        }
        out = {}
        for key, value in base.items():
            pname = self.mapping.get(key)
            factor = lookup.get(pname, 1.0) if pname else 1.0
            out[key] = value * factor
        vals = np.array([out["width"], out["slope"], out["manning"], out["imperviousness"]])
        if np.any(vals <= 0):
            raise ValueError(f"non-positive aggregate for theta={theta}: {out}")
        return out["width"], out["slope"], out["manning"], out["imperviousness"]


@dataclass
class AuxiliaryParameters:
    """Emulator-only parameters estimated from design data.

    k [m^(2/3)] and A [m^2] set the release rate and output gain, t0 [s]
    lags the rain input, gamma controls replica coupling strength and
    sigma scales the process noise (output units).
    """

    k: float
    t0_s: float
    A_m2: float
    gamma: float = 5.0
    sigma: float = 0.0

    def __post_init__(self):
        if self.k <= 0 or self.A_m2 <= 0:
            raise ValueError(f"k and A must be > 0 (k={self.k}, A={self.A_m2})")
        if self.t0_s < 0:
            raise ValueError(f"t0 must be >= 0, got {self.t0_s}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


def release_rate(theta, aux: AuxiliaryParameters, aggregates: CatchmentAggregates, names) -> float:
    """Release rate kappa = -k*w*sqrt(s)/(A*n*r); strictly negative."""
    w, s, n, r = aggregates.at(theta, names)
    return -aux.k * w * np.sqrt(s) / (aux.A_m2 * n * r)


def output_gain(theta, aux: AuxiliaryParameters, aggregates: CatchmentAggregates, names) -> float:
    """Flow per unit reservoir level: k*w*sqrt(s)/n  [m^2/s]."""
    w, s, n, r = aggregates.at(theta, names)
    return aux.k * w * np.sqrt(s) / n


def lag_series(rain: TimeSeries, t0_s: float) -> np.ndarray:
    """Rain values lagged by ``t0_s`` via linear interpolation on the grid.

    Before the start of the record the intensity is taken as zero.
    """
    if t0_s == 0.0:
        return rain.values.copy()
    return np.interp(rain.times - t0_s, rain.times, rain.values, left=0.0)


def step_coefficients(kappa: float, dt: float):
    """Exact one-step transition (phi) and input gain for the reservoir ODE.

    d_{i+1} = phi * d_i + gain * p_i  with  phi = exp(kappa*dt) and
    gain = (exp(kappa*dt) - 1)/kappa (-> dt as kappa -> 0).
    """
    x = kappa * dt
    phi = np.exp(x)
    if abs(x) < 1e-12:
        gain = dt
    else:
        gain = np.expm1(x) / kappa
    return phi, gain


def integrate_reservoir(kappa: float, lagged_rain: np.ndarray, dt: float) -> np.ndarray:
    """Exact discrete solution d(t_i) for piecewise-constant rain, d(t_0)=0."""
    phi, gain = step_coefficients(kappa, dt)
    # d[i] = phi*d[i-1] + gain*p[i-1]; IIR filter on the shifted input
    u = np.concatenate([[0.0], gain * lagged_rain[:-1]])
    return lfilter([1.0], [1.0, -phi], u)


def simulate_linear(theta, aux: AuxiliaryParameters, rain: TimeSeries,
                    aggregates: CatchmentAggregates, names) -> TimeSeries:
    """Flow series of the linear reservoir for one parameter vector."""
    if np.any(rain.values < 0):
        raise ValueError("rain intensities must be non-negative")
    kappa = release_rate(theta, aux, aggregates, names)
    gain = output_gain(theta, aux, aggregates, names)
    lagged = lag_series(rain, aux.t0_s)
    d = integrate_reservoir(kappa, lagged, rain.dt)
    return TimeSeries(rain.times, gain * d, "m3/s")


def simulate_linear_batch(thetas, aux, rain, aggregates, names) -> np.ndarray:
    """Stacked linear-model outputs, one row per parameter vector."""
    thetas = np.atleast_2d(thetas)
    out = np.empty((len(thetas), len(rain)))
    for i, theta in enumerate(thetas):
        out[i] = simulate_linear(theta, aux, rain, aggregates, names).values
    return out


def _ssq(design: DesignSet, aux, rain, aggregates) -> float:
    names = design.space.names
    z = simulate_linear_batch(design.points, aux, rain, aggregates, names)
    return float(np.sum((design.output_matrix - z) ** 2))


def estimate_aux(design: DesignSet, rain: TimeSeries, aggregates: CatchmentAggregates,
                 init: AuxiliaryParameters, seed: int = 0, restarts: int = 5,
                 ssq_tol: float = 1e-12) -> AuxiliaryParameters:
    """Least-squares fit of (k, t0, A) to the design outputs.

    Runs a Nelder-Mead simplex search on (log k, t0, log A) from
    ``restarts`` seeded starting points (the given init plus perturbed
    copies) and keeps the best result; gamma and sigma are left untouched.
    Deterministic for a fixed seed.
    """
    if len(design) < 2 or not design.outputs:
        raise ValueError("estimate_aux needs a design with >= 2 simulated points")
    y = design.output_matrix
    names = design.space.names
    dt = rain.dt

    def objective(x):
        k = np.exp(x[0])
        t0 = max(x[1], 0.0)
        A = np.exp(x[2])
        cand = replace(init, k=k, t0_s=t0, A_m2=A)
        z = simulate_linear_batch(design.points, cand, rain, aggregates, names)
        return float(np.sum((y - z) ** 2))

    x0 = np.array([np.log(init.k), init.t0_s, np.log(init.A_m2)])
    f0 = objective(x0)
    if f0 <= ssq_tol:
        return replace(init, k=init.k, t0_s=init.t0_s, A_m2=init.A_m2)

    rng = np.random.default_rng(seed)
    starts = [x0]
    for _ in range(restarts - 1):
        jitter = rng.normal(0.0, [0.5, 0.0, 0.5])
        jitter[1] = rng.uniform(0.0, 2.0 * dt)
        starts.append(x0 + jitter)

    best = None
    for sidx, start in enumerate(starts):
        res = minimize(objective, start, method="Nelder-Mead",
                       options={"xatol": 1e-10, "fatol": 1e-14,
                                "maxiter": 4000, "maxfev": 6000})
        # polish from the incumbent; cheap and helps flat valleys
        res2 = minimize(objective, res.x, method="Nelder-Mead",
                        options={"xatol": 1e-12, "fatol": 1e-16,
                                 "maxiter": 2000, "maxfev": 4000})
        cand = res2 if res2.fun <= res.fun else res
        key = (cand.fun, sidx)
        if best is None or key < best[0]:
            best = (key, cand)
    result = best[1]
    fitted = replace(init, k=float(np.exp(result.x[0])),
                     t0_s=float(max(result.x[1], 0.0)),
                     A_m2=float(np.exp(result.x[2])))
    if not np.isfinite(result.fun) or result.fun > f0:
        raise EstimationError(
            f"auxiliary estimation failed to improve on the initial guess "
            f"(init SSQ {f0:.6g}, best {result.fun:.6g})", best=fitted)
    return fitted
