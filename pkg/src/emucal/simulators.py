"""Simulators: a fast nonlinear toy catchment and an external adapter.

The toy simulator stands in for a full urban-drainage model. It routes
rain over the impervious part of a catchment through two nonlinear
kinematic surface planes (one with a depression-storage threshold, one
without) into a linear pipe reservoir:

    d1' = p - c * d1^(5/3)                       (no depression storage)
    d2' = p - c * max(d2 - D, 0)^(5/3)           (threshold D)
    V'  = A1*c*d1^(5/3) + A2*c*max(d2-D,0)^(5/3) - V/Tp
    Q   = V / Tp

with c = w*sqrt(s) / (n * A_imp). The 5/3 Manning exponent and the
storage threshold make the response genuinely nonlinear in the states,
so a single linear reservoir is only a rough approximation of it.
Scaling-factor parameters multiply the base constants; runoff is
produced by the impervious area only, so cumulative outflow never
exceeds imperviousness x area x cumulative rain depth.

Integration uses classical RK4 with fixed sub-stepping per rain
interval (rain held constant within an interval); halving the sub-step
moves outputs by well under 0.1 percent.
"""

from __future__ import annotations

import os
import subprocess
import tempfile
import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .design import ParameterSpace
from .errors import ProtocolError, SimulatorError
from .likelihood import ErrorModelParams, box_cox, box_cox_inverse
from .reservoir import CatchmentAggregates
from .timeseries import TimeSeries, read_series_csv

#: calibration bounds for the toy scaling factors, in canonical order
PARAMETER_BOUNDS = (
    ("imperviousness", 0.5, 1.1),
    ("width", 0.5, 1.5),
    ("slope", 0.5, 1.5),
    ("storage_impervious", 0.5, 1.5),
    ("manning_impervious", 0.5, 1.5),
    ("storage_pervious", 0.5, 1.5),
    ("impervious_no_storage", 1.0, 1.5),
    ("manning_pipe", 0.5, 1.5),
)


def default_parameter_space(n_params: int) -> ParameterSpace:
    """First ``n_params`` toy scaling factors with their bounds."""
    if not 1 <= n_params <= len(PARAMETER_BOUNDS):
        raise ValueError(f"n_params must be in [1, {len(PARAMETER_BOUNDS)}]")
    return ParameterSpace([PARAMETER_BOUNDS[i] for i in range(n_params)])


@dataclass
class ToyCatchment:
    """Base constants of the toy catchment and integration settings."""

    area_m2: float = 3.0e6
    imperviousness: float = 0.36
    width_m: float = 900.0
    slope: float = 0.08
    manning_surface: float = 0.12
    depression_storage_m: float = 0.002
    no_storage_fraction: float = 0.19
    pipe_lag_s: float = 600.0
    substeps: int = 12
    delay_ms: float = 0.0  # artificial per-run delay for timing demos

    def factors(self, theta, names) -> dict:
        theta = np.asarray(theta, dtype=float)
        f = {name: 1.0 for name, _, _ in PARAMETER_BOUNDS}
        for name, value in zip(names, theta):
            if name not in f:
                raise ValueError(f"unknown toy parameter {name!r}")
            f[name] = float(value)
        return f

    def aggregates(self) -> CatchmentAggregates:
        """Matching aggregate view used by the linear prior model."""
        return CatchmentAggregates(
            width_m=self.width_m,
            slope=self.slope,
            manning=self.manning_surface,
            imperviousness=self.imperviousness,
            mapping={
                "width": "width",
                "slope": "slope",
                "manning": "manning_impervious",
                "imperviousness": "imperviousness",
            },
        )


@njit(cache=True)
def _toy_kernel(rain, dt, nsub, c, a1, a2, thresh, tp):
    n = rain.shape[0]
    out = np.zeros(n)
    d1 = 0.0
    d2 = 0.0
    v = 0.0
    h = dt / nsub
    for i in range(n - 1):
        p = rain[i]
        for _ in range(nsub):
            # classical RK4 on (d1, d2, v)
            k1a, k1b, k1c = _toy_rhs(d1, d2, v, p, c, a1, a2, thresh, tp)
            k2a, k2b, k2c = _toy_rhs(d1 + 0.5 * h * k1a, d2 + 0.5 * h * k1b,
                                     v + 0.5 * h * k1c, p, c, a1, a2, thresh, tp)
            k3a, k3b, k3c = _toy_rhs(d1 + 0.5 * h * k2a, d2 + 0.5 * h * k2b,
                                     v + 0.5 * h * k2c, p, c, a1, a2, thresh, tp)
            k4a, k4b, k4c = _toy_rhs(d1 + h * k3a, d2 + h * k3b,
                                     v + h * k3c, p, c, a1, a2, thresh, tp)
            d1 += h * (k1a + 2 * k2a + 2 * k3a + k4a) / 6.0
            d2 += h * (k1b + 2 * k2b + 2 * k3b + k4b) / 6.0
            v += h * (k1c + 2 * k2c + 2 * k3c + k4c) / 6.0
            if d1 < 0.0:
                d1 = 0.0
            if d2 < 0.0:
                d2 = 0.0
            if v < 0.0:
                v = 0.0
        out[i + 1] = v / tp
    return out


@njit(cache=True)
def _toy_rhs(d1, d2, v, p, c, a1, a2, thresh, tp):
    q1 = c * max(d1, 0.0) ** (5.0 / 3.0)
    e2 = max(d2 - thresh, 0.0)
    q2 = c * e2 ** (5.0 / 3.0)
    return p - q1, p - q2, a1 * q1 + a2 * q2 - v / tp


def toy_simulate(theta, rain: TimeSeries, names, catchment: ToyCatchment | None = None) -> TimeSeries:
    """Deterministic toy-catchment flow for one scaling-factor vector."""
    if np.any(rain.values < 0):
        raise ValueError("rain intensities must be non-negative")
    cat = catchment if catchment is not None else ToyCatchment()
    f = cat.factors(theta, names)
    a_imp = cat.area_m2 * cat.imperviousness * f["imperviousness"]
    c = (
        cat.width_m * f["width"] * np.sqrt(cat.slope * f["slope"])
        / (cat.manning_surface * f["manning_impervious"] * a_imp)
    )
    f_ns = min(cat.no_storage_fraction * f["impervious_no_storage"], 0.95)
    a1 = a_imp * f_ns
    a2 = a_imp * (1.0 - f_ns)
    thresh = cat.depression_storage_m * f["storage_impervious"] * (
        0.7 + 0.3 * f["storage_pervious"]
    )
    tp = cat.pipe_lag_s * f["manning_pipe"]
    values = _toy_kernel(rain.values, rain.dt, cat.substeps, c, a1, a2, thresh, tp)
    if not np.all(np.isfinite(values)):
        raise SimulatorError(
            f"toy simulator produced non-finite output at theta={np.asarray(theta)}"
        )
    if cat.delay_ms > 0:
        time.sleep(cat.delay_ms / 1000.0)
    return TimeSeries(rain.times, values, "m3/s")


def make_observation(theta_true, rain: TimeSeries, err: ErrorModelParams,
                     seed_or_rng, names, catchment: ToyCatchment | None = None) -> TimeSeries:
    """Synthetic observation: simulator output plus bias and noise.

    In transformed space an exact discrete OU bias draw (stationary,
    matching the exponential kernel) and white measurement noise are
    added; the inverse transform maps back to flow units, clipping to the
    transform domain boundary if a draw falls below it (with a warning
    carrying the clip count).
    """
    rng = (
        seed_or_rng
        if isinstance(seed_or_rng, np.random.Generator)
        else np.random.default_rng(seed_or_rng)
    )
    y = toy_simulate(theta_true, rain, names, catchment)
    z = box_cox(y.values, err.lam)
    n = len(z)
    if err.sigma_b > 0:
        phi = np.exp(-rain.dt / err.tau_s)
        b = np.empty(n)
        b[0] = err.sigma_b * rng.standard_normal()
        innov = err.sigma_b * np.sqrt(1.0 - phi * phi) * rng.standard_normal(n - 1)
        for i in range(1, n):
            b[i] = phi * b[i - 1] + innov[i - 1]
    else:
        b = np.zeros(n)
    e = err.sigma_e * rng.standard_normal(n) if err.sigma_e > 0 else np.zeros(n)
    z_obs = z + b + e
    floor = -1.0 / err.lam
    clipped = int(np.sum(z_obs <= floor))
    if clipped:
        warnings.warn(
            f"{clipped} transformed observation(s) fell outside the inverse "
            "Box-Cox domain and were clipped to zero flow"
        )
        z_obs = np.maximum(z_obs, floor)
    return TimeSeries(rain.times, box_cox_inverse(z_obs, err.lam), y.units)


@dataclass
class ExternalSimulatorSpec:
    """File-protocol wrapper around an external simulator command.

    ``command`` must contain the placeholders ``{params}`` and
    ``{output}`` exactly once each; they are replaced by the parameter
    CSV path written for the run and the output CSV path expected back.
    """

    command: str
    expected_times: np.ndarray
    timeout_s: float = 600.0
    workdir: str | None = None

    def __post_init__(self):
        for ph in ("{params}", "{output}"):
            if self.command.count(ph) != 1:
                raise ValueError(
                    f"command template must contain {ph} exactly once: "
                    f"{self.command!r}"
                )
        self.expected_times = np.asarray(self.expected_times, dtype=float)


def run_external(spec: ExternalSimulatorSpec, theta, names) -> TimeSeries:
    """Run one external simulation through the CSV file protocol."""
    theta = np.asarray(theta, dtype=float)
    with tempfile.TemporaryDirectory(prefix="emucal-run-") as tmp:
        params_path = os.path.join(tmp, "params.csv")
        output_path = os.path.join(tmp, "output.csv")
        with open(params_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("name,value\n")
            for name, value in zip(names, theta):
                fh.write(f"{name},{value:.17g}\n")
        cmd = spec.command.replace("{params}", params_path).replace(
            "{output}", output_path
        )
        try:
            proc = subprocess.run(
                cmd, shell=True, cwd=spec.workdir, capture_output=True,
                text=True, timeout=spec.timeout_s,
            )
        except subprocess.TimeoutExpired as exc:
            raise SimulatorError(
                f"external simulator timed out after {spec.timeout_s}s: {cmd}",
                captured=(exc.stdout or "") if isinstance(exc.stdout, str) else "",
            ) from None
        if proc.returncode != 0:
            raise SimulatorError(
                f"external simulator exited with code {proc.returncode}: {cmd}",
                captured=proc.stdout + proc.stderr,
            )
        if not os.path.exists(output_path):
            raise ProtocolError(
                f"external simulator wrote no output file: {cmd}",
                captured=proc.stdout + proc.stderr,
            )
        try:
            series = read_series_csv(output_path)
        except ValueError as exc:
            raise ProtocolError(f"malformed simulator output: {exc}") from None
    expected = spec.expected_times
    if len(series) != len(expected):
        raise ProtocolError(
            f"simulator output has {len(series)} rows, expected {len(expected)}"
        )
    if not np.allclose(series.times, expected, rtol=0, atol=1e-6):
        raise ProtocolError("simulator output grid does not match the expected grid")
    return series
