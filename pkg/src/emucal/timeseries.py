"""Uniformly sampled scalar time series and their CSV representation.

The on-disk format is a two-column CSV with header ``time_s,value``,
UTF-8, LF line endings. The time column must be strictly increasing and
uniformly spaced; loaders reject anything else, naming the offending row.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

#: relative tolerance on grid uniformity
_GRID_RTOL = 1e-6


@dataclass
class TimeSeries:
    """Scalar series on a fixed uniform time grid.

    Parameters
    ----------
    times : array_like
        Sample times in seconds, strictly increasing, uniformly spaced.
    values : array_like
        Sample values, same length as ``times``.
    units : str
        Unit label carried through reports (e.g. ``"m3/s"``).
    """

    times: np.ndarray
    values: np.ndarray
    units: str = ""

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.times.ndim != 1 or self.values.ndim != 1:
            raise ValueError("times and values must be 1-D")
        if len(self.times) != len(self.values):
            raise ValueError(
                f"length mismatch: {len(self.times)} times, {len(self.values)} values"
            )
        if len(self.times) >= 2:
            _check_uniform(self.times)

    def __len__(self):
        return len(self.times)

    @property
    def dt(self) -> float:
        """Grid spacing in seconds."""
        if len(self.times) < 2:
            raise ValueError("dt undefined for a series with fewer than 2 samples")
        return float(self.times[1] - self.times[0])

    def with_values(self, values) -> "TimeSeries":
        """Same grid and units, new values."""
        return TimeSeries(self.times, np.asarray(values, dtype=float), self.units)


def _check_uniform(times: np.ndarray):
    steps = np.diff(times)
    dt = steps[0]
    if dt <= 0:
        raise ValueError("time grid must be strictly increasing (row 2)")
    bad = np.flatnonzero(np.abs(steps - dt) > _GRID_RTOL * abs(dt))
    if len(bad):
        # +2: one for the diff offset, one for the header row
        raise ValueError(
            f"non-uniform time grid at row {bad[0] + 2}: "
            f"step {steps[bad[0]]!r} differs from {dt!r}"
        )


def write_series_csv(path, series: TimeSeries):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_series_csv(series))


def format_series_csv(series: TimeSeries) -> str:
    buf = io.StringIO()
    buf.write("time_s,value\n")
    for t, v in zip(series.times, series.values):
        buf.write(f"{t:.17g},{v:.17g}\n")
    return buf.getvalue()


def read_series_csv(path, units: str = "") -> TimeSeries:
    """Load a ``time_s,value`` CSV, enforcing the uniform-grid contract."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "time_s,value":
            raise ValueError(f"{path}: expected header 'time_s,value', got {header!r}")
        times, values = [], []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise ValueError(f"{path}: row {lineno}: expected 2 columns")
            try:
                times.append(float(parts[0]))
                values.append(float(parts[1]))
            except ValueError as exc:
                raise ValueError(f"{path}: row {lineno}: {exc}") from None
    if not times:
        raise ValueError(f"{path}: no data rows")
    return TimeSeries(np.array(times), np.array(values), units)
