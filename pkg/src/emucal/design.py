"""Low-discrepancy parameter designs on (over-reached) calibration boxes.

A design set is a collection of parameter vectors together with the
simulator output produced at each of them. Initial designs come from a
Halton sequence scaled onto the calibration hypercube enlarged by a small
overreach factor; refinement rounds later append posterior-driven points.

On disk a design set is a directory::

    design.csv          index,<param names...>,origin
    outputs/<index>.csv one time-series CSV per simulated point
    meta.json           auxiliary parameters and space description
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .timeseries import TimeSeries, read_series_csv, write_series_csv

#: prime bases for the Halton sequence, one per dimension, fixed for
#: reproducibility across runs
HALTON_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19)

#: default enlargement of the calibration box for design generation
DEFAULT_OVERREACH = 1.05

#: default expansion factor for posterior subsamples during refinement
DEFAULT_STRETCH = 1.1


@dataclass
class ParameterSpace:
    """Named parameter dimensions with calibration bounds.

    ``dims`` is a list of ``(name, lower, upper)`` tuples. The spans
    ``upper - lower`` normalize parameter distances in the emulator's
    coupling kernel.
    """

    dims: list

    def __post_init__(self):
        names = [d[0] for d in self.dims]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate parameter names in {names}")
        for name, lo, hi in self.dims:
            if not lo < hi:
                raise ValueError(f"{name}: lower bound {lo} must be < upper {hi}")

    @property
    def names(self):
        return [d[0] for d in self.dims]

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def lower(self) -> np.ndarray:
        return np.array([d[1] for d in self.dims], dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.array([d[2] for d in self.dims], dtype=float)

    @property
    def spans(self) -> np.ndarray:
        """Per-dimension widths of the calibration box."""
        return self.upper - self.lower

    def overreached_bounds(self, overreach: float):
        """Bounds with half-widths scaled by ``overreach`` about the center."""
        center = 0.5 * (self.lower + self.upper)
        half = 0.5 * self.spans * overreach
        return center - half, center + half

    def contains(self, points, overreach: float = 1.0) -> np.ndarray:
        """Boolean mask of points inside the (over-reached) box."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        lo, hi = self.overreached_bounds(overreach)
        return np.all((pts >= lo) & (pts <= hi), axis=1)


def radical_inverse(index: int, base: int) -> float:
    """Base-``base`` radical inverse of a positive integer.

    Reverses the digits of ``index`` in the given prime base about the
    radix point, e.g. ``radical_inverse(3, 2) == 0.75``.
    """
    if index < 1:
        raise ValueError(f"index must be >= 1, got {index}")
    if base < 2 or not _is_prime(base):
        raise ValueError(f"base must be a prime >= 2, got {base}")
    result = 0.0
    frac = 1.0 / base
    i = index
    while i > 0:
        result += (i % base) * frac
        i //= base
        frac /= base
    return result


def _is_prime(n: int) -> bool:
    if n < 2:
        return False
    for p in range(2, int(n**0.5) + 1):
        if n % p == 0:
            return False
    return True


def halton_points(count: int, dims: int, skip: int = 1) -> np.ndarray:
    """First ``count`` Halton points in ``dims`` dimensions.

    Point ``j`` has coordinate ``d`` equal to the radical inverse of
    ``skip + j`` in the ``d``-th prime base. The default ``skip=1`` drops
    the degenerate all-zeros point. Deterministic; at most 8 dimensions
    are supported (one prime base per dimension).
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if not 1 <= dims <= len(HALTON_PRIMES):
        raise ValueError(
            f"dims must be between 1 and {len(HALTON_PRIMES)}, got {dims}"
        )
    if skip < 0:
        raise ValueError(f"skip must be >= 0, got {skip}")
    pts = np.empty((count, dims))
    for j in range(count):
        idx = skip + j
        if idx < 1:
            raise ValueError("skip + point index must be >= 1")
        for d in range(dims):
            pts[j, d] = radical_inverse(idx, HALTON_PRIMES[d])
    return pts


def scale_to_box(points, space: ParameterSpace, overreach: float = DEFAULT_OVERREACH) -> np.ndarray:
    """Map unit-hypercube points onto the over-reached calibration box.

    Each dimension is mapped affinely onto the interval with the same
    center as the calibration bounds and half-width multiplied by
    ``overreach``; u = 0.5 always lands on the center.
    """
    if overreach < 1.0:
        raise ValueError(f"overreach must be >= 1, got {overreach}")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[1] != space.ndim:
        raise ValueError(f"points have {pts.shape[1]} dims, space has {space.ndim}")
    lo, hi = space.overreached_bounds(overreach)
    return lo + pts * (hi - lo)


def stretch_sample(points, stretch: float = DEFAULT_STRETCH) -> np.ndarray:
    """Expand a point cloud about its component-wise mean.

    Returns ``mu + stretch * (x - mu)``; the sample mean is preserved and
    the sample covariance picks up a factor ``stretch**2``. No clipping is
    applied here; callers constrain the result to their box if needed.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[0] < 1 or pts.size == 0:
        raise ValueError("stretch_sample needs at least one point")
    if stretch <= 0:
        raise ValueError(f"stretch must be > 0, got {stretch}")
    if stretch == 1.0:
        return pts.copy()
    mu = pts.mean(axis=0)
    return mu + stretch * (pts - mu)


def clip_to_box(points, space: ParameterSpace, overreach: float = DEFAULT_OVERREACH) -> np.ndarray:
    """Clip points to the over-reached calibration box, component-wise."""
    lo, hi = space.overreached_bounds(overreach)
    return np.clip(np.atleast_2d(np.asarray(points, dtype=float)), lo, hi)


@dataclass
class DesignSet:
    """Ordered (parameter vector, simulator output) pairs plus provenance.

    ``origins[i]`` is ``"halton"`` for initial points or the refinement
    iteration index (as a string) for appended ones.
    """

    space: ParameterSpace
    points: np.ndarray
    outputs: list = field(default_factory=list)
    origins: list = field(default_factory=list)
    overreach: float = DEFAULT_OVERREACH

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if not self.origins:
            self.origins = ["halton"] * len(self.points)
        if len(self.origins) != len(self.points):
            raise ValueError("one origin tag per design point required")
        if self.outputs and len(self.outputs) != len(self.points):
            raise ValueError(
                f"{len(self.points)} points but {len(self.outputs)} outputs"
            )
        inside = self.space.contains(self.points, self.overreach)
        if not inside.all():
            bad = int(np.flatnonzero(~inside)[0])
            raise ValueError(
                f"design point {bad} lies outside the over-reached hypercube: "
                f"{self.points[bad]}"
            )

    def __len__(self):
        return len(self.points)

    @property
    def output_matrix(self) -> np.ndarray:
        """Design outputs stacked as an (n, N_t) array."""
        if not self.outputs:
            raise ValueError("design set has no outputs")
        return np.stack([o.values for o in self.outputs])

    def appended(self, points, outputs, origin: str) -> "DesignSet":
        """New design set with extra (point, output) pairs tagged ``origin``."""
        pts = np.vstack([self.points, np.atleast_2d(points)])
        outs = list(self.outputs) + list(outputs)
        origins = list(self.origins) + [origin] * len(np.atleast_2d(points))
        return DesignSet(self.space, pts, outs, origins, self.overreach)


def save_design(directory, design: DesignSet, meta: dict | None = None):
    """Write a design directory (design.csv, outputs/, meta.json)."""
    os.makedirs(directory, exist_ok=True)
    names = design.space.names
    lines = ["index," + ",".join(names) + ",origin"]
    for i, (pt, org) in enumerate(zip(design.points, design.origins)):
        coords = ",".join(f"{v:.17g}" for v in pt)
        lines.append(f"{i},{coords},{org}")
    with open(os.path.join(directory, "design.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    outdir = os.path.join(directory, "outputs")
    os.makedirs(outdir, exist_ok=True)
    for i, series in enumerate(design.outputs):
        write_series_csv(os.path.join(outdir, f"{i}.csv"), series)
    payload = {
        "space": {"dims": [[n, lo, hi] for n, lo, hi in design.space.dims]},
        "overreach": design.overreach,
    }
    if meta:
        payload.update(meta)
    with open(os.path.join(directory, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_design(directory):
    """Read a design directory back into a (DesignSet, meta dict) pair."""
    meta_path = os.path.join(directory, "meta.json")
    with open(meta_path, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    space = ParameterSpace([tuple(d) for d in meta["space"]["dims"]])
    overreach = float(meta.get("overreach", DEFAULT_OVERREACH))
    csv_path = os.path.join(directory, "design.csv")
    with open(csv_path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        expected = ["index"] + space.names + ["origin"]
        if header != expected:
            raise ValueError(f"{csv_path}: header {header} != expected {expected}")
        points, origins, indices = [], [], []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            indices.append(int(parts[0]))
            points.append([float(v) for v in parts[1 : 1 + space.ndim]])
            origins.append(parts[-1])
    outputs = []
    outdir = os.path.join(directory, "outputs")
    for i in indices:
        path = os.path.join(outdir, f"{i}.csv")
        if os.path.exists(path):
            outputs.append(read_series_csv(path))
    if outputs and len(outputs) != len(points):
        raise ValueError(f"{directory}: {len(points)} points but {len(outputs)} outputs")
    design = DesignSet(space, np.array(points), outputs, origins, overreach)
    return design, meta
