"""Affine-invariant ensemble MCMC with stretch moves.

An ensemble of W walkers explores the target jointly; each walker is
moved toward (or past) a partner from the complementary half of the
ensemble by a random factor z with density proportional to 1/sqrt(z) on
[1/a, a]. The two-half update keeps detailed balance while allowing the
log-posterior evaluations within a half to run as one vectorized batch.

Everything is deterministic given the generator passed in: chains are
reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_STRETCH_SCALE = 2.0


def draw_stretch_factor(rng: np.random.Generator, a: float = DEFAULT_STRETCH_SCALE, size=None):
    """Sample z with density proportional to 1/sqrt(z) on [1/a, a]."""
    if a <= 1:
        raise ValueError(f"stretch scale must exceed 1, got {a}")
    u = rng.random(size)
    return ((a - 1.0) * u + 1.0) ** 2 / a


def stretch_move(walker, partner, z: float):
    """Proposal and log-acceptance adjustment for one stretch move.

    proposal = partner + z * (walker - partner); the volume factor
    contributes (d - 1) * ln z to the acceptance ratio.
    """
    walker = np.asarray(walker, dtype=float)
    partner = np.asarray(partner, dtype=float)
    if walker.shape != partner.shape:
        raise ValueError("walker and partner must have equal dimension")
    proposal = partner + z * (walker - partner)
    adjustment = (len(walker) - 1) * np.log(z)
    return proposal, adjustment


@dataclass
class EnsembleState:
    """Walker positions with cached log-posterior values."""

    walkers: np.ndarray
    log_probs: np.ndarray

    def __post_init__(self):
        self.walkers = np.atleast_2d(np.asarray(self.walkers, dtype=float))
        self.log_probs = np.asarray(self.log_probs, dtype=float)
        W, d = self.walkers.shape
        if W < 2 * d:
            raise ValueError(
                f"ensemble too small: {W} walkers for dimension {d} (need >= {2 * d})"
            )
        if len(self.log_probs) != W:
            raise ValueError("one log-posterior value per walker required")
        if not np.all(np.isfinite(self.log_probs)):
            raise ValueError("all walkers must start at finite log-posterior")


@dataclass
class Chain:
    """MCMC output: (steps, W, d) coordinates plus log-posteriors."""

    coords: np.ndarray
    log_probs: np.ndarray
    acceptance_rate: float
    stretch_scale: float

    @property
    def steps(self) -> int:
        return self.coords.shape[0]

    @property
    def n_walkers(self) -> int:
        return self.coords.shape[1]

    @property
    def ndim(self) -> int:
        return self.coords.shape[2]


def init_ensemble(log_post, points, vectorized: bool = False) -> EnsembleState:
    """Evaluate the target at the given points and wrap them as a state."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if vectorized:
        lp = np.asarray(log_post(points), dtype=float)
    else:
        lp = np.array([log_post(p) for p in points], dtype=float)
    if not np.all(np.isfinite(lp)):
        bad = int(np.flatnonzero(~np.isfinite(lp))[0])
        raise ValueError(
            f"initial walker {bad} has non-finite log-posterior ({lp[bad]})"
        )
    return EnsembleState(points, lp)


def run_ensemble(log_post, state: EnsembleState, steps: int,
                 rng: np.random.Generator, a: float = DEFAULT_STRETCH_SCALE,
                 vectorized: bool = False) -> Chain:
    """Advance the ensemble ``steps`` times and record every state.

    Each step updates the two half-ensembles in turn; a walker's move
    depends only on walkers in the complementary half, so log-posterior
    evaluations within a half may run concurrently (or in one vectorized
    call when ``vectorized`` is set).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    walkers = state.walkers.copy()
    log_probs = state.log_probs.copy()
    W, d = walkers.shape
    half = W // 2
    groups = (np.arange(0, half), np.arange(half, W))
    coords = np.empty((steps, W, d))
    chain_lp = np.empty((steps, W))
    accepted = 0
    for step in range(steps):
        for gi in (0, 1):
            idx = groups[gi]
            comp = groups[1 - gi]
            z = draw_stretch_factor(rng, a, size=len(idx))
            partners = comp[rng.integers(0, len(comp), size=len(idx))]
            proposals = walkers[partners] + z[:, None] * (
                walkers[idx] - walkers[partners]
            )
            if vectorized:
                lp_prop = np.asarray(log_post(proposals), dtype=float)
            else:
                lp_prop = np.array([log_post(p) for p in proposals], dtype=float)
            log_ratio = (d - 1) * np.log(z) + lp_prop - log_probs[idx]
            accept = np.log(rng.random(len(idx))) < log_ratio
            walkers[idx[accept]] = proposals[accept]
            log_probs[idx[accept]] = lp_prop[accept]
            accepted += int(accept.sum())
        coords[step] = walkers
        chain_lp[step] = log_probs
    return Chain(coords, chain_lp, accepted / (steps * W), a)


def flat_sample(chain: Chain, burn_in: int, thin: int = 1):
    """Post-burn-in, thinned walker states flattened to (m, d).

    Keeps the last state of each thinning block, so the count is exactly
    ``W * floor((steps - burn_in) / thin)``. Also returns the matching
    log-posterior values.
    """
    if burn_in >= chain.steps:
        raise ValueError(f"burn_in {burn_in} >= chain length {chain.steps}")
    if thin < 1:
        raise ValueError("thin must be >= 1")
    kept = chain.coords[burn_in:][thin - 1 :: thin]
    kept_lp = chain.log_probs[burn_in:][thin - 1 :: thin]
    if kept.size == 0:
        raise ValueError("no states left after burn-in and thinning")
    return kept.reshape(-1, chain.ndim), kept_lp.reshape(-1)


def integrated_autocorr_time(chain: Chain, c: float = 5.0) -> float:
    """Sokal-windowed integrated autocorrelation time, worst dimension.

    Autocorrelation of the walker-averaged trace per dimension, summed
    out to the self-consistent window. Used to pick a thinning stride.
    """
    x = chain.coords.mean(axis=1)  # (steps, d)
    n, d = x.shape
    taus = []
    for k in range(d):
        f = _autocorr_func(x[:, k])
        cum = 2.0 * np.cumsum(f) - 1.0
        window = np.arange(len(f)) < c * cum
        tau = cum[-1]
        idx = np.flatnonzero(~window)
        if len(idx):
            tau = cum[idx[0]]
        taus.append(max(tau, 1.0))
    return float(max(taus))


def _autocorr_func(x):
    n = len(x)
    nfft = 1 << (2 * n - 1).bit_length()
    xc = x - x.mean()
    f = np.fft.irfft(np.abs(np.fft.rfft(xc, nfft)) ** 2, nfft)[:n]
    if f[0] <= 0:
        return np.ones(1)
    return f / f[0]


def default_walker_count(ndim: int) -> int:
    return max(2 * ndim, 16)
