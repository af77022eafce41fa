"""
Linear stochastic approximation with Polyak-Ruppert averaging.

Trajectories are driven by a sampled Markov observation stream; several
replicates can be simulated together, each with its own seeded generator, and
the single-seed path is the one-replicate case of the batched one.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .analysis import GroundTruth, LsaInstance, check_unit
from .exceptions import DivergenceError, InvalidDimensionError

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e12
DIVERGENCE_CHECK_EVERY = 4096

MASK64 = (1 << 64) - 1


def _splitmix64(value: int) -> int:
    value = (value + 0x9E3779B97F4A7C15) & MASK64
    value = ((value ^ (value >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    value = ((value ^ (value >> 27)) * 0x94D049BB133111EB) & MASK64
    return value ^ (value >> 31)


def replicate_seed(base_seed: int, *keys: int) -> int:
    """Mix a base seed with integer keys (e.g. n, replicate index) into a 64-bit seed."""
    state = _splitmix64(base_seed & MASK64)
    for key in keys:
        state = _splitmix64(state ^ (key & MASK64))
    return state


@dataclass(frozen=True)
class StepSchedule:
    """Polynomially decaying step sizes α_k = c0 / (k + k0)^γ."""

    c0: float
    k0: int
    gamma: float

    def __post_init__(self):
        if not self.c0 > 0.0:
            raise InvalidDimensionError(f"c0 must be positive, got {self.c0}")
        if self.k0 < 0 or int(self.k0) != self.k0:
            raise InvalidDimensionError(f"k0 must be a non-negative integer, got {self.k0}")
        if not 0.5 <= self.gamma < 1.0:
            raise InvalidDimensionError(f"gamma must lie in [1/2, 1), got {self.gamma}")

    def step_size(self, k: int) -> float:
        if k < 1:
            raise InvalidDimensionError(f"step index must be >= 1, got {k}")
        return self.c0 / (k + self.k0) ** self.gamma

    def steps(self, n: int) -> np.ndarray:
        """α_0..α_{n-1}; index 0 is unused and set to 0."""
        out = np.zeros(n)
        k = np.arange(1, n, dtype=float)
        out[1:] = self.c0 / (k + self.k0) ** self.gamma
        return out

    @classmethod
    def default_for(cls, alpha_max: float, gamma: float,
                    c0: Optional[float] = None, k0: Optional[int] = None) -> "StepSchedule":
        """
        Fill in missing c0 / k0 from the stability threshold α_∞.

        c0 defaults to 0.9·α_∞ and k0 to the smallest integer with α_1 <= α_∞.
        """
        if c0 is None:
            c0 = 0.9 * alpha_max
        if k0 is None:
            k0 = max(0, math.ceil((c0 / alpha_max) ** (1.0 / gamma) - 1.0))
            while k0 > 0 and c0 / k0 ** gamma <= alpha_max:
                k0 -= 1
            while c0 / (1 + k0) ** gamma > alpha_max:
                k0 += 1
        return cls(c0=float(c0), k0=int(k0), gamma=float(gamma))


def step_size(schedule: StepSchedule, k: int) -> float:
    return schedule.step_size(k)


@dataclass(frozen=True)
class LsaTrajectory:
    """Iterates θ_0..θ_{n-1}, their PR average and, when simulated, Z_1..Z_{n-1}."""

    iterates: np.ndarray
    pr_average: np.ndarray
    schedule: Optional[StepSchedule] = None
    seed: Optional[int] = None
    observations: Optional[np.ndarray] = None

    @property
    def n(self) -> int:
        return self.iterates.shape[0]

    @property
    def dim(self) -> int:
        return self.iterates.shape[1]

    @classmethod
    def from_iterates(cls, iterates: np.ndarray, **extra) -> "LsaTrajectory":
        """Wrap an externally produced series; a 1-D input becomes an n×1 matrix."""
        iterates = np.asarray(iterates, dtype=float)
        if iterates.ndim == 1:
            iterates = iterates[:, None]
        if iterates.ndim != 2 or iterates.shape[0] < 1:
            raise InvalidDimensionError("iterates must be an n×d matrix")
        return cls(iterates=iterates, pr_average=iterates.mean(axis=0), **extra)


class RunningAverage:
    """Online mean x̄_t = x̄_{t-1} + (x_t - x̄_{t-1}) / t."""

    def __init__(self, dim: int):
        self.count = 0
        self.mean = np.zeros(dim)

    def update(self, value: np.ndarray) -> np.ndarray:
        self.count += 1
        self.mean += (np.asarray(value, dtype=float) - self.mean) / self.count
        return self.mean


class _ObservationSampler:
    """Inverse-CDF sampler over the sparse rows of the observation kernel."""

    def __init__(self, inst: LsaInstance):
        kernel = inst.z_kernel
        n_obs = kernel.shape[0]
        counts = (kernel > 0.0).sum(axis=1)
        width = int(counts.max())
        self.successors = np.zeros((n_obs, width), dtype=np.intp)
        self.cumulative = np.ones((n_obs, width))
        for z in range(n_obs):
            support = np.flatnonzero(kernel[z] > 0.0)
            self.successors[z, :len(support)] = support
            self.successors[z, len(support):] = support[-1]
            self.cumulative[z, :len(support)] = np.cumsum(kernel[z, support])
            self.cumulative[z, len(support) - 1:] = 1.0

        self.stationary_cumulative = np.cumsum(inst.z_stationary)
        self.stationary_cumulative[-1] = 1.0

    def initial(self, uniforms: np.ndarray) -> np.ndarray:
        index = np.searchsorted(self.stationary_cumulative, uniforms, side="right")
        return np.minimum(index, len(self.stationary_cumulative) - 1)

    def step(self, z: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
        column = (self.cumulative[z] <= uniforms[:, None]).sum(axis=1)
        return self.successors[z, column]


def _sample_observations(inst: LsaInstance, n: int, seeds: Sequence[int], burn_in: int) -> np.ndarray:
    sampler = _ObservationSampler(inst)
    n_draws = (burn_in if burn_in > 0 else 1) + n - 2
    uniforms = np.stack([np.random.default_rng(seed).random(n_draws) for seed in seeds])

    observations = np.empty((len(seeds), n - 1), dtype=np.intp)
    if burn_in > 0:
        z = np.zeros(len(seeds), dtype=np.intp)
        for j in range(burn_in):
            z = sampler.step(z, uniforms[:, j])
        offset = burn_in
    else:
        z = sampler.initial(uniforms[:, 0])
        offset = 1
    observations[:, 0] = z
    for k in range(1, n - 1):
        z = sampler.step(z, uniforms[:, offset + k - 1])
        observations[:, k] = z
    return observations


def _check_divergence(iterates: np.ndarray, start: int, stop: int, seeds: Sequence[int]) -> None:
    window = iterates[:, start:stop]
    bad = ~np.isfinite(window) | (np.abs(window) > DIVERGENCE_LIMIT)
    if bad.any():
        replicate = int(np.argwhere(bad.any(axis=(1, 2)))[0, 0])
        step = start + int(np.argwhere(bad[replicate].any(axis=1))[0, 0])
        logger.error(f"LSA diverged at step {step} (seed {seeds[replicate]})")
        raise DivergenceError(
            f"iterate exceeded {DIVERGENCE_LIMIT:g} at step {step} for seed {seeds[replicate]}",
            "step size within the stability threshold c0 <= α_∞",
        )


def simulate_batch(inst: LsaInstance, schedule: StepSchedule, n: int,
                   theta0: Optional[np.ndarray], seeds: Sequence[int],
                   burn_in: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Run the LSA recursion for several replicates at once.

    Args:
        inst: Problem instance
        schedule: Step-size schedule
        n: Number of stored iterates θ_0..θ_{n-1}
        theta0: Starting point (zero when None)
        seeds: One generator seed per replicate
        burn_in: 0 for a stationary start, otherwise transitions discarded from z = 0

    Returns:
        Tuple of iterates (R, n, d) and observations Z_1..Z_{n-1} (R, n-1)

    Raises:
        DivergenceError: If a coordinate exceeds 1e12 or stops being finite
    """
    if n < 2:
        raise InvalidDimensionError(f"trajectory length must be >= 2, got {n}")
    if burn_in < 0:
        raise InvalidDimensionError("burn_in must be non-negative")
    seeds = list(seeds)
    d = inst.dim
    theta = np.zeros(d) if theta0 is None else np.asarray(theta0, dtype=float)
    if theta.shape != (d,):
        raise InvalidDimensionError(f"theta0 must have length {d}")

    observations = _sample_observations(inst, n, seeds, burn_in)
    alphas = schedule.steps(n)
    per_z_A, per_z_b = inst.per_z_A, inst.per_z_b

    iterates = np.empty((len(seeds), n, d))
    theta = np.repeat(theta[None, :], len(seeds), axis=0)
    iterates[:, 0] = theta
    checked = 0
    for k in range(1, n):
        z = observations[:, k - 1]
        theta = theta - alphas[k] * (np.einsum("rij,rj->ri", per_z_A[z], theta) - per_z_b[z])
        iterates[:, k] = theta
        if k % DIVERGENCE_CHECK_EVERY == 0:
            _check_divergence(iterates, checked, k + 1, seeds)
            checked = k + 1
    _check_divergence(iterates, checked, n, seeds)
    return iterates, observations


def run_lsa(inst: LsaInstance, schedule: StepSchedule, n: int,
            theta0: Optional[np.ndarray] = None, seed: int = 0, burn_in: int = 0) -> LsaTrajectory:
    """Simulate one trajectory; bit-identical to the same seed inside ``simulate_batch``."""
    iterates, observations = simulate_batch(inst, schedule, n, theta0, [seed], burn_in)
    return LsaTrajectory.from_iterates(iterates[0], schedule=schedule, seed=seed,
                                       observations=observations[0])


def pr_error_projection(traj: LsaTrajectory, gt: GroundTruth, u: np.ndarray) -> float:
    """√n · uᵀ(θ̄_n - θ⋆)."""
    u = check_unit(u)
    return math.sqrt(traj.n) * float(u @ (traj.pr_average - gt.theta_star))
