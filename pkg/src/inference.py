"""
Overlapping batch means, the multiplier subsample bootstrap, confidence
intervals, Kolmogorov distances and coverage accounting.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Literal, Optional, Tuple, Union

import numpy as np
from scipy.special import erfc
from scipy.stats import norm

from .analysis import GroundTruth, LsaInstance, check_unit
from .exceptions import BlockTooLongError, DegenerateScaleError, InvalidDimensionError
from .lsa import LsaTrajectory

logger = logging.getLogger(__name__)

BlockRule = Literal["explicit", "pow45", "pow34"]
CiMethod = Literal["analytic", "monte_carlo"]

# exponent p = num/den of the block rule b_n = ⌈n^p⌉
_RULE_EXPONENTS = {"pow45": (4, 5), "pow34": (3, 4)}
MSB_CHUNK_ELEMENTS = 1 << 22


@dataclass(frozen=True)
class ObmConfig:
    rule: BlockRule = "pow45"
    block_len: Optional[int] = None


@dataclass(frozen=True)
class ObmEstimate:
    """σ̂²_θ(u) together with the block geometry it was computed with."""

    variance: float
    block_len: int
    n: int
    direction: np.ndarray


@dataclass(frozen=True)
class MsbQuantile:
    """Symmetric quantile interval of the √n-scaled bootstrap statistic."""

    level: float
    lower: float
    upper: float
    method: CiMethod
    draws: Optional[int] = None


@dataclass(frozen=True)
class ConfidenceInterval:
    center: float
    lower: float
    upper: float
    half_width: float
    quantile: MsbQuantile

    def contains(self, truth: float) -> bool:
        return self.lower <= truth <= self.upper


def _integer_power_ceil(n: int, num: int, den: int) -> int:
    """Smallest integer b with b^den >= n^num, i.e. ⌈n^{num/den}⌉ without rounding error."""
    target = n ** num
    b = max(1, int(round(n ** (num / den))))
    while b > 1 and (b - 1) ** den >= target:
        b -= 1
    while b ** den < target:
        b += 1
    return b


def resolve_block(cfg: ObmConfig, n: int) -> int:
    """
    Block length b_n for a trajectory of length n, clamped to [2, n - 1].

    Args:
        cfg: Block rule
        n: Trajectory length (>= 4)

    Returns:
        int: Resolved block length
    """
    if n < 4:
        raise InvalidDimensionError(f"block resolution needs n >= 4, got {n}")
    if cfg.rule == "explicit":
        if cfg.block_len is None:
            raise InvalidDimensionError("explicit block rule requires block_len")
        b = int(cfg.block_len)
    else:
        b = _integer_power_ceil(n, *_RULE_EXPONENTS[cfg.rule])

    clamped = min(max(b, 2), n - 1)
    if clamped != b:
        logger.warning(f"Block length {b} clamped to {clamped} for n={n}")
    return clamped


def _check_block(n: int, b_n: int) -> None:
    if b_n > n - 1:
        raise BlockTooLongError(f"block length {b_n} exceeds n - 1 = {n - 1}")
    if b_n < 1:
        raise InvalidDimensionError(f"block length must be positive, got {b_n}")


def _centered_block_means(series: np.ndarray, b_n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Sliding means of the centered series over all n - b_n + 1 windows, plus the overall mean."""
    # shift by the first element first: a constant series then centers to exact zeros
    shifted = series - series[0]
    shift_mean = shifted.mean(axis=0)
    mean = series[0] + shift_mean
    centered = np.asarray(shifted - shift_mean, dtype=np.longdouble)
    prefix = np.zeros((centered.shape[0] + 1,) + centered.shape[1:], dtype=np.longdouble)
    np.cumsum(centered, axis=0, out=prefix[1:])
    blocks = (prefix[b_n:] - prefix[:-b_n]) / b_n
    return blocks.astype(float), mean


def block_averages(series: np.ndarray, b_n: int) -> np.ndarray:
    """θ̄_{b_n,t} = b_n⁻¹ Σ_{ℓ=t}^{t+b_n-1} θ_ℓ for t = 0..n - b_n."""
    series = np.asarray(series, dtype=float)
    _check_block(series.shape[0], b_n)
    blocks, mean = _centered_block_means(series, b_n)
    return blocks + mean


def obm_series_variance(values: np.ndarray, b_n: int) -> float:
    """OBM estimate b_n/(n - b_n + 1) Σ_t (x̄_{b_n,t} - x̄_n)² of a scalar series."""
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    _check_block(n, b_n)
    deviations, _ = _centered_block_means(values, b_n)
    return float(b_n / (n - b_n + 1) * np.sum(deviations ** 2))


def obm_variance(traj: LsaTrajectory, b_n: int, u: np.ndarray) -> ObmEstimate:
    u = check_unit(u)
    variance = obm_series_variance(traj.iterates @ u, b_n)
    return ObmEstimate(variance=variance, block_len=b_n, n=traj.n, direction=u)


def msb_draws(traj: LsaTrajectory, b_n: int, u: np.ndarray, m: int, seed: int) -> np.ndarray:
    """
    Literal multiplier bootstrap draws √b_n/√(n-b_n+1) Σ_t w_t (θ̄_{b_n,t} - θ̄_n)ᵀu.

    Weights are i.i.d. N(0, 1), drawn in row chunks from one generator so the
    result depends only on ``seed``.
    """
    if m < 1:
        raise InvalidDimensionError(f"number of draws must be >= 1, got {m}")
    u = check_unit(u)
    series = traj.iterates @ u
    _check_block(series.shape[0], b_n)
    residuals, _ = _centered_block_means(series, b_n)
    n_blocks = residuals.shape[0]
    scale = math.sqrt(b_n) / math.sqrt(n_blocks)

    rng = np.random.default_rng(seed)
    draws = np.empty(m)
    rows = max(1, MSB_CHUNK_ELEMENTS // n_blocks)
    for start in range(0, m, rows):
        stop = min(start + rows, m)
        weights = rng.standard_normal((stop - start, n_blocks))
        draws[start:stop] = scale * (weights @ residuals)
    return draws


def confidence_interval(pr_average: np.ndarray, est: ObmEstimate, u: np.ndarray,
                        level: float, method: CiMethod = "analytic",
                        draws: Optional[np.ndarray] = None) -> ConfidenceInterval:
    """
    Interval for uᵀθ⋆ centered at uᵀθ̄_n.

    Args:
        pr_average: θ̄_n
        est: OBM estimate for direction u
        u: Unit direction
        level: Nominal coverage in (0, 1)
        method: ``analytic`` uses z_{(1+level)/2}·σ̂; ``monte_carlo`` uses the
            level-quantile of |draws|, the symmetric (1+level)/2 quantile
        draws: Bootstrap draws from ``msb_draws`` (monte_carlo only)

    Returns:
        ConfidenceInterval: Interval with its √n-scale quantile
    """
    if not 0.0 < level < 1.0:
        raise InvalidDimensionError(f"level must lie in (0, 1), got {level}")
    if est.n < 4:
        raise InvalidDimensionError("confidence intervals need n >= 4")
    u = check_unit(u)

    if method == "analytic":
        quantile = float(norm.ppf(0.5 * (1.0 + level))) * math.sqrt(max(est.variance, 0.0))
        n_draws = None
    elif method == "monte_carlo":
        if draws is None or len(draws) == 0:
            raise InvalidDimensionError("monte_carlo intervals need bootstrap draws")
        quantile = float(np.quantile(np.abs(draws), level))
        n_draws = len(draws)
    else:
        raise InvalidDimensionError(f"unknown interval method {method!r}")

    center = float(u @ np.asarray(pr_average, dtype=float))
    half_width = quantile / math.sqrt(est.n)
    return ConfidenceInterval(
        center=center,
        lower=center - half_width,
        upper=center + half_width,
        half_width=half_width,
        quantile=MsbQuantile(level=level, lower=-quantile, upper=quantile, method=method, draws=n_draws),
    )


def obm_noise_variance(inst: LsaInstance, gt: GroundTruth, z_path: np.ndarray,
                       b_n: int, u: np.ndarray) -> float:
    """OBM on uᵀĀ⁻¹ε(Z_ℓ) along an observation path, with the θ-estimator's block geometry."""
    u = check_unit(u)
    noise = (np.einsum("zij,j->zi", inst.per_z_A - inst.a_bar, gt.theta_star)
             - (inst.per_z_b - inst.b_bar))
    projected = np.linalg.solve(inst.a_bar.T, u)
    values = noise @ projected
    return obm_series_variance(values[np.asarray(z_path, dtype=np.intp)], b_n)


def normal_cdf(x: np.ndarray) -> np.ndarray:
    """Φ(x) = erfc(-x/√2)/2."""
    return 0.5 * erfc(-np.asarray(x, dtype=float) / math.sqrt(2.0))


def kolmogorov_distance(samples: np.ndarray, std: float) -> float:
    """
    sup_x |F_N(x) - Φ(x/σ)| for the empirical CDF of ``samples``.

    Raises:
        DegenerateScaleError: If σ <= 0
    """
    if not std > 0.0:
        raise DegenerateScaleError(f"Gaussian scale must be positive, got {std}")
    x = np.sort(np.asarray(samples, dtype=float))
    count = x.shape[0]
    if count < 1:
        raise InvalidDimensionError("need at least one sample")
    cdf = normal_cdf(x / std)
    ranks = np.arange(1, count + 1) / count
    return float(max(np.max(ranks - cdf), np.max(cdf - (ranks - 1.0 / count))))


def point_mass_distance(samples: np.ndarray) -> float:
    """Kolmogorov distance to the point mass at 0."""
    x = np.asarray(samples, dtype=float)
    return float(max(np.mean(x < 0.0), np.mean(x > 0.0)))


def gaussian_comparison_bound(var_a: float, var_b: float) -> float:
    """Upper bound (3/2)|var_a/var_b - 1| on the distance between N(0, var_a) and N(0, var_b)."""
    if not var_b > 0.0:
        raise DegenerateScaleError(f"reference variance must be positive, got {var_b}")
    return 1.5 * abs(var_a / var_b - 1.0)


Interval = Union[ConfidenceInterval, Tuple[float, float]]


def coverage(results: Iterable[Tuple[Interval, float]]) -> Tuple[float, float]:
    """Coverage rate of (interval, truth) pairs with its binomial standard error."""
    hits = 0
    count = 0
    for interval, truth in results:
        if isinstance(interval, ConfidenceInterval):
            lower, upper = interval.lower, interval.upper
        else:
            lower, upper = interval
        hits += lower <= truth <= upper
        count += 1
    if count == 0:
        raise InvalidDimensionError("coverage needs at least one result")
    rate = hits / count
    return rate, math.sqrt(rate * (1.0 - rate) / count)
