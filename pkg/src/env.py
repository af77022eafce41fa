"""
Finite MDP environments for the Markov LSA toolkit.

Provides the Garnet generator, a FrozenLake-style gridworld, policies, the
Markov chain a policy induces on states, random feature maps and the
ergodicity diagnostics (Dobrushin coefficient, mixing time, stationary law).
All generated objects are immutable and pure functions of their seed.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import (
    DegenerateFeatureError,
    InvalidDimensionError,
    LayoutInfeasibleError,
    NonConvergenceError,
    ReducibleChainError,
)

logger = logging.getLogger(__name__)

ROW_TOL = 1e-12
MIXING_THRESHOLD = 0.25
SINGULAR_TOL = 1e-9
MIN_STATIONARY_MASS = 1e-12

# LEFT, DOWN, RIGHT, UP as (row, col) offsets
LAKE_MOVES = ((0, -1), (1, 0), (0, 1), (-1, 0))
LAKE_MAX_RESAMPLES = 1000
FEATURE_MAX_RESAMPLES = 100
FEATURE_MIN_NORM = 1e-8


def _frozen(array, dtype=float) -> np.ndarray:
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _check_stochastic_rows(matrix: np.ndarray, what: str) -> None:
    if np.any(matrix < 0):
        raise InvalidDimensionError(f"{what} has negative entries")
    sums = matrix.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > ROW_TOL):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise InvalidDimensionError(f"{what} rows do not sum to 1 (max deviation {worst:.3e})")


@dataclass(frozen=True)
class FiniteMdp:
    """Tabular discounted MDP: P(s'|s,a), r(s,a) in [0,1] and discount λ."""

    transition: np.ndarray
    reward: np.ndarray
    discount: float

    def __post_init__(self):
        object.__setattr__(self, "transition", _frozen(self.transition))
        object.__setattr__(self, "reward", _frozen(self.reward))
        object.__setattr__(self, "discount", float(self.discount))
        self.validate()

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def validate(self) -> None:
        """Check shapes, stochastic rows, reward range and discount."""
        if self.transition.ndim != 3 or self.transition.shape[0] != self.transition.shape[2]:
            raise InvalidDimensionError(
                f"transition must have shape (S, A, S), got {self.transition.shape}"
            )
        if self.reward.shape != self.transition.shape[:2]:
            raise InvalidDimensionError(
                f"reward shape {self.reward.shape} does not match (S, A) = {self.transition.shape[:2]}"
            )
        _check_stochastic_rows(self.transition, "transition")
        if np.any(self.reward < 0.0) or np.any(self.reward > 1.0):
            raise InvalidDimensionError("rewards must lie in [0, 1]")
        if not 0.0 <= self.discount < 1.0:
            raise InvalidDimensionError(f"discount must lie in [0, 1), got {self.discount}")

    def with_discount(self, discount: float) -> "FiniteMdp":
        return FiniteMdp(self.transition, self.reward, discount)


@dataclass(frozen=True)
class Policy:
    """Stochastic policy π(a|s) as an (S, A) row-stochastic matrix."""

    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "probs", _frozen(self.probs))
        if self.probs.ndim != 2:
            raise InvalidDimensionError("policy must be an (S, A) matrix")
        _check_stochastic_rows(self.probs, "policy")

    def smoothed(self, epsilon: float) -> "Policy":
        """Mix with the uniform policy: (1 - ε)π + ε/|A|."""
        if not 0.0 <= epsilon <= 1.0:
            raise InvalidDimensionError(f"epsilon must lie in [0, 1], got {epsilon}")
        if epsilon == 0.0:
            return self
        n_actions = self.probs.shape[1]
        mixed = (1.0 - epsilon) * self.probs + epsilon / n_actions
        return Policy(mixed / mixed.sum(axis=1, keepdims=True))


@dataclass(frozen=True)
class InducedChain:
    """State chain P_π with its stationary law μ and mixing time."""

    kernel: np.ndarray
    stationary: np.ndarray
    mixing_time: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "kernel", _frozen(self.kernel))
        object.__setattr__(self, "stationary", _frozen(self.stationary))


@dataclass(frozen=True)
class FeatureMap:
    """Feature vectors φ(s) stored row-wise; every row has norm at most 1."""

    features: np.ndarray
    dim: int = field(init=False)

    def __post_init__(self):
        features = _frozen(self.features)
        if features.ndim != 2:
            raise InvalidDimensionError("features must be an (S, d) matrix")
        norms = np.linalg.norm(features, axis=1)
        if np.any(norms > 1.0 + ROW_TOL):
            raise InvalidDimensionError(
                f"feature rows must have norm <= 1, got max {float(norms.max()):.6g}"
            )
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "dim", features.shape[1])

    @property
    def n_states(self) -> int:
        return self.features.shape[0]


# ---------------------------------------------------------------------------
# Generators
# ---------------------------------------------------------------------------

def garnet_generate(n_states: int, n_actions: int, branching: int, seed: int,
                    discount: float = 0.8) -> FiniteMdp:
    """
    Generate a Garnet MDP.

    Each (s, a) pair reaches exactly ``branching`` distinct successors, with
    probabilities given by the gaps between sorted uniform cut points.
    Rewards are i.i.d. uniform(0, 1) per (s, a).

    Args:
        n_states: Number of states
        n_actions: Number of actions
        branching: Successor count per state-action pair
        seed: Generator seed
        discount: Discount factor λ

    Returns:
        FiniteMdp: The generated MDP

    Raises:
        InvalidDimensionError: If a count is zero or branching > n_states
    """
    if n_states < 1 or n_actions < 1 or branching < 1:
        raise InvalidDimensionError("Garnet counts must be positive")
    if branching > n_states:
        raise InvalidDimensionError(
            f"branching factor {branching} exceeds the number of states {n_states}"
        )

    rng = np.random.default_rng(seed)
    transition = np.zeros((n_states, n_actions, n_states))
    for s in range(n_states):
        for a in range(n_actions):
            successors = rng.choice(n_states, size=branching, replace=False)
            while True:
                cuts = np.sort(rng.random(branching - 1))
                probs = np.diff(np.concatenate(([0.0], cuts, [1.0])))
                if np.all(probs > 0.0):
                    break
            transition[s, a, successors] = probs
    reward = rng.random((n_states, n_actions))

    logger.debug(f"Generated Garnet({n_states}, {n_actions}, {branching}) with seed {seed}")
    return FiniteMdp(transition, reward, discount)


def _lake_solvable(holes: np.ndarray, height: int, width: int) -> bool:
    """Goal reachable, and every tile (holes included) enterable from the start."""
    seen = {(0, 0)}
    queue = deque([(0, 0)])
    while queue:
        r, c = queue.popleft()
        if holes[r, c] or (r, c) == (height - 1, width - 1):
            continue
        for dr, dc in LAKE_MOVES:
            nr, nc = r + dr, c + dc
            if 0 <= nr < height and 0 <= nc < width and (nr, nc) not in seen:
                seen.add((nr, nc))
                queue.append((nr, nc))
    return len(seen) == height * width


def lake_layout(width: int, height: int, hole_fraction: float, seed: int) -> np.ndarray:
    """
    Sample a solvable hole layout; returns a (height, width) boolean mask.

    The start tile is (0, 0) and the goal tile is (height-1, width-1); neither
    is ever a hole. Layouts are resampled until every tile, the goal included, can be
    entered from the start.
    """
    if width < 1 or height < 1 or width * height < 2:
        raise InvalidDimensionError("gridworld needs at least two tiles")
    if not 0.0 <= hole_fraction <= 0.5:
        raise InvalidDimensionError(f"hole_fraction must lie in [0, 0.5], got {hole_fraction}")

    rng = np.random.default_rng(seed)
    n_cells = width * height
    n_holes = int(np.floor(hole_fraction * (n_cells - 2)))
    interior = np.arange(1, n_cells - 1)
    for attempt in range(LAKE_MAX_RESAMPLES):
        holes = np.zeros(n_cells, dtype=bool)
        if n_holes:
            holes[rng.choice(interior, size=n_holes, replace=False)] = True
        holes = holes.reshape(height, width)
        if _lake_solvable(holes, height, width):
            logger.debug(f"Lake layout found after {attempt + 1} draw(s)")
            return holes

    logger.error(f"No solvable {height}x{width} layout in {LAKE_MAX_RESAMPLES} draws")
    raise LayoutInfeasibleError(
        f"no solvable {height}x{width} layout with hole_fraction={hole_fraction} "
        f"in {LAKE_MAX_RESAMPLES} resamples"
    )


def lake_generate(width: int, height: int, hole_fraction: float, seed: int,
                  discount: float = 0.8, slippery: bool = False) -> FiniteMdp:
    """
    Build a FrozenLake-style gridworld MDP with four move actions.

    Moving off the grid leaves the character in place. Holes and the goal are
    absorbing in the episodic game; here every action on them restarts at the
    start tile so the state process is one recurrent chain. The reward r(s, a)
    is the probability that the move enters the goal tile.

    Args:
        width: Grid width
        height: Grid height
        hole_fraction: Share of non-start/non-goal tiles that are holes
        seed: Layout seed
        discount: Discount factor λ
        slippery: If set, the intended move and each perpendicular move
            happen with probability 1/3

    Returns:
        FiniteMdp: Gridworld MDP with width*height states
    """
    holes = lake_layout(width, height, hole_fraction, seed)
    n_states = width * height
    goal = n_states - 1
    transition = np.zeros((n_states, len(LAKE_MOVES), n_states))

    def index(r: int, c: int) -> int:
        return r * width + c

    for s in range(n_states):
        r, c = divmod(s, width)
        if s == goal or holes[r, c]:
            transition[s, :, 0] = 1.0
            continue
        for a in range(len(LAKE_MOVES)):
            if slippery:
                outcomes = [(a - 1) % 4, a, (a + 1) % 4]
                weight = 1.0 / 3.0
            else:
                outcomes = [a]
                weight = 1.0
            for move in outcomes:
                dr, dc = LAKE_MOVES[move]
                nr, nc = r + dr, c + dc
                if not (0 <= nr < height and 0 <= nc < width):
                    nr, nc = r, c
                transition[s, a, index(nr, nc)] += weight

    transition /= transition.sum(axis=2, keepdims=True)
    reward = transition[:, :, goal].copy()
    for s in range(n_states):
        r, c = divmod(s, width)
        if s == goal or holes[r, c]:
            reward[s, :] = 0.0

    logger.debug(f"Generated {height}x{width} lake with {int(holes.sum())} holes (seed {seed})")
    return FiniteMdp(transition, reward, discount)


def random_policy(mdp: FiniteMdp, seed: int) -> Policy:
    """π(a|s) = U_a / Σ_i U_i with i.i.d. uniform U per state."""
    rng = np.random.default_rng(seed)
    draws = rng.random((mdp.n_states, mdp.n_actions))
    return Policy(draws / draws.sum(axis=1, keepdims=True))


def exact_value_function(mdp: FiniteMdp, policy: Policy) -> np.ndarray:
    """V_π = (I - λ P_π)^{-1} r_π."""
    kernel = np.einsum("sa,sat->st", policy.probs, mdp.transition)
    reward = np.einsum("sa,sa->s", policy.probs, mdp.reward)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.discount * kernel, reward)


def greedy_policy(mdp: FiniteMdp, tol: float = 1e-10) -> Policy:
    """
    Deterministic optimal policy by exact policy iteration.

    An action only replaces the incumbent when it improves the state-action
    value by more than ``tol``, so ties never cause cycling.

    Raises:
        NonConvergenceError: If more than n_states*n_actions + 100 sweeps run
    """
    n_states, n_actions = mdp.n_states, mdp.n_actions
    max_sweeps = n_states * n_actions + 100
    actions = np.argmax(mdp.reward, axis=1)
    rows = np.arange(n_states)

    for sweep in range(1, max_sweeps + 1):
        probs = np.zeros((n_states, n_actions))
        probs[rows, actions] = 1.0
        values = exact_value_function(mdp, Policy(probs))
        q_values = mdp.reward + mdp.discount * mdp.transition @ values
        best = np.argmax(q_values, axis=1)
        improve = q_values[rows, best] > q_values[rows, actions] + tol
        if not np.any(improve):
            logger.debug(f"Policy iteration converged after {sweep} sweep(s)")
            return Policy(probs)
        actions = np.where(improve, best, actions)

    logger.error(f"Policy iteration did not converge in {max_sweeps} sweeps")
    raise NonConvergenceError(f"policy iteration exceeded {max_sweeps} sweeps")


def random_features(n_states: int, d: int, seed: int) -> FeatureMap:
    """
    Gaussian features normalized to unit rows: φ(s) = Φ_s / ‖Φ_s‖.

    Raises:
        DegenerateFeatureError: If a row keeps a norm below 1e-8 after
            100 resamples
    """
    if d < 1 or n_states < 1:
        raise InvalidDimensionError("feature map needs n_states >= 1 and d >= 1")
    if n_states < d:
        logger.warning(f"Feature dimension {d} exceeds the number of states {n_states}; "
                       "the design matrix will be singular")

    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((n_states, d))
    for s in range(n_states):
        attempts = 0
        while np.linalg.norm(raw[s]) < FEATURE_MIN_NORM:
            attempts += 1
            if attempts > FEATURE_MAX_RESAMPLES:
                raise DegenerateFeatureError(f"feature row {s} stayed degenerate")
            raw[s] = rng.standard_normal(d)
    return FeatureMap(raw / np.linalg.norm(raw, axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# Chain diagnostics
# ---------------------------------------------------------------------------

def dobrushin(kernel: np.ndarray) -> float:
    """Largest total-variation distance between two rows of ``kernel``."""
    kernel = np.asarray(kernel, dtype=float)
    worst = 0.0
    for i in range(kernel.shape[0] - 1):
        gaps = 0.5 * np.abs(kernel[i] - kernel[i + 1:]).sum(axis=1)
        worst = max(worst, float(gaps.max()))
    return min(worst, 1.0)


def mixing_time(kernel: np.ndarray, cap: Optional[int] = None) -> Optional[int]:
    """
    Smallest t <= cap with Dobrushin(kernel^t) <= 1/4, or None.

    The coefficient is non-increasing in t, so we double until the threshold
    is met and then bisect. The default cap is 10 * n_states**2.
    """
    kernel = np.asarray(kernel, dtype=float)
    if cap is None:
        cap = 10 * kernel.shape[0] ** 2

    def mixed(t: int) -> bool:
        return dobrushin(np.linalg.matrix_power(kernel, t)) <= MIXING_THRESHOLD

    hi = 1
    while hi < cap and not mixed(hi):
        hi *= 2
    hi = min(hi, cap)
    if not mixed(hi):
        return None
    lo = hi // 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if mixed(mid):
            hi = mid
        else:
            lo = mid
    return hi


def stationary_distribution(kernel: np.ndarray) -> np.ndarray:
    """
    Left fixed point μ P = μ with Σμ = 1 by a dense solve.

    Raises:
        ReducibleChainError: If the system is singular or some mass is below
            1e-12
    """
    kernel = np.asarray(kernel, dtype=float)
    n = kernel.shape[0]
    system = kernel.T - np.eye(n)
    system[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0

    ergodicity = "uniform geometric ergodicity of the observation chain"
    try:
        if np.linalg.cond(system) > 1.0 / SINGULAR_TOL:
            raise np.linalg.LinAlgError("ill-conditioned stationary system")
        mu = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError as e:
        logger.error(f"Stationary solve failed: {e}")
        raise ReducibleChainError("stationary distribution is not unique", ergodicity) from e

    if np.any(mu < MIN_STATIONARY_MASS):
        logger.error(f"Stationary law has mass {float(mu.min()):.3e} on some state")
        raise ReducibleChainError("chain is effectively reducible", ergodicity)
    return mu / mu.sum()


def induce_chain(mdp: FiniteMdp, policy: Policy) -> InducedChain:
    """P_π(s'|s) = Σ_a π(a|s) P(s'|s,a) with its stationary law and mixing time."""
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise InvalidDimensionError(
            f"policy shape {policy.probs.shape} does not match MDP {(mdp.n_states, mdp.n_actions)}"
        )
    kernel = np.einsum("sa,sat->st", policy.probs, mdp.transition)
    stationary = stationary_distribution(kernel)
    t_mix = mixing_time(kernel)
    if t_mix is None:
        logger.warning("Induced chain did not reach Dobrushin <= 1/4 within the search cap")
    return InducedChain(kernel, stationary, t_mix)


def feature_of_state(features: FeatureMap, state: int) -> np.ndarray:
    """Unit vector along φ(state)."""
    row = np.asarray(features.features[state], dtype=float)
    return row / np.linalg.norm(row)
