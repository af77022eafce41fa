"""
Exact ground truth for LSA problem instances.

Builds the observation chain Z_k = (s_k, a_k, s_{k+1}) of TD(0), the mean
system (Ā, b̄), θ⋆, the long-run noise covariance Σ_ε (through the Poisson
equation), the CLT covariance Σ_∞, finite-n variances σ_n²(u), and the
stability constants coming from the Lyapunov equation.
"""

import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any, Dict, Optional, Tuple

import numpy as np

from .env import FeatureMap, FiniteMdp, Policy, exact_value_function, induce_chain, stationary_distribution
from .exceptions import (
    DegenerateDesignError,
    InvalidDimensionError,
    LyapunovSingularError,
    PoissonSolveError,
    SingularMatrixError,
)

if TYPE_CHECKING:
    from .lsa import StepSchedule

logger = logging.getLogger(__name__)

MAX_CONDITION = 1e12
POISSON_TOL = 1e-9
LYAPUNOV_TOL = 1e-9
MEAN_TOL = 1e-10
UNIT_TOL = 1e-10
DESIGN_TOL = 1e-10

MEAN_SYSTEM = "noise level: Ā invertible with -Ā Hurwitz"


def _freeze(array: Optional[np.ndarray], dtype=float) -> Optional[np.ndarray]:
    if array is None:
        return None
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _solve_mean_system(a_bar: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    if np.linalg.cond(a_bar) >= MAX_CONDITION:
        logger.error(f"Mean system matrix is singular (cond={np.linalg.cond(a_bar):.3e})")
        raise SingularMatrixError("mean system matrix Ā is singular", MEAN_SYSTEM)
    return np.linalg.solve(a_bar, rhs)


def check_unit(u: np.ndarray) -> np.ndarray:
    """Return ``u`` as a float vector after checking ‖u‖ = 1 ± 1e-10."""
    u = np.asarray(u, dtype=float)
    if abs(np.linalg.norm(u) - 1.0) > UNIT_TOL:
        raise InvalidDimensionError(f"direction must be a unit vector, got norm {np.linalg.norm(u):.12g}")
    return u


@dataclass(frozen=True)
class LsaInstance:
    """
    An LSA problem with Markov observations on a finite space Z.

    Holds the kernel and stationary law of the observation chain together with
    the per-observation tables A(z), b(z), their stationary means and the noise
    table ε(z) = (A(z) - Ā)θ⋆ - (b(z) - b̄).
    """

    a_bar: np.ndarray
    b_bar: np.ndarray
    z_kernel: np.ndarray
    z_stationary: np.ndarray
    noise_table: np.ndarray
    per_z_A: np.ndarray
    per_z_b: np.ndarray
    theta_star: np.ndarray
    design: Optional[np.ndarray] = None
    z_labels: Optional[np.ndarray] = None
    discount: Optional[float] = None

    def __post_init__(self):
        for name in ("a_bar", "b_bar", "z_kernel", "z_stationary", "noise_table",
                     "per_z_A", "per_z_b", "theta_star", "design"):
            object.__setattr__(self, name, _freeze(getattr(self, name)))
        object.__setattr__(self, "z_labels", _freeze(self.z_labels, dtype=np.intp))
        self.validate()

    @property
    def dim(self) -> int:
        return self.a_bar.shape[0]

    @property
    def n_observations(self) -> int:
        return self.z_kernel.shape[0]

    def validate(self) -> None:
        """Stationary means of A(z) and ε(z) must match Ā and 0."""
        mean_a = np.einsum("z,zij->ij", self.z_stationary, self.per_z_A)
        if np.max(np.abs(mean_a - self.a_bar)) > MEAN_TOL:
            raise InvalidDimensionError("stationary mean of A(z) differs from Ā")
        mean_noise = self.z_stationary @ self.noise_table
        if np.max(np.abs(mean_noise)) > MEAN_TOL * max(1.0, float(np.max(np.abs(self.noise_table)))):
            raise InvalidDimensionError("stationary mean of the noise table is not zero")

    @classmethod
    def from_tables(cls, z_kernel: np.ndarray, per_z_A: np.ndarray, per_z_b: np.ndarray,
                    z_stationary: Optional[np.ndarray] = None, **extra: Any) -> "LsaInstance":
        """
        Build an instance from raw per-observation tables.

        Args:
            z_kernel: (Z, Z) transition kernel of the observation chain
            per_z_A: (Z, d, d) matrices A(z)
            per_z_b: (Z, d) vectors b(z)
            z_stationary: Stationary law; solved for when omitted
            **extra: Optional ``design``, ``z_labels`` and ``discount``

        Returns:
            LsaInstance: Instance with Ā, b̄, θ⋆ and the noise table filled in
        """
        z_kernel = np.asarray(z_kernel, dtype=float)
        per_z_A = np.asarray(per_z_A, dtype=float)
        per_z_b = np.asarray(per_z_b, dtype=float)
        if z_stationary is None:
            z_stationary = stationary_distribution(z_kernel)
        z_stationary = np.asarray(z_stationary, dtype=float)

        a_bar = np.einsum("z,zij->ij", z_stationary, per_z_A)
        b_bar = z_stationary @ per_z_b
        theta_star = _solve_mean_system(a_bar, b_bar)
        noise = np.einsum("zij,j->zi", per_z_A - a_bar, theta_star) - (per_z_b - b_bar)
        return cls(a_bar=a_bar, b_bar=b_bar, z_kernel=z_kernel, z_stationary=z_stationary,
                   noise_table=noise, per_z_A=per_z_A, per_z_b=per_z_b,
                   theta_star=theta_star, **extra)


@dataclass(frozen=True)
class GroundTruth:
    """θ⋆, Σ_ε, Σ_∞ and (for TD instances) the design matrix Σ_φ."""

    theta_star: np.ndarray
    sigma_eps: np.ndarray
    sigma_inf: np.ndarray
    design: Optional[np.ndarray] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "theta_star": self.theta_star.tolist(),
            "sigma_eps": self.sigma_eps.tolist(),
            "sigma_inf": self.sigma_inf.tolist(),
            "design": None if self.design is None else self.design.tolist(),
        }


@dataclass(frozen=True)
class StabilityReport:
    """Lyapunov solution Q and the step-size constants it certifies."""

    q_matrix: np.ndarray
    a_const: float
    alpha_max: float
    kappa_q: float
    hurwitz: bool

    def to_dict(self) -> Dict[str, Any]:
        return {
            "q_matrix": self.q_matrix.tolist(),
            "a_const": self.a_const,
            "alpha_max": self.alpha_max,
            "kappa_q": self.kappa_q,
            "hurwitz": self.hurwitz,
        }


def build_td_instance(mdp: FiniteMdp, policy: Policy, features: FeatureMap) -> LsaInstance:
    """
    TD(0) as an LSA instance on observations z = (s, a, s').

    A(z) = φ(s){φ(s) - λφ(s')}ᵀ and b(z) = φ(s) r(s, a). Only triples with
    π(a|s) P(s'|s,a) > 0 are kept; the next observation (s', a', s'') has
    probability π(a'|s') P(s''|s',a').

    Raises:
        ReducibleChainError: If the induced state chain is not ergodic
        SingularMatrixError: If Ā cannot be inverted
    """
    if features.n_states != mdp.n_states:
        raise InvalidDimensionError(
            f"feature map covers {features.n_states} states, MDP has {mdp.n_states}"
        )
    chain = induce_chain(mdp, policy)

    weight = policy.probs[:, :, None] * mdp.transition
    labels = np.argwhere(weight > 0.0)
    s, a, s_next = labels[:, 0], labels[:, 1], labels[:, 2]
    step_prob = weight[s, a, s_next]

    z_kernel = (s_next[:, None] == s[None, :]) * step_prob[None, :]
    z_stationary = chain.stationary[s] * step_prob

    phi = np.asarray(features.features, dtype=float)
    lam = mdp.discount
    per_z_A = np.einsum("zi,zj->zij", phi[s], phi[s] - lam * phi[s_next])
    per_z_b = phi[s] * mdp.reward[s, a][:, None]
    design = np.einsum("s,si,sj->ij", chain.stationary, phi, phi)

    logger.debug(f"TD instance with {len(labels)} observations, d={features.dim}, λ={lam}")
    return LsaInstance.from_tables(z_kernel, per_z_A, per_z_b, z_stationary,
                                   design=design, z_labels=labels, discount=lam)


def _expectation(inst: LsaInstance, left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """E_π[left(Z) right(Z)ᵀ] over the finite observation space."""
    return (left * inst.z_stationary[:, None]).T @ right


def poisson_solution(inst: LsaInstance) -> np.ndarray:
    """
    Solve ε̂ - P ε̂ = ε with π(ε̂) = 0 through the fundamental matrix.

    Raises:
        PoissonSolveError: If the residual exceeds 1e-9 in sup norm
    """
    n_obs = inst.n_observations
    fundamental = np.eye(n_obs) - inst.z_kernel + inst.z_stationary[None, :]
    try:
        eps_hat = np.linalg.solve(fundamental, inst.noise_table)
    except np.linalg.LinAlgError as e:
        logger.error(f"Fundamental matrix solve failed: {e}")
        raise PoissonSolveError("fundamental matrix is singular",
                                "uniform geometric ergodicity of the observation chain") from e

    residual = eps_hat - inst.z_kernel @ eps_hat - inst.noise_table
    worst = float(np.max(np.abs(residual))) if residual.size else 0.0
    if worst > POISSON_TOL:
        logger.error(f"Poisson residual {worst:.3e} exceeds {POISSON_TOL}")
        raise PoissonSolveError(f"Poisson residual {worst:.3e} exceeds {POISSON_TOL}")
    return eps_hat


def ground_truth(inst: LsaInstance) -> GroundTruth:
    """
    Exact θ⋆, Σ_ε and Σ_∞ = Ā⁻¹ Σ_ε Ā⁻ᵀ.

    Σ_ε = E[ε ε̂ᵀ] + E[ε̂ εᵀ] - E[ε εᵀ], which equals the lag-0 covariance plus
    every lag-ℓ cross covariance in both orders.
    """
    theta_star = _solve_mean_system(inst.a_bar, inst.b_bar)
    eps = inst.noise_table
    eps_hat = poisson_solution(inst)

    cross = _expectation(inst, eps, eps_hat)
    sigma_eps = cross + cross.T - _expectation(inst, eps, eps)
    sigma_eps = 0.5 * (sigma_eps + sigma_eps.T)

    left = np.linalg.solve(inst.a_bar, sigma_eps)
    sigma_inf = np.linalg.solve(inst.a_bar, left.T)
    sigma_inf = 0.5 * (sigma_inf + sigma_inf.T)

    return GroundTruth(theta_star=_freeze(theta_star), sigma_eps=_freeze(sigma_eps),
                       sigma_inf=_freeze(sigma_inf), design=_freeze(inst.design))


def lag_covariance_sum(inst: LsaInstance, lags: int) -> np.ndarray:
    """E[ε₀ε₀ᵀ] + Σ_{ℓ=1}^{lags} (E[ε₀ε_ℓᵀ] + E[ε_ℓε₀ᵀ]) under stationarity."""
    eps = inst.noise_table
    total = _expectation(inst, eps, eps)
    propagated = eps
    for _ in range(lags):
        propagated = inst.z_kernel @ propagated
        lagged = _expectation(inst, eps, propagated)
        total = total + lagged + lagged.T
    return 0.5 * (total + total.T)


def sigma_u(gt: GroundTruth, u: np.ndarray) -> float:
    """σ²(u) = uᵀ Σ_∞ u, clipped at zero against roundoff."""
    u = check_unit(u)
    return max(float(u @ gt.sigma_inf @ u), 0.0)


def q_operator_norm(matrix: np.ndarray, q_matrix: np.ndarray) -> float:
    """‖B‖_Q = ‖Q^{1/2} B Q^{-1/2}‖ for symmetric positive definite Q."""
    eigvals, eigvecs = np.linalg.eigh(q_matrix)
    root = eigvecs @ np.diag(np.sqrt(eigvals)) @ eigvecs.T
    inv_root = eigvecs @ np.diag(1.0 / np.sqrt(eigvals)) @ eigvecs.T
    return float(np.linalg.norm(root @ matrix @ inv_root, 2))


def stability(a_bar: np.ndarray, p: Optional[np.ndarray] = None) -> StabilityReport:
    """
    Solve ĀᵀQ + QĀ = P and derive a, α_∞ and κ_Q.

    The equation is solved as a dense Kronecker system. With λ = λmin(P):
    a = λ / (2‖Q‖) and α_∞ = min(λ / (2κ_Q‖Ā‖_Q²), ‖Q‖/λ, a/‖Ā‖_Q²).
    When -Ā is not Hurwitz, Q is still returned but the constants are NaN.

    Args:
        a_bar: Mean system matrix Ā
        p: Symmetric positive definite right-hand side (identity by default)

    Returns:
        StabilityReport: Q and its constants

    Raises:
        LyapunovSingularError: If the Kronecker system is singular
    """
    a_bar = np.asarray(a_bar, dtype=float)
    d = a_bar.shape[0]
    p = np.eye(d) if p is None else np.asarray(p, dtype=float)
    if np.max(np.abs(p - p.T)) > LYAPUNOV_TOL or np.linalg.eigvalsh(p).min() <= 0.0:
        raise InvalidDimensionError("P must be symmetric positive definite")

    hurwitz = bool(np.all(np.linalg.eigvals(a_bar).real > 0.0))
    identity = np.eye(d)
    # row-major vec: vec(ĀᵀQ) = (Āᵀ ⊗ I) vec(Q), vec(QĀ) = (I ⊗ Āᵀ) vec(Q)
    system = np.kron(a_bar.T, identity) + np.kron(identity, a_bar.T)
    if np.linalg.cond(system) >= MAX_CONDITION:
        logger.error("Lyapunov system is singular")
        raise LyapunovSingularError("Lyapunov equation has no unique solution", MEAN_SYSTEM)
    q_matrix = np.linalg.solve(system, p.reshape(-1)).reshape(d, d)
    q_matrix = 0.5 * (q_matrix + q_matrix.T)

    residual = float(np.max(np.abs(a_bar.T @ q_matrix + q_matrix @ a_bar - p)))
    if residual > LYAPUNOV_TOL:
        logger.warning(f"Lyapunov residual {residual:.3e} exceeds {LYAPUNOV_TOL}")

    if not hurwitz:
        logger.warning("-Ā is not Hurwitz; stability constants are undefined")
        return StabilityReport(_freeze(q_matrix), float("nan"), float("nan"), float("nan"), False)

    q_eigs = np.linalg.eigvalsh(q_matrix)
    q_norm = float(q_eigs.max())
    kappa_q = float(q_eigs.max() / q_eigs.min())
    p_min = float(np.linalg.eigvalsh(p).min())
    a_const = p_min / (2.0 * q_norm)
    a_norm_sq = q_operator_norm(a_bar, q_matrix) ** 2
    alpha_max = min(p_min / (2.0 * kappa_q * a_norm_sq), q_norm / p_min, a_const / a_norm_sq)
    return StabilityReport(_freeze(q_matrix), a_const, alpha_max, kappa_q, True)


def td_stability_constants(inst: LsaInstance, features: FeatureMap, discount: float) -> Tuple[float, float]:
    """
    TD closed forms with Q = I: a = (1 - λ) λmin(Σ_φ), α_∞ = (1 - λ)/(1 + λ)².

    Raises:
        DegenerateDesignError: If λmin(Σ_φ) <= 1e-10
    """
    if inst.design is None:
        raise InvalidDimensionError("instance carries no design matrix; build it with build_td_instance")
    if inst.design.shape != (features.dim, features.dim):
        raise InvalidDimensionError("feature dimension does not match the instance")
    lam_min = float(np.linalg.eigvalsh(inst.design).min())
    if lam_min <= DESIGN_TOL:
        logger.error(f"Design matrix is degenerate (λmin={lam_min:.3e})")
        raise DegenerateDesignError("design matrix Σ_φ is degenerate",
                                    "non-degenerate feature design λmin(Σ_φ) > 0")
    return (1.0 - discount) * lam_min, (1.0 - discount) / (1.0 + discount) ** 2


def noise_bounds(inst: LsaInstance) -> Tuple[float, float]:
    """Return (sup_z ‖ε(z)‖, C_A = sup‖A(z)‖ ∨ sup‖A(z) - Ā‖)."""
    noise_sup = float(np.max(np.linalg.norm(inst.noise_table, axis=1)))
    a_sup = float(np.max(np.linalg.norm(inst.per_z_A, ord=2, axis=(1, 2))))
    centered_sup = float(np.max(np.linalg.norm(inst.per_z_A - inst.a_bar, ord=2, axis=(1, 2))))
    return noise_sup, max(a_sup, centered_sup)


def finite_n_variance(inst: LsaInstance, gt: GroundTruth, schedule: "StepSchedule",
                      n: int, u: np.ndarray) -> float:
    """
    σ_n²(u) = uᵀ Σ_n u with Σ_n = n⁻¹ Σ_{ℓ=2}^{n-1} Q_ℓ Σ_ε Q_ℓᵀ.

    Runs the backward recursion v_{n-1} = u, v_{ℓ-1} = u + (I - α_ℓ Āᵀ) v_ℓ,
    where v_ℓ = S_ℓᵀ u and Q_ℓᵀ u = α_ℓ v_ℓ, in O(n d²).
    """
    if n < 3:
        raise InvalidDimensionError("finite-n variance needs n >= 3")
    u = check_unit(u)
    a_t = inst.a_bar.T
    v = u.copy()
    total = 0.0
    for ell in range(n - 1, 1, -1):
        alpha = schedule.step_size(ell)
        total += alpha * alpha * float(v @ gt.sigma_eps @ v)
        v = u + v - alpha * (a_t @ v)
    return max(total / n, 0.0)


def finite_n_covariance(inst: LsaInstance, gt: GroundTruth, schedule: "StepSchedule", n: int) -> np.ndarray:
    """Full Σ_n by the matrix form of the same recursion."""
    if n < 3:
        raise InvalidDimensionError("finite-n covariance needs n >= 3")
    d = inst.dim
    identity = np.eye(d)
    s_mat = identity.copy()
    total = np.zeros((d, d))
    for ell in range(n - 1, 1, -1):
        alpha = schedule.step_size(ell)
        total += alpha * alpha * (s_mat @ gt.sigma_eps @ s_mat.T)
        s_mat = identity + (identity - alpha * inst.a_bar) @ s_mat
    total /= n
    return 0.5 * (total + total.T)


def value_approximation_error(mdp: FiniteMdp, policy: Policy, features: FeatureMap,
                              theta: np.ndarray) -> float:
    """μ-weighted RMS gap between φᵀθ and the exact value function."""
    chain = induce_chain(mdp, policy)
    values = exact_value_function(mdp, policy)
    gap = np.asarray(features.features) @ np.asarray(theta, dtype=float) - values
    return float(np.sqrt(chain.stationary @ gap ** 2))
