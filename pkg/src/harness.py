"""
Experiment harness: configuration loading, assumption diagnostics and the
Monte Carlo drivers behind the CLI.

Replicates are simulated in fixed-size batches dispatched to a process pool.
Every replicate seed is derived from (base_seed, n, index), so the CSVs do not
depend on the number of workers.
"""

import hashlib
import json
import logging
import math

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass
from multiprocessing import Pool
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError

from .analysis import (
    GroundTruth,
    LsaInstance,
    build_td_instance,
    ground_truth,
    noise_bounds,
    finite_n_variance,
    sigma_u,
    stability,
    td_stability_constants,
    value_approximation_error,
)
from .config import config
from .env import (
    FeatureMap,
    FiniteMdp,
    InducedChain,
    Policy,
    dobrushin,
    feature_of_state,
    garnet_generate,
    greedy_policy,
    induce_chain,
    lake_generate,
    random_features,
    random_policy,
)
from .exceptions import AssumptionError, ConfigError, DegenerateScaleError
from .inference import (
    ObmConfig,
    ObmEstimate,
    confidence_interval,
    coverage,
    gaussian_comparison_bound,
    kolmogorov_distance,
    obm_noise_variance,
    obm_series_variance,
    point_mass_distance,
    resolve_block,
)
from .lsa import StepSchedule, replicate_seed, simulate_batch
from .models import DiagnosticsReport, ExperimentConfig
from .storage import storage

logger = logging.getLogger(__name__)

KOLMOGOROV_COLUMNS = ["n", "replicates", "b_n", "kd_limit", "kd_finite_n", "kd_obm_median",
                      "kd_obm_q25", "kd_obm_q75", "gauss_cmp_median"]
COVERAGE_COLUMNS = ["n", "b_n", "level", "coverage_obm", "stderr_obm", "coverage_oracle", "stderr_oracle"]
VARIANCE_DECAY_COLUMNS = ["n", "b_n", "abs_err_median", "abs_err_q25", "abs_err_q75", "remainder_median"]

STATISTICS_NOTE = "statistics: median and quartiles over replicates; coverage stderr = sqrt(p(1-p)/N)"

# settings that change how work is scheduled but never what is computed
_SCHEDULING_KEYS = ("threads", "batch_size")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _parse_override_value(raw: str) -> Any:
    try:
        return tomllib.loads(f"value = {raw}")["value"]
    except tomllib.TOMLDecodeError:
        return raw


def apply_override(tree: Dict[str, Any], override: str) -> None:
    """Set a dotted key (``section.key=value``) in a raw TOML tree."""
    if "=" not in override:
        raise ConfigError(f"override {override!r} is not of the form key=value")
    key, raw = override.split("=", 1)
    parts = [p.strip() for p in key.strip().split(".") if p.strip()]
    if not parts:
        raise ConfigError(f"override {override!r} has an empty key")
    node = tree
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"override {override!r} descends into non-table {part!r}")
        node = child
    node[parts[-1]] = _parse_override_value(raw.strip())


def load_config(path: Union[str, Path], overrides: Sequence[str] = (),
                seed: Optional[int] = None, threads: Optional[int] = None) -> ExperimentConfig:
    """
    Read, override and validate an experiment TOML file.

    Args:
        path: TOML file
        overrides: ``a.b=value`` edits applied before validation
        seed: Replaces experiment.base_seed when given
        threads: Replaces experiment.threads when given

    Returns:
        ExperimentConfig: Validated configuration

    Raises:
        ConfigError: On unreadable files, TOML syntax or validation errors
    """
    try:
        with open(path, "rb") as handle:
            tree = tomllib.load(handle)
    except OSError as e:
        logger.error(f"Cannot open config {path}: {e}")
        raise ConfigError(f"cannot open config {path}: {e}") from e
    except tomllib.TOMLDecodeError as e:
        logger.error(f"Invalid TOML in {path}: {e}")
        raise ConfigError(f"invalid TOML in {path}: {e}") from e

    for override in overrides:
        apply_override(tree, override)
    if seed is not None:
        tree.setdefault("experiment", {})["base_seed"] = seed
    if threads is not None:
        tree.setdefault("experiment", {})["threads"] = threads

    try:
        return ExperimentConfig.model_validate(tree)
    except ValidationError as e:
        logger.error(f"Invalid configuration {path}: {e}")
        raise ConfigError(f"invalid configuration {path}:\n{e}") from e


def config_hash(cfg: ExperimentConfig) -> str:
    """SHA-256 of the canonical config JSON, scheduling settings excluded."""
    payload = cfg.model_dump(mode="json")
    for key in _SCHEDULING_KEYS:
        payload["experiment"].pop(key, None)
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Problem construction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Problem:
    """Everything an experiment needs about one configured LSA problem."""

    instance: LsaInstance
    truth: GroundTruth
    schedule: StepSchedule
    direction: np.ndarray
    sigma2: float
    mdp: Optional[FiniteMdp] = None
    policy: Optional[Policy] = None
    features: Optional[FeatureMap] = None
    chain: Optional[InducedChain] = None
    a_const: Optional[float] = None
    alpha_max: Optional[float] = None


def build_environment(cfg: ExperimentConfig) -> Tuple[FiniteMdp, Policy, FeatureMap]:
    env = cfg.env
    if env.kind == "garnet":
        mdp = garnet_generate(env.n_states, env.n_actions, env.branching, env.seed, env.discount)
    else:
        mdp = lake_generate(env.width, env.height, env.hole_fraction, env.seed,
                            env.discount, slippery=env.slippery)

    if env.policy == "greedy":
        policy = greedy_policy(mdp)
    else:
        policy = random_policy(mdp, env.policy_seed)
    policy = policy.smoothed(env.policy_epsilon)

    features = random_features(mdp.n_states, cfg.features.dim, cfg.features.seed)
    return mdp, policy, features


def resolve_direction(cfg: ExperimentConfig, features: FeatureMap) -> np.ndarray:
    experiment = cfg.experiment
    if experiment.direction == "feature_of_state":
        if experiment.direction_state >= features.n_states:
            raise ConfigError(f"direction_state {experiment.direction_state} is not a state")
        return feature_of_state(features, experiment.direction_state)
    if experiment.direction == "random_unit":
        draw = np.random.default_rng(experiment.direction_seed).standard_normal(features.dim)
        return draw / np.linalg.norm(draw)
    vector = np.asarray(experiment.direction_vector, dtype=float)
    norm = np.linalg.norm(vector)
    if norm == 0.0:
        raise ConfigError("direction_vector must be non-zero")
    return vector / norm


def build_problem(cfg: ExperimentConfig) -> Problem:
    """Generate the environment and compute its exact ground truth and step schedule."""
    mdp, policy, features = build_environment(cfg)
    chain = induce_chain(mdp, policy)
    instance = build_td_instance(mdp, policy, features)
    truth = ground_truth(instance)
    a_const, alpha_max = td_stability_constants(instance, features, mdp.discount)
    schedule = StepSchedule.default_for(alpha_max, cfg.schedule.gamma,
                                        cfg.schedule.c0, cfg.schedule.k0)
    if schedule.c0 > alpha_max:
        logger.warning(f"c0={schedule.c0:.4g} exceeds the TD stability threshold {alpha_max:.4g}")
    direction = resolve_direction(cfg, features)
    sigma2 = sigma_u(truth, direction)
    logger.info(f"Problem ready: |Z|={instance.n_observations}, d={instance.dim}, "
                f"σ²(u)={sigma2:.6g}, schedule=({schedule.c0:.4g}, {schedule.k0}, {schedule.gamma})")
    return Problem(instance=instance, truth=truth, schedule=schedule, direction=direction,
                   sigma2=sigma2, mdp=mdp, policy=policy, features=features, chain=chain,
                   a_const=a_const, alpha_max=alpha_max)


def diagnose(cfg: ExperimentConfig, problem: Optional[Problem] = None) -> DiagnosticsReport:
    """Assumption checklist: ergodicity, Hurwitz stability, design and noise bounds."""
    problem = problem or build_problem(cfg)
    instance, chain = problem.instance, problem.chain
    lam = problem.mdp.discount

    t_mix = chain.mixing_time
    contraction = None
    if t_mix is not None:
        contraction = dobrushin(np.linalg.matrix_power(chain.kernel, t_mix))
    lyapunov = stability(instance.a_bar)
    noise_sup, c_a = noise_bounds(instance)
    theta_norm = float(np.linalg.norm(problem.truth.theta_star))

    return DiagnosticsReport(
        t_mix=t_mix,
        dobrushin_at_t_mix=contraction,
        hurwitz=lyapunov.hurwitz,
        lambda_min_design=float(np.linalg.eigvalsh(instance.design).min()),
        a_td=problem.a_const,
        alpha_max_td=problem.alpha_max,
        a_lyapunov=lyapunov.a_const,
        alpha_max_lyapunov=lyapunov.alpha_max,
        kappa_q=lyapunov.kappa_q,
        noise_sup=noise_sup,
        noise_bound_td=2.0 * (1.0 + lam) * (theta_norm + 1.0),
        c_a=c_a,
        c_a_bound_td=2.0 * (1.0 + lam),
        c0=problem.schedule.c0,
        k0=problem.schedule.k0,
        gamma=problem.schedule.gamma,
        c0_within_alpha_max=problem.schedule.c0 <= problem.alpha_max,
        sigma2_u=problem.sigma2,
        theta_star=problem.truth.theta_star.tolist(),
        value_rms_error=value_approximation_error(problem.mdp, problem.policy, problem.features,
                                                  problem.truth.theta_star),
    )


def require_assumptions(report: DiagnosticsReport) -> None:
    """Raise when the diagnostics show -Ā is not Hurwitz."""
    if not report.hurwitz:
        logger.error("Mean system fails the Hurwitz check")
        raise AssumptionError("-Ā is not Hurwitz", "noise level: -Ā Hurwitz")


# ---------------------------------------------------------------------------
# Replicate simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReplicateTask:
    instance: LsaInstance
    truth: GroundTruth
    schedule: StepSchedule
    direction: np.ndarray
    n: int
    b_n: int
    seeds: Tuple[int, ...]
    burn_in: int = 0
    with_noise: bool = False


@dataclass
class ReplicateResults:
    """Per-replicate outputs for one n, in replicate-index order."""

    statistics: np.ndarray
    pr_averages: np.ndarray
    obm: np.ndarray
    noise_obm: Optional[np.ndarray] = None


def _replicate_worker(task: ReplicateTask) -> Dict[str, np.ndarray]:
    iterates, observations = simulate_batch(task.instance, task.schedule, task.n, None,
                                            task.seeds, task.burn_in)
    u = task.direction
    pr_averages = iterates.mean(axis=1)
    projected = iterates @ u
    out = {
        "statistics": math.sqrt(task.n) * ((pr_averages - task.truth.theta_star) @ u),
        "pr_averages": pr_averages,
        "obm": np.array([obm_series_variance(series, task.b_n) for series in projected]),
    }
    if task.with_noise:
        out["noise_obm"] = np.array([
            obm_noise_variance(task.instance, task.truth, path, task.b_n, u) for path in observations
        ])
    return out


def simulate_replicates(problem: Problem, cfg: ExperimentConfig, n: int, b_n: int,
                        with_noise: bool = False) -> ReplicateResults:
    """
    Run ``replicates`` trajectories of length n and collect their statistics.

    Batches go to a pool of ``threads`` processes; each batch writes back into
    its own slice, so the result is independent of scheduling.
    """
    experiment = cfg.experiment
    seeds = [replicate_seed(experiment.base_seed, n, i) for i in range(experiment.replicates)]
    bounds = [(start, min(start + experiment.batch_size, len(seeds)))
              for start in range(0, len(seeds), experiment.batch_size)]
    tasks = [ReplicateTask(problem.instance, problem.truth, problem.schedule, problem.direction,
                           n, b_n, tuple(seeds[start:stop]), experiment.burn_in, with_noise)
             for start, stop in bounds]

    if experiment.threads > 1 and len(tasks) > 1:
        with Pool(processes=min(experiment.threads, len(tasks))) as pool:
            outputs = pool.map(_replicate_worker, tasks)
    else:
        outputs = [_replicate_worker(task) for task in tasks]

    count, d = len(seeds), problem.instance.dim
    results = ReplicateResults(statistics=np.empty(count), pr_averages=np.empty((count, d)),
                               obm=np.empty(count),
                               noise_obm=np.empty(count) if with_noise else None)
    for (start, stop), output in zip(bounds, outputs):
        results.statistics[start:stop] = output["statistics"]
        results.pr_averages[start:stop] = output["pr_averages"]
        results.obm[start:stop] = output["obm"]
        if with_noise:
            results.noise_obm[start:stop] = output["noise_obm"]
    return results


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def block_length(cfg: ExperimentConfig, index: int, n: int) -> int:
    rule = ObmConfig(rule=cfg.bootstrap.block_rule, block_len=cfg.block_for(index))
    return resolve_block(rule, n)


def distance_to_gaussian(samples: np.ndarray, variance: float) -> float:
    """Kolmogorov distance to N(0, variance), falling back to the point mass at zero."""
    try:
        return kolmogorov_distance(samples, math.sqrt(variance) if variance > 0.0 else 0.0)
    except DegenerateScaleError:
        logger.warning("Gaussian target has zero variance; comparing with the point mass at 0")
        return point_mass_distance(samples)


def _quartiles(values: np.ndarray) -> Tuple[float, float, float]:
    q25, median, q75 = np.quantile(values, [0.25, 0.5, 0.75])
    return float(q25), float(median), float(q75)


def _header(cfg: ExperimentConfig, experiment: str) -> List[str]:
    return [
        f"markov-lsa-inference artifact_version={config.ARTIFACT_VERSION} "
        f"experiment={experiment} config_sha256={config_hash(cfg)}",
        STATISTICS_NOTE,
    ]


def save_provenance(cfg: ExperimentConfig, problem: Problem, out_path: Path) -> Path:
    """Write the ground truth and stability constants behind a CSV to ``<stem>.provenance.json``."""
    schedule = problem.schedule
    return storage.save_json(out_path.with_name(f"{out_path.stem}.provenance.json"), {
        "artifact_version": config.ARTIFACT_VERSION,
        "config_sha256": config_hash(cfg),
        "schedule": {"c0": float(schedule.c0), "k0": int(schedule.k0), "gamma": float(schedule.gamma)},
        "direction": problem.direction.tolist(),
        "sigma2_u": float(problem.sigma2),
        "ground_truth": problem.truth.to_dict(),
        "stability": stability(problem.instance.a_bar).to_dict(),
    })


def run_kolmogorov(cfg: ExperimentConfig, out_path: Union[str, Path],
                   problem: Optional[Problem] = None) -> Path:
    """
    Kolmogorov distances of √n·uᵀ(θ̄_n - θ⋆) to the limiting, finite-n and OBM Gaussians.

    Returns:
        Path: Written CSV
    """
    problem = problem or build_problem(cfg)
    out_path = Path(out_path)
    save_provenance(cfg, problem, out_path)
    with storage.csv_report(out_path, KOLMOGOROV_COLUMNS, _header(cfg, "kolmogorov")) as report:
        for index, n in enumerate(cfg.experiment.n_grid):
            b_n = block_length(cfg, index, n)
            logger.info(f"kolmogorov: n={n}, b_n={b_n}, replicates={cfg.experiment.replicates}")
            results = simulate_replicates(problem, cfg, n, b_n)
            samples = np.sort(results.statistics)

            sigma2_n = finite_n_variance(problem.instance, problem.truth, problem.schedule,
                                         n, problem.direction)
            kd_obm = np.array([distance_to_gaussian(samples, v) for v in results.obm])
            q25, median, q75 = _quartiles(kd_obm)
            if problem.sigma2 > 0.0:
                gauss_cmp = float(np.median([gaussian_comparison_bound(v, problem.sigma2)
                                             for v in results.obm]))
            else:
                gauss_cmp = float("nan")

            report.write_row({
                "n": n,
                "replicates": len(samples),
                "b_n": b_n,
                "kd_limit": distance_to_gaussian(samples, problem.sigma2),
                "kd_finite_n": distance_to_gaussian(samples, sigma2_n),
                "kd_obm_median": median,
                "kd_obm_q25": q25,
                "kd_obm_q75": q75,
                "gauss_cmp_median": gauss_cmp,
            })
    return out_path


def run_coverage(cfg: ExperimentConfig, out_path: Union[str, Path],
                 problem: Optional[Problem] = None) -> Path:
    """Coverage of OBM-based and oracle intervals for uᵀθ⋆ at every n and level."""
    problem = problem or build_problem(cfg)
    u = problem.direction
    truth = float(u @ problem.truth.theta_star)
    out_path = Path(out_path)
    save_provenance(cfg, problem, out_path)
    with storage.csv_report(out_path, COVERAGE_COLUMNS, _header(cfg, "coverage")) as report:
        for index, n in enumerate(cfg.experiment.n_grid):
            b_n = block_length(cfg, index, n)
            logger.info(f"coverage: n={n}, b_n={b_n}, replicates={cfg.experiment.replicates}")
            results = simulate_replicates(problem, cfg, n, b_n)
            oracle = ObmEstimate(variance=problem.sigma2, block_len=b_n, n=n, direction=u)

            for level in cfg.experiment.levels:
                obm_hits = []
                oracle_hits = []
                for average, variance in zip(results.pr_averages, results.obm):
                    estimate = ObmEstimate(variance=float(variance), block_len=b_n, n=n, direction=u)
                    obm_hits.append((confidence_interval(average, estimate, u, level), truth))
                    oracle_hits.append((confidence_interval(average, oracle, u, level), truth))
                rate_obm, stderr_obm = coverage(obm_hits)
                rate_oracle, stderr_oracle = coverage(oracle_hits)
                report.write_row({
                    "n": n,
                    "b_n": b_n,
                    "level": level,
                    "coverage_obm": rate_obm,
                    "stderr_obm": stderr_obm,
                    "coverage_oracle": rate_oracle,
                    "stderr_oracle": stderr_oracle,
                })
    return out_path


def run_variance_decay(cfg: ExperimentConfig, out_path: Union[str, Path],
                       problem: Optional[Problem] = None) -> Path:
    """|σ̂²_θ(u) - σ²(u)| and the remainder |σ̂²_θ(u) - σ̂²_ε(u)| across the n grid."""
    if cfg.bootstrap.block_rule != "pow34" or cfg.schedule.gamma > 0.55:
        logger.warning("variance decay is meant for block_rule=pow34 with gamma near 1/2")
    problem = problem or build_problem(cfg)
    out_path = Path(out_path)
    save_provenance(cfg, problem, out_path)
    with storage.csv_report(out_path, VARIANCE_DECAY_COLUMNS, _header(cfg, "variance-decay")) as report:
        for index, n in enumerate(cfg.experiment.n_grid):
            b_n = block_length(cfg, index, n)
            logger.info(f"variance-decay: n={n}, b_n={b_n}, replicates={cfg.experiment.replicates}")
            results = simulate_replicates(problem, cfg, n, b_n, with_noise=True)
            q25, median, q75 = _quartiles(np.abs(results.obm - problem.sigma2))
            report.write_row({
                "n": n,
                "b_n": b_n,
                "abs_err_median": median,
                "abs_err_q25": q25,
                "abs_err_q75": q75,
                "remainder_median": float(np.median(np.abs(results.obm - results.noise_obm))),
            })
    return out_path
