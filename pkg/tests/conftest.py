"""Shared fixtures: small Garnet TD problems and synthetic LSA instances."""

import numpy as np
import pytest

from src.analysis import LsaInstance, build_td_instance, ground_truth
from src.env import garnet_generate, induce_chain, random_features, random_policy
from src.exceptions import ReducibleChainError
from src.lsa import StepSchedule


def make_garnet_td(seed: int, n_states: int = 6, n_actions: int = 2, branching: int = 3,
                   dim: int = 2, discount: float = 0.8):
    """
    Garnet TD problem for the first of seed, seed + 1000, ... whose chain is ergodic.

    A random Garnet occasionally leaves a state unreachable; those draws are skipped.
    """
    for attempt in range(20):
        draw = seed + 1000 * attempt
        mdp = garnet_generate(n_states, n_actions, branching, draw, discount)
        policy = random_policy(mdp, draw + 1)
        features = random_features(n_states, dim, draw + 2)
        try:
            return mdp, policy, features, build_td_instance(mdp, policy, features)
        except ReducibleChainError:
            continue
    raise RuntimeError(f"no ergodic Garnet found from seed {seed}")


def ergodic_garnet_seed(seed: int, n_states: int = 6, n_actions: int = 2, branching: int = 3) -> int:
    """First of seed, seed + 1000, ... whose Garnet chain under a random policy is ergodic."""
    for attempt in range(20):
        draw = seed + 1000 * attempt
        mdp = garnet_generate(n_states, n_actions, branching, draw)
        try:
            induce_chain(mdp, random_policy(mdp, draw + 1))
            return draw
        except ReducibleChainError:
            continue
    raise RuntimeError(f"no ergodic Garnet found from seed {seed}")


def iid_instance(per_z_A, per_z_b, weights) -> LsaInstance:
    """Observation chain whose rows all equal ``weights`` (i.i.d. sampling)."""
    weights = np.asarray(weights, dtype=float)
    kernel = np.tile(weights, (len(weights), 1))
    return LsaInstance.from_tables(kernel, per_z_A, per_z_b, weights)


@pytest.fixture
def garnet_td():
    return make_garnet_td(seed=7)


@pytest.fixture
def garnet_truth(garnet_td):
    *_, inst = garnet_td
    return ground_truth(inst)


@pytest.fixture
def zero_noise_instance():
    """Two observations sharing A = 2I and b, so ε vanishes and θ⋆ = (0.5, -1)."""
    a = np.stack([2.0 * np.eye(2)] * 2)
    b = np.array([[1.0, -2.0], [1.0, -2.0]])
    kernel = np.array([[0.3, 0.7], [0.6, 0.4]])
    return LsaInstance.from_tables(kernel, a, b)


@pytest.fixture
def scalar_iid_instance():
    """d = 1, A ≡ 1, b(z) = ±1 with equal probability: θ⋆ = 0 and Σ_∞ = 1."""
    return iid_instance(np.ones((2, 1, 1)), np.array([[1.0], [-1.0]]), [0.5, 0.5])


@pytest.fixture
def schedule():
    return StepSchedule(c0=0.5, k0=32, gamma=0.6)


GARNET_TOML = """
[env]
kind = "garnet"
n_states = 6
n_actions = 2
branching = 3
discount = 0.8
seed = {seed}
policy = "random"
policy_seed = {policy_seed}

[features]
dim = 2
seed = 13

[schedule]
c0 = 0.5
gamma = 0.6

[experiment]
n_grid = [64, 256]
replicates = 24
base_seed = 5
threads = 1
batch_size = 8
"""


@pytest.fixture
def config_path(tmp_path):
    """Small ergodic Garnet experiment file."""
    seed = ergodic_garnet_seed(7)
    path = tmp_path / "garnet.toml"
    path.write_text(GARNET_TOML.format(seed=seed, policy_seed=seed + 1), encoding="utf-8")
    return path
