import numpy as np
import pytest

from src.env import (
    FiniteMdp,
    Policy,
    dobrushin,
    exact_value_function,
    feature_of_state,
    garnet_generate,
    greedy_policy,
    induce_chain,
    lake_generate,
    lake_layout,
    mixing_time,
    random_features,
    random_policy,
    stationary_distribution,
)
from src.exceptions import InvalidDimensionError, ReducibleChainError


def two_state_mdp(kernel, discount=0.5):
    kernel = np.asarray(kernel, dtype=float)
    return FiniteMdp(kernel[:, None, :], np.zeros((2, 1)), discount)


def garnet_chains(count=100):
    """Induced chains of Garnet(6, 2, 3) under random policies, skipping reducible draws."""
    for seed in range(count):
        mdp = garnet_generate(6, 2, 3, seed)
        try:
            yield induce_chain(mdp, random_policy(mdp, seed + 1))
        except ReducibleChainError:
            continue


class TestGarnet:
    def test_branching_support(self):
        mdp = garnet_generate(6, 2, 3, seed=4)
        assert mdp.transition.shape == (6, 2, 6)
        assert np.all((mdp.transition > 0).sum(axis=2) == 3)
        np.testing.assert_allclose(mdp.transition.sum(axis=2), 1.0, atol=1e-12)
        assert np.all((mdp.reward >= 0.0) & (mdp.reward <= 1.0))

    def test_single_state(self):
        mdp = garnet_generate(1, 1, 1, seed=3)
        assert mdp.transition.tolist() == [[[1.0]]]

    def test_deterministic_in_seed(self):
        a = garnet_generate(4, 2, 2, seed=7)
        b = garnet_generate(4, 2, 2, seed=7)
        assert np.array_equal(a.transition, b.transition)
        assert np.array_equal(a.reward, b.reward)

    @pytest.mark.parametrize("args", [(3, 2, 4), (0, 2, 1), (3, 0, 1), (3, 2, 0)])
    def test_invalid_sizes(self, args):
        with pytest.raises(InvalidDimensionError):
            garnet_generate(*args, seed=0)

    def test_tables_are_read_only(self):
        mdp = garnet_generate(3, 2, 2, seed=1)
        with pytest.raises(ValueError):
            mdp.transition[0, 0, 0] = 0.5


class TestLake:
    def test_eight_by_eight(self):
        mdp = lake_generate(8, 8, 0.2, seed=3)
        assert mdp.n_states == 64
        assert mdp.n_actions == 4
        np.testing.assert_allclose(mdp.transition.sum(axis=2), 1.0, atol=1e-12)
        assert np.all(mdp.transition[63, :, 0] == 1.0)

    def test_corridor_reward(self):
        mdp = lake_generate(1, 2, 0.0, seed=0)
        # action 1 moves down into the goal
        assert mdp.reward[0, 1] == 1.0
        assert mdp.reward[0, [0, 2, 3]].tolist() == [0.0, 0.0, 0.0]

    def test_reward_marks_goal_entries(self):
        mdp = lake_generate(2, 2, 0.0, seed=0)
        entering = mdp.transition[:, :, 3] == 1.0
        assert np.array_equal(mdp.reward == 1.0, entering)
        assert int(entering.sum()) == 2

    def test_slippery_rows(self):
        mdp = lake_generate(4, 4, 0.2, seed=5, slippery=True)
        np.testing.assert_allclose(mdp.transition.sum(axis=2), 1.0, atol=1e-12)
        assert mdp.reward.max() <= 2.0 / 3.0 + 1e-12

    def test_layout_keeps_start_and_goal(self):
        holes = lake_layout(6, 5, 0.3, seed=9)
        assert holes.shape == (5, 6)
        assert not holes[0, 0] and not holes[-1, -1]
        assert int(holes.sum()) == int(np.floor(0.3 * 28))

    def test_every_tile_has_stationary_mass(self):
        mdp = lake_generate(8, 8, 0.2, seed=3, slippery=True)
        policy = random_policy(mdp, seed=1)
        chain = induce_chain(mdp, policy)
        assert np.all(chain.stationary > 0.0)


class TestPolicies:
    def test_random_policy_single_action(self):
        mdp = garnet_generate(3, 1, 2, seed=0)
        assert np.array_equal(random_policy(mdp, seed=5).probs, np.ones((3, 1)))

    def test_random_policy_rows(self):
        mdp = garnet_generate(5, 3, 2, seed=0)
        a = random_policy(mdp, seed=8)
        b = random_policy(mdp, seed=8)
        assert np.array_equal(a.probs, b.probs)
        np.testing.assert_allclose(a.probs.sum(axis=1), 1.0)

    def test_greedy_corridor(self):
        mdp = lake_generate(1, 2, 0.0, seed=0)
        policy = greedy_policy(mdp)
        assert policy.probs[0, 1] == 1.0

    def test_greedy_single_state(self):
        mdp = garnet_generate(1, 3, 1, seed=12)
        policy = greedy_policy(mdp)
        assert policy.probs[0, np.argmax(mdp.reward[0])] == 1.0

    def test_greedy_dominates_random(self):
        for seed in range(20):
            mdp = garnet_generate(6, 2, 3, seed=seed)
            greedy = exact_value_function(mdp, greedy_policy(mdp))
            rand = exact_value_function(mdp, random_policy(mdp, seed=seed + 100))
            assert np.all(greedy >= rand - 1e-8)

    def test_smoothed_policy(self):
        policy = Policy(np.array([[1.0, 0.0], [0.0, 1.0]]))
        mixed = policy.smoothed(0.2)
        np.testing.assert_allclose(mixed.probs, [[0.9, 0.1], [0.1, 0.9]])
        assert policy.smoothed(0.0) is policy

    def test_single_state_value(self):
        mdp = FiniteMdp(np.ones((1, 1, 1)), np.array([[0.4]]), 0.75)
        values = exact_value_function(mdp, Policy(np.ones((1, 1))))
        assert values[0] == pytest.approx(1.6)


class TestChains:
    def test_symmetric_chain(self):
        mdp = two_state_mdp([[0.5, 0.5], [0.5, 0.5]])
        chain = induce_chain(mdp, Policy(np.ones((2, 1))))
        np.testing.assert_allclose(chain.stationary, [0.5, 0.5], atol=1e-12)
        assert chain.mixing_time == 1

    def test_two_state_stationary(self):
        mdp = two_state_mdp([[0.9, 0.1], [0.2, 0.8]])
        chain = induce_chain(mdp, Policy(np.ones((2, 1))))
        np.testing.assert_allclose(chain.stationary, [2.0 / 3.0, 1.0 / 3.0], atol=1e-12)
        np.testing.assert_allclose(chain.stationary @ chain.kernel, chain.stationary, atol=1e-12)

    def test_identity_kernel_is_reducible(self):
        mdp = two_state_mdp(np.eye(2))
        with pytest.raises(ReducibleChainError) as excinfo:
            induce_chain(mdp, Policy(np.ones((2, 1))))
        assert "ergodicity" in str(excinfo.value)

    def test_dobrushin_examples(self):
        assert dobrushin(np.full((3, 3), 1.0 / 3.0)) == pytest.approx(0.0)
        assert dobrushin(np.eye(3)) == 1.0
        assert dobrushin(np.array([[0.9, 0.1], [0.2, 0.8]])) == pytest.approx(0.7)

    def test_mixing_time_is_minimal(self):
        kernel = np.array([[0.9, 0.1], [0.2, 0.8]])
        t = mixing_time(kernel)
        assert dobrushin(np.linalg.matrix_power(kernel, t)) <= 0.25
        assert dobrushin(np.linalg.matrix_power(kernel, t - 1)) > 0.25

    def test_mixing_time_cap(self):
        kernel = np.array([[0.0, 1.0], [1.0, 0.0]])
        assert mixing_time(kernel, cap=16) is None
        np.testing.assert_allclose(stationary_distribution(kernel), [0.5, 0.5])

    def test_stationary_fixed_point_on_garnets(self):
        chains = list(garnet_chains())
        assert len(chains) >= 50
        for chain in chains:
            np.testing.assert_allclose(chain.stationary @ chain.kernel, chain.stationary, atol=1e-12)
            assert chain.stationary.sum() == pytest.approx(1.0, abs=1e-12)
            assert np.all(chain.stationary > 0.0)

    @pytest.mark.parametrize("k", [1, 2, 3])
    def test_dobrushin_after_multiples_of_mixing_time(self, k):
        for chain in garnet_chains():
            if chain.mixing_time is None:
                continue
            power = np.linalg.matrix_power(chain.kernel, chain.mixing_time * k)
            assert dobrushin(power) <= 4.0 ** -k + 1e-12


class TestFeatures:
    @pytest.mark.parametrize("shape", [(6, 2), (64, 3)])
    def test_unit_rows(self, shape):
        features = random_features(*shape, seed=2)
        assert features.features.shape == shape
        assert features.dim == shape[1]
        np.testing.assert_allclose(np.linalg.norm(features.features, axis=1), 1.0, atol=1e-12)

    def test_feature_of_state(self):
        features = random_features(4, 3, seed=1)
        u = feature_of_state(features, 2)
        assert np.linalg.norm(u) == pytest.approx(1.0)
        np.testing.assert_allclose(u, features.features[2])

    def test_invalid_dimension(self):
        with pytest.raises(InvalidDimensionError):
            random_features(3, 0, seed=1)
