import numpy as np
import pytest
from scipy.linalg import solve_continuous_lyapunov

from src.analysis import (
    GroundTruth,
    LsaInstance,
    build_td_instance,
    finite_n_covariance,
    finite_n_variance,
    ground_truth,
    lag_covariance_sum,
    noise_bounds,
    poisson_solution,
    q_operator_norm,
    sigma_u,
    stability,
    td_stability_constants,
    value_approximation_error,
)
from src.env import FeatureMap, FiniteMdp, Policy, mixing_time, random_features, random_policy
from src.exceptions import (
    DegenerateDesignError,
    InvalidDimensionError,
    LyapunovSingularError,
    SingularMatrixError,
)
from src.lsa import StepSchedule

from .conftest import iid_instance, make_garnet_td


def truth_from(sigma_inf, sigma_eps=None):
    sigma_inf = np.asarray(sigma_inf, dtype=float)
    d = sigma_inf.shape[0]
    return GroundTruth(np.zeros(d), np.eye(d) if sigma_eps is None else sigma_eps, sigma_inf)


class TestTdInstance:
    def test_observation_space_size(self, garnet_td):
        *_, inst = garnet_td
        assert inst.n_observations <= 36
        assert inst.z_labels.shape == (inst.n_observations, 3)
        np.testing.assert_allclose(inst.z_kernel.sum(axis=1), 1.0, atol=1e-12)
        assert inst.z_stationary.sum() == pytest.approx(1.0)

    def test_stationary_means(self, garnet_td):
        *_, inst = garnet_td
        mean_a = np.einsum("z,zij->ij", inst.z_stationary, inst.per_z_A)
        np.testing.assert_allclose(mean_a, inst.a_bar, atol=1e-12)
        np.testing.assert_allclose(inst.z_stationary @ inst.noise_table, 0.0, atol=1e-12)

    def test_zero_discount_gives_design(self):
        mdp, policy, features, _ = make_garnet_td(seed=3)
        inst = build_td_instance(mdp.with_discount(0.0), policy, features)
        np.testing.assert_allclose(inst.a_bar, inst.design, atol=1e-12)

    def test_single_state_geometric_series(self):
        mdp = FiniteMdp(np.ones((1, 2, 1)), np.array([[0.2, 0.6]]), 0.5)
        policy = Policy(np.array([[0.25, 0.75]]))
        inst = build_td_instance(mdp, policy, FeatureMap(np.ones((1, 1))))
        r_bar = 0.25 * 0.2 + 0.75 * 0.6
        assert inst.a_bar[0, 0] == pytest.approx(0.5)
        assert inst.b_bar[0] == pytest.approx(r_bar)
        assert inst.theta_star[0] == pytest.approx(r_bar / 0.5)

    def test_feature_state_mismatch(self, garnet_td):
        mdp, policy, _, _ = garnet_td
        with pytest.raises(InvalidDimensionError):
            build_td_instance(mdp, policy, random_features(5, 2, seed=0))

    def test_singular_mean_system(self):
        a = np.zeros((2, 1, 1))
        with pytest.raises(SingularMatrixError):
            iid_instance(a, np.ones((2, 1)), [0.5, 0.5])


class TestGroundTruth:
    def test_exactness_suite(self):
        for seed in range(100):
            _, _, _, inst = make_garnet_td(seed=seed)
            gt = ground_truth(inst)
            assert np.max(np.abs(inst.a_bar @ gt.theta_star - inst.b_bar)) <= 1e-10
            eps_hat = poisson_solution(inst)
            residual = eps_hat - inst.z_kernel @ eps_hat - inst.noise_table
            assert np.max(np.abs(residual)) <= 1e-9
            np.testing.assert_allclose(gt.sigma_eps, gt.sigma_eps.T, atol=0)
            assert np.linalg.eigvalsh(gt.sigma_inf).min() >= -1e-10

    def test_poisson_matches_lag_sum(self):
        for seed in range(20):
            _, _, _, inst = make_garnet_td(seed=seed)
            gt = ground_truth(inst)
            t_mix = mixing_time(inst.z_kernel)
            oracle = lag_covariance_sum(inst, 20 * t_mix)
            np.testing.assert_allclose(gt.sigma_eps, oracle, atol=1e-6, rtol=0)

    def test_iid_chain_has_no_lag_terms(self):
        rng = np.random.default_rng(4)
        a = np.stack([np.eye(2) + 0.1 * rng.standard_normal((2, 2)) for _ in range(3)])
        b = rng.standard_normal((3, 2))
        inst = iid_instance(a, b, [0.2, 0.3, 0.5])
        gt = ground_truth(inst)
        eps = inst.noise_table
        expected = (eps * inst.z_stationary[:, None]).T @ eps
        np.testing.assert_allclose(gt.sigma_eps, expected, atol=1e-12)

    def test_zero_noise(self, zero_noise_instance):
        gt = ground_truth(zero_noise_instance)
        np.testing.assert_allclose(gt.theta_star, [0.5, -1.0])
        np.testing.assert_allclose(gt.sigma_eps, 0.0, atol=1e-20)
        np.testing.assert_allclose(gt.sigma_inf, 0.0, atol=1e-20)

    def test_scalar_iid_variance(self, scalar_iid_instance):
        gt = ground_truth(scalar_iid_instance)
        assert gt.theta_star[0] == pytest.approx(0.0)
        assert gt.sigma_inf[0, 0] == pytest.approx(1.0)

    def test_to_dict(self, garnet_truth):
        payload = garnet_truth.to_dict()
        assert set(payload) == {"theta_star", "sigma_eps", "sigma_inf", "design"}
        assert np.array_equal(np.array(payload["sigma_inf"]), garnet_truth.sigma_inf)


class TestSigmaU:
    def test_identity(self):
        u = np.array([0.6, 0.8])
        assert sigma_u(truth_from(np.eye(2)), u) == pytest.approx(1.0)

    def test_diagonal(self):
        assert sigma_u(truth_from(np.diag([4.0, 0.0])), np.array([1.0, 0.0])) == 4.0

    def test_quadratic_form(self):
        rng = np.random.default_rng(1)
        m = rng.standard_normal((2, 2))
        sigma = m @ m.T
        u = rng.standard_normal(2)
        u /= np.linalg.norm(u)
        assert sigma_u(truth_from(sigma), u) == pytest.approx(float(u @ sigma @ u))

    def test_rejects_non_unit(self):
        with pytest.raises(InvalidDimensionError):
            sigma_u(truth_from(np.eye(2)), np.array([1.0, 1.0]))


class TestStability:
    def test_identity_system(self):
        report = stability(np.eye(3), 2.0 * np.eye(3))
        np.testing.assert_allclose(report.q_matrix, np.eye(3), atol=1e-12)
        assert report.a_const == pytest.approx(1.0)
        assert report.kappa_q == pytest.approx(1.0)
        assert report.alpha_max == pytest.approx(0.5)
        assert report.hurwitz

    def test_not_hurwitz(self):
        report = stability(np.diag([1.0, -0.1]))
        assert not report.hurwitz
        assert np.isnan(report.alpha_max)

    def test_singular_kronecker_system(self):
        with pytest.raises(LyapunovSingularError):
            stability(np.diag([1.0, -1.0]))

    def test_matches_scipy_and_contracts(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            m = rng.standard_normal((3, 3))
            a_bar = m @ m.T / 3.0 + 0.2 * np.eye(3) + 0.3 * (m - m.T)
            p = np.eye(3) + 0.1 * np.diag(rng.random(3))
            report = stability(a_bar, p)
            assert report.hurwitz
            reference = solve_continuous_lyapunov(a_bar.T, p)
            np.testing.assert_allclose(report.q_matrix, reference, atol=1e-9)
            residual = a_bar.T @ report.q_matrix + report.q_matrix @ a_bar - p
            assert np.max(np.abs(residual)) <= 1e-9
            for alpha in rng.uniform(0.0, report.alpha_max, size=100):
                step = np.eye(3) - alpha * a_bar
                assert q_operator_norm(step, report.q_matrix) ** 2 <= 1.0 - alpha * report.a_const + 1e-12

    def test_garnet_contraction(self):
        for seed in range(100):
            _, _, _, inst = make_garnet_td(seed=seed)
            report = stability(inst.a_bar)
            assert report.hurwitz
            for alpha in np.linspace(report.alpha_max / 100, report.alpha_max, 100):
                step = np.eye(2) - alpha * inst.a_bar
                assert q_operator_norm(step, report.q_matrix) ** 2 <= 1.0 - alpha * report.a_const + 1e-12

    def test_to_dict(self):
        payload = stability(np.eye(2)).to_dict()
        assert payload["hurwitz"] is True
        assert payload["q_matrix"] == [[0.5, 0.0], [0.0, 0.5]]


class TestTdConstants:
    def test_closed_forms(self, garnet_td):
        mdp, _, features, inst = garnet_td
        a, alpha_max = td_stability_constants(inst, features, mdp.discount)
        assert alpha_max == pytest.approx(0.2 / 1.8 ** 2)
        assert alpha_max == pytest.approx(0.0617, abs=1e-4)
        assert a == pytest.approx(0.2 * np.linalg.eigvalsh(inst.design).min())

    def test_td_contraction_with_identity(self, garnet_td):
        mdp, _, features, inst = garnet_td
        a, alpha_max = td_stability_constants(inst, features, mdp.discount)
        for alpha in np.linspace(alpha_max / 50, alpha_max, 50):
            step = np.eye(2) - alpha * inst.a_bar
            assert np.linalg.norm(step, 2) ** 2 <= 1.0 - alpha * a + 1e-12

    def test_degenerate_design(self):
        mdp, policy, _, _ = make_garnet_td(seed=1)
        row = np.array([1.0, 0.0])
        features = FeatureMap(np.tile(row, (6, 1)))
        with pytest.raises((DegenerateDesignError, SingularMatrixError)):
            inst = build_td_instance(mdp, policy, features)
            td_stability_constants(inst, features, mdp.discount)

    def test_noise_bounds(self):
        for seed in range(20):
            mdp, _, _, inst = make_garnet_td(seed=seed)
            noise_sup, c_a = noise_bounds(inst)
            lam = mdp.discount
            assert noise_sup <= 2 * (1 + lam) * (np.linalg.norm(inst.theta_star) + 1) + 1e-12
            assert c_a <= 2 * (1 + lam) + 1e-12


class TestFiniteN:
    def test_single_term(self, garnet_td, garnet_truth, schedule):
        *_, inst = garnet_td
        u = np.array([1.0, 0.0])
        alpha = schedule.step_size(2)
        expected = alpha ** 2 * garnet_truth.sigma_eps[0, 0] / 3
        assert finite_n_variance(inst, garnet_truth, schedule, 3, u) == pytest.approx(expected)

    def test_matches_covariance(self, garnet_td, garnet_truth, schedule):
        *_, inst = garnet_td
        u = np.array([0.6, -0.8])
        cov = finite_n_covariance(inst, garnet_truth, schedule, 500)
        assert finite_n_variance(inst, garnet_truth, schedule, 500, u) == pytest.approx(float(u @ cov @ u))

    def test_approaches_limit(self, garnet_td, garnet_truth, schedule):
        *_, inst = garnet_td
        u = np.array([1.0, 0.0])
        limit = sigma_u(garnet_truth, u)
        gaps = [abs(finite_n_variance(inst, garnet_truth, schedule, n, u) - limit)
                for n in (1000, 10000, 100000)]
        # σ_n² can overshoot the limit before settling, so allow 10% slack per step
        assert all(later <= 1.1 * earlier for earlier, later in zip(gaps, gaps[1:]))

    def test_scalar_closed_form(self, scalar_iid_instance):
        gt = ground_truth(scalar_iid_instance)
        schedule = StepSchedule(c0=0.5, k0=0, gamma=0.5)
        n = 6
        # Q_ell = α_ell Σ_{j=ell}^{n-1} Π_{i=ell+1}^{j} (1 - α_i)
        total = 0.0
        for ell in range(2, n):
            products = [np.prod([1.0 - schedule.step_size(i) for i in range(ell + 1, j + 1)])
                        for j in range(ell, n)]
            total += (schedule.step_size(ell) * sum(products)) ** 2
        expected = total / n
        assert finite_n_variance(scalar_iid_instance, gt, schedule, n, np.array([1.0])) == pytest.approx(expected)


def test_value_approximation_error_zero_for_exact_features():
    mdp, policy, _, _ = make_garnet_td(seed=5)
    features = FeatureMap(np.eye(6))
    inst = build_td_instance(mdp, policy, features)
    assert value_approximation_error(mdp, policy, features, inst.theta_star) == pytest.approx(0.0, abs=1e-10)


def test_from_tables_solves_stationary_law():
    kernel = np.array([[0.9, 0.1], [0.2, 0.8]])
    inst = LsaInstance.from_tables(kernel, np.ones((2, 1, 1)), np.array([[3.0], [0.0]]))
    np.testing.assert_allclose(inst.z_stationary, [2 / 3, 1 / 3])
    assert inst.theta_star[0] == pytest.approx(2.0)


def test_random_policy_td_instance_has_positive_weights():
    mdp, _, features, _ = make_garnet_td(seed=9)
    inst = build_td_instance(mdp, random_policy(mdp, seed=2), features)
    assert np.all(inst.z_stationary > 0.0)
