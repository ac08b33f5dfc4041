import sys
import os
import unittest

# Get the absolute path of the parent directory
parent_dir = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))

# Add the parent directory to sys.path
sys.path.append(parent_dir)

import arviz as az
import numpy as np
from scipy.special import expit, log_expit
from scipy.stats import multivariate_t

from base_models import HmcConfig, SampleSet
from exceptions import DegenerateDataError, DimensionMismatchError, TooFewChainsError
from hmc import (DualAveraging, coordinate_names, diagnostics, hmc_sample, lambda_from_omega, leapfrog,
                 log_posterior_reduced, model_log_density, omega_from_lambda, sample_chains)
from ingest import FOUR_TO_WL, FOUR_TO_WTL, collapse, read_counts, read_games
from laplace import gaussian_approximation, marginal_gamma
from mle_solver import fit_mle
from model_core import BRADLEY_TERRY, DAVIDSON, FOUR_OUTCOME, log_likelihood

DATA_DIR = os.path.join(parent_dir, "data")
CG, CK, QN, SL = 0, 1, 2, 3


def ecac_counts():
    return read_counts(os.path.join(DATA_DIR, "ecac_2020_21_counts.json"))


def one_dimensional_density(q):
    """Two wins and a loss against an even opponent under a standard-normal prior on gamma."""
    gamma = q[0]
    sigma = expit(gamma)
    value = 2 * log_expit(gamma) + log_expit(-gamma) - 0.5 * gamma ** 2
    return float(value), np.array([2 * (1 - sigma) - sigma - gamma])


def standard_normal_density(q):
    return -0.5 * float(q @ q), -q


def importance_gamma_means(system, counts, fit, pairs, n=40000, seed=7):
    """Posterior means of gamma_ij by self-normalised importance sampling from a Student-t around the mode."""
    log_density = model_log_density(system, counts)
    mode = np.append(omega_from_lambda(fit.params.lam), fit.params.tau)
    step = 1e-5
    hess = np.empty((mode.size, mode.size))
    for k in range(mode.size):
        shift = np.zeros(mode.size)
        shift[k] = step
        hess[:, k] = (log_density(mode + shift)[1] - log_density(mode - shift)[1]) / (2 * step)
    proposal = multivariate_t(loc=mode, shape=np.linalg.inv(-(hess + hess.T) / 2), df=5)
    q = proposal.rvs(size=n, random_state=np.random.default_rng(seed))
    log_weights = np.array([log_density(point)[0] for point in q]) - proposal.logpdf(q)
    weights = np.exp(log_weights - log_weights.max())
    weights /= weights.sum()
    lam = lambda_from_omega(q[:, :-1])
    return {(i, j): float(weights @ (lam[:, i] - lam[:, j])) for i, j in pairs}


class TestReducedCoordinates(unittest.TestCase):

    def test_round_trip(self):
        lam = np.array([0.4, -1.1, 0.2, 0.5])
        lam = lam - lam.mean()
        np.testing.assert_allclose(lambda_from_omega(omega_from_lambda(lam)), lam, atol=1e-15)
        omega = np.array([0.3, -0.7, 1.2])
        np.testing.assert_allclose(omega_from_lambda(lambda_from_omega(omega)), omega, atol=1e-15)

    def test_stacked_draws_sum_to_zero(self):
        omega = np.random.default_rng(0).normal(size=(3, 10, 4))
        lam = lambda_from_omega(omega)
        self.assertEqual(lam.shape, (3, 10, 5))
        np.testing.assert_allclose(lam.sum(axis=-1), 0.0, atol=1e-12)


class TestLogPosterior(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.four = ecac_counts()
        cls.bt = collapse(cls.four, FOUR_TO_WL, BRADLEY_TERRY)
        cls.fit = fit_mle(FOUR_OUTCOME, cls.four)

    def test_equals_log_likelihood_under_flat_prior(self):
        params = self.fit.params
        value, _ = log_posterior_reduced(FOUR_OUTCOME, self.four, omega_from_lambda(params.lam), params.tau)
        self.assertAlmostEqual(value, log_likelihood(FOUR_OUTCOME, self.four, params), places=10)

    def test_gradient_vanishes_at_mle(self):
        params = self.fit.params
        _, grad = log_posterior_reduced(FOUR_OUTCOME, self.four, omega_from_lambda(params.lam), params.tau)
        np.testing.assert_allclose(grad, 0.0, atol=1e-7)

    def test_tau_prior_without_overtime_outcomes(self):
        """Test that win/loss models add -tau^2/2 so tau stays proper."""
        omega = np.array([0.2, -0.3, 0.1])
        flat, flat_grad = log_posterior_reduced(BRADLEY_TERRY, self.bt, omega, 0.0)
        value, grad = log_posterior_reduced(BRADLEY_TERRY, self.bt, omega, 1.5)
        self.assertAlmostEqual(value, flat - 1.125, places=12)
        self.assertAlmostEqual(grad[-1], -1.5, places=12)
        np.testing.assert_allclose(grad[:-1], flat_grad[:-1], atol=1e-14)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        h = 1e-5
        for system, counts in ((FOUR_OUTCOME, self.four), (BRADLEY_TERRY, self.bt)):
            log_density = model_log_density(system, counts)
            for _ in range(10):
                q = rng.uniform(-1, 1, counts.n_teams)
                _, grad = log_density(q)
                numeric = np.array([(log_density(q + h * e)[0] - log_density(q - h * e)[0]) / (2 * h)
                                    for e in np.eye(q.size)])
                error = np.max(np.abs(grad - numeric)) / max(1.0, np.max(np.abs(grad)))
                self.assertLess(error, 1e-6)

    def test_wrong_dimension(self):
        with self.assertRaises(DimensionMismatchError):
            log_posterior_reduced(FOUR_OUTCOME, self.four, np.zeros(4), 0.0)


class TestLeapfrog(unittest.TestCase):

    def test_reversible(self):
        """Test that flipping the momentum retraces the path."""
        q0 = np.array([0.5, -1.0])
        r0 = np.array([0.3, 0.8])
        inv_metric = np.array([1.0, 2.0])
        _, grad0 = standard_normal_density(q0)
        q1, r1, _, grad1 = leapfrog(standard_normal_density, q0, r0, grad0, 0.1, 25, inv_metric)
        q2, r2, _, _ = leapfrog(standard_normal_density, q1, -r1, grad1, 0.1, 25, inv_metric)
        np.testing.assert_allclose(q2, q0, atol=1e-12)
        np.testing.assert_allclose(-r2, r0, atol=1e-12)

    def test_energy_error_is_second_order(self):
        """Test that ten times smaller steps shrink the energy error about a hundredfold."""
        counts = ecac_counts()
        log_density = model_log_density(FOUR_OUTCOME, counts)
        fit = fit_mle(FOUR_OUTCOME, counts)
        q0 = np.append(omega_from_lambda(fit.params.lam), fit.params.tau)
        r0 = np.array([0.8, -0.5, 0.3, 0.6])
        inv_metric = np.ones(q0.size)
        value0, grad0 = log_density(q0)
        h0 = -value0 + 0.5 * r0 @ r0

        def max_energy_error(step_size, n_steps, every):
            q, r, grad = q0, r0, grad0
            worst = 0.0
            for k in range(1, n_steps + 1):
                q, r, value, grad = leapfrog(log_density, q, r, grad, step_size, 1, inv_metric)
                if k % every == 0:
                    worst = max(worst, abs(-value + 0.5 * r @ r - h0))
            return worst

        coarse = max_energy_error(0.1, 10, 1)
        fine = max_energy_error(0.01, 100, 10)
        self.assertGreater(coarse / fine, 50)


class TestDualAveraging(unittest.TestCase):

    def test_step_grows_when_acceptance_is_high(self):
        adapter = DualAveraging(0.1, target=0.8)
        for _ in range(50):
            adapter.update(1.0)
        self.assertGreater(adapter.final_step_size, 0.1)

    def test_step_shrinks_when_acceptance_is_low(self):
        adapter = DualAveraging(0.1, target=0.8)
        for _ in range(50):
            adapter.update(0.0)
        self.assertLess(adapter.final_step_size, 0.1)


class TestDiagnostics(unittest.TestCase):

    @staticmethod
    def sample_set(by_chain):
        chains, draws, dim = by_chain.shape
        return SampleSet(system=DAVIDSON, teams=("A", "B"), draws=by_chain.reshape(-1, dim), source="hmc",
                         chain_ids=np.repeat(np.arange(chains), draws))

    def test_independent_chains(self):
        draws = np.random.default_rng(2).normal(size=(4, 1000, 3))
        diag = diagnostics(self.sample_set(draws))
        self.assertEqual(diag.coordinates, ["lambda_A", "lambda_B", "tau"])
        self.assertTrue(np.all(diag.rhat < 1.01))
        self.assertTrue(np.all(diag.ess > 2000))
        self.assertTrue(diag.converged)
        self.assertEqual(diag.flags, [])

    def test_constant_coordinate_is_flagged(self):
        draws = np.random.default_rng(3).normal(size=(2, 500, 3))
        draws[:, :, 2] = 0.0
        diag = diagnostics(self.sample_set(draws))
        self.assertTrue(np.isnan(diag.rhat[2]))
        self.assertTrue(any(flag.startswith("tau") for flag in diag.flags))
        self.assertTrue(diag.converged)
        self.assertIsNone(diag.to_dict()["rhat"][2])

    def test_disagreeing_chain(self):
        draws = np.random.default_rng(4).normal(size=(4, 500, 3))
        draws[0, :, 0] += 10.0
        diag = diagnostics(self.sample_set(draws))
        self.assertGreater(diag.rhat[0], 1.5)
        self.assertFalse(diag.converged)

    def test_needs_two_chains(self):
        draws = np.random.default_rng(5).normal(size=(1, 100, 3))
        with self.assertRaises(TooFewChainsError):
            diagnostics(self.sample_set(draws))


class TestSampler(unittest.TestCase):

    def test_one_dimensional_posterior_mean(self):
        """Test sampled moments against quadrature on a closed-form posterior."""
        config = HmcConfig(chains=2, warmup=500, draws_per_chain=2000, seed=11)
        draws, stats = sample_chains(one_dimensional_density, np.array([[0.5], [-0.5]]), config)
        self.assertEqual(draws.shape, (2, 2000, 1))

        grid = np.linspace(-15, 15, 60001)
        log_density = 2 * log_expit(grid) + log_expit(-grid) - 0.5 * grid ** 2
        weights = np.exp(log_density - log_density.max())
        exact_mean = np.sum(grid * weights) / np.sum(weights)
        exact_sd = np.sqrt(np.sum((grid - exact_mean) ** 2 * weights) / np.sum(weights))

        values = draws[:, :, 0]
        standard_error = exact_sd / np.sqrt(float(az.ess(values, method="mean")))
        self.assertLess(abs(values.mean() - exact_mean), 3 * standard_error)
        self.assertAlmostEqual(values.std(), exact_sd, delta=0.1 * exact_sd)
        for chain in stats:
            self.assertGreater(chain.accept_rate, 0.5)

    def test_same_seed_same_draws(self):
        counts = collapse(ecac_counts(), FOUR_TO_WL, BRADLEY_TERRY)
        config = HmcConfig(chains=2, warmup=40, draws_per_chain=20, leapfrog_steps=8, seed=5)
        first, _ = hmc_sample(BRADLEY_TERRY, counts, config)
        second, _ = hmc_sample(BRADLEY_TERRY, counts, config)
        np.testing.assert_array_equal(first.draws, second.draws)
        other, _ = hmc_sample(BRADLEY_TERRY, counts, config.model_copy(update={"seed": 6}))
        self.assertFalse(np.array_equal(first.draws, other.draws))

    def test_single_chain_skips_rhat(self):
        counts = collapse(ecac_counts(), FOUR_TO_WL, BRADLEY_TERRY)
        config = HmcConfig(chains=1, warmup=20, draws_per_chain=10, leapfrog_steps=4, seed=1)
        samples, diag = hmc_sample(BRADLEY_TERRY, counts, config)
        self.assertEqual(samples.n_draws, 10)
        self.assertTrue(np.all(np.isnan(diag.rhat)))
        self.assertEqual(len(diag.flags), 1)
        self.assertFalse(diag.converged)
        self.assertFalse(diag.to_dict()["converged"])

    def test_degenerate_data(self):
        counts = read_games(os.path.join(DATA_DIR, "undefeated.csv"), BRADLEY_TERRY)
        with self.assertRaises(DegenerateDataError):
            hmc_sample(BRADLEY_TERRY, counts, HmcConfig(seed=0))

    def test_four_outcome_posterior(self):
        """Test that four chains agree and match importance-sampled posterior means."""
        counts = ecac_counts()
        fit = fit_mle(FOUR_OUTCOME, counts)
        config = HmcConfig(chains=4, warmup=1000, draws_per_chain=1000, seed=2021)
        samples, diag = hmc_sample(FOUR_OUTCOME, counts, config, fit=fit)

        self.assertEqual(samples.draws.shape, (4000, 5))
        self.assertEqual(samples.source, "hmc")
        self.assertEqual(diag.coordinates, coordinate_names(counts.teams))
        self.assertTrue(np.all(diag.rhat < 1.05))
        self.assertTrue(diag.converged)
        self.assertTrue(np.all(diag.accept_rate > 0.5))
        np.testing.assert_allclose(samples.lam.sum(axis=1), 0.0, atol=1e-10)

        pairs = ((QN, CG), (QN, CK), (CK, SL))
        exact = importance_gamma_means(FOUR_OUTCOME, counts, fit, pairs)
        for i, j in pairs:
            self.assertAlmostEqual(marginal_gamma(samples, i, j).mean, exact[(i, j)], delta=0.06)

        # the Gaussian mean lags the exact one when the MLE of gamma is far from zero
        post = gaussian_approximation(FOUR_OUTCOME, counts, fit)
        self.assertGreater(exact[(QN, CG)] - marginal_gamma(post, QN, CG).mean, 0.1)
        self.assertAlmostEqual(marginal_gamma(samples, QN, CK).mean, marginal_gamma(post, QN, CK).mean, delta=0.10)

    def test_davidson_tie_probability(self):
        """Test the posterior mean of the even-match tie probability."""
        counts = collapse(ecac_counts(), FOUR_TO_WTL, DAVIDSON)
        config = HmcConfig(chains=2, warmup=500, draws_per_chain=500, seed=3)
        samples, _ = hmc_sample(DAVIDSON, counts, config)
        nu = np.exp(samples.tau)
        self.assertTrue(0.30 < float(np.mean(nu / (2 + nu))) < 0.48)


if __name__ == "__main__":
    unittest.main()
