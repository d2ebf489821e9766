import math

import numpy as np
import pytest
from scipy.integrate import solve_ivp
from scipy.stats import norm

from swfr_flow.bayes import (
    BernoulliModel,
    GaussianPrior,
    ObservationSeries,
    OracleDegenerate,
    accumulated_log_likelihood,
    bernoulli_solve,
    compare_to_oracle,
    grid_posterior,
    log_likelihood,
    posterior_oracle,
    run_batch,
    run_online,
    self_normalized_weights,
    simulate_observations,
    weighted_prior_samples,
)
from swfr_flow.trainer import TrainConfig


class TestForwardModel:
    @pytest.mark.parametrize("x0", [0.05, 0.2, 0.7, 1.3, -0.4])
    def test_matches_numerical_ode(self, x0):
        sol = solve_ivp(lambda t, v: v - v**3, (0, 5), [x0], rtol=1e-11, atol=1e-13, dense_output=True)
        t = np.linspace(0, 5, 11)
        np.testing.assert_allclose(bernoulli_solve(x0, t), sol.sol(t)[0], rtol=1e-8, atol=1e-10)

    def test_fixed_points(self):
        t = np.linspace(0, 10, 5)
        np.testing.assert_array_equal(bernoulli_solve(0.0, t), 0.0)
        np.testing.assert_allclose(bernoulli_solve(1.0, t), 1.0)
        np.testing.assert_allclose(bernoulli_solve(-1.0, t), -1.0)

    def test_odd_in_x(self):
        t = np.linspace(0, 3, 7)
        np.testing.assert_allclose(bernoulli_solve(-0.3, t), -bernoulli_solve(0.3, t))

    def test_model_validation(self):
        with pytest.raises(ValueError):
            BernoulliModel(sigma=-0.1)
        with pytest.raises(ValueError):
            BernoulliModel(dt=-1.0)
        assert BernoulliModel(dt=0.1).times[-1] == pytest.approx(5.0)


class TestObservations:
    def test_simulation_is_seeded(self):
        a = simulate_observations(BernoulliModel(), 0)
        b = simulate_observations(BernoulliModel(), 0)
        c = simulate_observations(BernoulliModel(), 1)
        np.testing.assert_array_equal(a.values, b.values)
        assert not np.array_equal(a.values, c.values)

    def test_windows_partition_series(self):
        s = simulate_observations(BernoulliModel(n_obs=12), 0)
        blocks = s.windows(5)
        assert [(b.start, b.stop) for b in blocks] == [(0, 5), (5, 10), (10, 12)]
        with pytest.raises(ValueError):
            s.windows(0)

    def test_csv_roundtrip(self, tmp_path):
        s = simulate_observations(BernoulliModel(n_obs=7), 2)
        path = tmp_path / "obs.csv"
        s.to_csv(path)
        back = ObservationSeries.from_csv(path, s.sigma)
        np.testing.assert_array_equal(back.times, s.times)
        np.testing.assert_array_equal(back.values, s.values)

    @pytest.mark.parametrize("text", ["time,D\n1,2\n", "t,D\n1,2,3\n"])
    def test_malformed_csv(self, tmp_path, text):
        path = tmp_path / "obs.csv"
        path.write_text(text)
        with pytest.raises(ValueError):
            ObservationSeries.from_csv(path, 0.4)

    def test_times_must_increase(self):
        with pytest.raises(ValueError):
            ObservationSeries([1.0, 1.0], [0.0, 0.0], 0.4)


class TestLikelihood:
    def test_single_observation_is_gaussian(self):
        s = ObservationSeries([1.0], [0.3], 0.4)
        x = np.array([0.1, 0.5])
        expected = norm.logpdf(0.3, loc=bernoulli_solve(x, 1.0), scale=0.4)
        np.testing.assert_allclose(log_likelihood(x, s), expected, rtol=1e-13)

    def test_column_input(self):
        s = simulate_observations(BernoulliModel(n_obs=4), 0)
        x = np.linspace(-1, 1, 5)
        np.testing.assert_array_equal(log_likelihood(x.reshape(-1, 1), s), log_likelihood(x, s))

    def test_empty_window_is_zero(self):
        s = simulate_observations(BernoulliModel(n_obs=4), 0)
        np.testing.assert_array_equal(log_likelihood(np.ones(3), s, slice(4, 4)), 0.0)

    @pytest.mark.parametrize("dt, window", [(1.0, 5), (0.1, 5), (0.1, 7), (0.5, 1)])
    def test_windows_add_up_to_batch(self, dt, window):
        s = simulate_observations(BernoulliModel(dt=dt), 0)
        x = np.linspace(-2.0, 3.0, 201)
        np.testing.assert_allclose(accumulated_log_likelihood(x, s, window), log_likelihood(x, s), rtol=0, atol=1e-10)


class TestPrior:
    def test_stratified_has_one_draw_per_quantile_bin(self):
        x = GaussianPrior(0.5, 1.0).sample(100, np.random.default_rng(0), stratified=True)
        bins = np.floor(norm.cdf(x, 0.5, 1.0) * 100).astype(int)
        np.testing.assert_array_equal(np.sort(bins), np.arange(100))

    def test_log_density(self):
        np.testing.assert_allclose(GaussianPrior(0.5, 2.0).log_density(1.0), norm.logpdf(1.0, 0.5, 2.0))


class TestOracle:
    def test_self_normalized_weights(self):
        w = self_normalized_weights([1000.0, 1000.0 + math.log(3.0)])
        np.testing.assert_allclose(w, [0.25, 0.75])

    def test_conjugate_case(self):
        # a single observation at t=0 observes x0 directly: Gaussian-Gaussian posterior
        s = ObservationSeries([0.0], [1.2], 0.5)
        prior = GaussianPrior(0.0, 1.0)
        post = posterior_oracle(prior, s, count=200_000, seed=0)
        var = 1.0 / (1.0 + 1.0 / 0.25)
        assert abs(post.mean - var * 1.2 / 0.25) < 0.01
        assert abs(post.var - var) < 0.01

    def test_grid_agrees_with_importance_sampling(self):
        s = simulate_observations(BernoulliModel(), 0)
        prior = GaussianPrior()
        post = posterior_oracle(prior, s, count=200_000, seed=1)
        _, p, mean, var = grid_posterior(prior, s)
        assert abs(post.mean - mean) < 0.01
        assert abs(post.std - math.sqrt(var)) < 0.01

    def test_too_few_samples(self):
        with pytest.raises(ValueError):
            posterior_oracle(GaussianPrior(), simulate_observations(BernoulliModel(), 0), count=100)

    def test_degenerate_weights_raise(self):
        s = ObservationSeries(np.arange(1, 51) * 0.01, np.full(50, 0.2), 1e-4)
        with pytest.raises(OracleDegenerate):
            posterior_oracle(GaussianPrior(), s, count=10_000)

    def test_weighted_prior_samples_mean_one(self):
        s = simulate_observations(BernoulliModel(), 0)
        x, w = weighted_prior_samples(GaussianPrior(), s, 500, np.random.default_rng(0))
        assert x.shape == (500, 1)
        assert w.mean() == pytest.approx(1.0)

    def test_compare_to_oracle_on_oracle_itself(self):
        s = simulate_observations(BernoulliModel(), 0)
        post = posterior_oracle(GaussianPrior(), s, count=20_000, seed=0)
        cmp = compare_to_oracle(post.samples, post.weights, post)
        assert cmp.mean_error < 1e-12 and cmp.std_error < 1e-12 and cmp.w1 < 1e-12


class TestDrivers:
    def _cfg(self, iterations=3):
        return TrainConfig(iterations=iterations, n=64, nt=4, width=8, alpha=10.0)

    def test_batch_smoke(self):
        s = simulate_observations(BernoulliModel(), 0)
        run = run_batch(s, GaussianPrior(), self._cfg(), n_generate=100)
        assert run.samples.shape == (100, 1)
        assert run.weights.mean() == pytest.approx(1.0)
        assert run.window_ends == [50]

    def test_online_visits_every_window(self):
        s = simulate_observations(BernoulliModel(dt=0.1, n_obs=12), 0)
        seen = []
        run = run_online(s, GaussianPrior(), self._cfg(), window=5, n_generate=50, callback=lambda k, r: seen.append(k))
        assert seen == [0, 1, 2]
        assert run.window_ends == [5, 10, 12]
        assert len(run.results) == 3

    def test_online_is_deterministic(self):
        s = simulate_observations(BernoulliModel(dt=0.1, n_obs=10), 0)
        a = run_online(s, GaussianPrior(), self._cfg(2), window=5, n_generate=20, seed=4)
        b = run_online(s, GaussianPrior(), self._cfg(2), window=5, n_generate=20, seed=4)
        np.testing.assert_array_equal(a.samples, b.samples)


class TestWorkedValues:
    def test_solution_at_unit_time(self):
        assert bernoulli_solve(0.2, 1.0) == pytest.approx(0.485182, abs=1e-6)
        assert bernoulli_solve(0.37, 0.0) == 0.37
        np.testing.assert_array_equal(bernoulli_solve(1.0, np.linspace(0, 10, 11)), 1.0)

    def test_noise_free_series_is_exact(self):
        m = BernoulliModel(sigma=0.0)
        s = simulate_observations(m, 3)
        np.testing.assert_array_equal(s.values, bernoulli_solve(m.x_true, m.times))
        with pytest.raises(ValueError, match="noise-free"):
            log_likelihood(np.zeros(2), s)

    def test_noise_level(self):
        # x = 1 is a fixed point of G, so residuals of a long series are pure noise
        s = simulate_observations(BernoulliModel(x_true=1.0, n_obs=100_000, dt=0.01), 0)
        assert abs((s.values - 1.0).std() / 0.4 - 1.0) <= 0.01

    def test_zero_residual_observation(self):
        s = ObservationSeries([1.0], [float(bernoulli_solve(0.3, 1.0))], 0.4)
        assert log_likelihood(np.array([0.3]), s)[0] == pytest.approx(-0.5 * math.log(2 * math.pi * 0.16), rel=1e-14)

    def test_full_series_matches_direct_product(self):
        s = simulate_observations(BernoulliModel(), 0)
        x = np.array([-0.4, 0.2, 0.9])
        direct = np.array([
            math.log(np.prod(norm.pdf(s.values, loc=bernoulli_solve(xi, s.times), scale=0.4))) for xi in x
        ])
        np.testing.assert_allclose(log_likelihood(x, s), direct, rtol=0, atol=1e-10)

    def test_conjugate_with_offset_prior(self):
        # identity forward map: one observation D1 = x0 + noise, prior N(0.5, 1)
        sigma, d1 = 0.4, 0.9
        s = ObservationSeries([0.0], [d1], sigma)
        post = posterior_oracle(GaussianPrior(0.5, 1.0), s, count=1_000_000, seed=2)
        exact = (sigma**2 * 0.5 + d1) / (1 + sigma**2)
        se = math.sqrt(post.var / post.ess)
        assert abs(post.mean - exact) <= 3 * se

    def test_empty_series_gives_prior(self):
        s = ObservationSeries([], [], 0.4)
        post = posterior_oracle(GaussianPrior(0.5, 1.0), s, count=100_000, seed=0)
        assert abs(post.mean - 0.5) <= 3 / math.sqrt(100_000)

    def test_constant_shift_leaves_weights(self):
        logw = np.random.default_rng(0).standard_normal(1000) * 5
        np.testing.assert_allclose(self_normalized_weights(logw + 100.0), self_normalized_weights(logw), rtol=1e-12)

    def test_oracle_seeds_agree(self):
        s = simulate_observations(BernoulliModel(), 0)
        a = posterior_oracle(GaussianPrior(0.5, 1.0), s, seed=1)
        b = posterior_oracle(GaussianPrior(0.5, 1.0), s, seed=7)
        assert abs(a.mean - b.mean) <= 0.01
