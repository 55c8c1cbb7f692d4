"""Unit tests for the evidence estimators: run with pytest app/tests/test_evidence.py -v"""
import math

import numpy as np
import pytest
from scipy import stats

from app.core.errors import (
    DegenerateInputError,
    EstimatorBreakdownError,
    EstimatorUndefinedError,
    InvalidInputError,
    NoValidKError,
)
from app.schemas.evidence import EstimatorMethod, KGridRow
from app.services.evidence import (
    EstimatorConfig,
    IdrContext,
    LogDensitySample,
    ReplicateInput,
    arithmetic_mean,
    bootstrap_rmse,
    estimator_summary,
    ghm,
    harmonic_mean,
    hm_statistic_estimator,
    idr,
    idr_k_search,
    idr_statistic_estimator,
    log_mean_exp,
    mc_replicate_rmse,
    parse_k_grid,
    select_k,
    suggest_k_grid,
)
from app.services.validation import standard_normal_log_density

LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)
THREE_VALUES = [0.0, math.log(2.0), math.log(4.0)]


def unnormalized_normal(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    return -0.5 * np.sum(x * x, axis=1)


def increasing_away_from_zero(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    return 0.5 * np.sum(x * x, axis=1)


@pytest.fixture
def normal_sample(rng):
    x = rng.standard_normal((100_000, 1))
    return LogDensitySample(draws=x, log_g=unnormalized_normal(x))


class TestLogMeanExp:
    def test_constant_is_exact(self):
        assert log_mean_exp(np.full(5, -1234.5)) == -1234.5

    def test_extreme_values_stay_finite(self):
        assert math.isfinite(log_mean_exp(np.array([-1e4, 1e4])))

    def test_all_negative_infinity(self):
        assert log_mean_exp(np.array([-np.inf, -np.inf])) == -math.inf


class TestArithmeticMean:
    def test_three_values(self):
        result = arithmetic_mean(THREE_VALUES)
        assert result.log_c == pytest.approx(math.log(7 / 3), abs=1e-12)
        assert result.method is EstimatorMethod.AM_PRIOR
        assert result.is_marginal_likelihood

    def test_constant_likelihood(self):
        result = arithmetic_mean([-3.5] * 10)
        assert result.log_c == -3.5
        assert result.rmse_delta == 0.0

    def test_posterior_draws_are_a_surrogate(self):
        result = arithmetic_mean(THREE_VALUES, sampled_from="posterior")
        assert result.method is EstimatorMethod.AM_POSTERIOR_SURROGATE
        assert not result.is_marginal_likelihood
        assert result.warnings

    def test_conjugate_normal_model(self, rng):
        # y | mu ~ N(mu, 1), mu ~ N(0, 1): the evidence of y is N(y; 0, 2)
        y = 0.7
        mu = rng.standard_normal(100_000)
        result = arithmetic_mean(stats.norm.logpdf(y, loc=mu))
        truth = stats.norm.logpdf(y, scale=math.sqrt(2))
        assert abs(result.log_c - truth) <= 3 * result.rmse_delta

    def test_extreme_log_likelihoods(self):
        result = arithmetic_mean([1e4, 1e4 - 1.0, -1e4])
        assert math.isfinite(result.log_c)

    def test_too_few_values(self):
        with pytest.raises(InvalidInputError):
            arithmetic_mean([0.0])

    def test_all_negative_infinity(self):
        with pytest.raises(DegenerateInputError):
            arithmetic_mean([-np.inf, -np.inf])

    def test_nan_rejected(self):
        with pytest.raises(InvalidInputError):
            arithmetic_mean([0.0, np.nan])


class TestHarmonicMean:
    def test_three_values(self):
        assert harmonic_mean(THREE_VALUES).log_c == pytest.approx(math.log(12 / 7), abs=1e-12)

    def test_constant_likelihood(self):
        result = harmonic_mean([2.0] * 4)
        assert result.log_c == pytest.approx(2.0, abs=1e-15)
        assert result.rmse_delta == 0.0

    def test_literal_formula_drops_the_sample_size_factor(self):
        values = [0.0, -1.0, -2.0, -0.5]
        default = harmonic_mean(values)
        literal = harmonic_mean(values, literal_formula=True)
        assert literal.log_c == default.log_c
        assert literal.rmse_delta == pytest.approx(default.rmse_delta * 2.0)

    def test_ess_correction_ratio(self):
        values = np.linspace(-3.0, 0.0, 50)
        result = harmonic_mean(values, ess=12.5)
        assert result.rmse_delta_ess / result.rmse_delta == pytest.approx(math.sqrt(50 / 12.5), rel=1e-12)

    def test_unstable_error_is_flagged(self):
        result = harmonic_mean([0.0, -60.0], literal_formula=True)
        assert any("unreliable" in w for w in result.warnings)

    def test_ess_out_of_range(self):
        with pytest.raises(InvalidInputError):
            harmonic_mean(THREE_VALUES, ess=10.0)

    def test_zero_likelihood_draw_is_rejected(self):
        with pytest.raises(InvalidInputError, match="draw 1"):
            harmonic_mean([0.0, -math.inf, 1.0])

    def test_arithmetic_mean_still_accepts_zero_likelihood(self):
        result = arithmetic_mean([0.0, -math.inf, 1.0])
        assert result.log_c == pytest.approx(math.log((1.0 + math.e) / 3.0), abs=1e-12)


class TestScaleAndOrder:
    @pytest.mark.parametrize("shift", [-7.5, 3.0, 1e3])
    def test_scale_equivariance(self, rng, shift):
        x = rng.standard_normal((2_000, 1))
        log_l = rng.normal(-5.0, 1.0, size=2_000)
        base = LogDensitySample(x, unnormalized_normal(x))
        moved = LogDensitySample(x, unnormalized_normal(x) + shift)
        assert arithmetic_mean(log_l + shift).log_c == pytest.approx(arithmetic_mean(log_l).log_c + shift, abs=1e-9)
        assert harmonic_mean(log_l + shift).log_c == pytest.approx(harmonic_mean(log_l).log_c + shift, abs=1e-9)
        shifted_idr = idr(moved, lambda z: unnormalized_normal(z) + shift, 1e-2)
        assert shifted_idr.log_c == pytest.approx(idr(base, unnormalized_normal, 1e-2).log_c + shift, abs=1e-9)

    def test_permutation_invariance(self, rng):
        x = rng.standard_normal((2_000, 1))
        perm = rng.permutation(2_000)
        a = idr(LogDensitySample(x, unnormalized_normal(x)), unnormalized_normal, 1e-2)
        b = idr(LogDensitySample(x[perm], unnormalized_normal(x[perm])), unnormalized_normal, 1e-2)
        assert a.log_c == pytest.approx(b.log_c, abs=1e-12)


class TestGhm:
    def test_normalized_target_gives_exact_constant(self, rng):
        x = rng.standard_normal((500, 1))
        sample = LogDensitySample(x, unnormalized_normal(x))
        result = ghm(sample, standard_normal_log_density)
        assert result.log_c == pytest.approx(LOG_SQRT_2PI, abs=1e-12)

    def test_uniform_instrumental_density(self, normal_sample):
        def log_uniform(x):
            x = np.atleast_2d(x)[:, 0]
            return np.where(np.abs(x) <= 1.0, math.log(0.5), -np.inf)

        result = ghm(normal_sample, log_uniform)
        assert abs(result.log_c - LOG_SQRT_2PI) <= 4 * result.rmse_delta

    def test_prior_as_instrumental_density_reduces_to_harmonic_mean(self, rng):
        theta = rng.normal(0.3, 0.5, size=(1_000, 1))
        log_prior = stats.norm.logpdf(theta[:, 0])
        log_lik = stats.norm.logpdf(1.2, loc=theta[:, 0], scale=0.8)
        sample = LogDensitySample(theta, log_prior + log_lik)
        result = ghm(sample, lambda t: stats.norm.logpdf(np.atleast_2d(t)[:, 0]))
        assert result.log_c == pytest.approx(harmonic_mean(log_lik).log_c, rel=1e-12)

    def test_nan_instrumental_density_reports_index(self, rng):
        x = rng.standard_normal((10, 1))
        sample = LogDensitySample(x, unnormalized_normal(x))

        def broken(points):
            values = np.zeros(len(points))
            values[3] = np.nan
            return values

        with pytest.raises(EstimatorBreakdownError) as info:
            ghm(sample, broken)
        assert info.value.index == 3


class TestIdr:
    def test_one_dimensional_normal(self, normal_sample):
        result = idr(normal_sample, unnormalized_normal, 1e-4)
        assert result.method is EstimatorMethod.IDR
        assert result.k_opt == 1e-4
        assert abs(result.log_c - LOG_SQRT_2PI) <= 3 * result.rmse_delta

    def test_scaled_target(self, normal_sample):
        def scaled(x):
            return 2.0 + standard_normal_log_density(x)

        sample = LogDensitySample(normal_sample.draws, scaled(normal_sample.draws))
        result = idr(sample, scaled, 1e-4)
        assert abs(result.log_c - 2.0) <= 3 * result.rmse_delta

    def test_absolute_mass(self, normal_sample):
        result = idr(normal_sample, unnormalized_normal, 1e-4, relative_k=False)
        assert abs(result.log_c - LOG_SQRT_2PI) <= 3 * result.rmse_delta

    def test_standardization_preserves_the_constant(self, rng):
        cov = np.array([[2.0, 1.2], [1.2, 1.5]])
        precision = np.linalg.inv(cov)
        x = rng.multivariate_normal([0.0, 0.0], cov, size=20_000)

        def log_g(points):
            z = np.atleast_2d(points)
            return -0.5 * np.einsum("ni,ij,nj->n", z, precision, z)

        sample = LogDensitySample(x, log_g(x))
        plain = idr(sample, log_g, 1e-2, standardization=None)
        whitened = idr(sample, log_g, 1e-2, standardization="auto")
        truth = math.log(2 * math.pi) + 0.5 * math.log(np.linalg.det(cov))
        combined = math.hypot(plain.rmse_delta, whitened.rmse_delta)
        assert abs(plain.log_c - whitened.log_c) <= 3 * combined
        assert abs(whitened.log_c - truth) <= 3 * whitened.rmse_delta

    def test_error_shrinks_with_the_square_root_of_the_sample_size(self, rng):
        sizes = [1_000, 10_000, 100_000]
        errors = []
        for size in sizes:
            x = rng.standard_normal((size, 3))
            errors.append(idr(LogDensitySample(x, unnormalized_normal(x)), unnormalized_normal, 1e-2).rmse_delta)
        slope = np.polyfit(np.log(sizes), np.log(errors), 1)[0]
        assert slope == pytest.approx(-0.5, abs=0.1)
        assert errors[0] > errors[1] > errors[2]

    def test_mismatched_sample_is_undefined(self, rng):
        x = rng.standard_normal((200, 1))
        sample = LogDensitySample(x, increasing_away_from_zero(x))
        with pytest.raises(EstimatorUndefinedError):
            idr(sample, increasing_away_from_zero, 0.5)

    def test_nonpositive_mass_rejected(self, normal_sample):
        with pytest.raises(InvalidInputError):
            idr(normal_sample, unnormalized_normal, 0.0)

    def test_center_outside_support(self, rng):
        x = rng.uniform(1.0, 2.0, size=(50, 1))

        def log_g(points):
            p = np.atleast_2d(points)[:, 0]
            return np.where(p > 0.5, 0.0, -np.inf)

        with pytest.raises(EstimatorBreakdownError):
            IdrContext(LogDensitySample(x, log_g(x)), log_g)

    @pytest.mark.slow
    def test_hundred_dimensional_normal(self, rng):
        x = rng.standard_normal((100_000, 100))
        sample = LogDensitySample(x, standard_normal_log_density(x))
        result = idr_k_search(sample, standard_normal_log_density, suggest_k_grid(100))
        assert abs(result.selected.log_c) <= 3 * result.selected.rmse_delta_ess


class TestKSearch:
    def test_singleton_grid(self, normal_sample):
        result = idr_k_search(normal_sample, unnormalized_normal, [1e-3])
        assert result.selected_index == 0
        assert result.selected.k == 1e-3

    def test_selected_row_is_optimal(self, normal_sample):
        grid = [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0]
        result = idr_k_search(normal_sample, unnormalized_normal, grid)
        best = result.selected
        assert all(best.rmse_delta_ess <= row.rmse_delta_ess for row in result.rows)
        assert abs(best.log_c - LOG_SQRT_2PI) <= 4 * best.rmse_delta

    def test_rows_match_single_evaluations(self, normal_sample):
        grid = [1e-3, 1e-1]
        result = idr_k_search(normal_sample, unnormalized_normal, grid)
        for row, k in zip(result.rows, grid):
            assert row.log_c == pytest.approx(idr(normal_sample, unnormalized_normal, k).log_c, abs=1e-12)

    def test_threaded_search_matches_sequential(self, normal_sample):
        grid = [1e-3, 1e-2, 1e-1]
        ctx = IdrContext(normal_sample, unnormalized_normal)
        sequential, _ = ctx.search(grid, jobs=1)
        threaded, _ = ctx.search(grid, jobs=3)
        assert sequential == threaded

    def test_every_point_undefined(self, rng):
        x = rng.standard_normal((200, 1))
        sample = LogDensitySample(x, increasing_away_from_zero(x))
        with pytest.raises(NoValidKError):
            idr_k_search(sample, increasing_away_from_zero, [0.1, 1.0])

    @pytest.mark.parametrize("grid", [[], [1e-2, 1e-3], [0.0, 1.0], [1e-2, 1e-2]])
    def test_invalid_grids(self, normal_sample, grid):
        with pytest.raises(InvalidInputError):
            idr_k_search(normal_sample, unnormalized_normal, grid)

    def test_picks_where_the_error_stops_falling(self):
        grid = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6]
        rmse = [0.4515, 0.4514, 0.3664, 0.3008, 0.3694]
        rows = [
            KGridRow(k=k, log_c=-7.0, rmse_delta=r, rmse_delta_ess=r, ci_low=-8.0, ci_high=-6.0)
            for k, r in zip(grid, rmse)
        ]
        assert rows[select_k(rows)].k == 1e-7

    def test_ties_go_to_the_smaller_k(self):
        rows = [
            KGridRow(k=k, log_c=0.0, rmse_delta=r, rmse_delta_ess=r, ci_low=-1.0, ci_high=1.0)
            for k, r in [(1e-3, 0.3), (1e-2, 0.2), (1e-1, 0.2)]
        ]
        assert select_k(rows) == 1

    def test_suggested_grid_is_increasing(self):
        grid = suggest_k_grid(5, n=10)
        assert len(grid) == 10
        assert all(b > a > 0 for a, b in zip(grid, grid[1:]))


class TestParseKGrid:
    def test_auto(self):
        assert parse_k_grid("auto") == []

    def test_log_range_has_one_point_per_decade(self):
        assert parse_k_grid("1e-4:1e-1:log") == pytest.approx([1e-4, 1e-3, 1e-2, 1e-1])

    def test_log_range_with_count(self):
        assert len(parse_k_grid("1e-6:1:log:13")) == 13

    def test_list(self):
        assert parse_k_grid("0.001, 0.01,0.1") == [0.001, 0.01, 0.1]

    @pytest.mark.parametrize("text", ["1:0.1:log", "1e-3:1:lin", "a,b", "0.1,0.01", "-1,1"])
    def test_invalid(self, text):
        with pytest.raises(InvalidInputError):
            parse_k_grid(text)


class TestBootstrap:
    def test_constant_statistic(self):
        outcome = bootstrap_rmse(np.full(20, -3.0), hm_statistic_estimator, B=50)
        assert outcome.value == 0.0
        assert not outcome.unstable

    def test_matches_an_independent_resampling_loop(self):
        stat = np.array([1.0, 2.0, 3.0, 4.0])
        outcome = bootstrap_rmse(stat, np.mean, B=1000, rng_seed=42)

        rng = np.random.default_rng(42)
        full = float(np.mean(stat))
        deviations = []
        for _ in range(1000):
            idx = rng.integers(0, 4, size=4)
            deviations.append(float(np.mean(stat[idx])) - full)
        rel = np.expm1(np.asarray(deviations))
        expected = float(np.sqrt(np.mean(rel * rel)))
        assert outcome.value == expected

    def test_replicate_size_follows_ess(self):
        stat = np.arange(100, dtype=float)
        sizes = []

        def spy(values):
            sizes.append(len(values))
            return float(np.mean(values))

        bootstrap_rmse(stat, spy, B=3, ess=25.4)
        assert sizes[1:] == [25, 25, 25]

    def test_failed_replicates_are_counted(self):
        stat = np.array([-1.0, -1.0, 2.0, 2.0])
        outcome = bootstrap_rmse(stat, idr_statistic_estimator(1.0), B=400, rng_seed=3)
        assert outcome.n_failed > 0
        assert outcome.unstable
        assert len(outcome.failed_indices) == outcome.n_failed

    def test_harmonic_mean_is_far_noisier_than_idr(self, rng):
        # conjugate normal model: diffuse N(0, 10^2) prior, 20 unit-variance observations per coordinate
        d, n_obs, prior_sd = 5, 20, 10.0
        y = rng.normal(0.7, 1.0, size=(n_obs, d))
        y_bar = y.mean(axis=0)
        post_var = 1.0 / (n_obs + prior_sd**-2)
        theta = rng.normal(n_obs * y_bar * post_var, math.sqrt(post_var), size=(20_000, d))

        def log_lik(points):
            t = np.atleast_2d(points)
            const = -0.5 * n_obs * d * math.log(2 * math.pi) - 0.5 * float(np.sum((y - y_bar) ** 2))
            return const - 0.5 * n_obs * np.sum((t - y_bar) ** 2, axis=1)

        def log_g(points):
            t = np.atleast_2d(points)
            return np.sum(stats.norm.logpdf(t, scale=prior_sd), axis=1) + log_lik(t)

        report = estimator_summary(
            LogDensitySample(theta, log_g(theta)),
            log_g=log_g,
            log_lik=log_lik(theta),
            config=EstimatorConfig(methods=("idr", "hm"), bootstrap=200, seed=5),
        )
        idr_estimate, hm_estimate = report.get(EstimatorMethod.IDR), report.get(EstimatorMethod.HM)
        assert idr_estimate.rmse_delta_ess <= 0.5
        assert hm_estimate.rmse_boot >= 10 * idr_estimate.rmse_boot

    def test_invalid_arguments(self):
        with pytest.raises(InvalidInputError):
            bootstrap_rmse([1.0], np.mean, B=10)
        with pytest.raises(InvalidInputError):
            bootstrap_rmse([1.0, 2.0], np.mean, B=0)


class TestMcReplicateRmse:
    def test_identical_replicates(self):
        assert mc_replicate_rmse([1.5, 1.5, 1.5]) == 0.0

    def test_two_replicates_by_hand(self):
        assert mc_replicate_rmse([0.0, math.log(1.1)]) == pytest.approx(0.05 / 1.05, rel=1e-12)

    def test_needs_two_values(self):
        with pytest.raises(InvalidInputError):
            mc_replicate_rmse([0.0])


class TestEstimatorSummary:
    @pytest.fixture
    def sample(self, rng):
        x = rng.standard_normal((5_000, 2))
        return LogDensitySample(x, standard_normal_log_density(x))

    def test_all_estimators(self, sample):
        log_lik = sample.log_g - 1.0
        report = estimator_summary(
            sample,
            log_g=standard_normal_log_density,
            log_lik=log_lik,
            config=EstimatorConfig(bootstrap=50, seed=5),
            columns=["a", "b"],
        )
        assert [e.method for e in report.estimates] == [
            EstimatorMethod.IDR,
            EstimatorMethod.HM,
            EstimatorMethod.AM_POSTERIOR_SURROGATE,
        ]
        idr_estimate = report.get(EstimatorMethod.IDR)
        assert abs(idr_estimate.log_c) <= 4 * idr_estimate.rmse_delta_ess
        assert report.k_grid is not None
        assert idr_estimate.k_opt == report.k_grid.selected.k
        assert all(e.rmse_boot is not None for e in report.estimates)
        assert report.columns == ["a", "b"]
        assert report.dimension == 2

    def test_bootstrap_is_seeded(self, sample):
        config = EstimatorConfig(methods=("hm",), bootstrap=30, seed=9)
        first = estimator_summary(sample, log_lik=sample.log_g, config=config)
        second = estimator_summary(sample, log_lik=sample.log_g, config=config)
        assert first.estimates[0].rmse_boot == second.estimates[0].rmse_boot

    def test_replicates_fill_monte_carlo_error(self, rng, sample):
        replicates = []
        for _ in range(2):
            x = rng.standard_normal((5_000, 2))
            replicates.append(ReplicateInput(LogDensitySample(x, standard_normal_log_density(x)), standard_normal_log_density(x)))
        report = estimator_summary(
            sample,
            log_g=standard_normal_log_density,
            log_lik=sample.log_g,
            config=EstimatorConfig(k_grid=(1e-2, 1e-1)),
            replicates=replicates,
        )
        assert report.mc_replicates == 3
        assert len(report.replicate_log_c[EstimatorMethod.IDR]) == 3
        assert all(e.rmse_mc is not None for e in report.estimates)

    def test_harmonic_mean_needs_log_likelihoods(self, sample):
        with pytest.raises(InvalidInputError):
            estimator_summary(sample, log_g=standard_normal_log_density, config=EstimatorConfig(methods=("idr", "hm")))

    def test_idr_needs_the_target(self, sample):
        with pytest.raises(InvalidInputError):
            estimator_summary(sample, log_lik=sample.log_g, config=EstimatorConfig(methods=("idr",)))

    def test_unknown_estimator(self, sample):
        with pytest.raises(InvalidInputError):
            estimator_summary(sample, log_lik=sample.log_g, config=EstimatorConfig(methods=("bridge",)))
