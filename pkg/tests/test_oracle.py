import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from fundps.field import Field, Grid2D, Mask
from fundps.grf import CovarianceSpec
from fundps.oracle import (
    ExactDenoiser,
    GaussianMixture1D,
    LinearGaussianProblem,
    SingularSystemError,
    analytic_score,
    exact_denoiser,
    exact_posterior,
    mc_posterior_moments,
    posterior_mean_quadrature,
    score_complex_step,
    spectral_shrinkage,
    sweep_growth,
    tweedie_from_score,
    tweedie_posterior_mean,
    verify_tweedie_resolution_sweep,
)

Y = np.linspace(-5, 5, 201)


def random_mask(grid, fraction, seed):
    rng = np.random.default_rng(seed)
    k = round(fraction * grid.size)
    ind = np.zeros(grid.size, dtype=bool)
    ind[rng.choice(grid.size, k, replace=False)] = True
    return Mask(grid, ind.reshape(1, *grid.shape))


class TestMixture:
    @pytest.mark.parametrize(
        "kw",
        [
            dict(weights=[0.5, 0.6], means=[0, 1], variances=[1, 1]),
            dict(weights=[1.0], means=[0, 1], variances=[1]),
            dict(weights=[1.0], means=[0], variances=[-1]),
            dict(weights=[1.0], means=[0], variances=[1], c=0.0),
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            GaussianMixture1D(**kw)

    def test_single_gaussian_halves(self):
        gm = GaussianMixture1D([1.0], [0.0], [1.0], 1.0)
        np.testing.assert_allclose(tweedie_posterior_mean(gm, Y), Y / 2, atol=1e-15)

    def test_two_point_masses_give_tanh(self):
        gm = GaussianMixture1D([0.5, 0.5], [-1.0, 1.0], [0.0, 0.0], 1.0)
        np.testing.assert_allclose(tweedie_posterior_mean(gm, Y), np.tanh(Y), atol=1e-15)

    def test_three_components_match_quadrature(self):
        gm = GaussianMixture1D([0.2, 0.5, 0.3], [-2.0, 0.3, 1.5], [0.4, 1.0, 0.2], 0.8)
        assert float(tweedie_posterior_mean(gm, 0.7)) == pytest.approx(posterior_mean_quadrature(gm, 0.7), abs=1e-8)

    def test_posterior_density_normalised(self):
        gm = GaussianMixture1D([0.3, 0.7], [-1.0, 2.0], [0.5, 0.3], 0.6)
        total, _ = integrate.quad(lambda x: gm.posterior_density(x, 0.4), -15, 15, points=[-1, 0.4, 2], limit=200)
        assert total == pytest.approx(1.0, abs=1e-10)

    def test_point_mass_density_refused(self):
        with pytest.raises(ValueError):
            GaussianMixture1D([1.0], [0.0], [0.0]).posterior_density(0.0, 0.0)

    def test_complex_step_vs_central_difference(self):
        gm = GaussianMixture1D([0.4, 0.6], [-1.0, 1.5], [0.3, 0.8], 0.7)
        h = 1e-5
        fd = (gm.log_marginal(Y + h) - gm.log_marginal(Y - h)) / (2 * h)
        np.testing.assert_allclose(score_complex_step(gm, Y), fd, atol=1e-8)

    def test_hundred_random_mixtures(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(100):
            gm = GaussianMixture1D.random(rng)
            worst = max(worst, np.abs(tweedie_posterior_mean(gm, Y) - tweedie_from_score(gm, Y)).max())
        assert worst <= 1e-8

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), y=st.floats(-5, 5))
    def test_identity_property(self, seed, y):
        gm = GaussianMixture1D.random(np.random.default_rng(seed))
        assert abs(float(tweedie_posterior_mean(gm, y)) - float(tweedie_from_score(gm, y))) <= 1e-8


@pytest.fixture(scope="module")
def lg8():
    g = Grid2D.square(8)
    return LinearGaussianProblem(g, CovarianceSpec.matern_op(), random_mask(g, 0.1, 0), 0.05,
                                 CovarianceSpec.rbf())


class TestExactDenoiser:
    def test_identity_covariances_scale(self):
        g = Grid2D.square(4)
        lg = LinearGaussianProblem(g, CovarianceSpec.matern_op(), Mask.full(g, 1, False), 0.0)
        lg._cache["C"] = lg._cache["Cg"] = np.eye(16)
        a = Field(g, np.random.default_rng(0).standard_normal((1, 4, 4)))
        np.testing.assert_allclose(exact_denoiser(lg, a, 2.0).values, a.values / 5, atol=1e-14)

    def test_sigma_zero_is_identity(self, lg8):
        a = Field(lg8.grid, np.random.default_rng(1).standard_normal((1, 8, 8)))
        assert np.array_equal(exact_denoiser(lg8, a, 0.0).values, a.values)

    def test_large_sigma_tends_to_zero(self, lg8):
        a = Field(lg8.grid, np.random.default_rng(2).standard_normal((1, 8, 8)))
        assert np.abs(exact_denoiser(lg8, a, 1e4).values).max() < 1e-6

    @pytest.mark.parametrize("sigma", [0.01, 0.5, 3.0, 80.0])
    def test_dense_matches_spectral(self, lg8, sigma):
        y = np.random.default_rng(3).standard_normal((8, 8))
        dense = exact_denoiser(lg8, Field(lg8.grid, y[None]), sigma).values[0]
        np.testing.assert_allclose(dense, spectral_shrinkage(lg8, y, sigma), atol=1e-10)

    def test_linear(self, lg8):
        rng = np.random.default_rng(4)
        a, b = rng.standard_normal((2, 1, 8, 8))
        f = lambda v: exact_denoiser(lg8, Field(lg8.grid, v), 0.7).values
        np.testing.assert_allclose(f(2 * a - b), 2 * f(a) - f(b), atol=1e-12)

    def test_shrinkage_eigenvalues_in_unit_interval(self, lg8):
        ev = np.linalg.eigvals(lg8.shrinkage(0.9)).real
        assert ev.min() >= -1e-10 and ev.max() <= 1 + 1e-10

    def test_batched_wrapper(self, lg8):
        y = np.random.default_rng(5).standard_normal((3, 1, 8, 8))
        out = ExactDenoiser(lg8).denoise(y, 1.5)
        np.testing.assert_allclose(out[2], exact_denoiser(lg8, Field(lg8.grid, y[2]), 1.5).values, atol=1e-14)

    def test_rejects_large_grid(self):
        g = Grid2D.square(33)
        with pytest.raises(ValueError):
            LinearGaussianProblem(g, CovarianceSpec.matern_op(), Mask.full(g, 1, False))

    def test_singular_system(self):
        g = Grid2D.square(4)
        lg = LinearGaussianProblem(g, CovarianceSpec.matern_op(), Mask.full(g, 1, True), 0.0)
        lg._cache["C"] = np.zeros((16, 16))
        with pytest.raises(SingularSystemError):
            exact_posterior(lg, np.zeros(16))


class TestPosterior:
    def test_full_noiseless_observation(self):
        g = Grid2D.square(6)
        lg = LinearGaussianProblem(g, CovarianceSpec.matern_op(), Mask.full(g, 1, True), 1e-9)
        u = np.random.default_rng(0).standard_normal(36)
        np.testing.assert_allclose(exact_posterior(lg, u).mean.values.ravel(), u, atol=1e-6)

    def test_empty_mask_gives_prior(self):
        g = Grid2D.square(6)
        lg = LinearGaussianProblem(g, CovarianceSpec.matern_op(), Mask.full(g, 1, False), 0.05)
        post = exact_posterior(lg, np.zeros(0))
        assert np.all(post.mean.values == 0)
        np.testing.assert_array_equal(post.cov, lg.C)

    def test_reproduces_observations_at_small_noise(self):
        g = Grid2D.square(8)
        lg = LinearGaussianProblem(g, CovarianceSpec.matern_op(), random_mask(g, 0.1, 1), 1e-6)
        u = np.random.default_rng(1).standard_normal(lg.observed_index.size)
        mean = exact_posterior(lg, u).mean.values.ravel()
        assert np.abs(mean[lg.observed_index] - u).max() <= 1e-6

    def test_covariance_symmetric_psd(self, lg8):
        u = np.random.default_rng(2).standard_normal(lg8.observed_index.size)
        cov = exact_posterior(lg8, u).cov
        assert np.array_equal(cov, cov.T)
        assert np.linalg.eigvalsh(cov).min() >= -1e-10

    def test_mean_is_regularised_least_squares_minimiser(self, lg8):
        u = np.random.default_rng(3).standard_normal(lg8.observed_index.size)
        a = exact_posterior(lg8, u).mean.values.ravel()
        M = lg8.M
        # gradient of |C^-1/2 a|^2 + |(u - M a)/s|^2, scaled by C to stay well conditioned
        grad = a - lg8.C @ M.T @ (u - M @ a) / lg8.noise_std**2
        assert np.abs(grad).max() <= 1e-8

    def test_observation_count_checked(self, lg8):
        with pytest.raises(ValueError):
            exact_posterior(lg8, np.zeros(lg8.observed_index.size + 1))

    def test_monte_carlo_within_three_standard_errors(self, lg8):
        u = np.random.default_rng(4).standard_normal(lg8.observed_index.size)
        post = exact_posterior(lg8, u)
        mc, se = mc_posterior_moments(lg8, u, 10**6, seed=5)
        z = np.abs(mc - post.mean.values.ravel()) / se
        assert z.max() <= 3.0


class TestSweep:
    def test_rows_and_report(self, tmp_path):
        rows = verify_tweedie_resolution_sweep(CovarianceSpec.matern_op(), noising=CovarianceSpec.rbf(),
                                               report_path=tmp_path / "sweep.csv")
        assert len(rows) == 9
        assert all(r.passed for r in rows)
        lines = (tmp_path / "sweep.csv").read_text().splitlines()
        assert lines[0] == "resolution,sigma,max_abs_discrepancy,pass"
        assert len(lines) == 10

    def test_same_noise_and_prior(self):
        rows = verify_tweedie_resolution_sweep(CovarianceSpec.matern_op(), resolutions=(8, 16))
        assert max(r.discrepancy for r in rows) <= 1e-8

    def test_analytic_score_matches_dense_formula(self, lg8):
        y = np.random.default_rng(0).standard_normal((8, 8))
        A = lg8.C + 4.0 * lg8.C_gamma
        dense = -lg8.C_gamma @ np.linalg.solve(A, y.ravel())
        np.testing.assert_allclose(analytic_score(lg8, y, 2.0).ravel(), dense, atol=1e-10)

    def test_growth_ratio(self):
        from fundps.oracle import SweepRow

        rows = [SweepRow(8, 1.0, 1e-12, True), SweepRow(16, 1.0, 3e-12, True), SweepRow(32, 1.0, 1.5e-12, True)]
        assert sweep_growth(rows) == pytest.approx(3.0)
