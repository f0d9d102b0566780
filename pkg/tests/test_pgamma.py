import numpy as np
import pytest
from numpy.testing import assert_allclose

from engine.templates import pgamma
from engine.templates.pgamma import GammaPrior
from engine.utils.errors import InputError


class TestDiscrepancy:
    def test_matches_weighted_average(self, rng):
        size = 10_000
        mu = rng.uniform(1e-5, 1e-3, size)
        s2 = rng.uniform(0, 1e-6, size)
        n = rng.uniform(1e3, 1e6, size)
        rhat = rng.poisson(mu * n) / n
        w = pgamma.pg_weight(mu, s2, n)
        expected = w * rhat + (1 - w) * mu - rhat
        assert_allclose(pgamma.pg_discrepancy(mu, s2, n, rhat), expected,
                        rtol=1e-9, atol=1e-15)

    def test_matches_conjugate_posterior(self, rng):
        rbar = 1e-4
        for _ in range(200):
            prior = GammaPrior(rng.uniform(0.5, 2.0), rng.uniform(1e-3, 1.0))
            E = rng.uniform(1, 80, size=5)
            O = rng.poisson(E * prior.mu)
            n = E / rbar
            direct = pgamma.crude_posterior_check(prior, O, E, rbar)
            closed = pgamma.pg_discrepancy(
                rbar * prior.mu, rbar**2 * prior.sigma2, n, O / n
            )
            assert_allclose(direct, closed, rtol=1e-9, atol=1e-15)

    def test_zero_variance_is_full_smoothing(self):
        assert pgamma.pg_weight(2e-4, 0.0, 5e4) == 0.0
        assert pgamma.pg_discrepancy(2e-4, 0.0, 5e4, 3e-4) == pytest.approx(
            2e-4 - 3e-4
        )

    def test_shrinks_convexly_in_sigma2(self):
        s2 = np.linspace(0, 1e-7, 50)
        d = np.abs(pgamma.pg_discrepancy(1e-4, s2, 2e4, 3e-4))
        assert np.all(np.diff(d) < 0)
        assert np.all(np.diff(d, 2) >= -1e-18)

    def test_crude_at_prior_mean(self):
        assert pgamma.pg_discrepancy(1e-4, 1e-8, 1e4, 1e-4) == 0.0

    def test_posterior_mean_between_prior_mean_and_crude(self, rng):
        size = 10_000
        mu = rng.uniform(1e-5, 1e-3, size)
        s2 = rng.choice([0.0, 1e-9, 1e-7, 1e-5], size)
        n = rng.uniform(1e2, 1e6, size)
        rhat = rng.poisson(mu * n) / n
        post = rhat + pgamma.pg_discrepancy(mu, s2, n, rhat)
        lo = np.minimum(mu, rhat)
        hi = np.maximum(mu, rhat)
        tol = 1e-12 * hi
        assert np.all((post >= lo - tol) & (post <= hi + tol))


class TestGamma:
    def test_moments(self):
        prior = GammaPrior(1.2, 0.3)
        assert prior.a / prior.b == pytest.approx(1.2)
        assert prior.a / prior.b**2 == pytest.approx(0.3)

    def test_posterior(self):
        post = pgamma.pg_posterior(GammaPrior(1.0, 0.5), [3, 0], [2.0, 1.0])
        assert_allclose(post.a, [5.0, 2.0])
        assert_allclose(post.b, [4.0, 3.0])
        assert_allclose(post.mean, [1.25, 2 / 3])

    def test_degenerate_prior(self):
        with pytest.raises(InputError):
            pgamma.pg_posterior(GammaPrior(1.0, 0.0), [1], [1.0])
        with pytest.raises(InputError):
            GammaPrior(0.0, 1.0)

    def test_degenerate_quantile(self):
        assert_allclose(GammaPrior(0.8, 0.0).quantile([0.1, 0.9]), 0.8)


def test_internal_expected_counts():
    E = pgamma.internal_expected_counts([3, 7, 10], [100, 300, 600])
    assert E.sum() == pytest.approx(20)
    assert_allclose(E, [2, 6, 12])
    with pytest.raises(InputError):
        pgamma.internal_expected_counts([1, 2], [10, 0])


def test_reference_lines():
    lines = pgamma.pg_reference_lines([1, 2, 4], 0.5, scale=10.0)
    assert lines["mss"] == pytest.approx(100 * 0.5 * 1.75)
    assert lines["rmss"] == pytest.approx(10 * 1.75)
    table = pgamma.reference_table([1, 2, 4], [0.5, 1.0])
    assert list(table.columns) == ["mu_r", "mss", "rmss"]
    assert len(table) == 2


def test_reference_lines_in_mu():
    n = np.linspace(2e4, 9e4, 12)
    mu = [1e-4, 2e-4, 5e-4]
    table = pgamma.reference_table(n, mu, scale=1e5)
    assert np.all(np.diff(table["mss"]) > 0)
    # relative to the posterior mean, which is mu itself at zero variance,
    # the expected RMSS is sum(1/n) whatever mu is
    assert_allclose(table["rmss"], 1e5 * np.sum(1.0 / n))


class TestCurveStudy:
    S2_GRID = [1e-6, 1e-2, 0.1, 1.0]

    @pytest.fixture
    def curve(self, rng):
        E = np.linspace(5, 60, 47)
        return pgamma.pg_curve_study(E, [0.8, 1.2], self.S2_GRID, 200, rng)

    def test_layout(self, curve):
        assert list(curve.columns) == pgamma.CURVE_COLUMNS
        assert len(curve) == 2 * len(self.S2_GRID) * len(pgamma.CURVE_METRICS)
        ordered = curve[["q05", "q25", "q50", "q75", "q95"]].to_numpy()
        assert np.all(np.diff(ordered, axis=1) >= 0)

    def test_median_mss_falls_with_prior_variance(self, curve):
        for mu in (0.8, 1.2):
            sel = curve[(curve.metric == "mss") & (curve.mu_eta == mu)]
            q50 = sel.sort_values("sigma2_eta")["q50"].to_numpy()
            assert np.all(np.diff(q50) < 0)

    def test_smallest_variance_meets_closed_form_line(self):
        E = np.linspace(5, 60, 47)
        curve = pgamma.pg_curve_study(E, [0.8, 1.2], [1e-6], 2000,
                                      np.random.default_rng(9))
        for mu in (0.8, 1.2):
            lines = pgamma.pg_reference_lines(E, mu)
            for metric in ("mss", "rmss"):
                row = curve[(curve.metric == metric)
                            & (curve.mu_eta == mu)].iloc[0]
                assert row.theory_at_zero == pytest.approx(lines[metric])
                assert row["mean"] == pytest.approx(lines[metric], rel=0.02)

    def test_no_closed_form_for_maxima(self, curve):
        assert curve[curve.metric == "max_mss"].theory_at_zero.isna().all()

    def test_diffuse_prior_leaves_crude_rates(self, rng):
        E = np.linspace(5, 60, 47)
        curve = pgamma.pg_curve_study(E, [1.0], [1e6], 200, rng)
        row = curve[curve.metric == "mss"].iloc[0]
        assert row.q50 < 1e-3 * pgamma.pg_reference_lines(E, 1.0)["mss"]

    def test_reference_close_to_expectation(self, curve):
        E = np.linspace(5, 60, 47)
        row = curve[(curve.metric == "rmss") & (curve.mu_eta == 1.2)].iloc[0]
        expected = pgamma.pg_reference_lines(E, 1.2)["rmss"]
        assert row.reference_at_zero == pytest.approx(expected, rel=0.15)

    def test_same_seed_same_curve(self):
        E = np.linspace(5, 60, 10)
        a = pgamma.pg_curve_study(E, [1.0], [0.1], 20,
                                  np.random.default_rng(4))
        b = pgamma.pg_curve_study(E, [1.0], [0.1], 20,
                                  np.random.default_rng(4))
        assert a.equals(b)

    def test_rejects_bad_input(self, rng):
        with pytest.raises(InputError):
            pgamma.pg_curve_study([], [1.0], [0.1], 10, rng)
        with pytest.raises(InputError):
            pgamma.pg_curve_study([1.0, -2.0], [1.0], [0.1], 10, rng)
        with pytest.raises(InputError):
            pgamma.pg_curve_study([1.0], [1.0], [0.1], 0, rng)
