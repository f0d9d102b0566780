import os
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import stats

from engine.templates import mcmc, priors
from engine.templates.graph import from_matrix, lattice
from engine.templates.mcmc import (
    AreaDataset,
    HyperPriors,
    LatentModel,
    McmcConfig,
    Uniform,
)
from engine.templates.priors import PriorKind, PriorSpec
from engine.utils.errors import InputError
from engine.utils.helper import expit, log_expit
from engine.templates.simgen import ScenarioSpec, simulate
from engine.templates import metrics

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIG = os.path.join(ROOT, "mcmc_config.txt")

COUNTS = [12, 30, 7, 19]
POPS = [40000, 52000, 31000, 45000]


@pytest.fixture
def tiny_data():
    return AreaDataset(lattice(2, 2), COUNTS, POPS)


class TestHyperPriors:
    def test_defaults(self):
        hp = HyperPriors()
        assert hp.sigma == Uniform(0.0, 10.0)
        assert hp.sigma_scale == "sd"
        assert hp.eta == Uniform(-1.0, 1.0)
        assert hp.fixed == {}

    def test_parse_variance_scale_and_fixed(self):
        hp = HyperPriors.parse("sigma2=U(0,0.01); lambda=0.5")
        assert hp.sigma == Uniform(0.0, 0.01)
        assert hp.sigma_scale == "variance"
        assert hp.fixed == {"lam": 0.5}

    def test_parse_sd_scale(self):
        hp = HyperPriors.parse("tau = U(0, 2)")
        assert hp.tau == Uniform(0.0, 2.0)
        assert hp.tau_scale == "sd"

    def test_parse_fixed_tau2(self):
        assert HyperPriors.parse("tau2=0.3").fixed == {"tau2": 0.3}

    def test_parse_errors(self):
        with pytest.raises(InputError, match="unknown hyperparameter"):
            HyperPriors.parse("rho=U(0,1)")
        with pytest.raises(InputError, match="bad hyperprior"):
            HyperPriors.parse("sigma2=banana")
        with pytest.raises(InputError):
            HyperPriors.parse("eta=U(-2,1)")
        with pytest.raises(InputError):
            HyperPriors.parse("sigma2=U(1,0)")

    def test_clamped_bym(self):
        hp = HyperPriors().clamped(PriorSpec("bym", sigma2=0.04, nu=1.5))
        assert hp.fixed == {"sigma2": 0.04, "tau2": pytest.approx(0.06)}

    def test_describe(self):
        info = HyperPriors.parse("sigma2=U(0,1)").describe()
        assert info["sigma"] == "U(0,1) on variance"


class TestMcmcConfig:
    def test_defaults(self):
        cfg = McmcConfig()
        assert (cfg.chains, cfg.iterations, cfg.burn_in, cfg.thin) == (
            3, 30000, 5000, 75
        )
        assert cfg.saved_per_chain == 333

    def test_too_few_saved_draws(self):
        with pytest.raises(InputError, match="saved draws"):
            McmcConfig(iterations=1000, burn_in=500, thin=10)

    def test_burn_in_bounds(self):
        with pytest.raises(InputError):
            McmcConfig(iterations=1000, burn_in=1000, thin=1)

    def test_from_file(self):
        cfg = McmcConfig.from_file(CONFIG, "Desk")
        assert (cfg.chains, cfg.iterations, cfg.burn_in, cfg.thin) == (
            3, 6000, 1000, 25
        )

    def test_from_file_overrides(self):
        cfg = McmcConfig.from_file(CONFIG, "MCMC", seed=9, chains=None)
        assert cfg.seed == 9
        assert cfg.chains == 3

    def test_missing_section(self):
        with pytest.raises(InputError, match="no \\[Nope\\]"):
            McmcConfig.from_file(CONFIG, "Nope")


class TestAreaDataset:
    def test_rates(self, tiny_data):
        assert_allclose(tiny_data.crude_rates, np.divide(COUNTS, POPS))
        assert tiny_data.pooled_rate == pytest.approx(68 / 168000)

    def test_validation(self):
        g = lattice(2, 2)
        with pytest.raises(InputError, match="length"):
            AreaDataset(g, [1, 2, 3], [1, 1, 1])
        with pytest.raises(InputError, match="integers"):
            AreaDataset(g, [1, 2.5, 3, 4], [1, 1, 1, 1])
        with pytest.raises(InputError, match="populations"):
            AreaDataset(g, [1, 2, 3, 4], [1, 0, 1, 1])

    def test_from_csv(self, tiny_files):
        data = AreaDataset.from_csv(
            tiny_files["counts"], tiny_files["pop"], tiny_files["graph"]
        )
        assert_allclose(data.O, COUNTS)
        assert list(data.to_frame().columns) == [
            "area_id", "count", "population", "crude_rate"
        ]

    def test_from_csv_id_mismatch(self, tiny_files):
        with pytest.raises(InputError, match="missing"):
            AreaDataset.from_csv(
                tiny_files["counts"], tiny_files["pop"], lattice(2, 3)
            )


class TestDiagnostics:
    def test_gelman_rubin_mixed(self, rng):
        draws = rng.standard_normal((3, 500))
        assert mcmc.gelman_rubin(draws) == pytest.approx(1.0, abs=0.02)

    def test_gelman_rubin_stuck_chains(self, rng):
        draws = rng.standard_normal((3, 500)) + np.array([[0], [3], [6]])
        assert mcmc.gelman_rubin(draws) > 1.5

    def test_gelman_rubin_clamped(self):
        draws = np.tile(np.sin(np.arange(50.0)), (2, 1))
        assert mcmc.gelman_rubin(draws) == 1.0

    def test_gelman_rubin_needs_chains(self, rng):
        with pytest.raises(InputError):
            mcmc.gelman_rubin(rng.standard_normal((1, 500)))
        with pytest.raises(InputError):
            mcmc.gelman_rubin(rng.standard_normal((2, 5)))

    def test_ess_independent(self, rng):
        ess = mcmc.effective_sample_size(rng.standard_normal(4000))
        assert 2500 < ess < 6000

    def test_ess_autocorrelated(self, rng):
        n, phi = 20000, 0.9
        x = np.empty(n)
        x[0] = 0.0
        eps = rng.standard_normal(n)
        for t in range(1, n):
            x[t] = phi * x[t - 1] + eps[t]
        expected = n * (1 - phi) / (1 + phi)
        assert mcmc.effective_sample_size(x) == pytest.approx(expected,
                                                              rel=0.35)

    def test_ess_sums_chains(self, rng):
        draws = rng.standard_normal((2, 1000))
        total = mcmc.effective_sample_size(draws)
        parts = sum(mcmc.effective_sample_size(c) for c in draws)
        assert total == pytest.approx(parts)

    def test_ess_needs_draws(self, rng):
        with pytest.raises(InputError):
            mcmc.effective_sample_size(rng.standard_normal(50))


class TestLatentModel:
    def test_unknown_fixed_parameter(self):
        with pytest.raises(InputError, match="does not take"):
            LatentModel("iid", lattice(2, 2), HyperPriors.parse("lambda=0.5"))

    def test_sampled_parameters(self):
        g = lattice(2, 2)
        assert LatentModel("bym", g, HyperPriors()).sampled == (
            "sigma2", "tau2"
        )
        clamped = HyperPriors().clamped(PriorSpec("lcar", sigma2=1, lam=0.3))
        assert LatentModel("lcar", g, clamped).sampled == ()

    def test_car_needs_neighbours(self):
        g = from_matrix(np.zeros((2, 2)))
        with pytest.raises(InputError, match="islands"):
            LatentModel("icar", g, HyperPriors())

    def test_pcar_log_determinant(self):
        g = lattice(2, 3)
        model = LatentModel("pcar", g, HyperPriors())
        (_, P, logdet), = model.block_terms({"sigma2": 1.0, "eta": 0.7})
        assert logdet == pytest.approx(np.linalg.slogdet(P)[1])

    def test_lcar_log_determinant(self):
        g = lattice(3, 2)
        model = LatentModel("lcar", g, HyperPriors())
        (_, P, logdet), = model.block_terms({"sigma2": 1.0, "lam": 0.4})
        assert logdet == pytest.approx(np.linalg.slogdet(P)[1])

    def test_colour_classes_are_independent(self):
        g = lattice(4, 4)
        classes = mcmc._colour_classes(g.W > 0)
        assert sorted(np.concatenate(classes)) == list(range(16))
        for C in classes:
            assert not g.W[np.ix_(C, C)].any()

    def test_gp_precision_below_rounding_grain(self):
        model = LatentModel("gp", lattice(2, 2), HyperPriors())
        P, logdet = model.gp_precision(1e-7)
        assert_allclose(P, np.eye(4), atol=1e-12)
        assert logdet == pytest.approx(0.0)


class TestRecenter:
    def test_linear_predictor_unchanged_on_two_islands(self, two_islands):
        model = LatentModel("icar", two_islands, HyperPriors())
        (blk,) = model.make_blocks({"sigma2": 1.0})
        blk.x[:] = [2.0, 0.0, -1.0, -5.0]
        before = 0.0 + model.effects([blk])
        alpha = mcmc._recenter(model, [blk], 0.0)
        assert_allclose(alpha + model.effects([blk]), before)
        assert_allclose(blk.x, [1.0, -1.0, 2.0, -2.0])
        assert abs(model.effects([blk]).sum()) < 1e-12
        assert alpha == pytest.approx(-1.0)

    def test_single_component_has_no_level(self):
        model = LatentModel("bym", lattice(2, 3), HyperPriors())
        blocks = model.make_blocks({"sigma2": 1.0, "tau2": 1.0})
        blocks[0].x[:] = np.arange(6.0)
        blocks[1].x[:] = 1.0
        alpha = mcmc._recenter(model, blocks, 0.5)
        assert alpha == pytest.approx(3.0)
        assert_allclose(blocks[0].level, 0.0, atol=1e-12)
        assert blocks[1].level is None
        assert_allclose(blocks[1].x, 1.0)

    def test_islands_keep_their_levels(self, two_islands, smoke_config):
        data = AreaDataset(two_islands, [5, 6, 60, 55],
                           [10000, 10000, 10000, 10000])
        samples = mcmc.fit(data, "icar", HyperPriors(), smoke_config)
        means = mcmc.posterior_rate_means(samples)
        assert means[2:].min() > 3 * means[:2].max()
        assert np.abs(samples.kappa.sum(axis=2)).max() < 1e-9


@pytest.mark.parametrize("kind", [k.value for k in PriorKind])
def test_smoke_fit_every_prior(kind, tiny_data, smoke_config):
    samples = mcmc.fit(tiny_data, kind, HyperPriors(), smoke_config)
    assert samples.alpha.shape == (2, 100)
    assert samples.kappa.shape == (2, 100, 4)
    rates = samples.rates()
    assert np.all(np.isfinite(rates))
    assert np.all((rates > 0) & (rates < 1))
    assert "sigma2" in samples.sampled
    diag = samples.diagnostics()
    assert len(diag) == 1 + len(samples.sampled) + 4
    for name, acc in samples.acceptance.items():
        assert all(0 <= a <= 1 for a in acc), name


def test_fit_is_deterministic(tiny_data, smoke_config):
    a = mcmc.fit(tiny_data, "bym2", HyperPriors(), smoke_config)
    b = mcmc.fit(tiny_data, "bym2", HyperPriors(), smoke_config)
    assert np.array_equal(a.kappa, b.kappa)
    assert np.array_equal(a.hyper["lam"], b.hyper["lam"])


def test_icar_effects_sum_to_zero(tiny_data, smoke_config):
    samples = mcmc.fit(tiny_data, "icar", HyperPriors(), smoke_config)
    assert np.abs(samples.kappa.sum(axis=2)).max() < 1e-9


def test_bym_keeps_nu(tiny_data, smoke_config):
    samples = mcmc.fit(tiny_data, "bym", HyperPriors(), smoke_config)
    assert_allclose(samples.hyper["nu"],
                    samples.hyper["tau2"] / samples.hyper["sigma2"])


def test_fixed_hyperparameters_do_not_move(tiny_data, smoke_config):
    spec = PriorSpec("pcar", sigma2=0.05, eta=0.5)
    samples = mcmc.fit(tiny_data, "pcar", HyperPriors().clamped(spec),
                       smoke_config)
    assert samples.sampled == ()
    summary = samples.hyper_summary().set_index("name")
    assert summary.loc["eta", "q05"] == summary.loc["eta", "q95"] == 0.5
    assert not summary.loc["sigma2", "sampled"]
    tcv = mcmc.posterior_tcv(samples, tiny_data.graph)
    expected = priors.tcv(spec, tiny_data.graph)
    assert tcv.mean == pytest.approx(expected)
    assert tcv.q05 == pytest.approx(expected)


def test_long_frame(tiny_data, smoke_config):
    samples = mcmc.fit(tiny_data, "iid", HyperPriors(), smoke_config)
    frame = samples.to_long_frame()
    assert list(frame.columns) == ["chain", "iter", "name", "value"]
    assert len(frame) == 2 * 100 * (1 + 1 + 4)
    alpha = frame[(frame.name == "alpha") & (frame.chain == 0)]
    assert alpha["iter"].iloc[0] == 210
    assert alpha["iter"].iloc[-1] == 1200
    assert set(frame.name) >= {"alpha", "sigma2", "kappa[r0c0]"}


def test_posterior_rates_track_crude_rates(tiny_data, smoke_config):
    samples = mcmc.fit(tiny_data, "iid", HyperPriors(), smoke_config)
    means = mcmc.posterior_rate_means(samples)
    assert np.argmax(means) == np.argmax(tiny_data.crude_rates)
    assert np.all(np.abs(np.log(means / tiny_data.crude_rates)) < 1.0)


SUPPORTS = HyperPriors.parse(
    "sigma=U(0,0.5); tau2=U(0.01,0.3); eta=U(-0.5,0.9); lambda=U(0.2,0.8); "
    "psi=U(0.5,3)"
)


@pytest.mark.parametrize("kind", ["bym", "pcar", "lcar", "bym2", "gp"])
def test_hyperparameter_draws_stay_in_support(kind, tiny_data, smoke_config):
    samples = mcmc.fit(tiny_data, kind, SUPPORTS, smoke_config)
    bounds = {
        "sigma2": Uniform(0.0, 0.25),
        "tau2": Uniform(0.01, 0.3),
        "eta": Uniform(-0.5, 0.9),
        "lam": Uniform(0.2, 0.8),
        "psi": Uniform(0.5, 3.0),
    }
    assert samples.sampled
    for name in samples.sampled:
        assert bounds[name].contains(samples.hyper[name]), name


def test_proposal_scales_freeze_after_burn_in(tiny_data, smoke_config):
    model = LatentModel("bym", tiny_data.graph, HyperPriors())
    seq = np.random.SeedSequence(3)
    frozen = mcmc.run_chain(tiny_data, model, smoke_config, seq)
    assert set(frozen.scales_final) == {"alpha", "u", "v", "sigma2", "tau2"}
    for name, final in frozen.scales_final.items():
        assert np.array_equal(final, frozen.scales_at_burn_in[name]), name

    always = replace(smoke_config, adapt_during_burnin_only=False)
    moving = mcmc.run_chain(tiny_data, model, always, seq)
    assert any(
        not np.array_equal(final, moving.scales_at_burn_in[name])
        for name, final in moving.scales_final.items()
    )


@pytest.mark.slow
def test_single_area_posterior_matches_quadrature():
    O, n = 12, 40000
    data = AreaDataset(from_matrix(np.zeros((1, 1))), [O], [n])
    cfg = McmcConfig(chains=2, iterations=100_000, burn_in=5000, thin=5,
                     seed=3)
    hyper = HyperPriors.parse("sigma2=1e-6")
    samples = mcmc.fit(data, "iid", hyper, cfg)
    x = (samples.alpha + samples.kappa[..., 0]).reshape(-1)

    grid = np.linspace(-12.0, -4.0, 20001)
    log_post = O * log_expit(grid) - n * expit(grid)
    dens = np.exp(log_post - log_post.max())
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]))])
    cdf /= cdf[-1]
    result = stats.kstest(x, lambda v: np.interp(v, grid, cdf))
    assert result.statistic <= 0.02


SLOW_CONFIG = McmcConfig(chains=2, iterations=4000, burn_in=1000, thin=10,
                         seed=5)


@pytest.mark.slow
def test_small_variance_pulls_rates_towards_the_pooled_rate():
    g = lattice(6, 6)
    data = AreaDataset(g, np.tile([4, 10, 30, 36], 9), np.full(36, 2e4))
    cfg = replace(SLOW_CONFIG, chains=3)
    samples = mcmc.fit(data, "iid", HyperPriors.parse("sigma2=U(0,0.01)"),
                       cfg)
    means = mcmc.posterior_rate_means(samples)
    crude, pooled = data.crude_rates, data.pooled_rate
    lo = np.minimum(crude, pooled)
    hi = np.maximum(crude, pooled)
    inside = (means >= lo) & (means <= hi)
    assert inside.mean() >= 0.95


@pytest.mark.slow
def test_lcar_at_zero_lambda_matches_iid():
    sim = simulate(ScenarioSpec(region="lattice:6x6", B=20, seed=4))
    graph = sim.region.graph
    reps = sim.replicates
    fits = {"lcar": "sigma2=0.1; lambda=0", "iid": "sigma2=0.1"}
    reports = {kind: [] for kind in fits}
    for b in range(reps.B):
        data = AreaDataset(graph, reps.counts[b], reps.populations)
        for kind, declaration in fits.items():
            samples = mcmc.fit(data, kind, HyperPriors.parse(declaration),
                               SLOW_CONFIG)
            reports[kind].append(metrics.report(
                mcmc.posterior_rate_means(samples), data.crude_rates
            ))
    for name in ("mss", "sp"):
        lcar = metrics.expected_metrics(reports["lcar"])
        iid = metrics.expected_metrics(reports["iid"])
        se = np.hypot(metrics.standard_error(reports["lcar"], name),
                      metrics.standard_error(reports["iid"], name))
        assert abs(getattr(lcar, name) - getattr(iid, name)) <= 3 * se, name
