import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from engine.templates import simgen
from engine.templates.simgen import ReplicateSet, ScenarioSpec
from engine.utils.errors import InputError
from engine.utils.helper import logit

SMALL = dict(region="lattice:3x3", grid_resolution=9, B=5, seed=1)


class TestScenarioSpec:
    def test_defaults(self):
        spec = ScenarioSpec()
        assert spec.region == "lattice:6x6"
        assert spec.exposure_sites == ((0.25, 0.25), (0.75, 0.75))
        assert 1 / (1 + math.exp(-spec.mean_base)) == pytest.approx(2e-4)

    def test_from_dict_converts_lists(self):
        spec = ScenarioSpec.from_dict(
            {"exposure_sites": [[0.5, 0.5]], "population": [1, 2]}
        )
        assert spec.exposure_sites == ((0.5, 0.5),)
        assert spec.population == (1, 2)

    def test_unknown_field(self):
        with pytest.raises(InputError, match="sigma_c"):
            ScenarioSpec.from_dict({"sigma_c": 0.1})

    def test_validation(self):
        with pytest.raises(InputError):
            ScenarioSpec(sigma_C=0.0)
        with pytest.raises(InputError):
            ScenarioSpec(exposure_sites=())
        with pytest.raises(InputError):
            ScenarioSpec(B=0)
        with pytest.raises(InputError):
            ScenarioSpec(population=-5.0)

    def test_with_variability(self):
        spec = ScenarioSpec(name="scenario1").with_variability(2)
        assert spec.name == "scenario1-x2"
        assert spec.mean_amplitude == 2.0
        assert spec.sigma_C == pytest.approx(0.2)
        with pytest.raises(InputError):
            spec.with_variability(0)

    def test_populations(self):
        assert_allclose(ScenarioSpec(population=10.0).populations(3), 10.0)
        assert_allclose(
            ScenarioSpec(population=(1.0, 2.0)).populations(2), [1, 2]
        )
        with pytest.raises(InputError):
            ScenarioSpec(population=(1.0, 2.0)).populations(3)


class TestRegionAndGrid:
    def test_lattice_region(self):
        region = simgen.load_region(
            ScenarioSpec(region="lattice:3x3", cell_size=2.0)
        )
        assert region.graph.order == 9
        assert region.graph.n_edges == 12
        assert region.bounds == (0.0, 0.0, 6.0, 6.0)
        assert region.diameter == pytest.approx(6 * math.sqrt(2))

    def test_sites_scale_with_bounds(self):
        region = simgen.load_region(
            ScenarioSpec(region="lattice:3x3", cell_size=2.0)
        )
        sites = simgen.site_coordinates(ScenarioSpec(), region)
        assert_allclose(sites, [[1.5, 1.5], [4.5, 4.5]])

    def test_default_grid_fills_every_area(self):
        region = simgen.load_region(ScenarioSpec(region="lattice:4x4"))
        grid = simgen.make_grid(region.polygons)
        assert np.all(grid.counts >= simgen.POINTS_PER_AREA)
        assert grid.counts.sum() == len(grid.points)

    def test_large_region_caps_the_grid(self, monkeypatch):
        monkeypatch.setattr(simgen, "MAX_SURFACE_POINTS", 400)
        region = simgen.load_region(ScenarioSpec(region="lattice:10x10"))
        grid = simgen.make_grid(region.polygons)
        assert grid.resolution == 20
        assert len(grid.points) == 400
        assert np.all(grid.counts == 4)

    def test_explicit_resolution_too_coarse(self):
        region = simgen.load_region(
            ScenarioSpec(region="lattice:3x3", cell_size=2.0)
        )
        with pytest.raises(InputError, match="no grid point"):
            simgen.make_grid(region.polygons, resolution=2)

    def test_mean_surface_peaks_at_site(self):
        spec = ScenarioSpec(mean_base=-8.0, mean_amplitude=1.5)
        mu = simgen.mean_surface(
            [[0.0, 0.0], [10.0, 0.0]], [[0.0, 0.0]], spec, decay=1.0
        )
        assert mu[0] == pytest.approx(-6.5)
        assert mu[1] == pytest.approx(-8.0 + 1.5 * math.exp(-10))

    def test_flat_mean(self):
        spec = ScenarioSpec(mean_amplitude=0.0)
        mu = simgen.mean_surface(np.random.default_rng(0).random((5, 2)),
                                 [[0.5, 0.5]], spec, decay=1.0)
        assert_allclose(mu, spec.mean_base)


class TestAggregation:
    def test_mean_of_logistic_surface(self):
        phi = logit(np.array([0.1, 0.3, 0.2]))
        assert_allclose(simgen.aggregate_rates(phi, [0, 0, 1]), [0.2, 0.2])

    def test_empty_area(self):
        with pytest.raises(InputError):
            simgen.aggregate_rates([0.0, 0.0], [0, 0], n_areas=2)


class TestReplicates:
    def test_zero_rates(self, rng):
        reps = simgen.replicate_counts(np.zeros(3), np.full(3, 1e5), 10, rng)
        assert reps.counts.shape == (10, 3)
        assert not reps.counts.any()

    def test_poisson_mean(self, rng):
        r = np.array([1e-3, 2e-3])
        n = np.array([1e4, 1e4])
        reps = simgen.replicate_counts(r, n, 2000, rng)
        expected = n * r
        assert np.all(
            np.abs(reps.counts.mean(axis=0) - expected)
            < 4 * np.sqrt(expected / 2000)
        )

    def test_rate_range(self, rng):
        with pytest.raises(InputError):
            simgen.replicate_counts([0.5, 1.0], [10, 10], 2, rng)

    def test_write_and_read(self, tmp_path):
        sim = simgen.simulate(ScenarioSpec(**SMALL))
        sim.replicates.write(str(tmp_path))
        back = ReplicateSet.read(str(tmp_path))
        assert back.area_ids == sim.replicates.area_ids
        assert np.array_equal(back.counts, sim.replicates.counts)
        assert back.digest == sim.replicates.digest

    def test_read_missing(self, tmp_path):
        with pytest.raises(InputError):
            ReplicateSet.read(str(tmp_path))


class TestSimulate:
    def test_shapes_and_manifest(self):
        sim = simgen.simulate(ScenarioSpec(**SMALL))
        reps = sim.replicates
        assert reps.counts.shape == (5, 9)
        assert np.all((reps.true_rates > 0) & (reps.true_rates < 1))
        assert reps.manifest["seed"] == 1
        assert reps.manifest["grid_resolution"] == 9
        assert len(sim.phi) == len(sim.grid.points) == 81

    def test_same_seed_same_numbers(self):
        a = simgen.simulate(ScenarioSpec(**SMALL))
        b = simgen.simulate(ScenarioSpec(**SMALL))
        assert np.array_equal(a.phi, b.phi)
        assert np.array_equal(a.replicates.counts, b.replicates.counts)
        assert a.replicates.digest == b.replicates.digest

    def test_seed_changes_numbers(self):
        a = simgen.simulate(ScenarioSpec(**SMALL))
        b = simgen.simulate(ScenarioSpec(**{**SMALL, "seed": 2}))
        assert not np.array_equal(a.phi, b.phi)

    def test_rates_follow_exposure(self):
        spec = ScenarioSpec(region="lattice:5x5", grid_resolution=20,
                            exposure_sites=((0.1, 0.1),), mean_amplitude=3.0,
                            sigma_C=0.01, B=1)
        rates = simgen.simulate(spec).replicates.true_rates
        # r0c0 holds the site, r4c4 is the far corner
        assert rates[0] > 2 * rates[-1]


def test_smoother_surface_for_larger_v():
    region = simgen.load_region(ScenarioSpec(region="lattice:3x3"))
    grid = simgen.make_grid(region.polygons, resolution=15)
    mu = np.zeros(len(grid.points))
    smooth = simgen.SurfaceSampler(
        grid, ScenarioSpec(matern_v=2.0, sigma_C=1.0), mu
    )
    rough = simgen.SurfaceSampler(
        grid, ScenarioSpec(matern_v=1.25, sigma_C=1.0), mu
    )
    order = np.lexsort((grid.points[:, 0], grid.points[:, 1]))

    def roughness(phi):
        field = phi[order].reshape(15, 15)
        return float(np.mean(np.diff(field, axis=1) ** 2))

    wins = 0
    for k in range(50):
        a = smooth.draw(np.random.default_rng(k))
        b = rough.draw(np.random.default_rng(k))
        wins += roughness(a) < roughness(b)
    assert wins >= 45
