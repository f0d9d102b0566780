"""Synthetic rate surfaces and replicate count datasets.

A fine grid covers the region; a Gaussian surface with an exposure-driven
mean and Matern covariance lives on it; each area's true rate is the mean
of the logistic surface over its grid points, and replicate counts are
Poisson around population times rate.
"""

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd
import shapely

from engine.templates import graph as graphs
from engine.templates.graph import AdjacencyGraph
from engine.utils.errors import InputError
from engine.utils.helper import child_rng, expit, logit, payload_digest
from engine.utils.numerics import cholesky_psd, matern, pairwise_distances

logger = logging.getLogger(__name__)

POINTS_PER_AREA = 25
MAX_RESOLUTION = 256
# the surface covariance is dense in the grid points; 4000 points is ~128 MB
MAX_SURFACE_POINTS = 4000
SURFACE_JITTER = 1e-8
SURFACE_STREAM = 0
COUNTS_STREAM = 1


@dataclass(frozen=True)
class ScenarioSpec:
    name: str = "custom"
    region: str = "lattice:6x6"
    cell_size: float = 1.0
    grid_resolution: int | None = None
    # fractions of the region bounding box
    exposure_sites: tuple = ((0.25, 0.25), (0.75, 0.75))
    mean_base: float = float(logit(0.0002))
    mean_amplitude: float = 1.0
    mean_decay: float | None = None
    sigma_C: float = 0.1
    matern_v: float = 2.0
    matern_phi: float = 2.0
    population: float | tuple = 50000.0
    B: int = 50
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "exposure_sites",
            tuple(tuple(float(c) for c in s) for s in self.exposure_sites),
        )
        if isinstance(self.population, list):
            object.__setattr__(self, "population", tuple(self.population))
        if self.sigma_C <= 0:
            raise InputError("sigma_C must be > 0")
        if self.matern_v <= 0 or self.matern_phi <= 0:
            raise InputError("matern parameters must be > 0")
        if not self.exposure_sites:
            raise InputError("need at least one exposure site")
        if any(len(s) != 2 for s in self.exposure_sites):
            raise InputError("exposure sites are (x, y) pairs")
        if self.mean_decay is not None and self.mean_decay <= 0:
            raise InputError("mean_decay must be > 0")
        if np.any(np.asarray(self.population, dtype=float) <= 0):
            raise InputError("populations must be > 0")
        if self.B < 1:
            raise InputError("B must be >= 1")
        if self.grid_resolution is not None and self.grid_resolution < 1:
            raise InputError("grid_resolution must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown scenario fields {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path: str) -> "ScenarioSpec":
        try:
            with open(path, "r") as f:
                return cls.from_dict(json.load(f))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read scenario {path}: {exc}")

    def to_dict(self) -> dict:
        return asdict(self)

    def with_variability(self, factor: float) -> "ScenarioSpec":
        """Scale both sources of rate variation by `factor`."""
        if factor <= 0:
            raise InputError("variability factor must be > 0")
        return replace(
            self,
            name=f"{self.name}-x{factor:g}",
            mean_amplitude=self.mean_amplitude * factor,
            sigma_C=self.sigma_C * factor,
        )

    def populations(self, A: int) -> np.ndarray:
        pop = np.asarray(self.population, dtype=float)
        if pop.ndim == 0:
            return np.full(A, float(pop))
        if pop.shape != (A,):
            raise InputError(f"scenario lists {len(pop)} populations for {A} areas")
        return pop


@dataclass(frozen=True)
class Region:
    graph: AdjacencyGraph
    polygons: tuple

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        return shapely.union_all(self.polygons).bounds

    @property
    def diameter(self) -> float:
        minx, miny, maxx, maxy = self.bounds
        return math.hypot(maxx - minx, maxy - miny)


def load_region(spec: ScenarioSpec) -> Region:
    if spec.region.startswith("lattice:"):
        try:
            r, c = (int(x) for x in spec.region[8:].lower().split("x"))
        except ValueError:
            raise InputError(f"bad lattice region {spec.region!r}")
        geo = graphs.lattice_polygons(r, c, spec.cell_size, origin=0.0)
        rule = graphs.ROOK
    else:
        geo = spec.region
        rule = graphs.QUEEN
    g = graphs.from_polygons(geo, rule=rule)
    polys = tuple(p for _, p in graphs.load_features(geo))
    return Region(graph=g, polygons=polys)


@dataclass(frozen=True, eq=False)
class Grid:
    points: np.ndarray
    membership: np.ndarray
    n_areas: int
    resolution: int

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.membership, minlength=self.n_areas)


def _grid_at(polygons, resolution: int) -> Grid:
    minx, miny, maxx, maxy = shapely.union_all(polygons).bounds
    xs = minx + (np.arange(resolution) + 0.5) * (maxx - minx) / resolution
    ys = miny + (np.arange(resolution) + 0.5) * (maxy - miny) / resolution
    gx, gy = np.meshgrid(xs, ys)
    gx, gy = gx.ravel(), gy.ravel()
    label = -np.ones(len(gx), dtype=int)
    for k, poly in enumerate(polygons):
        inside = shapely.contains_xy(poly, gx, gy) & (label < 0)
        label[inside] = k
    keep = label >= 0
    return Grid(
        points=np.column_stack([gx[keep], gy[keep]]),
        membership=label[keep],
        n_areas=len(polygons),
        resolution=resolution,
    )


def make_grid(polygons, resolution: int | None = None) -> Grid:
    """Regular grid clipped to the region, each point labelled by area.

    Without a resolution, aims at POINTS_PER_AREA points per area, capped near
    MAX_SURFACE_POINTS in total, and doubles the resolution while some
    area has none.
    """
    polygons = list(polygons)
    if not polygons:
        raise InputError("region has no polygons")
    if resolution is not None:
        grid = _grid_at(polygons, resolution)
        empty = np.nonzero(grid.counts == 0)[0]
        if len(empty):
            raise InputError(
                f"{len(empty)} areas contain no grid point at resolution "
                f"{resolution}; use a finer resolution"
            )
        return grid
    union = shapely.union_all(polygons)
    minx, miny, maxx, maxy = union.bounds
    fill = union.area / max((maxx - minx) * (maxy - miny), 1e-300)
    target = POINTS_PER_AREA * len(polygons)
    if target > MAX_SURFACE_POINTS:
        logger.info(
            "capping the grid at %d points (%.1f per area)",
            MAX_SURFACE_POINTS, MAX_SURFACE_POINTS / len(polygons),
        )
        target = MAX_SURFACE_POINTS
    res = math.ceil(math.sqrt(target / fill))
    while True:
        grid = _grid_at(polygons, res)
        if np.all(grid.counts > 0):
            return grid
        if res * 2 > MAX_RESOLUTION:
            raise InputError(
                "some areas stay empty at the maximum grid resolution"
            )
        res *= 2
        logger.info("refining grid to %d points per axis", res)


def site_coordinates(spec: ScenarioSpec, region: Region) -> np.ndarray:
    minx, miny, maxx, maxy = region.bounds
    f = np.asarray(spec.exposure_sites, dtype=float)
    return np.column_stack(
        [minx + f[:, 0] * (maxx - minx), miny + f[:, 1] * (maxy - miny)]
    )


def mean_surface(points, sites, spec: ScenarioSpec, decay=None):
    """mu(s) = mean_base + mean_amplitude * sum_k exp(-|s - c_k| / h)."""
    points = np.asarray(points, dtype=float)
    sites = np.asarray(sites, dtype=float)
    if sites.ndim != 2 or len(sites) == 0:
        raise InputError("need at least one exposure site")
    h = decay if decay is not None else spec.mean_decay
    if h is None or h <= 0:
        raise InputError("mean decay length must be > 0")
    d = np.linalg.norm(points[:, None, :] - sites[None, :, :], axis=2)
    return spec.mean_base + spec.mean_amplitude * np.exp(-d / h).sum(axis=1)


class SurfaceSampler:
    """Draws phi ~ N(mu, sigma_C^2 R) on a fixed grid, factoring R once."""

    def __init__(self, grid: Grid, spec: ScenarioSpec, mu: np.ndarray):
        self.mu = np.asarray(mu, dtype=float)
        self.sigma_C = spec.sigma_C
        size = len(grid.points)
        logger.info(
            "factoring the surface covariance over %d points (~%.0f MB)",
            size, 3 * size * size * 8 / 2**20,
        )
        R = matern(pairwise_distances(grid.points), spec.matern_v,
                   spec.matern_phi)
        self.factor = cholesky_psd(R, jitter=SURFACE_JITTER)

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal(len(self.mu))
        return self.mu + self.sigma_C * (self.factor @ z)


def grid_mean(grid: Grid, spec: ScenarioSpec) -> np.ndarray:
    """Mean surface with sites placed on the grid's own bounding box."""
    lo = grid.points.min(axis=0)
    hi = grid.points.max(axis=0)
    f = np.asarray(spec.exposure_sites, dtype=float)
    sites = lo + f * (hi - lo)
    decay = spec.mean_decay or 0.2 * float(np.linalg.norm(hi - lo)) or 1.0
    return mean_surface(grid.points, sites, spec, decay=decay)


def sample_surface(grid: Grid, spec: ScenarioSpec, rng, mu=None):
    if mu is None:
        mu = grid_mean(grid, spec)
    return SurfaceSampler(grid, spec, mu).draw(rng)


def aggregate_rates(phi, membership, n_areas: int | None = None):
    phi = np.asarray(phi, dtype=float)
    membership = np.asarray(membership, dtype=int)
    A = n_areas if n_areas is not None else int(membership.max()) + 1
    counts = np.bincount(membership, minlength=A)
    if np.any(counts == 0):
        raise InputError("every area needs at least one grid point")
    return np.bincount(membership, weights=expit(phi), minlength=A) / counts


@dataclass
class ReplicateSet:
    area_ids: tuple[str, ...]
    true_rates: np.ndarray
    populations: np.ndarray
    counts: np.ndarray  # (B, A)
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[1] != len(self.area_ids):
            raise InputError("counts must be shaped (B, areas)")
        if np.any(self.counts < 0):
            raise InputError("counts must be nonnegative")

    @property
    def B(self) -> int:
        return self.counts.shape[0]

    @property
    def digest(self) -> str:
        return payload_digest(
            {"manifest": self.manifest,
             "counts": payload_digest(self.counts.tolist())}
        )

    def write(self, out_dir: str):
        os.makedirs(out_dir, exist_ok=True)
        B, A = self.counts.shape
        pd.DataFrame(
            {
                "area_id": np.tile(self.area_ids, B),
                "replicate": np.repeat(np.arange(B), A),
                "count": self.counts.reshape(-1),
            }
        ).to_csv(os.path.join(out_dir, "counts.csv"), index=False)
        pd.DataFrame(
            {
                "area_id": self.area_ids,
                "rate": self.true_rates,
                "population": self.populations,
            }
        ).to_csv(os.path.join(out_dir, "rates.csv"), index=False)
        with open(os.path.join(out_dir, "manifest.json"), "w") as f:
            json.dump(self.manifest, f, indent=2)

    @classmethod
    def read(cls, in_dir: str) -> "ReplicateSet":
        try:
            rates = pd.read_csv(
                os.path.join(in_dir, "rates.csv"), dtype={"area_id": str}
            )
            counts = pd.read_csv(
                os.path.join(in_dir, "counts.csv"), dtype={"area_id": str}
            )
            with open(os.path.join(in_dir, "manifest.json"), "r") as f:
                manifest = json.load(f)
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read replicate set {in_dir}: {exc}")
        ids = tuple(rates["area_id"])
        wide = counts.pivot(index="replicate", columns="area_id",
                            values="count")
        missing = set(ids) - set(wide.columns)
        if missing:
            raise InputError(f"counts missing areas {sorted(missing)[:10]}")
        return cls(
            area_ids=ids,
            true_rates=rates["rate"].to_numpy(dtype=float),
            populations=rates["population"].to_numpy(dtype=float),
            counts=wide[list(ids)].to_numpy(),
            manifest=manifest,
        )


def replicate_counts(r, populations, B: int, rng, area_ids=None,
                     manifest=None) -> ReplicateSet:
    """B independent count vectors, O_i ~ Poisson(n_i r_i)."""
    r = np.asarray(r, dtype=float)
    n = np.asarray(populations, dtype=float)
    if r.shape != n.shape:
        raise InputError("rates and populations differ in length")
    if np.any(r < 0) or np.any(r >= 1):
        raise InputError("rates must lie in [0, 1)")
    seqs = np.random.SeedSequence(int(rng.integers(2**63))).spawn(B)
    counts = np.stack(
        [np.random.default_rng(s).poisson(n * r) for s in seqs]
    )
    ids = tuple(area_ids) if area_ids is not None else tuple(
        str(i) for i in range(len(r))
    )
    return ReplicateSet(ids, r, n, counts, dict(manifest or {}))


@dataclass(frozen=True, eq=False)
class Simulation:
    region: Region
    grid: Grid
    mu: np.ndarray
    phi: np.ndarray
    replicates: ReplicateSet


def simulate(spec: ScenarioSpec) -> Simulation:
    """End to end: (spec, seed) determines every number produced."""
    region = load_region(spec)
    grid = make_grid(region.polygons, spec.grid_resolution)
    sites = site_coordinates(spec, region)
    decay = spec.mean_decay or 0.2 * region.diameter
    mu = mean_surface(grid.points, sites, spec, decay=decay)
    phi = SurfaceSampler(grid, spec, mu).draw(
        child_rng(spec.seed, SURFACE_STREAM)
    )
    rates = aggregate_rates(phi, grid.membership, region.graph.order)
    manifest = {
        "scenario": spec.to_dict(),
        "seed": spec.seed,
        "grid_resolution": grid.resolution,
        "grid_points": int(len(grid.points)),
        "mean_decay": decay,
    }
    reps = replicate_counts(
        rates,
        spec.populations(region.graph.order),
        spec.B,
        child_rng(spec.seed, COUNTS_STREAM),
        area_ids=region.graph.area_ids,
        manifest=manifest,
    )
    logger.info(
        "simulated %s: %d areas, %d grid points, B=%d",
        spec.name, region.graph.order, len(grid.points), spec.B,
    )
    return Simulation(region, grid, mu, phi, reps)
