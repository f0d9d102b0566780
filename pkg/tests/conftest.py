import os

import numpy as np
import pandas as pd
import pytest

from engine.templates.graph import from_edge_list, from_matrix, lattice
from engine.templates.mcmc import McmcConfig

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")
SPAIN47_EDGES = os.path.join(DATA_DIR, "spain47_edges.txt")


def random_connected_graph(rng, n_areas: int, extra: float = 0.15):
    """Random spanning tree plus a sprinkling of extra edges."""
    W = np.zeros((n_areas, n_areas))
    order = rng.permutation(n_areas)
    for k in range(1, n_areas):
        i, j = order[k], order[rng.integers(k)]
        W[i, j] = W[j, i] = 1.0
    extra_mask = np.triu(rng.random((n_areas, n_areas)) < extra, 1)
    W[extra_mask] = 1.0
    W = np.maximum(W, W.T)
    np.fill_diagonal(W, 0.0)
    centroids = rng.uniform(0, 10, size=(n_areas, 2))
    return from_matrix(W, centroids=centroids)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def random_graphs():
    gen = np.random.default_rng(7)
    return [
        random_connected_graph(gen, int(gen.integers(2, 41)))
        for _ in range(50)
    ]


@pytest.fixture
def two_islands():
    return from_matrix(
        [[0, 1, 0, 0], [1, 0, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]],
        area_ids=["a", "b", "c", "d"],
    )


@pytest.fixture
def spain47():
    if not os.path.exists(SPAIN47_EDGES):
        pytest.skip("Spain-47 adjacency not available under tests/data")
    with open(SPAIN47_EDGES, "r", encoding="utf-8") as f:
        return from_edge_list(f.read())


@pytest.fixture
def smoke_config():
    return McmcConfig(chains=2, iterations=1200, burn_in=200, thin=10,
                      seed=11)


@pytest.fixture
def tiny_files(tmp_path):
    """Four areas on a 2x2 lattice, written as the CLI reads them."""
    g = lattice(2, 2)
    counts = pd.DataFrame(
        {"area_id": list(g.area_ids), "count": [12, 30, 7, 19]}
    )
    pops = pd.DataFrame(
        {"area_id": list(g.area_ids),
         "population": [40000, 52000, 31000, 45000]}
    )
    counts_path = tmp_path / "counts.csv"
    pop_path = tmp_path / "pop.csv"
    graph_path = tmp_path / "graph.txt"
    counts.to_csv(counts_path, index=False)
    pops.to_csv(pop_path, index=False)
    graph_path.write_text(g.to_edge_list())
    return {
        "graph": g,
        "counts": str(counts_path),
        "pop": str(pop_path),
        "edges": str(graph_path),
    }
