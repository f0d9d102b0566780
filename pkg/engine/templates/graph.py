import json
import logging
import os
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components as _cc
from shapely import STRtree
from shapely.geometry import box, mapping, shape
from shapely.validation import explain_validity

from engine.utils.errors import InputError, ParseError
from engine.utils.numerics import EigenSystem, pairwise_distances, sym_eigen

logger = logging.getLogger(__name__)

QUEEN = "queen"
ROOK = "rook"


@dataclass(frozen=True, eq=False)
class AdjacencyGraph:
    area_ids: tuple[str, ...]
    W: np.ndarray
    degrees: np.ndarray = field(init=False)
    components: np.ndarray = field(init=False)
    centroids: np.ndarray | None = None

    def __post_init__(self):
        W = np.asarray(self.W, dtype=float)
        A = len(self.area_ids)
        if A < 1:
            raise InputError("graph needs at least one area")
        if len(set(self.area_ids)) != A:
            raise InputError("duplicate area ids")
        if W.shape != (A, A):
            raise InputError(f"W has shape {W.shape}, expected ({A}, {A})")
        if not np.array_equal(W, W.T):
            raise InputError("W is not symmetric")
        if np.any(np.diag(W) != 0):
            raise InputError("W has self-loops")
        if not np.all((W == 0) | (W == 1)):
            raise InputError("W entries must be 0 or 1")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "degrees", W.sum(axis=1))
        _, labels = connected_components(W)
        object.__setattr__(self, "components", labels)
        if self.centroids is not None:
            c = np.asarray(self.centroids, dtype=float)
            if c.shape != (A, 2) or not np.all(np.isfinite(c)):
                raise InputError("centroids must be finite (A, 2) coordinates")
            object.__setattr__(self, "centroids", c)

    @property
    def order(self) -> int:
        return len(self.area_ids)

    @property
    def n_components(self) -> int:
        return int(self.components.max()) + 1

    @property
    def n_edges(self) -> int:
        return int(self.W.sum() // 2)

    def laplacian(self) -> np.ndarray:
        return np.diag(self.degrees) - self.W

    @cached_property
    def spectrum(self) -> EigenSystem:
        """Eigensystem of D - W, computed once per graph."""
        return sym_eigen(self.laplacian())

    def islands(self) -> list[str]:
        return [a for a, d in zip(self.area_ids, self.degrees) if d == 0]

    def require_neighbors(self, what: str):
        isolated = self.islands()
        if isolated:
            shown = ", ".join(isolated[:10])
            raise InputError(
                f"{what} needs every area to have a neighbour; "
                f"islands: {shown}"
            )

    def require_centroids(self, what: str) -> np.ndarray:
        if self.centroids is None:
            raise InputError(f"{what} needs area centroids")
        return self.centroids

    def distances(self) -> np.ndarray:
        return pairwise_distances(self.require_centroids("distances"))

    def index_of(self, area_id: str) -> int:
        try:
            return self.area_ids.index(area_id)
        except ValueError:
            raise InputError(f"unknown area id {area_id!r}")

    def edges(self) -> list[tuple[str, str]]:
        rows, cols = np.nonzero(np.triu(self.W))
        return [(self.area_ids[i], self.area_ids[j]) for i, j in zip(rows, cols)]

    def to_edge_list(self) -> str:
        lines = ["ids: " + ",".join(self.area_ids)]
        lines += [f"{a},{b}" for a, b in self.edges()]
        return "\n".join(lines) + "\n"

    def describe(self) -> dict:
        return {
            "areas": self.order,
            "edges": self.n_edges,
            "components": self.n_components,
            "islands": len(self.islands()),
            "inverse_degree_sum": float(
                np.sum(1.0 / self.degrees[self.degrees > 0])
            ),
        }


def connected_components(W) -> tuple[int, np.ndarray]:
    """Component count and labels, numbered by the first area they contain."""
    if isinstance(W, AdjacencyGraph):
        return W.n_components, W.components
    W = np.asarray(W)
    count, raw = _cc(csr_matrix(W), directed=False)
    relabel = {}
    labels = np.empty(len(raw), dtype=int)
    for i, lab in enumerate(raw):
        if lab not in relabel:
            relabel[lab] = len(relabel)
        labels[i] = relabel[lab]
    return int(count), labels


def from_matrix(W, area_ids=None, centroids=None) -> AdjacencyGraph:
    W = np.asarray(W, dtype=float)
    ids = tuple(area_ids) if area_ids is not None else tuple(
        str(i) for i in range(W.shape[0])
    )
    return AdjacencyGraph(area_ids=ids, W=W, centroids=centroids)


def from_edge_list(text: str) -> AdjacencyGraph:
    """Parse "idA,idB" lines. `ids:` lines declare the area order up front."""
    declared: list[str] = []
    edges: list[tuple[str, str, int]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.lower().startswith("ids:"):
            for token in line[4:].split(","):
                token = token.strip()
                if not token:
                    continue
                if token in declared:
                    raise ParseError(f"id {token!r} declared twice", lineno)
                declared.append(token)
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2 or not all(parts):
            raise ParseError(f"expected 'idA,idB', got {raw!r}", lineno)
        a, b = parts
        if a == b:
            raise ParseError(f"self-loop on {a!r}", lineno)
        edges.append((a, b, lineno))

    ids = list(declared)
    index = {a: i for i, a in enumerate(ids)}
    if not declared:
        for a, b, _ in edges:
            for x in (a, b):
                if x not in index:
                    index[x] = len(ids)
                    ids.append(x)
    if not ids:
        raise ParseError("edge list declares no areas")
    W = np.zeros((len(ids), len(ids)))
    for a, b, lineno in edges:
        for x in (a, b):
            if x not in index:
                raise ParseError(f"unknown id {x!r}", lineno)
        W[index[a], index[b]] = W[index[b], index[a]] = 1.0
    return AdjacencyGraph(area_ids=tuple(ids), W=W)


def load_features(geo) -> list[tuple[str, object]]:
    if isinstance(geo, (str, os.PathLike)):
        try:
            with open(geo, "r", encoding="utf-8") as f:
                geo = json.load(f)
        except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read polygons {geo}: {exc}")
    if geo.get("type") != "FeatureCollection":
        raise InputError("expected a GeoJSON FeatureCollection")
    out = []
    seen = set()
    for k, feature in enumerate(geo.get("features", [])):
        props = feature.get("properties") or {}
        if "id" not in props:
            raise InputError(f"feature {k} has no 'id' property")
        area_id = str(props["id"])
        if area_id in seen:
            raise InputError(f"duplicate polygon id {area_id!r}")
        seen.add(area_id)
        try:
            geom = shape(feature["geometry"])
        except Exception as exc:
            raise InputError(f"feature {area_id!r}: bad geometry ({exc})")
        if geom.is_empty or geom.geom_type not in ("Polygon", "MultiPolygon"):
            raise InputError(f"feature {area_id!r} is not a polygon")
        if not geom.is_valid:
            raise InputError(
                f"feature {area_id!r}: invalid geometry "
                f"({explain_validity(geom)})"
            )
        out.append((area_id, geom))
    if not out:
        raise InputError("polygon collection is empty")
    return out


def from_polygons(geo, rule: str = QUEEN) -> AdjacencyGraph:
    """Contiguity graph. Queen joins on any shared boundary point, rook
    only on a shared boundary segment."""
    if rule not in (QUEEN, ROOK):
        raise InputError(f"unknown contiguity rule {rule!r}")
    features = load_features(geo)
    ids = tuple(a for a, _ in features)
    geoms = [g for _, g in features]
    A = len(geoms)
    W = np.zeros((A, A))
    tree = STRtree(geoms)
    left, right = tree.query(geoms, predicate="intersects")
    for i, j in zip(left, right):
        if i >= j:
            continue
        if rule == ROOK and geoms[i].intersection(geoms[j]).length <= 0:
            continue
        W[i, j] = W[j, i] = 1.0
    centroids = np.array([[g.centroid.x, g.centroid.y] for g in geoms])
    return AdjacencyGraph(area_ids=ids, W=W, centroids=centroids)


def lattice_ids(rows: int, cols: int) -> tuple[str, ...]:
    return tuple(f"r{r}c{c}" for r in range(rows) for c in range(cols))


def lattice(rows: int, cols: int) -> AdjacencyGraph:
    if rows < 1 or cols < 1:
        raise InputError("lattice needs rows, cols >= 1")
    A = rows * cols
    W = np.zeros((A, A))
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                W[i, i + 1] = W[i + 1, i] = 1.0
            if r + 1 < rows:
                W[i, i + cols] = W[i + cols, i] = 1.0
    centroids = np.array(
        [[c, r] for r in range(rows) for c in range(cols)], dtype=float
    )
    return AdjacencyGraph(
        area_ids=lattice_ids(rows, cols), W=W, centroids=centroids
    )


def lattice_polygons(rows: int, cols: int, cell: float = 1.0,
                     origin: float | None = None) -> dict:
    """Square cells as GeoJSON. By default they are centred on the lattice()
    centroids; `origin` instead puts the lower-left corner there."""
    if origin is None:
        origin = -cell / 2
    features = []
    for area_id, (r, c) in zip(
        lattice_ids(rows, cols),
        ((r, c) for r in range(rows) for c in range(cols)),
    ):
        x, y = origin + c * cell, origin + r * cell
        sq = box(x, y, x + cell, y + cell)
        features.append(
            {
                "type": "Feature",
                "properties": {"id": area_id},
                "geometry": mapping(sq),
            }
        )
    return {"type": "FeatureCollection", "features": features}


def load_graph(source: str, rule: str = QUEEN) -> AdjacencyGraph:
    """Graph from a path (GeoJSON or edge list) or a `lattice:RxC` spec."""
    if source.startswith("lattice:"):
        try:
            r, c = (int(x) for x in source.split(":", 1)[1].lower().split("x"))
        except ValueError:
            raise InputError(f"bad lattice spec {source!r}, use lattice:RxC")
        return lattice(r, c)
    if not os.path.exists(source):
        raise InputError(f"graph file not found: {source}")
    if source.lower().endswith((".geojson", ".json")):
        g = from_polygons(source, rule=rule)
    else:
        try:
            with open(source, "r", encoding="utf-8") as f:
                text = f.read()
        except (OSError, UnicodeDecodeError) as exc:
            raise InputError(f"cannot read graph {source}: {exc}")
        g = from_edge_list(text)
    logger.info("loaded graph %s: %s", source, g.describe())
    return g
