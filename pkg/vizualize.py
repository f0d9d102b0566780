"""Static choropleth maps of area rates: SVG, plus a pygame PNG preview."""

import logging
import os
from dataclasses import dataclass
from html import escape

import numpy as np
import pandas as pd

from engine.templates.graph import load_features
from engine.utils.errors import InputError

logger = logging.getLogger(__name__)

WIDTH, HEIGHT = 800, 600
MARGIN = 20
LEGEND_WIDTH = 190
N_BINS = 7

# light to dark, one colour per bin
PALETTE = [
    (236, 231, 242),
    (208, 209, 230),
    (166, 189, 219),
    (116, 169, 207),
    (54, 144, 192),
    (5, 112, 176),
    (3, 78, 123),
]
MISSING_COLOR = (208, 208, 208)
BORDER_COLOR = (255, 255, 255)
BG_COLOR = (255, 255, 255)
TEXT_COLOR = (30, 30, 36)


def hex_colour(rgb) -> str:
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def _palette(k: int) -> list:
    if k == 1:
        return [PALETTE[len(PALETTE) // 2]]
    idx = np.round(np.linspace(0, len(PALETTE) - 1, k)).astype(int)
    return [PALETTE[i] for i in idx]


@dataclass(frozen=True)
class ColourBins:
    """Quantile classes. Repeated edges collapse, so equal values give a
    single bin."""

    edges: tuple[float, ...]
    colours: tuple

    @classmethod
    def from_values(cls, values, n_bins: int = N_BINS) -> "ColourBins":
        v = np.asarray(values, dtype=float)
        v = v[np.isfinite(v)]
        if v.size == 0:
            raise InputError("no finite values to classify")
        if n_bins < 1:
            raise InputError("need at least one colour bin")
        edges = np.unique(np.quantile(v, np.linspace(0, 1, n_bins + 1)))
        if len(edges) == 1:
            edges = np.array([edges[0], edges[0]])
        k = len(edges) - 1
        return cls(tuple(float(e) for e in edges), tuple(_palette(k)))

    @property
    def n_bins(self) -> int:
        return len(self.edges) - 1

    def index(self, values) -> np.ndarray:
        inner = np.asarray(self.edges[1:-1])
        return np.searchsorted(inner, np.asarray(values, dtype=float),
                               side="right")

    def colour_of(self, value):
        if value is None or not np.isfinite(value):
            return MISSING_COLOR
        return self.colours[int(self.index(value))]

    def labels(self, fmt: str = "{:.1f}") -> list[str]:
        return [
            f"{fmt.format(lo)} - {fmt.format(hi)}"
            for lo, hi in zip(self.edges[:-1], self.edges[1:])
        ]


def read_rates(path: str, column: str | None = None,
               scale: float | None = None) -> pd.Series:
    """Rates keyed by area id, on the display scale.

    `fit` writes `posterior_rate` already per 100,000; a raw `rate`
    column (as `simulate` writes it) is multiplied up unless `scale` says
    otherwise.
    """
    try:
        frame = pd.read_csv(path, dtype={"area_id": str})
    except (OSError, pd.errors.ParserError) as exc:
        raise InputError(f"cannot read {path}: {exc}")
    if "area_id" not in frame.columns:
        raise InputError(f"{path} needs an area_id column")
    if column is None:
        for candidate in ("posterior_rate", "rate", "crude_rate"):
            if candidate in frame.columns:
                column = candidate
                break
        else:
            raise InputError(f"{path} has no rate column")
    if column not in frame.columns:
        raise InputError(f"{path} has no column {column!r}")
    if scale is None:
        scale = 1e5 if column == "rate" else 1.0
    values = pd.to_numeric(frame[column], errors="coerce") * scale
    return pd.Series(values.to_numpy(), index=frame["area_id"].str.strip())


def join(features, rates: pd.Series) -> list[tuple[str, object, float]]:
    missing = [a for a, _ in features if a not in rates.index]
    if missing:
        raise InputError(
            f"{len(missing)} polygons have no rate: {missing[:10]}"
        )
    return [(a, g, float(rates[a])) for a, g in features]


class Projection:
    """Map coordinates to canvas pixels, y pointing down."""

    def __init__(self, geoms, width: float, height: float,
                 margin: float = MARGIN):
        xs0, ys0, xs1, ys1 = zip(*(g.bounds for g in geoms))
        self.minx, self.miny = min(xs0), min(ys0)
        self.maxx, self.maxy = max(xs1), max(ys1)
        span = max(self.maxx - self.minx, self.maxy - self.miny, 1e-12)
        self.k = min(width - 2 * margin, height - 2 * margin) / span
        self.margin = margin

    def __call__(self, x, y):
        px = self.margin + (x - self.minx) * self.k
        py = self.margin + (self.maxy - y) * self.k
        return round(px, 2), round(py, 2)


def _rings(geom):
    polys = geom.geoms if geom.geom_type == "MultiPolygon" else [geom]
    for poly in polys:
        yield poly.exterior.coords
        for hole in poly.interiors:
            yield hole.coords


def svg_path(geom, project: Projection, colour: str) -> str:
    parts = []
    for ring in _rings(geom):
        pts = [project(x, y) for x, y, *_ in ring]
        d = f"M{pts[0][0]},{pts[0][1]}"
        d += "".join(f"L{x},{y}" for x, y in pts[1:])
        parts.append(d + "z")
    return (
        f'<path fill="{colour}" fill-rule="evenodd" '
        f'stroke="{hex_colour(BORDER_COLOR)}" stroke-width="0.8" '
        f'd="{" ".join(parts)}"/>'
    )


def render_svg(joined, bins: ColourBins | None = None, title: str = "",
               labels: bool = True, width: int = WIDTH,
               height: int = HEIGHT) -> str:
    """One <path> per area, a legend of the bins, and rate labels."""
    if not joined:
        raise InputError("nothing to draw")
    values = [v for _, _, v in joined]
    bins = bins or ColourBins.from_values(values)
    map_w = width - LEGEND_WIDTH
    top = 30 if title else 0
    project = Projection([g for _, g, _ in joined], map_w, height - top)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="100%" height="100%" fill="{hex_colour(BG_COLOR)}"/>',
    ]
    if title:
        out.append(
            f'<text x="{MARGIN}" y="22" font-family="sans-serif" '
            f'font-size="16">{escape(title)}</text>'
        )
    out.append(f'<g id="areas" transform="translate(0,{top})">')
    for area_id, geom, value in joined:
        colour = hex_colour(bins.colour_of(value))
        out.append(
            svg_path(geom, project, colour).replace(
                "<path ", f'<path id="{escape(area_id, quote=True)}" ', 1
            )
        )
    out.append("</g>")
    if labels:
        out.append(
            f'<g id="labels" transform="translate(0,{top})" '
            'font-family="sans-serif" font-size="9" text-anchor="middle">'
        )
        for _, geom, value in joined:
            p = geom.representative_point()
            x, y = project(p.x, p.y)
            text = "NA" if not np.isfinite(value) else f"{value:.1f}"
            out.append(f'<text x="{x}" y="{y}">{text}</text>')
        out.append("</g>")
    out.append(_legend(bins, map_w, top))
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _legend(bins: ColourBins, x0: float, top: float) -> str:
    out = [
        f'<g id="legend" font-family="sans-serif" font-size="11" '
        f'transform="translate({x0 + 10},{top + MARGIN})">',
        '<text x="0" y="0">per 100,000</text>',
    ]
    for k, (colour, label) in enumerate(zip(bins.colours, bins.labels())):
        y = 12 + 20 * k
        out.append(
            f'<rect x="0" y="{y}" width="16" height="14" '
            f'fill="{hex_colour(colour)}" stroke="#888888"/>'
        )
        out.append(f'<text x="22" y="{y + 11}">{label}</text>')
    out.append("</g>")
    return "\n".join(out)


def write_map(polygons, rates: pd.Series, out_path: str, title: str = "",
              n_bins: int = N_BINS, labels: bool = True) -> ColourBins:
    joined = join(load_features(polygons), rates)
    bins = ColourBins.from_values([v for _, _, v in joined], n_bins)
    parent = os.path.dirname(out_path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as f:
        f.write(render_svg(joined, bins, title=title, labels=labels))
    logger.info("wrote %s (%d areas, %d bins)", out_path, len(joined),
                bins.n_bins)
    return bins


def render_png(joined, out_path: str, bins: ColourBins | None = None,
               width: int = WIDTH, height: int = HEIGHT) -> ColourBins:
    """Raster preview drawn on an off-screen pygame surface."""
    import pygame

    bins = bins or ColourBins.from_values([v for _, _, v in joined])
    map_w = width - LEGEND_WIDTH
    project = Projection([g for _, g, _ in joined], map_w, height)
    surface = pygame.Surface((width, height))
    surface.fill(BG_COLOR)
    for _, geom, value in joined:
        polys = geom.geoms if geom.geom_type == "MultiPolygon" else [geom]
        for poly in polys:
            pts = [project(x, y) for x, y, *_ in poly.exterior.coords]
            pygame.draw.polygon(surface, bins.colour_of(value), pts)
            pygame.draw.polygon(surface, BORDER_COLOR, pts, 1)
            for hole in poly.interiors:
                pygame.draw.polygon(
                    surface, BG_COLOR, [project(x, y) for x, y, *_ in hole.coords]
                )
    pygame.font.init()
    font = pygame.font.Font(None, 18)
    for k, (colour, label) in enumerate(zip(bins.colours, bins.labels())):
        rect = pygame.Rect(map_w + 10, MARGIN + 20 * k, 16, 14)
        pygame.draw.rect(surface, colour, rect)
        surface.blit(font.render(label, True, TEXT_COLOR),
                     (rect.right + 6, rect.top))
    pygame.image.save(surface, out_path)
    logger.info("wrote %s", out_path)
    return bins
