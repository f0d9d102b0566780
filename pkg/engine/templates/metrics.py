import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from engine.utils.errors import InputError

logger = logging.getLogger(__name__)

RATE_SCALE = 1e5
METRIC_NAMES = ("mss", "rmss", "max_mss", "max_rmss", "sp")


def _pair(post_means, crude):
    post = np.asarray(post_means, dtype=float)
    crude = np.asarray(crude, dtype=float)
    if post.shape != crude.shape or post.ndim != 1:
        raise InputError(
            f"posterior means ({post.shape}) and crude rates "
            f"({crude.shape}) must be vectors of equal length"
        )
    return post, crude


def squared_discrepancies(post_means, crude, scale=RATE_SCALE) -> np.ndarray:
    post, crude = _pair(post_means, crude)
    return ((post - crude) * scale) ** 2


def relative_discrepancies(post_means, crude, scale=RATE_SCALE):
    post, crude = _pair(post_means, crude)
    if np.any(post <= 0):
        raise InputError("relative smoothness needs positive posterior means")
    return ((post - crude) * scale) ** 2 / (post * scale)


def mss(post_means, crude, scale=RATE_SCALE) -> float:
    return float(np.sum(squared_discrepancies(post_means, crude, scale)))


def rmss(post_means, crude, scale=RATE_SCALE) -> float:
    return float(np.sum(relative_discrepancies(post_means, crude, scale)))


def max_mss(post_means, crude, scale=RATE_SCALE) -> float:
    return float(np.max(squared_discrepancies(post_means, crude, scale)))


def max_rmss(post_means, crude, scale=RATE_SCALE) -> float:
    return float(np.max(relative_discrepancies(post_means, crude, scale)))


def smoothing_proportion(post_means, crude, weights=None) -> float:
    """MSS over its shrink-to-the-mean maximum.

    The reference mean is the plain mean of the crude rates, or the
    weighted mean when `weights` (populations) are given.
    """
    post, crude = _pair(post_means, crude)
    rbar = np.average(crude, weights=weights)
    denom = float(np.sum((rbar - crude) ** 2))
    if denom <= 0:
        raise InputError("smoothing proportion undefined: crude rates all equal")
    return float(np.sum((post - crude) ** 2)) / denom


@dataclass
class SmoothingReport:
    mss: float
    rmss: float
    max_mss: float
    max_rmss: float
    sp: float
    rate_scale: float = RATE_SCALE
    per_area_discrepancies: np.ndarray = field(
        default_factory=lambda: np.zeros(0), repr=False
    )

    def as_row(self) -> dict:
        row = asdict(self)
        row.pop("per_area_discrepancies")
        return row


def report(post_means, crude, scale=RATE_SCALE, weights=None):
    post, crude = _pair(post_means, crude)
    sq = squared_discrepancies(post, crude, scale)
    rel = relative_discrepancies(post, crude, scale)
    return SmoothingReport(
        mss=float(sq.sum()),
        rmss=float(rel.sum()),
        max_mss=float(sq.max()),
        max_rmss=float(rel.max()),
        sp=smoothing_proportion(post, crude, weights),
        rate_scale=scale,
        per_area_discrepancies=(post - crude) * scale,
    )


def expected_metrics(reports: list[SmoothingReport]) -> SmoothingReport:
    if not reports:
        raise InputError("expected_metrics needs at least one report")
    scales = {r.rate_scale for r in reports}
    if len(scales) != 1:
        raise InputError("reports use different rate scales")
    means = {m: float(np.mean([getattr(r, m) for r in reports]))
             for m in METRIC_NAMES}
    per_area = np.mean(
        np.vstack([r.per_area_discrepancies for r in reports]), axis=0
    )
    return SmoothingReport(
        **means, rate_scale=scales.pop(), per_area_discrepancies=per_area
    )


def sp_interval(reports: list[SmoothingReport], level: float = 0.90):
    """Monte-Carlo interval for the mean SP over replicates."""
    sp = np.array([r.sp for r in reports])
    if len(sp) < 2:
        return float(sp.mean()), float(sp.mean())
    half = stats.t.ppf(0.5 + level / 2, len(sp) - 1) * sp.std(ddof=1)
    half /= np.sqrt(len(sp))
    return float(sp.mean() - half), float(sp.mean() + half)


def standard_error(reports: list[SmoothingReport], name: str) -> float:
    values = np.array([getattr(r, name) for r in reports])
    if len(values) < 2:
        return 0.0
    return float(values.std(ddof=1) / np.sqrt(len(values)))
