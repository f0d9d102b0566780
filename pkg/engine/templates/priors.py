"""Structure matrices, conditional variances and TCV for the seven priors.

All structures are sigma2-free: the prior covariance of the area effects is
sigma2 times the (generalised) inverse of the structure matrix.
"""

import logging
import math
from dataclasses import asdict, dataclass, replace
from enum import StrEnum

import numpy as np
from scipy import linalg

from engine.templates.graph import AdjacencyGraph
from engine.utils.errors import InputError, NumericalError
from engine.utils.numerics import (
    PINV_REL_TOL,
    cholesky_psd,
    pseudo_inverse_from,
    sample_mvn,
)

logger = logging.getLogger(__name__)


class PriorKind(StrEnum):
    IID = "iid"
    GP = "gp"
    ICAR = "icar"
    BYM = "bym"
    PCAR = "pcar"
    LCAR = "lcar"
    BYM2 = "bym2"


PARAMETERS = {
    PriorKind.IID: ("sigma2",),
    PriorKind.GP: ("sigma2", "psi"),
    PriorKind.ICAR: ("sigma2",),
    PriorKind.BYM: ("sigma2", "nu"),
    PriorKind.PCAR: ("sigma2", "eta"),
    PriorKind.LCAR: ("sigma2", "lam"),
    PriorKind.BYM2: ("sigma2", "lam"),
}

CAR_KINDS = {
    PriorKind.ICAR,
    PriorKind.BYM,
    PriorKind.PCAR,
    PriorKind.LCAR,
    PriorKind.BYM2,
}
CLOSED_FORM_KINDS = {
    PriorKind.IID,
    PriorKind.ICAR,
    PriorKind.PCAR,
    PriorKind.LCAR,
}

# command-line spelling -> field name
PARAM_ALIASES = {"lambda": "lam", "lam": "lam", "sigma2": "sigma2",
                 "nu": "nu", "eta": "eta", "psi": "psi"}


def allowed_parameters() -> str:
    return "; ".join(
        f"{k.value}: " + ", ".join(
            "lambda" if p == "lam" else p for p in params
        )
        for k, params in PARAMETERS.items()
    )


@dataclass(frozen=True)
class PriorSpec:
    kind: PriorKind
    sigma2: float
    nu: float | None = None
    eta: float | None = None
    lam: float | None = None
    psi: float | None = None

    def __post_init__(self):
        try:
            kind = PriorKind(str(self.kind).lower())
        except ValueError:
            raise InputError(
                f"unknown prior {self.kind!r}; choose from "
                + ", ".join(k.value for k in PriorKind)
            )
        object.__setattr__(self, "kind", kind)
        wanted = PARAMETERS[kind]
        for name in ("sigma2", "nu", "eta", "lam", "psi"):
            value = getattr(self, name)
            if name in wanted and value is None:
                raise InputError(f"{kind.value} prior needs {name}")
            if name not in wanted and value is not None:
                raise InputError(
                    f"{kind.value} prior does not take {name}; "
                    f"allowed: {allowed_parameters()}"
                )
            if value is not None:
                value = float(value)
                if not math.isfinite(value):
                    raise InputError(f"{name} must be finite")
                object.__setattr__(self, name, value)
        if self.sigma2 <= 0:
            raise InputError("sigma2 must be > 0")
        if self.nu is not None and self.nu < 0:
            raise InputError("nu must be >= 0")
        if self.lam is not None and not 0 <= self.lam <= 1:
            raise InputError("lambda must lie in [0, 1]")
        if self.psi is not None and self.psi <= 0:
            raise InputError("psi must be > 0")

    @classmethod
    def from_params(cls, kind, params: dict) -> "PriorSpec":
        fields = {}
        for key, value in params.items():
            if key not in PARAM_ALIASES:
                raise InputError(f"unknown prior parameter {key!r}")
            fields[PARAM_ALIASES[key]] = value
        return cls(kind=kind, **fields)

    def params(self) -> dict:
        return {
            k: v for k, v in asdict(self).items()
            if k != "kind" and v is not None
        }

    def with_sigma2(self, sigma2: float) -> "PriorSpec":
        return replace(self, sigma2=sigma2)

    def label(self) -> str:
        parts = [f"{k}={v:g}" for k, v in self.params().items()]
        return f"{self.kind.value}(" + ", ".join(parts) + ")"


@dataclass(frozen=True)
class StructureResult:
    # None for BYM/BYM2: their precision is only defined through `mixture`
    Q: np.ndarray | None
    mixture: np.ndarray | None
    singular: bool
    rank: int


def _check_graph(spec: PriorSpec, g: AdjacencyGraph):
    if spec.kind in CAR_KINDS:
        g.require_neighbors(f"{spec.kind.value} prior")
    if spec.kind == PriorKind.GP:
        g.require_centroids("gp prior")


def exponential_correlation(g: AdjacencyGraph, psi: float) -> np.ndarray:
    d = g.distances()
    off = d[~np.eye(g.order, dtype=bool)]
    if off.size and off.min() <= 0:
        raise InputError("gp prior: duplicate centroids make R singular")
    return np.exp(-d / psi)


def gp_precision(g: AdjacencyGraph, psi: float) -> np.ndarray:
    R = exponential_correlation(g, psi)
    try:
        cf = linalg.cho_factor(R, lower=True)
    except linalg.LinAlgError:
        raise NumericalError(f"gp correlation matrix singular at psi={psi}")
    Q = linalg.cho_solve(cf, np.eye(g.order))
    return 0.5 * (Q + Q.T)


def scale_factor(g: AdjacencyGraph) -> float:
    """Geometric mean of the diagonal of the pseudoinverse of D - W."""
    g.require_neighbors("icar scaling")
    eig = g.spectrum
    pinv_vals = _pinv_values(eig.values)
    diag = (eig.vectors**2) @ pinv_vals
    return float(np.exp(np.mean(np.log(diag))))


def scale_icar(g: AdjacencyGraph) -> np.ndarray:
    return scale_factor(g) * g.laplacian()


def _pinv_values(values: np.ndarray) -> np.ndarray:
    cutoff = PINV_REL_TOL * max(float(np.max(np.abs(values))), 1.0)
    out = np.zeros_like(values)
    keep = values > cutoff
    out[keep] = 1.0 / values[keep]
    return out


def pcar_eta_bounds(g: AdjacencyGraph) -> tuple[float, float]:
    g.require_neighbors("pcar bounds")
    s = 1.0 / np.sqrt(g.degrees)
    eps = np.linalg.eigvalsh(s[:, None] * g.W * s[None, :])
    if abs(eps[-1] - 1.0) > 1e-8:
        raise NumericalError(
            f"largest normalised adjacency eigenvalue is {eps[-1]}, not 1"
        )
    return 1.0 / eps[0], 1.0 / eps[-1]


def _check_eta(spec: PriorSpec, g: AdjacencyGraph):
    lo, hi = pcar_eta_bounds(g)
    if lo < spec.eta < hi:
        return
    if -1.0 < spec.eta < 1.0:
        logger.warning(
            "pcar eta=%g outside proper range (%.4f, %.4f)", spec.eta, lo, hi
        )
        return
    raise InputError(
        f"pcar eta={spec.eta} outside both ({lo:.4f}, {hi:.4f}) and (-1, 1)"
    )


def structure(spec: PriorSpec, g: AdjacencyGraph) -> StructureResult:
    _check_graph(spec, g)
    A = g.order
    k = spec.kind
    null_rank = A - g.n_components
    if k == PriorKind.IID:
        return StructureResult(np.eye(A), None, False, A)
    if k == PriorKind.ICAR:
        return StructureResult(g.laplacian(), None, True, null_rank)
    if k == PriorKind.PCAR:
        _check_eta(spec, g)
        Q = np.diag(g.degrees) - spec.eta * g.W
        return StructureResult(Q, None, False, A)
    if k == PriorKind.LCAR:
        Q = spec.lam * g.laplacian() + (1.0 - spec.lam) * np.eye(A)
        singular = spec.lam == 1.0
        return StructureResult(Q, None, singular, null_rank if singular else A)
    if k == PriorKind.GP:
        return StructureResult(gp_precision(g, spec.psi), None, False, A)
    if k == PriorKind.BYM:
        pinv = pseudo_inverse_from(g.spectrum)
        mixture = pinv + spec.nu * np.eye(A)
        singular = spec.nu == 0.0
        return StructureResult(None, mixture, singular,
                               null_rank if singular else A)
    # BYM2
    pinv = pseudo_inverse_from(g.spectrum) / scale_factor(g)
    mixture = spec.lam * pinv + (1.0 - spec.lam) * np.eye(A)
    singular = spec.lam == 1.0
    return StructureResult(None, mixture, singular,
                           null_rank if singular else A)


def _mixture_inverse_diagonal(g: AdjacencyGraph, weight: float, shift: float,
                              scale: float = 1.0) -> np.ndarray:
    # mixture = weight * pinv(scale * (D - W)) + shift * I, sharing the
    # eigenvectors of D - W
    eig = g.spectrum
    m_vals = weight * _pinv_values(eig.values) / scale + shift
    inv = np.zeros_like(m_vals)
    keep = m_vals > PINV_REL_TOL * max(float(m_vals.max()), 1.0)
    inv[keep] = 1.0 / m_vals[keep]
    return (eig.vectors**2) @ inv


def conditional_variances(spec: PriorSpec, g: AdjacencyGraph) -> np.ndarray:
    """var(r_i | rest) for every area."""
    _check_graph(spec, g)
    k = spec.kind
    if k == PriorKind.BYM:
        diag = _mixture_inverse_diagonal(g, 1.0, spec.nu)
    elif k == PriorKind.BYM2:
        diag = _mixture_inverse_diagonal(
            g, spec.lam, 1.0 - spec.lam, scale_factor(g)
        )
    else:
        diag = np.diag(structure(spec, g).Q).copy()
    if np.any(diag <= 0):
        raise NumericalError(f"{k.value}: non-positive precision diagonal")
    return spec.sigma2 / diag


def tcv_closed_form(spec: PriorSpec, g: AdjacencyGraph) -> float:
    k = spec.kind
    if k not in CLOSED_FORM_KINDS:
        raise InputError(f"no closed-form TCV for {k.value}")
    _check_graph(spec, g)
    if k == PriorKind.IID:
        return spec.sigma2 * g.order
    if k == PriorKind.LCAR:
        return float(
            spec.sigma2 * np.sum(1.0 / (spec.lam * (g.degrees - 1.0) + 1.0))
        )
    if k == PriorKind.PCAR:
        _check_eta(spec, g)
    return float(spec.sigma2 * np.sum(1.0 / g.degrees))


def tcv(spec: PriorSpec, g: AdjacencyGraph) -> float:
    """Total conditional variance: the sum of conditional variances."""
    if spec.kind in CLOSED_FORM_KINDS:
        return tcv_closed_form(spec, g)
    return float(np.sum(conditional_variances(spec, g)))


def tcv_matrix(spec: PriorSpec, g: AdjacencyGraph) -> float:
    return float(np.sum(conditional_variances(spec, g)))


def _icar_draw(g: AdjacencyGraph, variance: float, rng) -> np.ndarray:
    # on the non-null eigenspace, so each component sums to zero
    eig = g.spectrum
    pinv_vals = _pinv_values(eig.values)
    z = rng.standard_normal(g.order)
    return eig.vectors @ (np.sqrt(variance * pinv_vals) * z)


def sample_effects(spec: PriorSpec, g: AdjacencyGraph, rng) -> np.ndarray:
    """One draw of the area effects kappa from the prior."""
    _check_graph(spec, g)
    k = spec.kind
    A = g.order
    sd = math.sqrt(spec.sigma2)
    if k == PriorKind.IID:
        return sd * rng.standard_normal(A)
    if k == PriorKind.ICAR or (k == PriorKind.LCAR and spec.lam == 1.0):
        return _icar_draw(g, spec.sigma2, rng)
    if k == PriorKind.BYM:
        u = _icar_draw(g, spec.sigma2, rng)
        return u + sd * math.sqrt(spec.nu) * rng.standard_normal(A)
    if k == PriorKind.BYM2:
        u = _icar_draw(g, 1.0 / scale_factor(g), rng)
        v = rng.standard_normal(A)
        return sd * (math.sqrt(spec.lam) * u + math.sqrt(1.0 - spec.lam) * v)
    if k == PriorKind.GP:
        L = cholesky_psd(exponential_correlation(g, spec.psi))
        return sample_mvn(np.zeros(A), sd * L, rng)
    # proper CARs: x = L^-T z has covariance Q^-1
    Q = structure(spec, g).Q
    try:
        L = linalg.cholesky(Q, lower=True)
    except linalg.LinAlgError:
        raise NumericalError(f"{spec.label()}: precision not positive definite")
    x = linalg.solve_triangular(L, rng.standard_normal(A), lower=True,
                                trans="T")
    return sd * x
