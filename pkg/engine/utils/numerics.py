"""Dense symmetric linear algebra and special functions.

Everything here is a pure function of its inputs. Matrices are plain
``numpy`` arrays; the largest problem in scope has a few hundred areas, so
nothing is sparse.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist
from scipy.special import gammaln, kv, kve

from engine.utils.errors import InputError, NumericalError, RangeError

logger = logging.getLogger(__name__)

PINV_REL_TOL = 1e-10
MAX_JITTER_ATTEMPTS = 3


@dataclass(frozen=True)
class EigenSystem:
    values: np.ndarray
    vectors: np.ndarray

    @property
    def order(self) -> int:
        return len(self.values)

    def rank(self, rel_tol: float = PINV_REL_TOL) -> int:
        return int(np.sum(self.values > rel_tol * _scale(self.values)))

    def reconstruct(self) -> np.ndarray:
        return (self.vectors * self.values) @ self.vectors.T


def _scale(values: np.ndarray) -> float:
    top = float(np.max(np.abs(values))) if len(values) else 0.0
    return top if top > 0 else 1.0


def as_sym_matrix(S, name: str = "matrix") -> np.ndarray:
    S = np.array(S, dtype=float, ndmin=2)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise InputError(f"{name} must be square, got shape {S.shape}")
    if not np.all(np.isfinite(S)):
        raise InputError(f"{name} has non-finite entries")
    if not np.array_equal(S, S.T):
        if not np.allclose(S, S.T, rtol=1e-12, atol=1e-14):
            raise InputError(f"{name} is not symmetric")
        S = 0.5 * (S + S.T)
    return S


def pairwise_distances(points) -> np.ndarray:
    pts = np.array(points, dtype=float, ndmin=2)
    if pts.shape[0] < 1 or pts.shape[1] != 2:
        raise InputError("expected at least one planar (x, y) coordinate")
    if not np.all(np.isfinite(pts)):
        raise InputError("non-finite coordinate")
    d = cdist(pts, pts)
    np.fill_diagonal(d, 0.0)
    return d


def sym_eigen(S) -> EigenSystem:
    S = as_sym_matrix(S)
    try:
        values, vectors = np.linalg.eigh(S)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition did not converge: {exc}")
    return EigenSystem(values=values, vectors=vectors)


def pseudo_inverse(S, rel_tol: float = PINV_REL_TOL) -> np.ndarray:
    """Moore-Penrose inverse of a symmetric PSD matrix via its eigensystem."""
    if not 0 < rel_tol < 1:
        raise InputError("rel_tol must lie in (0, 1)")
    eig = sym_eigen(S)
    return pseudo_inverse_from(eig, rel_tol)


def pseudo_inverse_from(eig: EigenSystem, rel_tol: float = PINV_REL_TOL):
    cutoff = rel_tol * _scale(eig.values)
    if np.any(eig.values < -cutoff):
        raise InputError(
            f"matrix is not PSD (min eigenvalue {eig.values.min():.3e})"
        )
    inv = np.zeros_like(eig.values)
    keep = eig.values > cutoff
    inv[keep] = 1.0 / eig.values[keep]
    out = (eig.vectors * inv) @ eig.vectors.T
    return 0.5 * (out + out.T)


def cholesky_psd(S, jitter: float = 0.0) -> np.ndarray:
    """Lower Cholesky factor, adding diagonal jitter only if plain fails.

    The jitter grows tenfold per attempt. A zero jitter starts from a tiny
    multiple of the mean diagonal.
    """
    S = as_sym_matrix(S)
    try:
        return linalg.cholesky(S, lower=True)
    except linalg.LinAlgError:
        pass
    if jitter < 0:
        raise InputError("jitter must be >= 0")
    step = jitter or 1e-10 * max(float(np.mean(np.diag(S))), 1.0)
    eye = np.eye(S.shape[0])
    for _ in range(MAX_JITTER_ATTEMPTS):
        try:
            L = linalg.cholesky(S + step * eye, lower=True)
        except linalg.LinAlgError:
            step *= 10.0
            continue
        logger.warning("cholesky needed diagonal jitter %.3e", step)
        return L
    raise NumericalError(
        f"cholesky failed after {MAX_JITTER_ATTEMPTS} jitter attempts "
        f"(final jitter {step / 10.0:.3e})"
    )


def bessel_k(v: float, x):
    """Modified Bessel function of the second kind, K_v(x)."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise InputError("bessel_k requires x > 0")
    out = kv(v, x)
    if np.any(~np.isfinite(out)):
        raise RangeError(f"K_{v} overflows at x={x.min():.3e}")
    return out if out.ndim else float(out)


def matern(d, v: float, phi: float):
    """Matern correlation with smoothness v and decay phi; 1 at d = 0."""
    if v <= 0 or phi <= 0:
        raise InputError("matern needs v > 0 and phi > 0")
    d = np.asarray(d, dtype=float)
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise InputError("distances must be finite and >= 0")
    x = np.atleast_1d(d * phi)
    out = np.ones_like(x)
    pos = x > 0
    xp = x[pos]
    with np.errstate(divide="ignore", under="ignore"):
        log_val = (
            v * np.log(xp)
            + np.log(kve(v, xp))
            - xp
            - (v - 1.0) * np.log(2.0)
            - gammaln(v)
        )
    out[pos] = np.minimum(np.exp(log_val), 1.0)
    return out.reshape(d.shape) if d.ndim else float(out[0])


def sample_mvn(mean, cov_factor, rng: np.random.Generator) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    L = np.asarray(cov_factor, dtype=float)
    if L.ndim != 2 or L.shape != (len(mean), len(mean)):
        raise InputError(
            f"factor shape {L.shape} does not match mean length {len(mean)}"
        )
    return mean + L @ rng.standard_normal(len(mean))
