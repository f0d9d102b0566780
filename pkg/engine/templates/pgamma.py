"""Poisson-Gamma baseline with a closed-form posterior.

With eta_i ~ Gamma(a, b) on the relative-risk scale and O_i ~ Poisson(E_i
eta_i) the posterior is Gamma(a + O_i, b + E_i), so how far each rate is
pulled towards the prior mean is known exactly. The curve study below uses
this to trace smoothing as the prior variance shrinks, without any MCMC.
"""

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import stats

from engine.templates import metrics
from engine.utils.errors import InputError

logger = logging.getLogger(__name__)

CURVE_METRICS = ("mss", "rmss", "max_mss", "max_rmss")
QUANTILES = (0.05, 0.25, 0.50, 0.75, 0.95)
CURVE_COLUMNS = [
    "mu_eta", "sigma2_eta", "metric",
    "q05", "q25", "q50", "q75", "q95", "mean",
    "reference_at_zero", "theory_at_zero",
]


@dataclass(frozen=True)
class GammaPrior:
    mu: float
    sigma2: float

    def __post_init__(self):
        if self.mu <= 0:
            raise InputError("gamma prior mean must be > 0")
        if self.sigma2 < 0:
            raise InputError("gamma prior variance must be >= 0")

    @property
    def degenerate(self) -> bool:
        return self.sigma2 == 0

    @property
    def a(self) -> float:
        return self.mu**2 / self.sigma2

    @property
    def b(self) -> float:
        return self.mu / self.sigma2

    def sample(self, rng, size) -> np.ndarray:
        if self.degenerate:
            return np.full(size, self.mu)
        return rng.gamma(self.a, 1.0 / self.b, size=size)

    def quantile(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.degenerate:
            return np.full(u.shape, self.mu)
        return stats.gamma.ppf(u, self.a, scale=1.0 / self.b)


@dataclass(frozen=True)
class GammaPosterior:
    a: float | np.ndarray
    b: float | np.ndarray

    @property
    def mean(self):
        return self.a / self.b

    @property
    def variance(self):
        return self.a / self.b**2


def internal_expected_counts(O, n) -> np.ndarray:
    O = np.asarray(O, dtype=float)
    n = np.asarray(n, dtype=float)
    if O.shape != n.shape:
        raise InputError("counts and populations differ in length")
    if np.any(n <= 0):
        raise InputError("populations must be > 0")
    if np.any(O < 0):
        raise InputError("counts must be >= 0")
    total = n.sum()
    if total <= 0:
        raise InputError("total population is zero")
    return n * (O.sum() / total)


def pg_posterior(prior: GammaPrior, O, E) -> GammaPosterior:
    if prior.degenerate:
        raise InputError("posterior needs a prior variance > 0")
    return GammaPosterior(
        a=prior.a + np.asarray(O, dtype=float),
        b=prior.b + np.asarray(E, dtype=float),
    )


def pg_weight(mu_r, sigma2_r, n_i):
    """Weight on the crude rate, n_i / (mu_r / sigma2_r + n_i).

    A zero prior variance gives weight 0, i.e. full smoothing to mu_r.
    """
    mu_r, sigma2_r, n_i = np.broadcast_arrays(
        np.asarray(mu_r, dtype=float),
        np.asarray(sigma2_r, dtype=float),
        np.asarray(n_i, dtype=float),
    )
    out = np.zeros(mu_r.shape)
    pos = sigma2_r > 0
    out[pos] = n_i[pos] / (mu_r[pos] / sigma2_r[pos] + n_i[pos])
    return out if out.ndim else float(out)


def pg_discrepancy(mu_r, sigma2_r, n_i, rhat_i):
    """Posterior mean rate minus crude rate."""
    mu_r = np.asarray(mu_r, dtype=float)
    sigma2_r = np.asarray(sigma2_r, dtype=float)
    n_i = np.asarray(n_i, dtype=float)
    rhat_i = np.asarray(rhat_i, dtype=float)
    out = mu_r * (mu_r - rhat_i) / (sigma2_r * n_i + mu_r)
    return out if np.ndim(out) else float(out)


def pg_reference_lines(n, mu_r: float, scale: float = 1.0) -> dict:
    """Expected MSS and RMSS at sigma2_r = 0 when O_i ~ Poisson(n_i mu_r)."""
    inv_n = float(np.sum(1.0 / np.asarray(n, dtype=float)))
    return {
        "mss": scale**2 * mu_r * inv_n,
        "rmss": scale * inv_n,
    }


def _replicate_metrics(post_mean, crude, scale) -> dict:
    return {
        "mss": metrics.mss(post_mean, crude, scale),
        "rmss": metrics.rmss(post_mean, crude, scale),
        "max_mss": metrics.max_mss(post_mean, crude, scale),
        "max_rmss": metrics.max_rmss(post_mean, crude, scale),
    }


def pg_curve_study(
    E,
    mu_eta_grid,
    sigma2_eta_grid,
    B: int,
    rng: np.random.Generator,
    rbar: float = 1.0,
    rate_scale: float = 1.0,
) -> pd.DataFrame:
    """Boxplot quantiles of the smoothing metrics over B replicates.

    For each (mu_eta, sigma2_eta) cell, eta_i ~ Gamma and O_i ~ Poisson(E_i
    eta_i); rates are on the scale r = rbar * eta with n_i = E_i / rbar.
    Every cell reuses the same per-replicate uniforms through inverse CDFs,
    so the curves move smoothly across the grids. `reference_at_zero` is the
    median metric at sigma2_eta = 0 on those same replicates;
    `theory_at_zero` is the closed-form expected MSS or RMSS there (no closed
    form exists for the maxima, so it is nan for them).
    """
    E = np.asarray(E, dtype=float)
    if E.ndim != 1 or E.size == 0 or np.any(E <= 0):
        raise InputError("expected counts must be a nonempty positive vector")
    mu_grid = [float(m) for m in mu_eta_grid]
    s2_grid = sorted(float(s) for s in sigma2_eta_grid)
    if not mu_grid or not s2_grid:
        raise InputError("grids must be nonempty")
    if B < 1:
        raise InputError("B must be >= 1")
    n = E / rbar
    A = len(E)
    U = np.empty((B, A))
    V = np.empty((B, A))
    for b, seq in enumerate(
        np.random.SeedSequence(int(rng.integers(2**63))).spawn(B)
    ):
        eta_seq, o_seq = seq.spawn(2)
        U[b] = np.random.default_rng(eta_seq).random(A)
        V[b] = np.random.default_rng(o_seq).random(A)
    U = np.clip(U, 1e-12, 1 - 1e-12)
    V = np.clip(V, 1e-12, 1 - 1e-12)

    def metrics_for(prior: GammaPrior, post_of) -> dict:
        out = {m: [] for m in CURVE_METRICS}
        for b in range(B):
            eta = prior.quantile(U[b])
            lam = E * eta
            # a very diffuse gamma can underflow eta to 0
            O = np.where(
                lam > 0, stats.poisson.ppf(V[b], np.maximum(lam, 1e-300)), 0.0
            )
            crude = O / n
            for m, v in _replicate_metrics(
                post_of(crude), crude, rate_scale
            ).items():
                out[m].append(v)
        return out

    rows = []
    for mu in mu_grid:
        mu_r = rbar * mu
        theory = pg_reference_lines(n, mu_r, rate_scale)
        reference = metrics_for(
            GammaPrior(mu, 0.0), lambda crude: np.full(A, mu_r)
        )
        for s2 in s2_grid:
            s2_r = rbar**2 * s2
            cell = metrics_for(
                GammaPrior(mu, s2),
                lambda crude: crude + pg_discrepancy(mu_r, s2_r, n, crude),
            )
            for m in CURVE_METRICS:
                q = np.quantile(cell[m], QUANTILES)
                rows.append([
                    mu, s2, m, *q, float(np.mean(cell[m])),
                    float(np.median(reference[m])),
                    theory.get(m, float("nan")),
                ])
        logger.info("pg curve mu_eta=%g done (%d replicates)", mu, B)
    return pd.DataFrame(rows, columns=CURVE_COLUMNS)


def reference_table(n, mu_r_values, scale: float = 1.0) -> pd.DataFrame:
    rows = []
    for mu_r in mu_r_values:
        lines = pg_reference_lines(n, mu_r, scale)
        rows.append({"mu_r": mu_r, **lines})
    return pd.DataFrame(rows)


def crude_posterior_check(prior: GammaPrior, O, E, rbar: float) -> np.ndarray:
    """(posterior mean - crude) on the rate scale, through pg_posterior."""
    post = pg_posterior(prior, O, E)
    n = np.asarray(E, dtype=float) / rbar
    return rbar * post.mean - np.asarray(O, dtype=float) / n
