"""Metropolis-within-Gibbs for the Poisson-logit model.

O_i ~ Poisson(n_i r_i) with logit(r_i) = alpha + kappa_i, and kappa drawn
from one of the seven spatial priors. Every scalar (alpha, each area effect,
each hyperparameter) gets its own random-walk proposal whose scale adapts
towards a target acceptance rate during burn-in and is frozen afterwards.

Area effects that are conditionally independent under the prior (one colour
class of the neighbour graph) are proposed and accepted together; this is
the same kernel as visiting them one by one.
"""

import configparser
import logging
import math
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import pandas as pd
from scipy import linalg

from engine.templates import priors
from engine.templates.graph import AdjacencyGraph
from engine.templates.priors import PriorKind, PriorSpec
from engine.utils.errors import InputError, NumericalError
from engine.utils.helper import (
    LOGIT_BOUND,
    expit,
    log1m_expit,
    log_expit,
    logit,
    worker_count,
)

logger = logging.getLogger(__name__)

GP_CACHE_SIZE = 64
GP_PSI_DECIMALS = 4
ADAPT_EXPONENT = 0.6
MIN_SAVED_DRAWS = 100


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def __post_init__(self):
        if not (math.isfinite(self.low) and math.isfinite(self.high)):
            raise InputError("uniform bounds must be finite")
        if not self.low < self.high:
            raise InputError(f"uniform needs low < high, got {self}")

    @property
    def width(self) -> float:
        return self.high - self.low

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.low + self.high)

    def contains(self, x) -> bool:
        return bool(np.all((x >= self.low) & (x <= self.high)))

    def __str__(self):
        return f"U({self.low:g},{self.high:g})"


_UNIFORM = re.compile(
    r"(\w+)\s*=\s*U\(\s*([-+0-9.eE]+)\s*,\s*([-+0-9.eE]+)\s*\)"
)
_FIXED = re.compile(r"(\w+)\s*=\s*([-+0-9.eE]+)\s*$")


@dataclass(frozen=True)
class HyperPriors:
    """Uniform hyperpriors. `sigma` and `tau` are placed on the standard
    deviation or on the variance depending on their `*_scale`."""

    sigma: Uniform = Uniform(0.0, 10.0)
    sigma_scale: str = "sd"
    tau: Uniform = Uniform(0.0, 10.0)
    tau_scale: str = "sd"
    eta: Uniform = Uniform(-1.0, 1.0)
    lam: Uniform = Uniform(0.0, 1.0)
    psi: Uniform | None = None
    alpha: Uniform = Uniform(-LOGIT_BOUND, LOGIT_BOUND)
    fixed: dict = field(default_factory=dict)

    def __post_init__(self):
        for scale in (self.sigma_scale, self.tau_scale):
            if scale not in ("sd", "variance"):
                raise InputError("hyperprior scale must be sd or variance")
        if self.sigma.low < 0 or self.tau.low < 0:
            raise InputError("sigma and tau supports must be >= 0")
        if not (-1.0 <= self.eta.low and self.eta.high <= 1.0):
            raise InputError("eta support must lie within [-1, 1]")
        if not (0.0 <= self.lam.low and self.lam.high <= 1.0):
            raise InputError("lambda support must lie within [0, 1]")
        if self.psi is not None and self.psi.low < 0:
            raise InputError("psi support must be >= 0")

    @classmethod
    def parse(cls, text: str, base: "HyperPriors | None" = None):
        """Read "sigma2=U(0,0.01); lambda=U(0,1)" style declarations.

        sigma/tau take the prior on the sd, sigma2/tau2 on the variance;
        a bare number (e.g. "lambda=0.5") fixes that parameter.
        """
        hp = base or cls()
        fixed = dict(hp.fixed)
        for chunk in filter(None, (c.strip() for c in text.split(";"))):
            m = _UNIFORM.fullmatch(chunk)
            if m:
                name, lo, hi = m.group(1).lower(), *map(float, m.group(2, 3))
                hp = _with_uniform(hp, name, Uniform(lo, hi))
                continue
            m = _FIXED.fullmatch(chunk)
            if m:
                name = priors.PARAM_ALIASES.get(m.group(1).lower())
                if name is None and m.group(1).lower() != "tau2":
                    raise InputError(f"cannot fix unknown parameter {chunk!r}")
                fixed[name or "tau2"] = float(m.group(2))
                continue
            raise InputError(f"bad hyperprior declaration {chunk!r}")
        return replace(hp, fixed=fixed)

    @classmethod
    def from_preset(cls, preset: dict) -> "HyperPriors":
        return cls.parse(preset.get("declaration", ""))

    def clamped(self, spec: PriorSpec) -> "HyperPriors":
        """Degenerate hyperpriors that hold every parameter of `spec`."""
        fixed = spec.params()
        if spec.kind == PriorKind.BYM:
            fixed["tau2"] = fixed.pop("nu") * spec.sigma2
        return replace(self, fixed=fixed)

    def describe(self) -> dict:
        out = {
            "sigma": f"{self.sigma} on {self.sigma_scale}",
            "tau": f"{self.tau} on {self.tau_scale}",
            "eta": str(self.eta),
            "lambda": str(self.lam),
            "psi": str(self.psi) if self.psi else "U(0,max distance)",
            "alpha": str(self.alpha),
        }
        if self.fixed:
            out["fixed"] = dict(self.fixed)
        return out


def _with_uniform(hp: HyperPriors, name: str, u: Uniform) -> HyperPriors:
    if name in ("sigma", "sigma2"):
        return replace(hp, sigma=u,
                       sigma_scale="sd" if name == "sigma" else "variance")
    if name in ("tau", "tau2"):
        return replace(hp, tau=u,
                       tau_scale="sd" if name == "tau" else "variance")
    if name in ("lambda", "lam"):
        return replace(hp, lam=u)
    if name in ("eta", "psi", "alpha"):
        return replace(hp, **{name: u})
    raise InputError(f"unknown hyperparameter {name!r}")


@dataclass(frozen=True)
class McmcConfig:
    chains: int = 3
    iterations: int = 30000
    burn_in: int = 5000
    thin: int = 75
    seed: int = 0
    target_accept: float = 0.44
    adapt_during_burnin_only: bool = True
    parallel_chains: bool = False

    def __post_init__(self):
        if self.chains < 1:
            raise InputError("chains must be >= 1")
        if not 0 <= self.burn_in < self.iterations:
            raise InputError("need 0 <= burn_in < iterations")
        if self.thin < 1:
            raise InputError("thin must be >= 1")
        if self.saved_per_chain < MIN_SAVED_DRAWS:
            raise InputError(
                f"(iterations - burn_in) / thin = {self.saved_per_chain}; "
                f"at least {MIN_SAVED_DRAWS} saved draws per chain required"
            )
        if not 0 < self.target_accept < 1:
            raise InputError("target_accept must lie in (0, 1)")

    @property
    def saved_per_chain(self) -> int:
        return (self.iterations - self.burn_in) // self.thin

    @classmethod
    def from_file(cls, path: str, section: str = "MCMC", **overrides):
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise InputError(f"cannot read MCMC config {path}")
        if not parser.has_section(section):
            raise InputError(f"{path} has no [{section}] section")
        s = parser[section]
        values = dict(
            chains=s.getint("chains", cls.chains),
            iterations=s.getint("iterations", cls.iterations),
            burn_in=s.getint("burn_in", cls.burn_in),
            thin=s.getint("thin", cls.thin),
            seed=s.getint("seed", cls.seed),
            target_accept=s.getfloat("target_accept", cls.target_accept),
            adapt_during_burnin_only=s.getboolean(
                "adapt_during_burnin_only", cls.adapt_during_burnin_only
            ),
            parallel_chains=s.getboolean(
                "parallel_chains", cls.parallel_chains
            ),
        )
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class AreaDataset:
    graph: AdjacencyGraph
    O: np.ndarray
    n: np.ndarray

    def __post_init__(self):
        self.O = np.asarray(self.O, dtype=float)
        self.n = np.asarray(self.n, dtype=float)
        A = self.graph.order
        if self.O.shape != (A,) or self.n.shape != (A,):
            raise InputError(
                f"counts/populations must have length {A} (graph order)"
            )
        if np.any(self.O < 0) or np.any(self.O != np.round(self.O)):
            raise InputError("counts must be nonnegative integers")
        if np.any(self.n <= 0):
            raise InputError("populations must be > 0")

    @property
    def crude_rates(self) -> np.ndarray:
        return self.O / self.n

    @property
    def pooled_rate(self) -> float:
        return float(self.O.sum() / self.n.sum())

    @classmethod
    def from_csv(cls, counts_path, pop_path, graph: AdjacencyGraph):
        counts = _read_keyed(counts_path, "count")
        pops = _read_keyed(pop_path, "population")
        ids = list(graph.area_ids)
        for label, frame in (("counts", counts), ("populations", pops)):
            missing = sorted(set(ids) - set(frame.index))
            extra = sorted(set(frame.index) - set(ids))
            if missing or extra:
                raise InputError(
                    f"{label} ids do not match the graph; "
                    f"missing {missing[:10]}, unknown {extra[:10]}"
                )
        return cls(
            graph=graph,
            O=counts.loc[ids].to_numpy(dtype=float),
            n=pops.loc[ids].to_numpy(dtype=float),
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "area_id": list(self.graph.area_ids),
                "count": self.O.astype(int),
                "population": self.n,
                "crude_rate": self.crude_rates,
            }
        )


def _read_keyed(path, column: str) -> pd.Series:
    try:
        frame = pd.read_csv(path, dtype={"area_id": str})
    except (OSError, pd.errors.ParserError) as exc:
        raise InputError(f"cannot read {path}: {exc}")
    if "area_id" not in frame.columns or column not in frame.columns:
        raise InputError(f"{path} needs columns area_id,{column}")
    if frame["area_id"].duplicated().any():
        dup = frame.loc[frame["area_id"].duplicated(), "area_id"].tolist()
        raise InputError(f"{path} repeats area ids {dup[:10]}")
    values = pd.to_numeric(frame[column], errors="coerce")
    if values.isna().any():
        raise InputError(f"{path}: non-numeric {column} values")
    return pd.Series(values.to_numpy(), index=frame["area_id"].str.strip())


@dataclass
class PosteriorSamples:
    kind: PriorKind
    area_ids: tuple[str, ...]
    alpha: np.ndarray  # (chains, saved)
    kappa: np.ndarray  # (chains, saved, areas)
    hyper: dict  # name -> (chains, saved)
    sampled: tuple[str, ...]
    acceptance: dict  # name -> per-chain acceptance rate
    wall_clock: float
    config: McmcConfig

    @property
    def n_chains(self) -> int:
        return self.alpha.shape[0]

    @property
    def n_saved(self) -> int:
        return self.alpha.shape[1]

    def rates(self) -> np.ndarray:
        return expit(self.alpha[..., None] + self.kappa)

    def to_long_frame(self) -> pd.DataFrame:
        chains, saved = self.alpha.shape
        chain_ix = np.repeat(np.arange(chains), saved)
        iter_ix = np.tile(
            self.config.burn_in + self.config.thin * (np.arange(saved) + 1),
            chains,
        )
        parts = [("alpha", self.alpha)]
        parts += [(name, v) for name, v in self.hyper.items()]
        parts += [
            (f"kappa[{a}]", self.kappa[..., i])
            for i, a in enumerate(self.area_ids)
        ]
        frames = [
            pd.DataFrame(
                {"chain": chain_ix, "iter": iter_ix, "name": name,
                 "value": values.reshape(-1)}
            )
            for name, values in parts
        ]
        return pd.concat(frames, ignore_index=True)

    def diagnostics(self) -> pd.DataFrame:
        """R-hat and ESS for alpha, sampled hyperparameters and area rates."""
        rows = []
        tracked = [("alpha", self.alpha)]
        tracked += [(h, self.hyper[h]) for h in self.sampled]
        rates = self.rates()
        tracked += [
            (f"rate[{a}]", rates[..., i]) for i, a in enumerate(self.area_ids)
        ]
        for name, draws in tracked:
            rhat = (
                gelman_rubin(draws) if self.n_chains >= 2 else float("nan")
            )
            rows.append(
                {"name": name, "rhat": rhat,
                 "ess": effective_sample_size(draws)}
            )
        return pd.DataFrame(rows)

    def hyper_summary(self) -> pd.DataFrame:
        rows = []
        for name, draws in self.hyper.items():
            flat = draws.reshape(-1)
            q05, q95 = np.quantile(flat, [0.05, 0.95])
            rows.append(
                {"name": name, "mean": float(flat.mean()), "q05": q05,
                 "q95": q95, "sampled": name in self.sampled}
            )
        return pd.DataFrame(rows)


# --- latent model -------------------------------------------------------


def _colour_classes(pattern: np.ndarray) -> list[np.ndarray]:
    """Greedy colouring: no two members of a class interact."""
    A = pattern.shape[0]
    colour = -np.ones(A, dtype=int)
    order = np.argsort(-pattern.sum(axis=1), kind="stable")
    for i in order:
        used = set(colour[np.nonzero(pattern[i])[0]])
        c = 0
        while c in used:
            c += 1
        colour[i] = c
    return [np.nonzero(colour == c)[0] for c in range(colour.max() + 1)]


@dataclass
class _Block:
    name: str
    classes: list
    rank: int
    singular: bool
    x: np.ndarray
    log_step: np.ndarray
    accepted: np.ndarray
    proposed: int = 0
    # per-component offsets of a singular block, held outside x
    level: np.ndarray | None = None


class LatentModel:
    """Blocks of area effects with precision P(theta) / s2(theta)."""

    def __init__(self, kind: PriorKind, graph: AdjacencyGraph,
                 hyper: HyperPriors):
        self.kind = PriorKind(kind)
        self.graph = graph
        self.hyper = hyper
        A = graph.order
        self.A = A
        if self.kind in priors.CAR_KINDS:
            graph.require_neighbors(f"{self.kind.value} prior")
        self.null_rank = A - graph.n_components
        self.L = graph.laplacian()
        self.eye = np.eye(A)
        if self.kind == PriorKind.PCAR:
            s = 1.0 / np.sqrt(graph.degrees)
            self.eps = np.linalg.eigvalsh(s[:, None] * graph.W * s[None, :])
            self.log_deg = float(np.sum(np.log(graph.degrees)))
        if self.kind == PriorKind.LCAR:
            self.lap_values = graph.spectrum.values.clip(min=0.0)
        if self.kind == PriorKind.BYM2:
            self.R_star = priors.scale_factor(graph) * self.L
        if self.kind == PriorKind.GP:
            self.dist = graph.distances()
            psi = hyper.psi or Uniform(0.0, float(self.dist.max()))
            self.psi_support = psi
            self._gp = lru_cache(maxsize=GP_CACHE_SIZE)(self._gp_uncached)
        self.sampled, self.fixed = self._parameters()

    # which hyperparameters move, and the values of the ones that do not
    def _parameters(self):
        k = self.kind
        names = ["sigma2"]
        if k == PriorKind.BYM:
            names.append("tau2")
        if k == PriorKind.PCAR:
            names.append("eta")
        if k in (PriorKind.LCAR, PriorKind.BYM2):
            names.append("lam")
        if k == PriorKind.GP:
            names.append("psi")
        fixed = {}
        for name in names:
            if name in self.hyper.fixed:
                fixed[name] = float(self.hyper.fixed[name])
        unknown = set(self.hyper.fixed) - set(names)
        if unknown:
            raise InputError(
                f"{k.value} prior does not take {sorted(unknown)}"
            )
        if "eta" in fixed and not -1 < fixed["eta"] < 1:
            raise InputError("fixed eta must lie in (-1, 1)")
        sampled = tuple(n for n in names if n not in fixed)
        return sampled, fixed

    def support(self, name: str) -> Uniform:
        if name == "sigma2":
            return self.hyper.sigma
        if name == "tau2":
            return self.hyper.tau
        if name == "psi":
            return self.psi_support
        return getattr(self.hyper, name)

    def natural(self, name: str, raw: float) -> float:
        # sigma/tau priors may be on the sd; everything is stored as variance
        if name == "sigma2" and self.hyper.sigma_scale == "sd":
            return raw * raw
        if name == "tau2" and self.hyper.tau_scale == "sd":
            return raw * raw
        return raw

    def _gp_uncached(self, psi: float):
        R = np.exp(-self.dist / psi)
        try:
            cf = linalg.cho_factor(R, lower=True)
        except (linalg.LinAlgError, ValueError):
            raise NumericalError(f"gp correlation singular at psi={psi}")
        P = linalg.cho_solve(cf, self.eye)
        logdet_R = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
        return 0.5 * (P + P.T), -logdet_R

    def gp_precision(self, psi: float):
        # cache key; psi below the rounding grain would round to zero
        psi = max(round(psi, GP_PSI_DECIMALS), 10.0**-GP_PSI_DECIMALS)
        return self._gp(psi)

    def block_terms(self, theta: dict) -> list:
        """(s2, P, logdet P) per block; constant log-determinants are 0."""
        k = self.kind
        s2 = theta["sigma2"]
        if k == PriorKind.IID:
            return [(s2, self.eye, 0.0)]
        if k == PriorKind.ICAR:
            return [(s2, self.L, 0.0)]
        if k == PriorKind.PCAR:
            eta = theta["eta"]
            P = np.diag(self.graph.degrees) - eta * self.graph.W
            logdet = self.log_deg + float(np.sum(np.log1p(-eta * self.eps)))
            return [(s2, P, logdet)]
        if k == PriorKind.LCAR:
            lam = theta["lam"]
            P = lam * self.L + (1.0 - lam) * self.eye
            if lam == 1.0:
                return [(s2, P, 0.0)]
            logdet = float(np.sum(np.log(lam * self.lap_values + 1.0 - lam)))
            return [(s2, P, logdet)]
        if k == PriorKind.GP:
            P, logdet = self.gp_precision(theta["psi"])
            return [(s2, P, logdet)]
        if k == PriorKind.BYM:
            return [(s2, self.L, 0.0), (theta["tau2"], self.eye, 0.0)]
        lam = theta["lam"]
        return [(s2 * lam, self.R_star, 0.0), (s2 * (1.0 - lam), self.eye, 0.0)]

    def make_blocks(self, theta: dict) -> list[_Block]:
        k = self.kind
        A = self.A
        car_classes = _colour_classes(self.graph.W > 0)
        single = [np.arange(A)]
        if k == PriorKind.IID:
            layout = [("kappa", single, A, False)]
        elif k == PriorKind.GP:
            layout = [("kappa", [np.array([i]) for i in range(A)], A, False)]
        elif k == PriorKind.ICAR:
            layout = [("kappa", car_classes, self.null_rank, True)]
        elif k == PriorKind.LCAR and theta["lam"] == 1.0:
            layout = [("kappa", car_classes, self.null_rank, True)]
        elif k in (PriorKind.PCAR, PriorKind.LCAR):
            layout = [("kappa", car_classes, A, False)]
        else:
            layout = [
                ("u", car_classes, self.null_rank, True),
                ("v", single, A, False),
            ]
        blocks = []
        for (name, classes, rank, singular), (s2, P, _) in zip(
            layout, self.block_terms(theta)
        ):
            sd = np.sqrt(max(s2, 1e-12) / np.diag(P))
            blocks.append(
                _Block(
                    name=name,
                    classes=classes,
                    rank=rank,
                    singular=singular,
                    x=np.zeros(A),
                    log_step=np.log(np.minimum(sd, 0.5)),
                    accepted=np.zeros(A),
                    level=(
                        np.zeros(self.graph.n_components) if singular
                        else None
                    ),
                )
            )
        return blocks

    def effects(self, blocks: list[_Block]) -> np.ndarray:
        """kappa: block values plus the component levels of singular blocks."""
        labels = self.graph.components
        kappa = np.zeros(self.A)
        for blk in blocks:
            kappa += blk.x
            if blk.level is not None:
                kappa += blk.level[labels]
        return kappa

    def log_prior(self, blocks: list[_Block], theta: dict) -> float:
        total = 0.0
        for blk, (s2, P, logdet) in zip(blocks, self.block_terms(theta)):
            if s2 <= 0:
                if np.any(blk.x != 0):
                    return -np.inf
                continue
            quad = float(blk.x @ P @ blk.x)
            total += -0.5 * quad / s2 - 0.5 * blk.rank * math.log(s2)
            total += 0.5 * logdet
        return total


# --- sampler --------------------------------------------------------------


def _loglik_terms(O, n, lin):
    return O * log_expit(lin) - n * expit(lin)


def _to_raw(support: Uniform, z: float) -> float:
    return support.low + support.width * float(expit(z))


def _log_jacobian(support: Uniform, z: float) -> float:
    return (
        math.log(support.width)
        + float(log_expit(z))
        + float(log1m_expit(z))
    )


@dataclass
class _ChainResult:
    alpha: np.ndarray
    kappa: np.ndarray
    hyper: dict
    acceptance: dict
    # log proposal sd per scalar, at the end of burn-in and of the run
    scales_at_burn_in: dict = field(default_factory=dict)
    scales_final: dict = field(default_factory=dict)


def _adapt_rate(t: int) -> float:
    return (t + 1.0) ** -ADAPT_EXPONENT


def _proposal_scales(blocks, alpha_step: float, z_step: dict) -> dict:
    out = {"alpha": np.array([alpha_step])}
    for blk in blocks:
        out[blk.name] = blk.log_step.copy()
    for name, step in z_step.items():
        out[name] = np.array([step])
    return out


def _theta(model: LatentModel, z: dict) -> dict:
    theta = dict(model.fixed)
    for name in model.sampled:
        raw = _to_raw(model.support(name), z[name])
        theta[name] = model.natural(name, raw)
    return theta


def _recenter(model: LatentModel, blocks, alpha: float) -> float:
    """Sum-to-zero per component on singular blocks.

    Component means move into the block's levels, and alpha takes the
    area-weighted mean of those levels, so alpha + kappa is unchanged. With
    one component the level is always zero.
    """
    labels = model.graph.components
    sizes = np.bincount(labels)
    for blk in blocks:
        if not blk.singular:
            continue
        means = np.bincount(labels, weights=blk.x) / sizes
        blk.x -= means[labels]
        blk.level += means
        shift = float(np.sum(blk.level * sizes) / model.A)
        blk.level -= shift
        alpha += shift
    return alpha


def run_chain(data: AreaDataset, model: LatentModel, cfg: McmcConfig,
              seed_seq) -> _ChainResult:
    rng = np.random.default_rng(seed_seq)
    O, n = data.O, data.n
    hp = model.hyper
    pooled = data.pooled_rate
    if pooled <= 0:
        pooled = 0.5 / float(n.sum())
    alpha = float(logit(pooled))
    z = {name: 0.0 for name in model.sampled}
    theta = _theta(model, z)
    blocks = model.make_blocks(theta)
    kappa = np.zeros(model.A)

    lp_prior = model.log_prior(blocks, theta)
    lik = _loglik_terms(O, n, alpha + kappa)
    if not (math.isfinite(lp_prior) and np.all(np.isfinite(lik))):
        raise NumericalError("log-posterior is not finite at initialisation")

    alpha_step = math.log(0.1)
    z_step = {name: math.log(0.5) for name in model.sampled}
    acc_alpha = 0
    acc_z = {name: 0 for name in model.sampled}
    kept = cfg.iterations - cfg.burn_in
    S = cfg.saved_per_chain
    out_alpha = np.empty(S)
    out_kappa = np.empty((S, model.A))
    out_hyper = {name: np.empty(S) for name in _saved_names(model)}
    target = cfg.target_accept
    saved = 0
    scales_at_burn_in = _proposal_scales(blocks, alpha_step, z_step)

    for it in range(1, cfg.iterations + 1):
        adapting = it <= cfg.burn_in or not cfg.adapt_during_burnin_only
        gamma = _adapt_rate(it)
        counting = it > cfg.burn_in

        # area effects
        for blk, (s2, P, _) in zip(blocks, model.block_terms(theta)):
            if s2 <= 0:
                continue
            diag = np.diag(P)
            for C in blk.classes:
                cur = blk.x[C]
                step = np.exp(blk.log_step[C])
                prop = cur + step * rng.standard_normal(len(C))
                off = P[C] @ blk.x - diag[C] * cur
                d_prior = -0.5 / s2 * (
                    diag[C] * (prop**2 - cur**2) + 2.0 * (prop - cur) * off
                )
                lin = alpha + kappa[C]
                d_lik = _loglik_terms(O[C], n[C], lin + prop - cur) - \
                    _loglik_terms(O[C], n[C], lin)
                log_r = d_prior + d_lik
                accept = np.log(rng.random(len(C))) < log_r
                moved = C[accept]
                kappa[moved] += (prop - cur)[accept]
                blk.x[moved] = prop[accept]
                if adapting:
                    prob = np.exp(np.minimum(log_r, 0.0))
                    blk.log_step[C] += gamma * (prob - target)
                if counting:
                    blk.accepted[C] += accept
            if counting:
                blk.proposed += 1

        # intercept, flat on its support
        prop = alpha + math.exp(alpha_step) * rng.standard_normal()
        if hp.alpha.low < prop < hp.alpha.high:
            log_r = float(
                np.sum(_loglik_terms(O, n, prop + kappa))
                - np.sum(_loglik_terms(O, n, alpha + kappa))
            )
        else:
            log_r = -np.inf
        accept = math.log(rng.random()) < log_r
        if accept:
            alpha = prop
        if adapting:
            alpha_step += gamma * (math.exp(min(log_r, 0.0)) - target)
        if counting:
            acc_alpha += accept

        # hyperparameters on the logit scale of their uniform support
        lp_prior = model.log_prior(blocks, theta)
        for name in model.sampled:
            support = model.support(name)
            z_new = dict(z)
            z_new[name] = z[name] + math.exp(z_step[name]) * rng.standard_normal()
            theta_new = _theta(model, z_new)
            lp_new = model.log_prior(blocks, theta_new)
            log_r = (
                lp_new + _log_jacobian(support, z_new[name])
                - lp_prior - _log_jacobian(support, z[name])
            )
            accept = math.log(rng.random()) < log_r
            if accept:
                z, theta, lp_prior = z_new, theta_new, lp_new
            if adapting:
                z_step[name] += gamma * (
                    math.exp(min(log_r, 0.0)) - target
                )
            if counting:
                acc_z[name] += accept

        alpha = _recenter(model, blocks, alpha)
        kappa = model.effects(blocks)
        if it == cfg.burn_in:
            scales_at_burn_in = _proposal_scales(blocks, alpha_step, z_step)

        if counting and (it - cfg.burn_in) % cfg.thin == 0:
            out_alpha[saved] = alpha
            out_kappa[saved] = kappa
            for name, value in _saved_values(model, theta).items():
                out_hyper[name][saved] = value
            saved += 1

    acceptance = {"alpha": acc_alpha / kept}
    for blk in blocks:
        if blk.proposed:
            acceptance[blk.name] = float(blk.accepted.mean() / blk.proposed)
    for name in model.sampled:
        acceptance[name] = acc_z[name] / kept
    return _ChainResult(
        out_alpha, out_kappa, out_hyper, acceptance,
        scales_at_burn_in=scales_at_burn_in,
        scales_final=_proposal_scales(blocks, alpha_step, z_step),
    )


def _saved_names(model: LatentModel) -> list[str]:
    names = ["sigma2"]
    if model.kind == PriorKind.BYM:
        names += ["tau2", "nu"]
    if model.kind == PriorKind.PCAR:
        names.append("eta")
    if model.kind in (PriorKind.LCAR, PriorKind.BYM2):
        names.append("lam")
    if model.kind == PriorKind.GP:
        names.append("psi")
    return names


def _saved_values(model: LatentModel, theta: dict) -> dict:
    out = {name: theta[name] for name in _saved_names(model) if name != "nu"}
    if model.kind == PriorKind.BYM:
        out["nu"] = theta["tau2"] / theta["sigma2"]
    return out


def _chain_job(args):
    data, kind, hyper, cfg, seed_seq = args
    model = LatentModel(kind, data.graph, hyper)
    return run_chain(data, model, cfg, seed_seq)


def fit(data: AreaDataset, kind, hyper: HyperPriors, cfg: McmcConfig,
        rng: np.random.Generator | None = None) -> PosteriorSamples:
    """Run cfg.chains chains and stack their saved draws."""
    kind = PriorKind(kind)
    model = LatentModel(kind, data.graph, hyper)
    root = cfg.seed if rng is None else int(rng.integers(2**63))
    seqs = np.random.SeedSequence(root).spawn(cfg.chains)
    logger.info(
        "fitting %s: %d areas, %d chains x %d iterations, sampled %s",
        kind.value, data.graph.order, cfg.chains, cfg.iterations,
        list(model.sampled),
    )
    start = time.perf_counter()
    if cfg.parallel_chains and cfg.chains > 1:
        jobs = [(data, kind, hyper, cfg, s) for s in seqs]
        with ProcessPoolExecutor(worker_count(cfg.chains)) as pool:
            results = list(pool.map(_chain_job, jobs))
    else:
        results = [run_chain(data, model, cfg, s) for s in seqs]
    elapsed = time.perf_counter() - start

    alpha = np.stack([r.alpha for r in results])
    names = list(results[0].hyper)
    samples = PosteriorSamples(
        kind=kind,
        area_ids=data.graph.area_ids,
        alpha=alpha,
        kappa=np.stack([r.kappa for r in results]),
        hyper={k: np.stack([r.hyper[k] for r in results]) for k in names},
        sampled=model.sampled,
        acceptance={
            k: [r.acceptance[k] for r in results]
            for k in results[0].acceptance
        },
        wall_clock=elapsed,
        config=cfg,
    )
    edge = min(hyper.alpha.high - alpha.max(), alpha.min() - hyper.alpha.low)
    if edge < 1.0:
        logger.warning(
            "alpha draws within %.2f of the support boundary %s",
            edge, hyper.alpha,
        )
    logger.info("fit %s done in %.1fs", kind.value, elapsed)
    return samples


# --- diagnostics and summaries --------------------------------------------


def gelman_rubin(draws) -> float:
    """Potential scale reduction for one scalar, draws shaped (chains, n).

    Clamped below at 1. Zero within-chain variance gives nan.
    """
    x = np.asarray(draws, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 10:
        raise InputError("gelman_rubin needs >= 2 chains of >= 10 draws")
    m, n = x.shape
    chain_means = x.mean(axis=1)
    W = float(np.mean(x.var(axis=1, ddof=1)))
    B = n * float(np.var(chain_means, ddof=1))
    if W <= 0:
        if B <= 0:
            return 1.0
        logger.warning("gelman_rubin: zero within-chain variance")
        return float("nan")
    V = W * (n - 1) / n + B / n
    return max(1.0, math.sqrt(V / W))


def _autocorrelation(x: np.ndarray) -> np.ndarray:
    n = len(x)
    centred = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(centred, size)
    acov = np.fft.irfft(f * np.conjugate(f), size)[:n]
    return acov / acov[0]


def _ess_1d(x: np.ndarray) -> float:
    n = len(x)
    if np.var(x) <= 0:
        logger.warning("effective_sample_size: constant chain")
        return 0.0
    rho = _autocorrelation(x)
    # Geyer initial positive sequence over lag pairs
    tau = -1.0
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair <= 0:
            break
        tau += 2.0 * pair
    return float(n / max(tau, 1e-12))


def effective_sample_size(draws) -> float:
    """ESS of one chain, or the sum over chains for (chains, n) input."""
    x = np.asarray(draws, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise InputError("draws must be a vector or a (chains, n) array")
    if x.shape[1] < MIN_SAVED_DRAWS:
        raise InputError(
            f"effective_sample_size needs >= {MIN_SAVED_DRAWS} draws"
        )
    return float(sum(_ess_1d(chain) for chain in x))


def posterior_rate_means(samples: PosteriorSamples) -> np.ndarray:
    if samples.n_saved == 0:
        raise InputError("no saved draws")
    return samples.rates().mean(axis=(0, 1))


@dataclass(frozen=True)
class TcvSummary:
    mean: float
    q05: float
    q95: float


def draw_specs(samples: PosteriorSamples):
    """PriorSpec for every saved draw, chains concatenated."""
    names = {"sigma2", "nu", "eta", "lam", "psi"}
    flat = {
        k: v.reshape(-1) for k, v in samples.hyper.items() if k in names
    }
    for j in range(samples.n_chains * samples.n_saved):
        yield PriorSpec(
            kind=samples.kind, **{k: float(v[j]) for k, v in flat.items()}
        )


def posterior_tcv(samples: PosteriorSamples, graph: AdjacencyGraph):
    values = np.array([priors.tcv(spec, graph) for spec in draw_specs(samples)])
    q05, q95 = np.quantile(values, [0.05, 0.95])
    return TcvSummary(float(values.mean()), float(q05), float(q95))


def max_rhat(samples: PosteriorSamples) -> float:
    if samples.n_chains < 2:
        return float("nan")
    return float(samples.diagnostics()["rhat"].max())
