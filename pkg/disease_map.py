import json
import logging
import os
from dataclasses import dataclass

import numpy as np
import pandas as pd

from engine.templates import metrics
from engine.templates.graph import QUEEN, AdjacencyGraph, load_graph
from engine.templates.mcmc import (
    AreaDataset,
    HyperPriors,
    McmcConfig,
    PosteriorSamples,
    TcvSummary,
    fit,
    posterior_rate_means,
    posterior_tcv,
)

logger = logging.getLogger(__name__)

RHAT_THRESHOLD = 1.1


@dataclass
class FitResult:
    samples: PosteriorSamples
    report: metrics.SmoothingReport
    tcv: TcvSummary
    diagnostics: pd.DataFrame
    rates: pd.DataFrame
    hyper: pd.DataFrame

    @property
    def max_rhat(self) -> float:
        return float(self.diagnostics["rhat"].max())

    @property
    def min_ess(self) -> float:
        return float(self.diagnostics["ess"].min())

    def converged(self, threshold: float = RHAT_THRESHOLD) -> bool:
        # single-chain runs have no R-hat to judge by
        if self.samples.n_chains < 2:
            return True
        return bool(self.max_rhat <= threshold)

    def summary(self) -> dict:
        return {
            "prior": self.samples.kind.value,
            **self.report.as_row(),
            "tcv_mean": self.tcv.mean,
            "tcv_q05": self.tcv.q05,
            "tcv_q95": self.tcv.q95,
            "max_rhat": self.max_rhat,
            "min_ess": self.min_ess,
            "acceptance": self.samples.acceptance,
            "wall_clock": self.samples.wall_clock,
        }


class DiseaseMap:
    """Observed counts over a map of areas, ready to fit under any prior."""

    def __init__(self, graph: AdjacencyGraph, data: AreaDataset,
                 rate_scale: float = metrics.RATE_SCALE):
        self.graph = graph
        self.data = data
        self.rate_scale = rate_scale

    @classmethod
    def from_files(cls, graph_source: str, counts_path: str, pop_path: str,
                   rule: str = QUEEN, rate_scale: float = metrics.RATE_SCALE):
        graph = load_graph(graph_source, rule=rule)
        data = AreaDataset.from_csv(counts_path, pop_path, graph)
        logger.info(
            "loaded %d areas, %d cases over %.0f people",
            graph.order, int(data.O.sum()), data.n.sum(),
        )
        return cls(graph, data, rate_scale)

    @property
    def crude_rates(self) -> np.ndarray:
        return self.data.crude_rates

    def fit(self, kind, hyper: HyperPriors | None = None,
            cfg: McmcConfig | None = None, rng=None,
            sp_weighted: bool = False) -> FitResult:
        hyper = hyper or HyperPriors()
        cfg = cfg or McmcConfig()
        samples = fit(self.data, kind, hyper, cfg, rng=rng)
        post = posterior_rate_means(samples)
        report = metrics.report(
            post, self.crude_rates, self.rate_scale,
            weights=self.data.n if sp_weighted else None,
        )
        tcv = posterior_tcv(samples, self.graph)
        diagnostics = samples.diagnostics()
        logger.info(
            "%s: SP=%.3f MSS=%.4g TCV=%.4g",
            samples.kind.value, report.sp, report.mss, tcv.mean,
        )
        return FitResult(
            samples=samples,
            report=report,
            tcv=tcv,
            diagnostics=diagnostics,
            rates=self.rate_table(samples, post),
            hyper=samples.hyper_summary(),
        )

    def rate_table(self, samples: PosteriorSamples, post=None):
        """Per-area crude and posterior rates on the reporting scale."""
        draws = samples.rates().reshape(-1, self.graph.order)
        post = posterior_rate_means(samples) if post is None else post
        q05, q95 = np.quantile(draws, [0.05, 0.95], axis=0)
        s = self.rate_scale
        return pd.DataFrame(
            {
                "area_id": list(self.graph.area_ids),
                "count": self.data.O.astype(int),
                "population": self.data.n,
                "crude_rate": self.crude_rates * s,
                "posterior_rate": post * s,
                "q05": q05 * s,
                "q95": q95 * s,
            }
        )

    def write(self, result: FitResult, out_dir: str) -> list[str]:
        os.makedirs(out_dir, exist_ok=True)
        files = {
            "draws.csv": result.samples.to_long_frame(),
            "rates.csv": result.rates,
            "hyper.csv": result.hyper,
            "diagnostics.csv": result.diagnostics,
        }
        written = []
        for name, frame in files.items():
            path = os.path.join(out_dir, name)
            frame.to_csv(path, index=False)
            written.append(path)
        path = os.path.join(out_dir, "report.json")
        with open(path, "w") as f:
            json.dump(result.summary(), f, indent=2, default=float)
        written.append(path)
        return written
