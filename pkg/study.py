import configparser
import json
import logging
import math
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from itertools import product

import numpy as np
import pandas as pd

from engine.templates import metrics, priors, simgen
from engine.templates.graph import AdjacencyGraph, load_graph
from engine.templates.mcmc import AreaDataset, HyperPriors, McmcConfig, fit
from engine.templates.mcmc import posterior_rate_means
from engine.templates.priors import PriorKind, PriorSpec
from engine.utils.errors import InputError, SmoothGaugeError
from engine.utils.helper import child_rng, payload_digest, worker_count

logger = logging.getLogger(__name__)

PRESETS_FILE = os.path.join(os.path.dirname(__file__), "presets.json")
MCMC_CONFIG_FILE = os.path.join(os.path.dirname(__file__), "mcmc_config.txt")
ALL_PRIORS = [k.value for k in PriorKind]
PARAM_COLUMNS = ["sigma2", "nu", "eta", "lambda", "psi"]
METRIC_COLUMNS = list(metrics.METRIC_NAMES)


def load_presets(path: str = PRESETS_FILE) -> dict:
    if not os.path.exists(path):
        return {}
    with open(path, "r") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as exc:
            raise InputError(f"presets file {path} is not valid JSON: {exc}")


def resolve_hyper(value, presets: dict) -> HyperPriors:
    """A preset name or a literal declaration such as "sigma2=U(0,0.01)"."""
    table = presets.get("hyperpriors", {})
    value = value or "vague-sd"
    if value in table:
        return HyperPriors.parse(table[value])
    if value == "vague-sd":
        return HyperPriors()
    if "=" not in value:
        raise InputError(
            f"unknown hyperprior preset {value!r}; known: {sorted(table)}"
        )
    return HyperPriors.parse(value)


def resolve_scenario(value, presets: dict) -> simgen.ScenarioSpec:
    if isinstance(value, dict):
        base = value.get("preset")
        data = dict(value)
        data.pop("preset", None)
        if base is not None:
            merged = dict(_scenario_preset(base, presets))
            merged.update(data)
            data = merged
        return simgen.ScenarioSpec.from_dict(data)
    if isinstance(value, str) and value.endswith(".json"):
        return simgen.ScenarioSpec.from_file(value)
    return simgen.ScenarioSpec.from_dict(_scenario_preset(value, presets))


def _scenario_preset(name: str, presets: dict) -> dict:
    table = presets.get("scenarios", {})
    if name not in table:
        raise InputError(f"unknown scenario {name!r}; known: {sorted(table)}")
    data = dict(table[name])
    data.setdefault("name", name)
    return data


def resolve_mcmc(value, seed: int) -> McmcConfig:
    if isinstance(value, McmcConfig):
        return replace(value, seed=seed)
    value = dict(value or {"section": "Desk"})
    section = value.pop("section", None)
    path = value.pop("file", MCMC_CONFIG_FILE)
    if section:
        return McmcConfig.from_file(path, section, seed=seed, **value)
    return McmcConfig(seed=seed, **value)


def section_replicates(mcmc, path: str = MCMC_CONFIG_FILE) -> int | None:
    """Default B stored next to an MCMC section, if the plan names one."""
    if mcmc is None:
        mcmc = {"section": "Desk"}
    if not isinstance(mcmc, dict) or not mcmc.get("section"):
        return None
    parser = configparser.ConfigParser()
    parser.read(mcmc.get("file", path))
    if not parser.has_option(mcmc["section"], "replicates"):
        return None
    return parser.getint(mcmc["section"], "replicates")


def expand_grid(entry: dict) -> list[PriorSpec]:
    """{"kind": "lcar", "grid": {"sigma2": [...], "lambda": [...]}}"""
    kind = entry["kind"]
    grid = entry.get("grid", {})
    names = list(grid)
    specs = []
    for values in product(*(grid[n] for n in names)):
        specs.append(PriorSpec.from_params(kind, dict(zip(names, values))))
    return specs


def read_plan(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read plan {path}: {exc}")
    if not isinstance(data, dict):
        raise InputError(f"plan {path} must be a JSON object")
    return data


@dataclass
class StudyPlan:
    mode: str
    scenarios: list
    name: str = "study"
    within: list = field(default_factory=list)
    across: list = field(default_factory=lambda: list(ALL_PRIORS))
    hyper: dict = field(default_factory=dict)
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    B: int | None = None
    replicates: str | None = None
    graph: str | None = None
    seed: int = 0
    rate_scale: float = metrics.RATE_SCALE
    sp_weighted: bool = False
    workers: int | None = None
    out_dir: str = "study_out"

    def __post_init__(self):
        if self.mode not in ("within", "across"):
            raise InputError("study mode must be 'within' or 'across'")
        if self.mode == "within" and not self.within:
            raise InputError("within-mode plan lists no fixed-parameter cells")
        if self.mode == "across":
            if not self.across:
                raise InputError("across-mode plan lists no priors")
            unknown = set(self.across) - set(ALL_PRIORS)
            if unknown:
                raise InputError(f"unknown priors {sorted(unknown)}")
        if not self.scenarios and not self.replicates:
            raise InputError("plan needs scenarios or a replicate set")
        if self.replicates and not self.graph:
            raise InputError("a replicate set reference also needs a graph")

    @classmethod
    def from_dict(cls, data: dict, presets: dict | None = None):
        presets = presets if presets is not None else load_presets()
        data = dict(data)
        if "plan" in data:
            base = presets.get("plans", {}).get(data.pop("plan"))
            if base is None:
                raise InputError("unknown plan preset")
            data = {**base, **data}
        seed = int(data.get("seed", 0))
        scenarios = data.get("scenarios", [])
        if "scenario" in data:
            scenarios = [data.pop("scenario")]
        hyper_decl = data.get("hyper", "vague-sd")
        if isinstance(hyper_decl, str):
            hyper_decl = {k: hyper_decl for k in ALL_PRIORS}
        hyper = {
            k: resolve_hyper(hyper_decl.get(k, "vague-sd"), presets)
            for k in ALL_PRIORS
        }
        mode = data.get("mode", "")
        within, across = [], list(ALL_PRIORS)
        if mode == "within":
            for entry in data.get("priors", []):
                within.extend(expand_grid(entry))
        elif "priors" in data:
            across = list(data["priors"])
        return cls(
            mode=mode,
            name=data.get("name", "study"),
            scenarios=[resolve_scenario(s, presets) for s in scenarios],
            within=within,
            across=across,
            hyper=hyper,
            mcmc=resolve_mcmc(data.get("mcmc"), seed),
            B=data.get("B") or section_replicates(data.get("mcmc")),
            replicates=data.get("replicates"),
            graph=data.get("graph"),
            seed=seed,
            rate_scale=float(data.get("rate_scale", metrics.RATE_SCALE)),
            sp_weighted=bool(data.get("sp_weighted", False)),
            workers=data.get("workers"),
            out_dir=data.get("out_dir", "study_out"),
        )

    @classmethod
    def from_file(cls, path: str, presets: dict | None = None):
        return cls.from_dict(read_plan(path), presets)


@dataclass
class ScenarioData:
    label: str
    graph: AdjacencyGraph
    replicates: simgen.ReplicateSet


@dataclass
class Cell:
    index: int
    scenario: int
    kind: PriorKind
    spec: PriorSpec | None = None

    def label(self, scenarios) -> str:
        what = self.spec.label() if self.spec else self.kind.value
        return f"{scenarios[self.scenario].label}/{what}"


@dataclass
class FitJob:
    cell: int
    replicate: int
    graph: AdjacencyGraph
    O: np.ndarray
    n: np.ndarray
    kind: PriorKind
    hyper: HyperPriors
    cfg: McmcConfig
    root_seed: int
    rate_scale: float
    sp_weighted: bool


def run_fit_job(job: FitJob) -> dict:
    """One replicate of one cell. Failures come back as data."""
    try:
        data = AreaDataset(job.graph, job.O, job.n)
        rng = child_rng(job.root_seed, job.cell, job.replicate)
        samples = fit(data, job.kind, job.hyper, job.cfg, rng=rng)
        post = posterior_rate_means(samples)
        rep = metrics.report(
            post, data.crude_rates, job.rate_scale,
            weights=data.n if job.sp_weighted else None,
        )
        row = rep.as_row()
        for name in samples.sampled:
            row[f"post_{name}"] = float(samples.hyper[name].mean())
        row["ok"] = True
        return row
    except (SmoothGaugeError, ValueError, ArithmeticError) as exc:
        logger.warning(
            "cell %d replicate %d failed: %s", job.cell, job.replicate, exc
        )
        return {"ok": False, "error": f"{type(exc).__name__}: {exc}"}


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.=-]+", "_", text).strip("_")


def render_markdown(frame: pd.DataFrame) -> str:
    cols = list(frame.columns)
    lines = ["| " + " | ".join(cols) + " |",
             "|" + "|".join("---" for _ in cols) + "|"]
    for _, row in frame.iterrows():
        cells = []
        for c in cols:
            v = row[c]
            if isinstance(v, float):
                cells.append("" if math.isnan(v) else f"{v:.4g}")
            else:
                cells.append(str(v))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


class StudyEngine:
    def __init__(self, plan: StudyPlan, rng: np.random.Generator | None = None):
        self.plan = plan
        self.root_seed = (
            plan.seed if rng is None else int(rng.integers(2**63))
        )
        self.scenarios = self._load_scenarios()
        self.provenance = payload_digest(
            {
                "replicates": [s.replicates.digest for s in self.scenarios],
                "mcmc": asdict(plan.mcmc),
                "hyper": {k: asdict(h) for k, h in plan.hyper.items()},
                "rate_scale": plan.rate_scale,
                "sp_weighted": plan.sp_weighted,
                "root_seed": self.root_seed,
            }
        )
        self.cell_dir = os.path.join(plan.out_dir, "cells")

    def _load_scenarios(self) -> list[ScenarioData]:
        plan = self.plan
        out = []
        if plan.replicates:
            g = load_graph(plan.graph)
            reps = simgen.ReplicateSet.read(plan.replicates)
            if tuple(reps.area_ids) != tuple(g.area_ids):
                raise InputError("replicate set areas do not match the graph")
            if plan.B:
                reps = replace(reps, counts=reps.counts[: plan.B])
            label = reps.manifest.get("scenario", {}).get("name", "replicates")
            out.append(ScenarioData(label, g, reps))
        for spec in plan.scenarios:
            if plan.B:
                spec = replace(spec, B=plan.B)
            sim = simgen.simulate(spec)
            out.append(ScenarioData(spec.name, sim.region.graph,
                                    sim.replicates))
        return out

    # --- cells -------------------------------------------------------

    def cells(self) -> list[Cell]:
        cells = []
        for s in range(len(self.scenarios)):
            if self.plan.mode == "within":
                for spec in self.plan.within:
                    cells.append(Cell(len(cells), s, spec.kind, spec))
            else:
                for kind in self.plan.across:
                    cells.append(Cell(len(cells), s, PriorKind(kind)))
        return cells

    def _cell_path(self, cell: Cell) -> str:
        name = _slug(f"{cell.index:03d}-{cell.label(self.scenarios)}")
        return os.path.join(self.cell_dir, name + ".json")

    def _load_cell(self, cell: Cell):
        path = self._cell_path(cell)
        if not os.path.exists(path):
            return None
        try:
            with open(path, "r") as f:
                saved = json.load(f)
        except (OSError, json.JSONDecodeError):
            return None
        if saved.get("provenance") != self.provenance:
            return None
        return saved["replicates"]

    def _save_cell(self, cell: Cell, results: list[dict]):
        os.makedirs(self.cell_dir, exist_ok=True)
        with open(self._cell_path(cell), "w") as f:
            json.dump(
                {"provenance": self.provenance,
                 "label": cell.label(self.scenarios),
                 "replicates": results},
                f, indent=2,
            )

    def _jobs(self, cell: Cell) -> list[FitJob]:
        sc = self.scenarios[cell.scenario]
        hyper = self.plan.hyper.get(cell.kind.value, HyperPriors())
        if cell.spec is not None:
            hyper = hyper.clamped(cell.spec)
        reps = sc.replicates
        return [
            FitJob(
                cell=cell.index,
                replicate=b,
                graph=sc.graph,
                O=reps.counts[b].astype(float),
                n=reps.populations,
                kind=cell.kind,
                hyper=hyper,
                cfg=self.plan.mcmc,
                root_seed=self.root_seed,
                rate_scale=self.plan.rate_scale,
                sp_weighted=self.plan.sp_weighted,
            )
            for b in range(reps.B)
        ]

    def run_cells(self, resume: bool = True) -> dict[int, list[dict]]:
        cells = self.cells()
        done: dict[int, list[dict]] = {}
        pending = []
        for cell in cells:
            saved = self._load_cell(cell) if resume else None
            if saved is not None:
                logger.info("skipping completed cell %s",
                            cell.label(self.scenarios))
                done[cell.index] = saved
            else:
                pending.append(cell)
        jobs = [job for cell in pending for job in self._jobs(cell)]
        n_workers = min(worker_count(self.plan.workers), max(1, len(jobs)))
        logger.info("%d cells to run (%d fits) on %d workers",
                    len(pending), len(jobs), n_workers)
        if n_workers > 1:
            with ProcessPoolExecutor(max_workers=n_workers) as pool:
                results = list(pool.map(run_fit_job, jobs))
        else:
            results = [run_fit_job(job) for job in jobs]
        by_cell: dict[int, list] = {c.index: [] for c in pending}
        for job, res in zip(jobs, results):
            by_cell[job.cell].append(res)
        for cell in pending:
            self._save_cell(cell, by_cell[cell.index])
            done[cell.index] = by_cell[cell.index]
        return done

    # --- aggregation ---------------------------------------------------

    def _summarise(self, cell: Cell, results: list[dict]) -> dict:
        sc = self.scenarios[cell.scenario]
        ok = [r for r in results if r.get("ok")]
        row = {"scenario": sc.label, "prior": cell.kind.value}
        reports = [
            metrics.SmoothingReport(**{m: r[m] for m in METRIC_COLUMNS},
                                    rate_scale=r["rate_scale"])
            for r in ok
        ]
        if reports:
            mean = metrics.expected_metrics(reports)
            row.update({m: getattr(mean, m) for m in METRIC_COLUMNS})
            row["mss_se"] = metrics.standard_error(reports, "mss")
        else:
            row.update({m: float("nan") for m in METRIC_COLUMNS})
            row["mss_se"] = float("nan")
        post_keys = sorted({k for r in ok for k in r if k.startswith("post_")})
        for k in post_keys:
            row[k] = float(np.mean([r[k] for r in ok if k in r]))
        if self.plan.mode == "across":
            lo, hi = (metrics.sp_interval(reports) if reports
                      else (float("nan"), float("nan")))
            row["sp_q05"], row["sp_q95"] = lo, hi
        row["replicates"] = len(results)
        row["failed"] = len(results) - len(ok)
        row["error"] = next(
            (r["error"] for r in results if not r.get("ok")), ""
        )
        row["provenance"] = self.provenance
        return row

    def run_within(self, resume: bool = True) -> pd.DataFrame:
        if self.plan.mode != "within":
            raise InputError("plan is not a within-prior study")
        done = self.run_cells(resume)
        rows = []
        for cell in self.cells():
            row = self._summarise(cell, done[cell.index])
            for p in PARAM_COLUMNS:
                row[p] = getattr(cell.spec, "lam" if p == "lambda" else p)
            graph = self.scenarios[cell.scenario].graph
            row["tcv"] = priors.tcv(cell.spec, graph)
            rows.append(row)
        frame = pd.DataFrame(rows)
        order = ["scenario", "prior", *PARAM_COLUMNS]
        frame = frame.sort_values(order, na_position="first", kind="stable")
        lead = ["scenario", "prior", *PARAM_COLUMNS, "tcv", "sp", "mss",
                "rmss", "max_mss", "max_rmss"]
        return frame[lead + [c for c in frame.columns if c not in lead]] \
            .reset_index(drop=True)

    def run_across(self, resume: bool = True) -> pd.DataFrame:
        if self.plan.mode != "across":
            raise InputError("plan is not an across-prior study")
        done = self.run_cells(resume)
        rows = [self._summarise(cell, done[cell.index])
                for cell in self.cells()]
        frame = pd.DataFrame(rows)
        lead = ["prior", "scenario", "mss", "rmss", "max_mss", "max_rmss",
                "sp", "sp_q05", "sp_q95"]
        return frame[lead + [c for c in frame.columns if c not in lead]]

    def run(self, resume: bool = True) -> pd.DataFrame:
        if self.plan.mode == "within":
            return self.run_within(resume)
        return self.run_across(resume)

    def write(self, table: pd.DataFrame) -> list[str]:
        os.makedirs(self.plan.out_dir, exist_ok=True)
        stem = os.path.join(self.plan.out_dir, f"{self.plan.mode}_table")
        table.to_csv(stem + ".csv", index=False)
        with open(stem + ".md", "w") as f:
            f.write(render_markdown(table.drop(columns=["provenance"])))
        for sc in self.scenarios:
            sc.replicates.write(
                os.path.join(self.plan.out_dir, "replicates", _slug(sc.label))
            )
        return [stem + ".csv", stem + ".md"]


def run_within(plan: StudyPlan, rng=None, resume: bool = True):
    return StudyEngine(plan, rng).run_within(resume)


def run_across(plan: StudyPlan, rng=None, resume: bool = True):
    return StudyEngine(plan, rng).run_across(resume)
