import argparse
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import metadata

import numpy as np
import pandas as pd

import study
import vizualize
from disease_map import RHAT_THRESHOLD, DiseaseMap
from engine.templates import pgamma, priors, simgen
from engine.templates.graph import QUEEN, ROOK, from_matrix, load_graph
from engine.templates.mcmc import McmcConfig
from engine.templates.priors import PriorSpec
from engine.utils.errors import (
    ConvergenceError,
    InputError,
    SmoothGaugeError,
    UsageError,
)
from engine.utils.helper import file_digest, fresh_seed

logger = logging.getLogger("smooth_gauge")

PROG = "smooth-gauge"
MANIFEST_NAME = "run_manifest.json"


def tool_version() -> str:
    try:
        return metadata.version(PROG)
    except metadata.PackageNotFoundError:
        return "0.1.0"


@dataclass
class RunManifest:
    command: str
    config: dict = field(default_factory=dict)
    seed: int | None = None
    inputs: dict = field(default_factory=dict)
    version: str = field(default_factory=tool_version)
    versions: dict = field(default_factory=lambda: {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "pandas": pd.__version__,
    })
    timings: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    status: str = "running"
    error: str | None = None

    def add_input(self, path: str | None):
        if path and os.path.isfile(path):
            self.inputs[path] = file_digest(path)

    def write(self, out_dir: str) -> str:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, MANIFEST_NAME)
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2, default=str)
        return path


# --- argument helpers ------------------------------------------------------


def parse_grid(text: str) -> list[float]:
    """"0.1,0.5,0.9" or "lo:hi:n" (n evenly spaced points)."""
    try:
        if ":" in text:
            lo, hi, n = text.split(":")
            return list(np.linspace(float(lo), float(hi), int(n)))
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad grid {text!r}; use a,b,c or lo:hi:n")


def parse_sweep(text: str) -> tuple[str, list[float]]:
    if "=" not in text:
        raise UsageError("--sweep takes param=lo:hi:n")
    name, grid = text.split("=", 1)
    return name.strip(), parse_grid(grid)


def read_column(path: str, column: str) -> np.ndarray:
    try:
        frame = pd.read_csv(path)
    except (OSError, UnicodeDecodeError, pd.errors.ParserError,
            pd.errors.EmptyDataError) as exc:
        raise InputError(f"cannot read {path}: {exc}")
    if column not in frame.columns:
        raise InputError(f"{path} needs a {column!r} column")
    values = pd.to_numeric(frame[column], errors="coerce")
    if values.isna().any():
        raise InputError(f"{path}: non-numeric {column} values")
    return values.to_numpy(dtype=float)


def mcmc_config(args) -> McmcConfig:
    return McmcConfig.from_file(
        args.mcmc,
        args.mcmc_section,
        chains=args.chains,
        iterations=args.iterations,
        burn_in=args.burn_in,
        thin=args.thin,
        seed=args.seed,
    )


def ensure_seed(args, manifest: RunManifest):
    if getattr(args, "seed", None) is None:
        args.seed = fresh_seed()
        logger.info("no --seed given, using %d", args.seed)
    manifest.seed = args.seed


# --- commands --------------------------------------------------------------


def cmd_tcv(args, manifest: RunManifest) -> int:
    if args.graph:
        graph = load_graph(args.graph, rule=args.rule)
        manifest.add_input(args.graph)
    elif args.A:
        graph = from_matrix(np.zeros((args.A, args.A)))
    else:
        raise UsageError("tcv needs --graph or --A")
    base = {
        "sigma2": args.sigma2, "nu": args.nu, "eta": args.eta,
        "lambda": args.lam, "psi": args.psi,
    }
    base = {k: v for k, v in base.items() if v is not None}
    points = [base]
    if args.sweep:
        name, grid = parse_sweep(args.sweep)
        if name not in priors.PARAM_ALIASES:
            raise UsageError(
                f"cannot sweep {name!r}; allowed: {priors.allowed_parameters()}"
            )
        points = [{**base, name: v} for v in grid]
    rows = []
    for params in points:
        try:
            spec = PriorSpec.from_params(args.prior, params)
        except InputError as exc:
            raise UsageError(
                f"{exc} (allowed: {priors.allowed_parameters()})"
            )
        rows.append(
            {
                "prior": spec.kind.value,
                "sigma2": spec.sigma2,
                "nu": spec.nu,
                "eta": spec.eta,
                "lambda": spec.lam,
                "psi": spec.psi,
                "tcv": priors.tcv(spec, graph),
                "closed_form": spec.kind in priors.CLOSED_FORM_KINDS,
            }
        )
    table = pd.DataFrame(rows).dropna(axis=1, how="all")
    if args.out:
        table.to_csv(args.out, index=False)
        manifest.outputs.append(args.out)
    print(table.to_string(index=False))
    return 0


def cmd_fit(args, manifest: RunManifest) -> int:
    ensure_seed(args, manifest)
    for path in (args.counts, args.pop, args.graph, args.mcmc):
        manifest.add_input(path)
    presets = study.load_presets()
    hyper = study.resolve_hyper(args.hyper, presets)
    cfg = mcmc_config(args)
    manifest.config = {
        "prior": args.prior,
        "hyper": hyper.describe(),
        "mcmc": asdict(cfg),
        "rate_scale": args.rate_scale,
    }
    dm = DiseaseMap.from_files(args.graph, args.counts, args.pop,
                               rule=args.rule, rate_scale=args.rate_scale)
    start = time.perf_counter()
    result = dm.fit(args.prior, hyper, cfg, sp_weighted=args.sp_weighted)
    manifest.timings["fit"] = time.perf_counter() - start
    manifest.diagnostics = {
        "max_rhat": result.max_rhat,
        "min_ess": result.min_ess,
        "acceptance": result.samples.acceptance,
    }
    manifest.outputs += dm.write(result, args.out)

    summary = result.summary()
    print(f"prior {summary['prior']}: SP={summary['sp']:.3f} "
          f"MSS={summary['mss']:.4g} RMSS={summary['rmss']:.4g} "
          f"TCV={summary['tcv_mean']:.4g} "
          f"[{summary['tcv_q05']:.4g}, {summary['tcv_q95']:.4g}]")
    print(result.hyper.to_string(index=False))
    if not result.converged() and not args.allow_nonconverged:
        raise ConvergenceError(
            f"max R-hat {result.max_rhat:.3f} > {RHAT_THRESHOLD}; rerun "
            "with more iterations or pass --allow-nonconverged"
        )
    return 0


def cmd_simulate(args, manifest: RunManifest) -> int:
    presets = study.load_presets()
    manifest.add_input(args.scenario)
    spec = study.resolve_scenario(args.scenario, presets)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.B is not None:
        overrides["B"] = args.B
    if args.variability is not None:
        spec = spec.with_variability(args.variability)
    spec = simgen.ScenarioSpec.from_dict({**spec.to_dict(), **overrides})
    manifest.seed = spec.seed
    manifest.config = spec.to_dict()
    start = time.perf_counter()
    sim = simgen.simulate(spec)
    manifest.timings["simulate"] = time.perf_counter() - start
    sim.replicates.write(args.out)
    with open(os.path.join(args.out, "graph.txt"), "w") as f:
        f.write(sim.region.graph.to_edge_list())
    manifest.outputs += [
        os.path.join(args.out, name)
        for name in ("counts.csv", "rates.csv", "graph.txt")
    ]
    manifest.diagnostics = {"replicate_digest": sim.replicates.digest}
    print(f"{spec.name}: {sim.region.graph.order} areas, B={spec.B}, "
          f"rates {sim.replicates.true_rates.min() * 1e5:.1f}-"
          f"{sim.replicates.true_rates.max() * 1e5:.1f} per 100,000")
    return 0


def cmd_study(args, manifest: RunManifest) -> int:
    presets = study.load_presets()
    if os.path.isfile(args.plan):
        manifest.add_input(args.plan)
        data = study.read_plan(args.plan)
    else:
        data = {"plan": args.plan}
    data["out_dir"] = args.out
    if args.seed is not None:
        data["seed"] = args.seed
    if args.B is not None:
        data["B"] = args.B
    if args.workers is not None:
        data["workers"] = args.workers
    if args.mcmc_section:
        data["mcmc"] = {"section": args.mcmc_section, "file": args.mcmc}
    plan = study.StudyPlan.from_dict(data, presets)
    manifest.seed = plan.seed
    manifest.config = {
        "mode": plan.mode,
        "plan": data,
        "mcmc": asdict(plan.mcmc),
        "B": plan.B,
    }
    engine = study.StudyEngine(plan)
    start = time.perf_counter()
    table = engine.run(resume=not args.no_resume)
    manifest.timings["study"] = time.perf_counter() - start
    manifest.outputs += engine.write(table)
    manifest.diagnostics = {
        "provenance": engine.provenance,
        "failed_fits": int(table["failed"].sum()),
    }
    cols = [c for c in table.columns
            if c not in ("provenance", "error") and not c.startswith("post_")]
    print(table[cols].to_string(index=False))
    return 0


def cmd_pg_curve(args, manifest: RunManifest) -> int:
    ensure_seed(args, manifest)
    if bool(args.expected) == bool(args.pop):
        raise UsageError("pg-curve takes exactly one of --expected, --pop")
    if args.expected:
        manifest.add_input(args.expected)
        E = read_column(args.expected, "expected")
    else:
        manifest.add_input(args.pop)
        E = read_column(args.pop, "population") * args.rbar
    mu_grid = parse_grid(args.mu)
    s2_grid = parse_grid(args.sigma2)
    manifest.config = {"mu": mu_grid, "sigma2": s2_grid, "B": args.B,
                       "rbar": args.rbar, "rate_scale": args.rate_scale}
    start = time.perf_counter()
    table = pgamma.pg_curve_study(
        E, mu_grid, s2_grid, args.B, np.random.default_rng(args.seed),
        rbar=args.rbar, rate_scale=args.rate_scale,
    )
    manifest.timings["pg_curve"] = time.perf_counter() - start
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "pg_curve.csv")
    table.to_csv(path, index=False)
    ref = pgamma.reference_table(
        E / args.rbar, [args.rbar * m for m in mu_grid], args.rate_scale
    )
    ref_path = os.path.join(args.out, "pg_reference.csv")
    ref.to_csv(ref_path, index=False)
    manifest.outputs += [path, ref_path]
    print(table[table["metric"] == "mss"].to_string(index=False))
    return 0


def cmd_map(args, manifest: RunManifest) -> int:
    manifest.add_input(args.rates)
    manifest.add_input(args.polygons)
    rates = vizualize.read_rates(args.rates, args.column, args.scale)
    bins = vizualize.write_map(
        args.polygons, rates, args.out, title=args.title or "",
        n_bins=args.bins, labels=not args.no_labels,
    )
    manifest.outputs.append(args.out)
    if args.png:
        joined = vizualize.join(
            vizualize.load_features(args.polygons), rates
        )
        vizualize.render_png(joined, args.png, bins)
        manifest.outputs.append(args.png)
    manifest.config = {"bins": list(bins.edges)}
    print(f"wrote {args.out} with {bins.n_bins} bins")
    return 0


# --- parser ----------------------------------------------------------------


def _add_mcmc_flags(p):
    p.add_argument("--mcmc", default=study.MCMC_CONFIG_FILE,
                   help="INI file with sampler sections")
    p.add_argument("--mcmc-section", default=None,
                   help="section of --mcmc to use")
    p.add_argument("--chains", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--burn-in", type=int)
    p.add_argument("--thin", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=PROG,
        description="Measure how much smoothing spatial priors induce.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tcv", help="total conditional variance of a prior")
    p.add_argument("--prior", required=True)
    p.add_argument("--graph", help="GeoJSON, edge list or lattice:RxC")
    p.add_argument("--A", type=int, help="number of areas (iid only)")
    p.add_argument("--rule", choices=[QUEEN, ROOK], default=QUEEN)
    p.add_argument("--sigma2", type=float, required=True)
    p.add_argument("--nu", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--psi", type=float)
    p.add_argument("--sweep", help="param=lo:hi:n")
    p.add_argument("--out", help="CSV path")
    p.set_defaults(func=cmd_tcv)

    p = sub.add_parser("fit", help="fit one prior to observed counts")
    p.add_argument("--counts", required=True)
    p.add_argument("--pop", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--rule", choices=[QUEEN, ROOK], default=QUEEN)
    p.add_argument("--prior", required=True)
    p.add_argument("--hyper", default="vague-sd",
                   help='preset (small, medium, large, uniform, vague-sd) '
                        'or e.g. "sigma2=U(0,0.01)"')
    _add_mcmc_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--rate-scale", type=float, default=1e5)
    p.add_argument("--sp-weighted", action="store_true")
    p.add_argument("--allow-nonconverged", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit, mcmc_section_default="MCMC")

    p = sub.add_parser("simulate", help="generate a replicate set")
    p.add_argument("--scenario", required=True,
                   help="scenario JSON file or preset name")
    p.add_argument("--seed", type=int)
    p.add_argument("--B", type=int)
    p.add_argument("--variability", type=float,
                   help="scale the rate variability by this factor")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("study", help="run a within- or across-prior study")
    p.add_argument("--plan", required=True,
                   help="plan JSON file or preset name")
    p.add_argument("--mcmc", default=study.MCMC_CONFIG_FILE)
    p.add_argument("--mcmc-section")
    p.add_argument("--seed", type=int)
    p.add_argument("--B", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--no-resume", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("pg-curve", help="Poisson-Gamma smoothing curves")
    p.add_argument("--expected", help="CSV with an expected column")
    p.add_argument("--pop", help="CSV with a population column")
    p.add_argument("--rbar", type=float, default=1e-4,
                   help="reference rate turning populations into E")
    p.add_argument("--mu", default="1")
    p.add_argument("--sigma2", default="0.001,0.01,0.05,0.1,0.5,1")
    p.add_argument("--B", type=int, default=200)
    p.add_argument("--rate-scale", type=float, default=1e5)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pg_curve)

    p = sub.add_parser("map", help="choropleth of area rates")
    p.add_argument("--rates", required=True)
    p.add_argument("--polygons", required=True)
    p.add_argument("--out", required=True, help="SVG path")
    p.add_argument("--column")
    p.add_argument("--scale", type=float)
    p.add_argument("--bins", type=int, default=vizualize.N_BINS)
    p.add_argument("--title")
    p.add_argument("--no-labels", action="store_true")
    p.add_argument("--png", help="also write a raster preview here")
    p.set_defaults(func=cmd_map)
    return parser


def _manifest_dir(args) -> str | None:
    out = getattr(args, "out", None)
    if not out:
        return None
    if args.command in ("tcv", "map"):
        return os.path.dirname(os.path.abspath(out))
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(
        level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )
    if getattr(args, "mcmc_section", "unset") is None:
        args.mcmc_section = getattr(args, "mcmc_section_default", None)

    manifest = RunManifest(command=args.command)
    start = time.perf_counter()
    code = 0
    try:
        code = args.func(args, manifest)
        manifest.status = "ok"
    except SmoothGaugeError as exc:
        code = exc.exit_code
        manifest.status = "failed"
        manifest.error = f"{type(exc).__name__}: {exc}"
        print(f"{PROG}: error: {exc}", file=sys.stderr)
    finally:
        manifest.timings["total"] = time.perf_counter() - start
        out_dir = _manifest_dir(args)
        if out_dir:
            manifest.write(out_dir)
    return code


if __name__ == "__main__":
    sys.exit(main())
