"""Command-line front end: simulate, solve, compare, moments and zoo.

Configurations are JSON documents validated against
``schema/config.schema.json``; unknown keys are errors.  Every CSV row
carries the config hash and master seed, floats are written with 17
significant digits, and outputs contain no timestamps, so identical
inputs give byte-identical files.

Exit codes: 0 success, 1 a comparison verdict failed, 2 invalid
configuration, 3 a replicate was truncated by a guard.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from . import zoo
from .cumulant import SolverConfig, solve_cumulant
from .errors import GuardExceeded, SuperbranchError
from .mechanisms import (
    LimitSystemSpec,
    LocalMechanism,
    MixtureComponent,
    MotionGenerator,
    NonlocalMechanism,
    SiteSpace,
    build_particle_laws,
)
from .moments import excessive_gap, solve_T, solve_U
from .particles import SimConfig, run_replicates, sample_poisson_initial, simulate_trace
from .rng import RngStream
from .stats import compare, summarize

EXIT_OK = 0
EXIT_VERDICT = 1
EXIT_CONFIG = 2
EXIT_TRUNCATED = 3

COMPARE_COLUMNS = [
    "scenario_id", "model", "k", "replicates", "t", "f_id",
    "empirical", "stderr", "theoretical", "z_score", "verdict",
]
PROVENANCE_COLUMNS = ["config_hash", "master_seed"]


class ConfigError(Exception):
    """Configuration could not be read or validated."""


def fmt(x):
    """Round-trip float text (17 significant digits)."""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "%.17g" % float(x)
    return str(x)


def _reject_constant(name):
    raise ConfigError(f"non-finite number {name} is not allowed")


def _schema():
    text = resources.files("superbranch").joinpath("schema/config.schema.json").read_text()
    return json.loads(text)


def load_config(path, overrides=None):
    """Parse, apply flag overrides and validate; returns (config, hash)."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        cfg = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    exp = cfg.setdefault("experiment", {}) if isinstance(cfg, dict) else None
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "method":
            cfg.setdefault("solver", {})["method"] = value
        elif isinstance(exp, dict):
            exp[key] = value
    validator = jsonschema.Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for err in errors:
            where = "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path).lstrip(".")
            lines.append(f"{where or '<root>'}: {err.message}")
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines))
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return cfg, hashlib.sha256(canonical.encode()).hexdigest()[:16]


# -- scenario assembly --------------------------------------------------------


@dataclass
class Scenario:
    scenario_id: str
    model: str
    spec: Optional[LimitSystemSpec]
    bundle: object
    mu: np.ndarray
    functions: dict
    initial: dict = field(default_factory=dict)

    @property
    def n_sites(self):
        return self.spec.n_sites


def _spec_from_sections(cfg):
    if "motion" not in cfg:
        raise ConfigError("config needs either a model section or a motion section")
    q = np.asarray(cfg["motion"]["qmatrix"], dtype=float)
    n = q.shape[0] if q.ndim == 2 else 0
    space_cfg = cfg.get("space")
    if space_cfg:
        fact = space_cfg.get("factorization")
        space = SiteSpace(tuple(space_cfg["sites"]), tuple(map(tuple, fact)) if fact else None)
    else:
        space = SiteSpace.range(n)
    loc = cfg.get("local")
    rebirth = bool(cfg.get("rebirth", False))
    nl_cfg = cfg.get("nonlocal")
    if nl_cfg:
        mixtures = tuple(
            tuple(
                MixtureComponent(c.get("weight", 1.0), c["pi"], c.get("d", 0.0), tuple(map(tuple, c.get("atoms", []))))
                for c in site
            )
            for site in nl_cfg["mixtures"]
        )
        nonlocal_ = NonlocalMechanism(nl_cfg["beta"], mixtures)
    else:
        nonlocal_ = NonlocalMechanism.none(n)
    if loc:
        atoms = loc.get("atoms") or [[] for _ in range(len(loc["b"]))]
        local = LocalMechanism(loc["b"], loc["c"], tuple(tuple(map(tuple, a)) for a in atoms))
    elif rebirth:
        local = LocalMechanism(-np.asarray(nonlocal_.beta), np.zeros(n))
    else:
        local = LocalMechanism.uniform(n)
    return LimitSystemSpec(space, MotionGenerator(q), local, nonlocal_, rebirth=rebirth)


def build_scenario(cfg) -> Scenario:
    model_cfg = cfg.get("model")
    if model_cfg:
        name = model_cfg["name"]
        entry = zoo.MODELS.get(name)
        if entry is None:
            raise ConfigError(f"model.name: unknown model {name!r}; known: {', '.join(zoo.model_names())}")
        errors = list(jsonschema.Draft202012Validator(entry.schema).iter_errors(model_cfg["params"]))
        if errors:
            raise ConfigError("model.params: " + "; ".join(e.message for e in errors))
        bundle = entry.build(model_cfg["params"])
        if isinstance(bundle, zoo.ControlledImmigration):
            spec = bundle.flat
        elif isinstance(bundle, zoo.AgeReproduction):
            spec = bundle.spec
        elif isinstance(bundle, zoo.MultilevelSpec):
            spec = None
        else:
            spec = bundle
    else:
        name, bundle, spec = "general", None, _spec_from_sections(cfg)
    init = cfg.get("initial", {})
    if spec is None:
        n = 0
        mu = np.zeros(0)
    else:
        n = spec.n_sites
        mu = np.asarray(init.get("mu", [1.0] + [0.0] * (n - 1)), dtype=float)
        if mu.shape != (n,) or np.any(mu < 0):
            raise ConfigError(f"initial.mu: need {n} non-negative values")
    funcs = cfg.get("functions") or ({"one": [1.0] * n} if n else {})
    functions = {}
    for key, vals in funcs.items():
        arr = np.asarray(vals, dtype=float)
        if arr.shape != (n,) or np.any(arr < 0):
            raise ConfigError(f"functions.{key}: need {n} non-negative values")
        functions[key] = arr
    return Scenario(cfg.get("scenario_id", "scenario"), name, spec, bundle, mu, functions, init)


def _experiment(cfg):
    exp = cfg["experiment"]
    horizon = float(exp["horizon"])
    snaps = tuple(exp.get("snapshot_times") or (horizon,))
    sim = SimConfig(
        horizon,
        snaps,
        max_events=exp.get("max_events", 10**9),
        max_population=exp.get("max_population", 10**7),
    )
    return exp, sim


def _solver_config(cfg):
    s = cfg.get("solver", {})
    return SolverConfig(s.get("step", 1e-3), s.get("method", "rk4-ode"), s.get("picard_tol", 1e-10), s.get("picard_max_iter", 200))


# -- theory -------------------------------------------------------------------


class Theory:
    """Reference values of E exp(-X_t(f)) or E X_t(f) for a scenario (cached per f)."""

    def __init__(self, scn: Scenario, solver: SolverConfig, horizon):
        self.scn, self.solver, self.horizon = scn, solver, horizon
        self._cache = {}

    def _fields(self, f_id, statistic):
        key = (f_id, statistic)
        if key in self._cache:
            return self._cache[key]
        scn, f = self.scn, self.scn.functions[f_id]
        bundle = scn.bundle
        if isinstance(bundle, zoo.AgeReproduction):
            if np.ptp(f) != 0:
                raise ConfigError("age-reproduction references need constant test functions")
            solve = bundle.renewal if statistic == "laplace" else bundle.moment
            times = np.arange(grid_count(self.horizon, self.solver.step) + 1) * self.solver.step
            grid = solve(float(f[0]), self.horizon, self.solver.step, times=times)
            age = float(scn.initial.get("age", 0.0))
            val = lambda t: float(grid.at(t, age)) * scn.mu[0]
        elif isinstance(bundle, zoo.ControlledImmigration) and statistic == "laplace":
            n = bundle.n_base
            v1, v2 = bundle.solve(f[:n], f[n:], self.horizon, self.solver)
            val = lambda t: float(scn.mu[:n] @ v1.at(t) + scn.mu[n:] @ v2.at(t))
        elif statistic == "laplace":
            fld = solve_cumulant(scn.spec, f, self.horizon, self.solver)
            val = lambda t: float(scn.mu @ fld.at(t))
        else:
            fld = solve_T(scn.spec, f, self.horizon, self.solver)
            val = lambda t: float(scn.mu @ fld.at(t))
        self._cache[key] = val
        return val

    def reference(self, f_id, t, statistic):
        val = self._fields(f_id, statistic)(t)
        return math.exp(-val) if statistic == "laplace" else val


def grid_count(horizon, step):
    return int(round(horizon / step))


# -- output -------------------------------------------------------------------


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def _write_summary(path, summary):
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _ks(exp):
    return [int(k) for k in exp.get("k", [100])]


def _run_all(scn, exp, sim, seed):
    results = {}
    for k in _ks(exp):
        laws = build_particle_laws(scn.spec, k)
        results[k] = run_replicates(
            laws,
            scn.spec,
            scn.mu,
            k,
            sim,
            int(exp.get("replicates", 100)),
            seed,
            functions=scn.functions,
            initial_mass=scn.initial.get("mass", 1.0 if scn.spec.mass_config is not None else None),
            initial_age=float(scn.initial.get("age", 0.0)),
        )
    return results


def _event_log(scn, exp, sim, seed, capacity, out):
    k = _ks(exp)[0]
    laws = build_particle_laws(scn.spec, k)
    cfg = SimConfig(sim.horizon, sim.snapshot_times, sim.max_events, sim.max_population, capacity)
    gen = RngStream(seed, 0).generator()
    mass = scn.initial.get("mass", 1.0 if scn.spec.mass_config is not None else None)
    init = sample_poisson_initial(scn.mu, k, gen, sim.max_population, mass=mass, age=float(scn.initial.get("age", 0.0)))
    trace = simulate_trace(laws, scn.spec, init, cfg, gen)
    kinds = {0: "jump", 1: "branch", 2: "death"}
    rows = [(t, kinds[int(r[0])], r[1], r[2], r[3]) for t, r in zip(trace.log_t, trace.log_i)]
    _write_csv(out / "events.csv", ["t", "event", "site", "detail", "count"], rows)


def cmd_simulate(cfg, chash, out, args):
    scn = build_scenario(cfg)
    exp, sim = _experiment(cfg)
    seed = int(exp.get("master_seed", 0))
    if isinstance(scn.bundle, zoo.MultilevelSpec):
        return _simulate_multilevel(scn, cfg, exp, sim, seed, chash, out)
    results = _run_all(scn, exp, sim, seed)
    rows, truncated = [], {}
    for k, res in results.items():
        truncated[str(k)] = list(res.truncated)
        for r in range(res.n):
            for i, t in enumerate(res.snapshot_times):
                for j, f_id in enumerate(res.function_names):
                    rows.append((scn.scenario_id, scn.model, k, r, t, f_id, res.values[r, i, j],
                                 r in res.truncated, chash, seed))
    _write_csv(out / "simulate.csv",
               ["scenario_id", "model", "k", "replicate", "t", "f_id", "value", "truncated"] + PROVENANCE_COLUMNS, rows)
    if args.event_log:
        _event_log(scn, exp, sim, seed, args.event_log, out)
    _write_summary(out / "summary.json", {
        "subcommand": "simulate", "scenario_id": scn.scenario_id, "model": scn.model,
        "config_hash": chash, "master_seed": seed, "truncated": truncated,
    })
    return EXIT_TRUNCATED if any(truncated.values()) else EXIT_OK


def _simulate_multilevel(scn, cfg, exp, sim, seed, chash, out):
    spec = scn.bundle
    initial = [zoo.Level2Particle(p["island"], p["counts"]) for p in scn.initial.get("level2", [])]
    if not initial:
        raise ConfigError("initial.level2: multilevel runs need at least one level-2 individual")
    rows, branch, suppressed = [], 0, 0
    for r in range(int(exp.get("replicates", 100))):
        trace = zoo.simulate_multilevel(spec, initial, sim.horizon, sim.snapshot_times, RngStream(seed, r))
        branch += trace.branch_events
        suppressed += trace.suppressed
        for t, parts in trace.snapshots:
            rows.append((scn.scenario_id, scn.model, r, t, len(parts), sum(int(p.counts.sum()) for p in parts), chash, seed))
    _write_csv(out / "simulate.csv",
               ["scenario_id", "model", "replicate", "t", "level2_count", "level1_count"] + PROVENANCE_COLUMNS, rows)
    _write_summary(out / "summary.json", {
        "subcommand": "simulate", "scenario_id": scn.scenario_id, "model": scn.model, "config_hash": chash,
        "master_seed": seed, "branch_events": branch, "suppressed_offspring": suppressed,
    })
    return EXIT_OK


def _require_solvable(scn):
    if scn.spec is None:
        raise ConfigError("model.name: the multilevel model has no solver; use simulate")


def cmd_solve(cfg, chash, out, args):
    scn = build_scenario(cfg)
    _require_solvable(scn)
    exp, sim = _experiment(cfg)
    solver = _solver_config(cfg)
    seed = int(exp.get("master_seed", 0))
    rows = []
    for f_id, f in scn.functions.items():
        if isinstance(scn.bundle, zoo.AgeReproduction):
            times = np.arange(grid_count(sim.horizon, solver.step) + 1) * solver.step
            grid = scn.bundle.renewal(float(f[0]), sim.horizon, solver.step, times=times)
            for t, w in zip(times, grid.newborn):
                rows.append((scn.scenario_id, scn.model, solver.method, f_id, t, 0, w, chash, seed))
            continue
        if isinstance(scn.bundle, zoo.ControlledImmigration):
            n = scn.bundle.n_base
            v1, v2 = scn.bundle.solve(f[:n], f[n:], sim.horizon, solver)
            times, values = v1.times, np.hstack([v1.values, v2.values])
        else:
            fld = solve_cumulant(scn.spec, f, sim.horizon, solver)
            times, values = fld.times, fld.values
        for i, t in enumerate(times):
            for x in range(values.shape[1]):
                rows.append((scn.scenario_id, scn.model, solver.method, f_id, t, x, values[i, x], chash, seed))
    _write_csv(out / "solve.csv",
               ["scenario_id", "model", "method", "f_id", "t", "site", "value"] + PROVENANCE_COLUMNS, rows)
    _write_summary(out / "summary.json", {
        "subcommand": "solve", "scenario_id": scn.scenario_id, "model": scn.model, "config_hash": chash,
        "master_seed": seed, "solver": {"step": solver.step, "method": solver.method, "picard_tol": solver.picard_tol},
    })
    return EXIT_OK


def cmd_compare(cfg, chash, out, args):
    scn = build_scenario(cfg)
    _require_solvable(scn)
    exp, sim = _experiment(cfg)
    solver = _solver_config(cfg)
    seed = int(exp.get("master_seed", 0))
    statistic = exp.get("statistic", "laplace")
    sigma, bias = float(exp.get("sigma_budget", 3.0)), float(exp.get("bias_budget", 0.01))
    theory = Theory(scn, solver, sim.horizon)
    results = _run_all(scn, exp, sim, seed)
    rows, verdicts, truncated = [], [], {}
    for k, res in results.items():
        truncated[str(k)] = list(res.truncated)
        for t in res.snapshot_times:
            for f_id in res.function_names:
                s = summarize(res.samples(t, f_id, statistic))
                ref = theory.reference(f_id, float(t), statistic)
                v = compare(s, ref, sigma, bias)
                z = (s.mean - ref) / s.stderr if s.stderr > 0 else 0.0
                verdict = "pass" if v.passed else "fail"
                rows.append((scn.scenario_id, scn.model, k, res.n, t, f_id, s.mean, s.stderr, ref, z, verdict, chash, seed))
                verdicts.append({"k": k, "t": float(t), "f_id": f_id, "verdict": verdict, "margin": v.margin})
    _write_csv(out / "compare.csv", COMPARE_COLUMNS + PROVENANCE_COLUMNS, rows)
    _write_summary(out / "summary.json", {
        "subcommand": "compare", "scenario_id": scn.scenario_id, "model": scn.model, "config_hash": chash,
        "master_seed": seed, "statistic": statistic,
        "budgets": {"sigma_budget": sigma, "bias_budget": bias}, "verdicts": verdicts, "truncated": truncated,
    })
    if any(truncated.values()):
        return EXIT_TRUNCATED
    return EXIT_OK if all(v["verdict"] == "pass" for v in verdicts) else EXIT_VERDICT


def cmd_moments(cfg, chash, out, args):
    scn = build_scenario(cfg)
    _require_solvable(scn)
    exp, sim = _experiment(cfg)
    solver = _solver_config(cfg)
    seed = int(exp.get("master_seed", 0))
    rows, gaps = [], {}
    for f_id, f in scn.functions.items():
        if isinstance(scn.bundle, zoo.AgeReproduction):
            times = np.arange(grid_count(sim.horizon, solver.step) + 1) * solver.step
            grid = scn.bundle.moment(float(f[0]), sim.horizon, solver.step, times=times)
            for t, w in zip(times, grid.newborn):
                rows.append((scn.scenario_id, scn.model, "T", f_id, t, 0, w, chash, seed))
            continue
        for kind, solve in (("T", solve_T), ("U", solve_U)):
            fld = solve(scn.spec, f, sim.horizon, solver)
            for i, t in enumerate(fld.times):
                for x in range(fld.values.shape[1]):
                    rows.append((scn.scenario_id, scn.model, kind, f_id, t, x, fld.values[i, x], chash, seed))
        gaps[f_id] = excessive_gap(scn.spec, f, sim.snapshot_times, solver)
    _write_csv(out / "moments.csv",
               ["scenario_id", "model", "semigroup", "f_id", "t", "site", "value"] + PROVENANCE_COLUMNS, rows)
    _write_summary(out / "summary.json", {
        "subcommand": "moments", "scenario_id": scn.scenario_id, "model": scn.model, "config_hash": chash,
        "master_seed": seed, "excessive_gap": gaps,
    })
    return EXIT_OK


def cmd_zoo(args):
    listing = [{"name": e.name, "summary": e.summary, "parameters": e.schema} for e in zoo.MODELS.values()]
    if args.json:
        json.dump(listing, sys.stdout, indent=2, sort_keys=True)
        sys.stdout.write("\n")
    else:
        for e in listing:
            sys.stdout.write(f"{e['name']}: {e['summary']}\n")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "solve": cmd_solve, "compare": cmd_compare, "moments": cmd_moments}


def _parser():
    p = argparse.ArgumentParser(prog="superbranch", description="Branching particle systems and their superprocess limits.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON configuration file")
        sp.add_argument("--seed", type=int, help="override experiment.master_seed")
        sp.add_argument("--replicates", type=int, help="override experiment.replicates")
        sp.add_argument("--k", type=int, action="append", help="density (repeatable); overrides experiment.k")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--method", choices=["rk4-ode", "picard-mild"], help="override solver.method")
        if name == "simulate":
            sp.add_argument("--event-log", type=int, default=0, metavar="N",
                            help="write the first N events of replicate 0 to events.csv")
    z = sub.add_parser("zoo")
    z.add_argument("--json", action="store_true", help="print parameter schemas as JSON")
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    if args.command == "zoo":
        return cmd_zoo(args)
    overrides = {"master_seed": args.seed, "replicates": args.replicates, "k": args.k, "method": args.method}
    try:
        cfg, chash = load_config(args.config, overrides)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, chash, out, args)
    except GuardExceeded as exc:
        sys.stderr.write(f"superbranch: {exc}\n")
        return EXIT_TRUNCATED
    except (ConfigError, SuperbranchError) as exc:
        sys.stderr.write(f"superbranch: {exc}\n")
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
