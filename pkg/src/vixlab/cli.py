"""``vixlab`` command line.

Exit codes: 0 when everything passes, 1 when an enabled check fails, 2 for
input errors (unreadable chains, bad scenarios, unresolvable models).
"""

from __future__ import annotations

import json
import math
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import __version__
from . import consistency as cons
from .chain import ChainError, compute_single_expiry_vix, interpolate_vix_30d, read_chain
from .models import ModelError
from .scenario import Scenario, ScenarioError, load_scenario
from .sde import NoiseSpec, SimulationError, resolve_threads, simulate
from .vixcore import FKError

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2
_INPUT_ERRORS = (ScenarioError, ChainError, ModelError, cons.MeshError, SimulationError, FKError,
                 FileNotFoundError, ValueError)


def _fail_input(msg: str):
    click.echo(f"error: {msg}", err=True)
    sys.exit(EXIT_INPUT)


def _run_dir(out: str, tag: str) -> Path:
    stamp = time.strftime("%Y%m%dT%H%M%SZ", time.gmtime())
    base = Path(out) / f"{tag}-{stamp}"
    path, n = base, 0
    while path.exists():
        n += 1
        path = base.with_name(f"{base.name}-{n}")
    path.mkdir(parents=True)
    return path


def _dump(obj) -> str:
    return json.dumps(cons._jsonable(obj), indent=2, sort_keys=True) + "\n"


def _load(scenario: str, seed: int | None) -> Scenario:
    try:
        return load_scenario(scenario, seed)
    except _INPUT_ERRORS as e:
        _fail_input(str(e))


@click.group()
def main():
    """Index / VIX-futures toolkit."""


@main.command()
def version():
    """Print the package version."""
    click.echo(__version__)


@main.command("vix-from-chain")
@click.argument("chains", nargs=-1, required=True, type=click.Path())
@click.option("--out", default="runs", show_default=True, help="Parent of the run directory.")
def vix_from_chain(chains, out):
    """VIX from one chain (single expiry) or two chains (30-day blend)."""
    if len(chains) > 2:
        _fail_input("give one or two chain files")
    try:
        parsed = [read_chain(p) for p in chains]
        comps = [compute_single_expiry_vix(c) for c in parsed]
        report = {"expiries": [c.to_dict() for c in comps]}
        if len(comps) == 2:
            order = sorted(range(2), key=lambda i: parsed[i].days_to_expiry)
            a, b = order
            headline = interpolate_vix_30d(comps[a], comps[b], parsed[a], parsed[b])
            report["vix"] = headline
        else:
            headline = comps[0].sub_index
            report["sub_index"] = headline
    except (ChainError, ZeroDivisionError, OSError) as e:
        _fail_input(str(e))
    tag = "chain-" + "-".join(Path(p).stem for p in chains)
    run = _run_dir(out, tag)
    (run / "vix.json").write_text(_dump(report))
    click.echo(f"{headline:.2f}")
    click.echo(f"report: {run / 'vix.json'}", err=True)


def _summary(sc: Scenario, bundle) -> dict:
    times = bundle.times
    out = {"scenario_hash": sc.hash, "n_paths": bundle.n_paths, "n_steps": bundle.grid.n_steps,
           "seed": sc.simulation.seed, "scheme": bundle.meta.get("scheme"), "components": {}}
    for i, name in enumerate(bundle.components):
        term = bundle.states[:, -1, i]
        out["components"][name] = {"terminal_mean": float(term.mean()), "terminal_std": float(term.std(ddof=1))
                                   if term.size > 1 else 0.0}
    spec = sc.index_model
    idx = getattr(spec, "state_index", None)
    if getattr(spec, "sqrt_type", False) and idx is not None:
        x = bundle.states[:, :, idx]
        iv = np.trapezoid(x, times, axis=1) if hasattr(np, "trapezoid") else np.trapz(x, times, axis=1)
        se = float(iv.std(ddof=1) / math.sqrt(iv.size)) if iv.size > 1 else 0.0
        block = {"mean": float(iv.mean()), "se": se}
        if spec.name == "heston":
            p = spec.params
            T = times[-1] - times[0]
            k, th = p["kappa"], p["theta"]
            oracle = th * T + (p["v0"] - th) * (1.0 - math.exp(-k * T)) / k
            block["oracle"] = oracle
            block["z"] = (block["mean"] - oracle) / se if se > 0 else 0.0
        out["integrated_variance"] = block
    return out


@main.command("simulate")
@click.option("--scenario", "scenario_path", required=True, type=click.Path())
@click.option("--out", default="runs", show_default=True)
@click.option("--seed", type=int, default=None, help="Overrides the scenario seed.")
@click.option("--threads", type=int, default=None, help="Worker threads (default: VIXLAB_THREADS or 1).")
def simulate_cmd(scenario_path, out, seed, threads):
    """Simulate the index model and export paths plus summary statistics."""
    sc = _load(scenario_path, seed)
    sim = sc.simulation
    try:
        spec = sc.index_model
        bundle = simulate(spec, NoiseSpec(spec.dim, spec.correlation, seed=sim.seed), sim.grid, sim.n_paths,
                          scheme=sim.scheme, threads=resolve_threads(threads), keep_increments=True)
    except _INPUT_ERRORS as e:
        _fail_input(str(e))
    run = _run_dir(out, sc.hash)
    (run / "scenario.json").write_text(_dump(sc.document))
    if sc.outputs.paths == "csv":
        bundle.write_csv(run / "paths.csv")
    elif sc.outputs.paths == "binary":
        bundle.write_binary(run / "paths.bin")
    summary = _summary(sc, bundle)
    (run / "summary.json").write_text(_dump(summary))
    click.echo(_dump(summary), nl=False)
    click.echo(f"run directory: {run}", err=True)


_NEEDS_TS = {"cc2", "cc3", "cc4", "genpde", "c1_pathwise", "martingale"}


def run_checks(sc: Scenario, threads: int | None = None, tolerance_scale: float = 1.0) -> cons.ConsistencyReport:
    """Evaluate every enabled check of ``sc``; checks run concurrently, assembly is ordered."""
    enabled = sc.checks.enabled
    if not enabled:
        raise ScenarioError("checks.enabled: no checks enabled")
    n_threads = resolve_threads(threads)
    spec, sim = sc.index_model, sc.simulation
    needs_h = bool(set(enabled) & {"cc3", "cc4", "genpde", "c1_pathwise"}) or (
        sc.term_structure_doc is not None
        and sc.term_structure_doc.get("initial_curve", {"kind": "matched_exponential"})["kind"].startswith("matched"))
    hf = sc.variance_function(n_threads) if needs_h else None
    ts = None
    if set(enabled) & _NEEDS_TS:
        ts = sc.term_structure(hf, n_threads)
    lam = sc.lam
    bundle = simulate(spec, NoiseSpec(spec.dim, spec.correlation, seed=sim.seed), sim.grid, sim.n_paths,
                      scheme=sim.scheme, threads=n_threads)
    ivp = None
    if set(enabled) & {"cc4", "c1_pathwise", "martingale"}:
        ivp = cons.implied_vix_path(ts, bundle, lam, martingale="martingale" in enabled)
    tol = {c: sc.checks.tolerance(c, tolerance_scale) for c in enabled}
    times = np.linspace(sim.t0, ts.T_star, sc.checks.genpde_times) if ts is not None else None
    jobs = {
        "cc1": lambda: cons.check_cc1(spec, lam, bundle, tol["cc1"]),
        "cc2": lambda: cons.check_cc2(ts, lam, bundle, tol["cc2"]),
        "cc3": lambda: cons.check_cc3(ts, spec, hf, bundle, sc.convention, tol["cc3"]),
        "cc4": lambda: cons.check_cc4(ts, spec, hf, bundle, lam, sc.convention, tol=tol["cc4"], ivp=ivp),
        "genpde": lambda: cons.check_genpde(hf, spec, ts, times, tol["genpde"]),
        "c1_pathwise": lambda: cons.check_c1_pathwise(spec, ts, hf, bundle, tol["c1_pathwise"], ivp=ivp),
        "martingale": lambda: cons.martingale_diagnostic(ts, bundle, lam, ivp=ivp).as_check(),
    }
    with ThreadPoolExecutor(max_workers=max(1, min(n_threads, len(enabled)))) as pool:
        futures = [(c, pool.submit(jobs[c])) for c in enabled]
        results = {c: f.result() for c, f in futures}
    meta = {"n_paths": sim.n_paths, "n_steps": sim.n_steps, "seed": sim.seed, "tolerance_scale": tolerance_scale,
            "model": spec.name}
    return cons.ConsistencyReport(sc.hash, hf.provenance if hf is not None else "none", results, meta)


@main.command("check")
@click.option("--scenario", "scenario_path", required=True, type=click.Path())
@click.option("--out", default="runs", show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--threads", type=int, default=None)
@click.option("--tolerance-scale", type=float, default=1.0, show_default=True,
              help="Multiplies every tolerance.")
def check_cmd(scenario_path, out, seed, threads, tolerance_scale):
    """Run the scenario's consistency checks; exit 0 iff all pass."""
    sc = _load(scenario_path, seed)
    if not tolerance_scale > 0:
        _fail_input("--tolerance-scale must be positive")
    try:
        report = run_checks(sc, threads, tolerance_scale)
    except _INPUT_ERRORS as e:
        _fail_input(str(e))
    run = _run_dir(out, sc.hash)
    (run / "scenario.json").write_text(_dump(sc.document))
    if "json" in sc.outputs.formats:
        (run / "report.json").write_text(report.to_json())
    if "table" in sc.outputs.formats:
        (run / "report.txt").write_text(report.to_table())
    if "csv" in sc.outputs.formats:
        (run / "residuals.csv").write_text(report.to_csv())
    click.echo(report.to_table(), nl=False)
    click.echo(f"run directory: {run}", err=True)
    sys.exit(EXIT_OK if report.passed else EXIT_FAIL)


@main.command("export-h")
@click.option("--scenario", "scenario_path", required=True, type=click.Path())
@click.option("--out", default="runs", show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--threads", type=int, default=None)
def export_h(scenario_path, out, seed, threads):
    """Compute ``h`` for the scenario's index model and write it as JSON."""
    sc = _load(scenario_path, seed)
    try:
        hf = sc.variance_function(resolve_threads(threads))
    except _INPUT_ERRORS as e:
        _fail_input(str(e))
    run = _run_dir(out, sc.hash)
    (run / "h.json").write_text(hf.to_json())
    click.echo(str(run / "h.json"))


if __name__ == "__main__":
    main()
