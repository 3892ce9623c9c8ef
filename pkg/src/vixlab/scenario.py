"""Scenario files: strict JSON (``"schema": 1``) resolved into model objects.

Every section rejects keys it does not know.  The scenario hash is the
SHA-256 of the canonical JSON of the effective document (after command-line
overrides), so two runs agree on it exactly when their inputs agree.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .consistency import DEFAULT_TOLERANCES, MarketPriceOfRisk, matched_initial_curve
from .models import (
    ModelError,
    ScalarFn,
    TermFn,
    TermStructureSpec,
    VixConvention,
    builtin,
    proportional_termstructure,
)
from .sde import SCHEMES, TimeGrid
from .vixcore import VarianceFunction, h_by_fk, h_by_mc, heston_h

__all__ = ["Scenario", "ScenarioError", "load_scenario", "parse_scenario", "CHECK_NAMES", "SCHEMA_VERSION"]

SCHEMA_VERSION = 1
CHECK_NAMES = ("cc1", "cc2", "cc3", "cc4", "genpde", "c1_pathwise", "martingale")
OUTPUT_FORMATS = ("json", "table", "csv")

_TOP = {"schema", "name", "description", "convention", "index_model", "term_structure",
        "simulation", "checks", "outputs"}
_KEYS = {
    "convention": {"tau_star", "N", "measure"},
    "index_model": {"model", "params"},
    "term_structure": {"T_star", "beta", "mu_v", "factor", "initial_curve"},
    "simulation": {"t0", "t_end", "dt", "n_steps", "n_paths", "seed", "scheme"},
    "checks": {"enabled", "tolerances", "lambda", "h", "genpde_times"},
    "h": {"method", "x_min", "x_max", "n_x", "time_steps", "fk_points", "n_paths", "dt", "seed"},
    "outputs": {"formats", "paths"},
    "initial_curve": {"kind", "gamma", "n_paths", "dt", "seed", "value", "a", "b", "xs", "ys", "terms",
                      "p", "alpha"},
}


class ScenarioError(ValueError):
    """Malformed or unresolvable scenario."""


def _keys(d, section: str, allowed: set, required=()):
    if not isinstance(d, dict):
        raise ScenarioError(f"{section}: expected an object")
    extra = sorted(set(d) - allowed)
    if extra:
        raise ScenarioError(f"{section}: unknown key(s) {', '.join(extra)}")
    missing = [k for k in required if k not in d]
    if missing:
        raise ScenarioError(f"{section}: missing key(s) {', '.join(missing)}")


def _num(d, key, section, default=None, positive=False, integer=False):
    v = d.get(key, default)
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ScenarioError(f"{section}.{key}: expected a finite number, got {v!r}")
    if integer and (not float(v).is_integer()):
        raise ScenarioError(f"{section}.{key}: expected an integer, got {v!r}")
    if positive and v <= 0:
        raise ScenarioError(f"{section}.{key}: must be positive, got {v!r}")
    return int(v) if integer else float(v)


@dataclass(frozen=True)
class HConfig:
    method: str = "fk"
    x_min: float = 0.001
    x_max: float = 0.5
    n_x: int = 81
    time_steps: int = 200
    fk_points: int = 400
    n_paths: int = 100_000
    dt: float | None = None
    seed: int = 0


@dataclass(frozen=True)
class SimulationConfig:
    t0: float
    t_end: float
    n_steps: int
    n_paths: int
    seed: int
    scheme: str | None

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.t0, self.t_end, self.n_steps)


@dataclass(frozen=True)
class ChecksConfig:
    enabled: tuple[str, ...] = ()
    tolerances: dict = field(default_factory=dict)
    lam: tuple[float, ...] | None = None
    h: HConfig = HConfig()
    genpde_times: int = 5

    def tolerance(self, name: str, scale: float = 1.0) -> float:
        return scale * self.tolerances.get(name, DEFAULT_TOLERANCES[name])


@dataclass(frozen=True)
class OutputConfig:
    formats: tuple[str, ...] = OUTPUT_FORMATS
    paths: str = "csv"


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    document: dict
    convention: VixConvention
    index_model: object
    simulation: SimulationConfig
    checks: ChecksConfig
    outputs: OutputConfig
    term_structure_doc: dict | None = None

    @property
    def hash(self) -> str:
        canon = json.dumps(self.document, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    @property
    def lam(self) -> MarketPriceOfRisk:
        n = self.index_model.dim
        if self.checks.lam is None:
            return MarketPriceOfRisk.zero(n)
        if len(self.checks.lam) != n:
            raise ScenarioError(f"checks.lambda: expected {n} entries, got {len(self.checks.lam)}")
        return MarketPriceOfRisk.constant(self.checks.lam)

    def variance_function(self, threads: int | None = None) -> VarianceFunction:
        """``h`` on the configured grid by the configured method."""
        hc = self.checks.h
        grid = np.linspace(hc.x_min, hc.x_max, hc.n_x)
        spec = self.index_model
        if hc.method == "closed_form":
            if spec.name != "heston":
                raise ScenarioError("h.method closed_form is only available for heston")
            return heston_h(spec.params["kappa"], spec.params["theta"], self.convention, grid)
        if hc.method == "fk":
            return h_by_fk(spec, self.convention, grid, time_steps=hc.time_steps, n_x=hc.fk_points)
        return h_by_mc(spec, self.convention, grid, n_paths=hc.n_paths, dt=hc.dt, seed=hc.seed,
                       threads=threads)

    def term_structure(self, hf: VarianceFunction | None = None, threads: int | None = None) -> TermStructureSpec:
        d = self.term_structure_doc
        if d is None:
            raise ScenarioError("scenario has no term_structure section")
        spec = self.index_model
        T_star = _num(d, "T_star", "term_structure", self.convention.tau_star, positive=True)
        beta = _termfn(d.get("beta", 0.0), "term_structure.beta")
        mu_v = _termfn(d.get("mu_v", 0.0), "term_structure.mu_v")
        factor = _num(d, "factor", "term_structure", spec.dim - 1, integer=True)
        if not 0 <= factor < spec.dim:
            raise ScenarioError(f"term_structure.factor: must lie in [0, {spec.dim})")
        cd = d.get("initial_curve", {"kind": "matched_exponential"})
        _keys(cd, "term_structure.initial_curve", _KEYS["initial_curve"], ("kind",))
        kind = cd["kind"]
        if kind in ("matched_exponential", "matched_mc"):
            if hf is None:
                hf = self.variance_function(threads)
            if kind == "matched_exponential":
                gamma = _num(cd, "gamma", "term_structure.initial_curve", None)
                if gamma is None:
                    if beta.kind != "constant":
                        raise ScenarioError("term_structure.initial_curve: gamma required for non-constant beta")
                    gamma = beta.params["c"]
                curve = matched_initial_curve(spec, hf, T_star, kind="exponential", gamma=gamma)
            else:
                curve = matched_initial_curve(
                    spec, hf, T_star, kind="mc",
                    n_paths=_num(cd, "n_paths", "term_structure.initial_curve", 20_000, True, True),
                    dt=_num(cd, "dt", "term_structure.initial_curve", None, True),
                    seed=_num(cd, "seed", "term_structure.initial_curve", 0, integer=True))
        else:
            try:
                curve = ScalarFn.from_dict(cd)
            except (KeyError, ModelError) as e:
                raise ScenarioError(f"term_structure.initial_curve: {e}") from None
        try:
            return proportional_termstructure(curve, beta, T_star, n_factors=spec.dim, factor=factor, mu_v=mu_v)
        except ModelError as e:
            raise ScenarioError(f"term_structure: {e}") from None


def _termfn(v, where) -> TermFn:
    try:
        return TermFn.from_dict(v)
    except (KeyError, TypeError, ModelError) as e:
        raise ScenarioError(f"{where}: {e}") from None


def parse_scenario(doc: dict, seed: int | None = None) -> Scenario:
    """Validate ``doc`` and resolve its references; ``seed`` overrides the file's."""
    if not isinstance(doc, dict):
        raise ScenarioError("scenario must be a JSON object")
    doc = json.loads(json.dumps(doc))
    _keys(doc, "scenario", _TOP, ("schema", "index_model", "simulation"))
    if doc["schema"] != SCHEMA_VERSION:
        raise ScenarioError(f"schema: unsupported version {doc['schema']!r} (expected {SCHEMA_VERSION})")
    if seed is not None:
        doc["simulation"]["seed"] = int(seed)

    cv = doc.get("convention", {})
    _keys(cv, "convention", _KEYS["convention"])
    try:
        convention = VixConvention(
            tau_star=_num(cv, "tau_star", "convention", 30.0 / 365.0, positive=True),
            N=_num(cv, "N", "convention", 2.0 * 100.0**2, positive=True),
            measure=cv.get("measure", "continuous"))
    except ModelError as e:
        raise ScenarioError(f"convention: {e}") from None

    im = doc["index_model"]
    _keys(im, "index_model", _KEYS["index_model"], ("model",))
    try:
        spec = builtin(im["model"], **im.get("params", {}))
    except (ModelError, TypeError, KeyError) as e:
        raise ScenarioError(f"index_model: {e}") from None

    sim = doc["simulation"]
    _keys(sim, "simulation", _KEYS["simulation"], ("n_paths", "seed"))
    n_paths = _num(sim, "n_paths", "simulation", integer=True)
    if n_paths < 1:
        raise ScenarioError("simulation.n_paths: empty simulation")
    seed_v = _num(sim, "seed", "simulation", integer=True)
    if seed_v < 0:
        raise ScenarioError("simulation.seed: must be non-negative")
    t0 = _num(sim, "t0", "simulation", 0.0)
    t_end = _num(sim, "t_end", "simulation", convention.tau_star)
    if not t_end > t0:
        raise ScenarioError("simulation: t_end must exceed t0")
    if ("dt" in sim) == ("n_steps" in sim):
        raise ScenarioError("simulation: give exactly one of dt, n_steps")
    if "dt" in sim:
        n_steps = max(1, int(round((t_end - t0) / _num(sim, "dt", "simulation", positive=True))))
    else:
        n_steps = _num(sim, "n_steps", "simulation", positive=True, integer=True)
    scheme = sim.get("scheme")
    if scheme is not None and scheme not in SCHEMES:
        raise ScenarioError(f"simulation.scheme: unknown scheme {scheme!r}")
    simc = SimulationConfig(t0, t_end, n_steps, n_paths, seed_v, scheme)

    ck = doc.get("checks", {})
    _keys(ck, "checks", _KEYS["checks"])
    enabled = tuple(ck.get("enabled", ()))
    unknown = [c for c in enabled if c not in CHECK_NAMES]
    if unknown:
        raise ScenarioError(f"checks.enabled: unknown check(s) {', '.join(unknown)}")
    tols = ck.get("tolerances", {})
    _keys(tols, "checks.tolerances", set(CHECK_NAMES))
    tols = {k: _num(tols, k, "checks.tolerances", positive=True) for k in tols}
    lam = ck.get("lambda")
    if lam is not None:
        if not isinstance(lam, list) or not all(isinstance(v, (int, float)) for v in lam):
            raise ScenarioError("checks.lambda: expected a list of numbers")
        lam = tuple(float(v) for v in lam)
    hd = ck.get("h", {})
    _keys(hd, "checks.h", _KEYS["h"])
    method = hd.get("method", "fk")
    if method not in ("fk", "mc", "closed_form"):
        raise ScenarioError(f"checks.h.method: unknown method {method!r}")
    hdef = HConfig()
    hc = HConfig(
        method=method,
        x_min=_num(hd, "x_min", "checks.h", hdef.x_min, positive=True),
        x_max=_num(hd, "x_max", "checks.h", hdef.x_max, positive=True),
        n_x=_num(hd, "n_x", "checks.h", hdef.n_x, positive=True, integer=True),
        time_steps=_num(hd, "time_steps", "checks.h", hdef.time_steps, positive=True, integer=True),
        fk_points=_num(hd, "fk_points", "checks.h", hdef.fk_points, positive=True, integer=True),
        n_paths=_num(hd, "n_paths", "checks.h", hdef.n_paths, positive=True, integer=True),
        dt=_num(hd, "dt", "checks.h", None, positive=True),
        seed=_num(hd, "seed", "checks.h", 0, integer=True),
    )
    if hc.x_max <= hc.x_min or hc.n_x < 4:
        raise ScenarioError("checks.h: need x_min < x_max and at least 4 nodes")
    checks = ChecksConfig(enabled, tols, lam, hc,
                          _num(ck, "genpde_times", "checks", 5, positive=True, integer=True))

    out = doc.get("outputs", {})
    _keys(out, "outputs", _KEYS["outputs"])
    formats = tuple(out.get("formats", OUTPUT_FORMATS))
    bad = [f for f in formats if f not in OUTPUT_FORMATS]
    if bad:
        raise ScenarioError(f"outputs.formats: unknown format(s) {', '.join(bad)}")
    paths = out.get("paths", "csv")
    if paths not in ("csv", "binary", "none"):
        raise ScenarioError(f"outputs.paths: expected csv, binary or none, got {paths!r}")

    ts_doc = doc.get("term_structure")
    if ts_doc is not None:
        _keys(ts_doc, "term_structure", _KEYS["term_structure"])
    return Scenario(name=str(doc.get("name", "scenario")), document=doc, convention=convention,
                    index_model=spec, simulation=simc, checks=checks,
                    outputs=OutputConfig(formats, paths), term_structure_doc=ts_doc)


def load_scenario(path, seed: int | None = None) -> Scenario:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ScenarioError(f"{path}: no such file") from None
    except json.JSONDecodeError as e:
        raise ScenarioError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from None
    return parse_scenario(doc, seed)
