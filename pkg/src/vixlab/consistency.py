"""Implied VIX from the futures family and the no-arbitrage consistency checks.

The futures family ``F(t, T)`` is simulated on a triangular mesh whose
maturity spacing equals the time step of the index bundle, driven by the
bundle's own increments.  The diagonal ``F(t, t)`` is the implied VIX.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.stats import norm

from .models import ScalarFn, StochVolSpec, TermStructureSpec, VectorModelSpec, VixConvention
from .sde import NoiseSpec, PathBundle, TimeGrid, simulate
from .vixcore import VarianceFunction, ito_drift_of_vix

__all__ = [
    "MarketPriceOfRisk",
    "ImpliedVixPath",
    "CheckResult",
    "ConsistencyReport",
    "MartingaleResult",
    "MeshError",
    "tilt_bundle",
    "implied_vix_path",
    "xi_path",
    "check_cc1",
    "check_cc2",
    "check_cc3",
    "check_cc4",
    "check_genpde",
    "check_c1_pathwise",
    "martingale_diagnostic",
    "matched_initial_curve",
    "genpde_field",
    "cc3_field",
    "DEFAULT_TOLERANCES",
]

DEFAULT_TOLERANCES = {
    "cc1": 1e-6,
    "cc2": 1e-6,
    "cc3": 1e-2,
    "cc4": 1e-2,
    "genpde": 1e-2,
    "c1_pathwise": 1e-2,
    "martingale": 0.05,
}
_EPS = 1e-12


class MeshError(ValueError):
    """The maturity mesh cannot be aligned with the time grid."""


@dataclass(frozen=True, eq=False)
class MarketPriceOfRisk:
    """``lambda_t`` as a constant vector, a function of ``t`` or of ``(t, states)``.

    Convention: ``dW^P = dW^Q + lambda dt`` on the model's (possibly
    correlated) factors.
    """

    n_factors: int
    value: np.ndarray | None = None
    fn: Callable | None = None
    kind: str = "constant"

    @classmethod
    def zero(cls, n_factors: int) -> "MarketPriceOfRisk":
        return cls(n_factors, np.zeros(n_factors))

    @classmethod
    def constant(cls, vec) -> "MarketPriceOfRisk":
        vec = np.atleast_1d(np.asarray(vec, dtype=float))
        return cls(vec.size, vec)

    @classmethod
    def of_time(cls, n_factors: int, fn: Callable) -> "MarketPriceOfRisk":
        return cls(n_factors, None, fn, "time")

    @classmethod
    def of_state(cls, n_factors: int, fn: Callable) -> "MarketPriceOfRisk":
        return cls(n_factors, None, fn, "state")

    @property
    def is_zero(self) -> bool:
        return self.kind == "constant" and not np.any(self.value)

    def __call__(self, t: float, states: np.ndarray) -> np.ndarray:
        n = states.shape[0]
        if self.kind == "constant":
            out = np.broadcast_to(self.value, (n, self.n_factors))
        elif self.kind == "time":
            out = np.broadcast_to(np.asarray(self.fn(t), dtype=float), (n, self.n_factors))
        else:
            out = np.asarray(self.fn(t, states), dtype=float)
        if out.shape != (n, self.n_factors):
            raise ValueError(f"lambda has shape {out.shape}, expected {(n, self.n_factors)}")
        return out


def _lam(lam, n_factors):
    if lam is None:
        return MarketPriceOfRisk.zero(n_factors)
    if lam.n_factors != n_factors:
        raise ValueError(f"lambda has {lam.n_factors} factors, bundle has {n_factors}")
    return lam


def tilt_bundle(bundle: PathBundle, lam: MarketPriceOfRisk) -> PathBundle:
    """Replace increments by ``dW - lambda dt`` (same states, other measure)."""
    if bundle.increments is None:
        raise ValueError("bundle carries no increments")
    lam = _lam(lam, bundle.increments.shape[2])
    dt, t = bundle.grid.dt, bundle.times
    inc = np.array(bundle.increments)
    for k in range(bundle.grid.n_steps):
        inc[:, k] -= lam(t[k], bundle.states[:, k]) * dt
    return bundle.with_increments(inc, tilted=True)


# -- the futures family -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ImpliedVixPath:
    """Implied VIX and its drift ``xi`` on the time grid (paths x times).

    ``terms`` holds the three pieces of ``xi``: initial-curve slope,
    drift integral and stochastic integral.  ``xi_q`` is the drift under the
    measure defined by ``lambda``.
    """

    times: np.ndarray
    V: np.ndarray
    xi: np.ndarray
    xi_q: np.ndarray
    terms: dict
    martingale: dict | None = None


def _fd_T(vals: np.ndarray, dt: float) -> np.ndarray:
    """``d/dT`` along axis 0 for rows 1..end; central inside, backward at the end."""
    m = vals.shape[0]
    out = np.empty((m - 1,) + vals.shape[1:])
    if m >= 3:
        np.subtract(vals[2:], vals[:-2], out=out[:-1])
        out[:-1] *= 1.0 / (2 * dt)
    out[-1] = (vals[-1] - vals[-2]) / dt
    return out


def _mesh(ts: TermStructureSpec, bundle: PathBundle, T_spacing: float | None):
    dt = bundle.grid.dt
    if T_spacing is not None and not math.isclose(T_spacing, dt, rel_tol=1e-9):
        if T_spacing > dt:
            raise MeshError(f"T-mesh spacing {T_spacing} is coarser than the time step {dt}")
        raise MeshError(f"T-mesh spacing {T_spacing} must equal the time step {dt}")
    t0 = bundle.grid.t0
    J = int(math.floor((ts.T_star - t0) / dt + 1e-9))
    if J < 1:
        raise MeshError("T_star leaves no maturities beyond the start of the grid")
    K = min(J, bundle.grid.n_steps)
    return t0 + dt * np.arange(J + 1), K


def implied_vix_path(ts: TermStructureSpec, bundle: PathBundle, lam: MarketPriceOfRisk | None = None,
                     T_spacing: float | None = None, martingale: bool = False) -> ImpliedVixPath:
    """Simulate the family with log-Euler steps and read off the diagonal.

    Increments are the bundle's (treated as real-world).  Left-point sums give
    the stochastic integral in ``xi``.  With ``martingale=True`` per-maturity
    control-variate returns for :func:`martingale_diagnostic` are accumulated
    on the fly.
    """
    if bundle.increments is None:
        raise ValueError("bundle carries no increments")
    n, f = bundle.n_paths, bundle.increments.shape[2]
    if ts.n_factors != f:
        raise ValueError(f"term structure has {ts.n_factors} factors, bundle has {f}")
    lam = _lam(lam, f)
    dt = bundle.grid.dt
    Tm, K = _mesh(ts, bundle, T_spacing)
    J = Tm.size - 1
    corr = _bundle_corr(bundle)
    curve = np.asarray(ts.initial_curve(Tm), dtype=float)
    if np.any(curve <= 0):
        raise ValueError("initial curve must be positive")
    # maturity-major storage keeps the shrinking slices contiguous
    Fam = np.repeat(curve[:, None], n, axis=1)
    acc_drift = np.zeros((J + 1, n))
    acc_stoch = np.zeros((J + 1, n))
    Y = np.zeros((J + 1, n)) if martingale else None
    V = np.empty((K + 1, n))
    V[0] = curve[0]
    has_drift = not ts.mu_v.is_zero
    t = bundle.times
    for i in range(K):
        ti = t[i]
        Ti = Tm[i:]
        nu = ts.nu_vec(ti, Ti)  # (m, f)
        mu = ts.mu_v(ti, Ti)
        rowF = Fam[i:]
        dW = bundle.increments[:, i]
        shock = nu @ dW.T
        # d/dT is linear, so contract with dW before differencing
        acc_stoch[i + 1:] += _fd_T(rowF * shock, dt)
        if has_drift:
            acc_drift[i + 1:] += _fd_T(rowF * mu[:, None], dt) * dt
        step = shock[1:]
        step += ((mu[1:] - 0.5 * np.einsum("mf,fg,mg->m", nu[1:], corr, nu[1:])) * dt)[:, None]
        growth = np.expm1(step)
        if martingale:
            dWq = dW - lam(ti, bundle.states[:, i]) * dt
            Y[i + 1:] += growth - nu[1:] @ dWq.T
        growth += 1.0
        Fam[i + 1:] *= growth
        V[i + 1] = Fam[i + 1]
    V, acc_drift, acc_stoch = V.T, acc_drift.T, acc_stoch.T
    Y = Y.T if martingale else None
    slope_curve = np.asarray(ts.initial_curve.derivative(Tm), dtype=float)
    cols = np.arange(K + 1)
    slope = slope_curve[cols][None, :] / V
    drift_term = acc_drift[:, cols] / V + ts.mu_v(t[cols], t[cols])[None, :]
    stoch_term = acc_stoch[:, cols] / V
    xi = slope + drift_term + stoch_term
    nu_diag = ts.nu_vec(t[cols], t[cols])  # (K+1, f)
    lam_diag = np.stack([lam(t[k], bundle.states[:, k]) for k in cols], axis=1)  # (n, K+1, f)
    xi_q = xi + np.einsum("pkf,kf->pk", lam_diag, nu_diag)
    mart = None
    if martingale:
        mart = {"T": Tm[1:K + 1], "Y": Y[:, 1:K + 1], "curve": curve[1:K + 1]}
    return ImpliedVixPath(times=t[cols], V=V, xi=xi, xi_q=xi_q,
                          terms={"slope": slope, "drift": drift_term, "stochastic": stoch_term},
                          martingale=mart)


def _bundle_corr(bundle: PathBundle) -> np.ndarray:
    f = bundle.increments.shape[2]
    c = bundle.meta.get("factor_correlation")
    return np.eye(f) if c is None else np.asarray(c, dtype=float)


def xi_path(ts: TermStructureSpec, bundle: PathBundle, lam: MarketPriceOfRisk | None = None,
            **kw) -> ImpliedVixPath:
    """``xi`` per path; see :class:`ImpliedVixPath` for the diagnostics."""
    ivp = implied_vix_path(ts, bundle, lam, **kw)
    if np.any(ivp.V <= 0):
        raise ValueError("implied VIX is not positive")
    return ivp


def matched_initial_curve(spec, hf: VarianceFunction, T_star: float, kind: str = "mc",
                          gamma: float | None = None, n_paths: int = 20_000, dt: float | None = None,
                          seed: int = 0, n_nodes: int = 41) -> ScalarFn:
    """Initial futures curve consistent with ``V = sqrt(h(X))``.

    ``kind="mc"`` tabulates ``E[sqrt(h(X_T))]`` by simulation; ``kind="exponential"``
    returns ``sqrt(h(x0)) exp(-gamma^2 T / 2)``, the curve a proportional model
    with diagonal volatility ``gamma`` must start from.
    """
    V0 = float(np.sqrt(hf.of_states(spec.initial_state[None, :])[0]))
    if kind == "exponential":
        if gamma is None:
            raise ValueError("exponential curve needs gamma")
        return ScalarFn.exp(V0, -0.5 * gamma**2)
    if kind != "mc":
        raise ValueError(f"unknown curve kind {kind!r}")
    dt = T_star / 400 if dt is None else dt
    grid = TimeGrid.from_dt(0.0, T_star, dt)
    bundle = simulate(spec, NoiseSpec(spec.dim, spec.correlation, seed=seed), grid, n_paths,
                      keep_increments=False)
    Vp = np.sqrt(hf.of_states(bundle.states))
    means = Vp.mean(axis=0)
    means[0] = V0
    nodes = np.unique(np.linspace(0, grid.n_steps, n_nodes).round().astype(int))
    return ScalarFn.tabulated(grid.times[nodes], means[nodes])


# -- reports -------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    max: float
    mean_abs: float
    where: dict
    tolerance: float
    passed: bool
    kind: str = "relative"
    details: dict = field(default_factory=dict)
    field_rows: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"name": self.name, "max": self.max, "mean_abs": self.mean_abs, "where": self.where,
                "tolerance": self.tolerance, "passed": self.passed, "kind": self.kind,
                "details": self.details}


def _result(name, resid, tol, kind, where_fn, details=None, rows=None) -> CheckResult:
    resid = np.abs(np.asarray(resid, dtype=float))
    if resid.size == 0:
        raise ValueError(f"{name}: nothing to check")
    idx = np.unravel_index(int(np.nanargmax(resid)), resid.shape)
    mx = float(resid[idx])
    return CheckResult(name=name, max=mx, mean_abs=float(np.mean(resid)), where=where_fn(idx),
                       tolerance=float(tol), passed=bool(mx <= tol), kind=kind,
                       details=details or {}, field_rows=rows or [])


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


@dataclass
class ConsistencyReport:
    scenario_hash: str
    h_provenance: str
    results: dict[str, CheckResult]
    meta: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results.values())

    def to_dict(self) -> dict:
        return {"scenario_hash": self.scenario_hash, "h_provenance": self.h_provenance,
                "passed": self.passed, "meta": self.meta,
                "results": {k: v.to_dict() for k, v in self.results.items()}}

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        head = f"{'check':<14}{'max':>14}{'mean|r|':>14}{'tolerance':>12}{'kind':>13}  result"
        lines = [f"scenario {self.scenario_hash}  h: {self.h_provenance}", head, "-" * len(head)]
        for name, r in self.results.items():
            lines.append(f"{name:<14}{_fmt(r.max):>14}{_fmt(r.mean_abs):>14}{_fmt(r.tolerance):>12}"
                         f"{r.kind:>13}  {'PASS' if r.passed else 'FAIL'}")
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["check", "t", "x", "factor", "residual_max", "residual_mean"])
        for name, r in self.results.items():
            for row in r.field_rows:
                w.writerow([name] + [repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
        return buf.getvalue()


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, float) and not math.isfinite(o):
        return repr(o)
    return o


# -- index-side coefficients ----------------------------------------------------

def _index_coeffs(spec, t, states):
    """Relative drift and factor loadings of the index future."""
    if isinstance(spec, StochVolSpec):
        mu0 = np.zeros(states.shape[0])
        sig0 = np.zeros((states.shape[0], 2))
        sig0[:, 0] = np.sqrt(np.maximum(states[:, 1], 0.0))
        return mu0, sig0
    return spec.drift_fn(t, states)[:, 0], spec.vol_fn(t, states)[:, 0, :]


def _per_time_rows(resid, times, factor="all"):
    return [(float(times[k]), "", factor, float(np.max(resid[:, k])), float(np.mean(resid[:, k])))
            for k in range(resid.shape[1])]


def check_cc1(spec, lam: MarketPriceOfRisk | None, bundle: PathBundle, tol: float | None = None) -> CheckResult:
    """``|mu0 + lambda . sigma0|`` along paths."""
    f = spec.dim
    lam = _lam(lam, f)
    t = bundle.times
    res = np.empty((bundle.n_paths, t.size))
    for k in range(t.size):
        mu0, sig0 = _index_coeffs(spec, t[k], bundle.states[:, k])
        if sig0.shape[1] != f:
            raise ValueError("dimension mismatch between model and lambda")
        res[:, k] = np.abs(mu0 + np.einsum("pf,pf->p", lam(t[k], bundle.states[:, k]), sig0))
    return _result("cc1", res, DEFAULT_TOLERANCES["cc1"] if tol is None else tol, "absolute",
                   lambda i: {"path": int(i[0]), "t": float(t[i[1]])}, rows=_per_time_rows(res, t))


def check_cc2(ts: TermStructureSpec, lam: MarketPriceOfRisk | None, bundle: PathBundle,
              tol: float | None = None) -> CheckResult:
    """``|mu^V(t,T) + lambda_t . nu(t,T)|`` over the triangular mesh, maximised over ``T``."""
    lam = _lam(lam, ts.n_factors)
    Tm, K = _mesh(ts, bundle, None)
    t = bundle.times
    res = np.zeros((bundle.n_paths, K + 1))
    argT = np.zeros((bundle.n_paths, K + 1), dtype=int)
    for k in range(K + 1):
        T = Tm[k:]
        r = np.abs(ts.mu_v(t[k], T)[None, :] + lam(t[k], bundle.states[:, k]) @ ts.nu_vec(t[k], T).T)
        res[:, k] = r.max(axis=1)
        argT[:, k] = k + r.argmax(axis=1)
    return _result("cc2", res, DEFAULT_TOLERANCES["cc2"] if tol is None else tol, "absolute",
                   lambda i: {"path": int(i[0]), "t": float(t[i[1]]), "T": float(Tm[argT[i]])},
                   rows=_per_time_rows(res, t[:K + 1]))


def _vix_loading(hf: VarianceFunction, spec, t, states):
    """``sum_i w_i b_i`` (loadings of dV/V on the factors) and boundary mask."""
    h = hf.of_states(states)
    w = hf.gradient_states(states) / (2 * h[:, None])
    b = spec.loadings(t, states)
    return np.einsum("pi,pif->pf", w, b), hf.at_boundary(states[:, hf.state_index])


def check_cc3(ts: TermStructureSpec, spec, hf: VarianceFunction, bundle: PathBundle,
              convention: VixConvention | None = None, tol: float | None = None) -> CheckResult:
    """Diffusion match ``nu^j(t,t) = sum_i X^i w_i sigma^{i,j}`` along paths.

    Only states are read, never increments, so the result is unchanged by any
    change of measure applied to the bundle.  Relative residual per factor is
    ``|nu^j - load^j| / (|nu^j| + eps)``.
    """
    Tm, K = _mesh(ts, bundle, None)
    t = bundle.times
    f = ts.n_factors
    res_abs = np.zeros((bundle.n_paths, K + 1, f))
    denom = np.zeros((K + 1, f))
    boundary = 0
    for k in range(K + 1):
        load, at_b = _vix_loading(hf, spec, t[k], bundle.states[:, k])
        nu = ts.nu_vec(t[k], t[k])
        res_abs[:, k] = np.abs(nu[None, :] - load)
        denom[k] = np.abs(nu) + _EPS
        boundary += int(at_b.sum())
    rel = res_abs / denom[None]
    rows = [(float(t[k]), "", j, float(rel[:, k, j].max()), float(rel[:, k, j].mean()))
            for k in range(K + 1) for j in range(f)]
    return _result("cc3", rel, DEFAULT_TOLERANCES["cc3"] if tol is None else tol, "relative",
                   lambda i: {"path": int(i[0]), "t": float(t[i[1]]), "factor": int(i[2])},
                   details={"max_abs": float(res_abs.max()), "boundary_evaluations": boundary,
                            "h_provenance": hf.provenance},
                   rows=rows)


def _grid_states(spec, x):
    states = np.broadcast_to(spec.initial_state, (x.size, spec.initial_state.size)).copy()
    return states


def genpde_field(hf: VarianceFunction, spec, ts: TermStructureSpec, t: float = 0.0, x=None):
    """Absolute gradient-PDE residual ``|sum_i x^i sigma^{ij} d_i h - 2 h nu^j|`` on the grid interior.

    Returns ``(x, residual (n_x, factors), denominator 2h|nu^j|)``.
    """
    x = hf.interior if x is None else np.asarray(x, dtype=float)
    states = _grid_states(spec, x)
    states[:, hf.state_index] = x
    h = hf.of_states(states)
    lhs = np.einsum("pi,pif->pf", hf.gradient_states(states), spec.loadings(t, states))
    nu = ts.nu_vec(t, t)
    rhs = 2 * h[:, None] * nu[None, :]
    return x, np.abs(lhs - rhs), 2 * h[:, None] * np.abs(nu)[None, :]


def cc3_field(hf: VarianceFunction, spec, ts: TermStructureSpec, t: float = 0.0, x=None):
    """Absolute cc3 residual on grid nodes, for comparison with :func:`genpde_field`."""
    x = hf.interior if x is None else np.asarray(x, dtype=float)
    states = _grid_states(spec, x)
    states[:, hf.state_index] = x
    load, _ = _vix_loading(hf, spec, t, states)
    return x, np.abs(ts.nu_vec(t, t)[None, :] - load), 2 * hf.of_states(states)


def check_genpde(hf: VarianceFunction, spec, ts: TermStructureSpec, times=None,
                 tol: float | None = None) -> CheckResult:
    """Relative gradient-PDE residual over ``(t, x)`` with ``x`` the grid interior."""
    times = np.linspace(0.0, ts.T_star, 5) if times is None else np.atleast_1d(times)
    fields, rows = [], []
    for t in times:
        x, r, d = genpde_field(hf, spec, ts, float(t))
        rel = r / (d + _EPS)
        fields.append(rel)
        rows += [(float(t), float(xv), j, float(rel[n, j]), float(rel[n, j]))
                 for n, xv in enumerate(x) for j in range(rel.shape[1])]
    res = np.stack(fields)
    x = hf.interior
    return _result("genpde", res, DEFAULT_TOLERANCES["genpde"] if tol is None else tol, "relative",
                   lambda i: {"t": float(times[i[0]]), "x": float(x[i[1]]), "factor": int(i[2])},
                   details={"h_provenance": hf.provenance, "n_interior": int(x.size)}, rows=rows)


def check_c1_pathwise(spec, ts: TermStructureSpec, hf: VarianceFunction, bundle: PathBundle,
                      tol: float | None = None, ivp: ImpliedVixPath | None = None) -> CheckResult:
    """Per-path ``max_t |sqrt(h(X_t)) - V~_t| / V~_t``; statistics are over paths."""
    ivp = ivp or implied_vix_path(ts, bundle)
    K = ivp.times.size - 1
    Vh = np.sqrt(hf.of_states(bundle.states[:, :K + 1]))
    rel = np.abs(Vh - ivp.V) / ivp.V
    per_path = rel.max(axis=1)
    t = ivp.times
    rows = _per_time_rows(rel, t)
    res = _result("c1_pathwise", per_path, DEFAULT_TOLERANCES["c1_pathwise"] if tol is None else tol,
                  "relative", lambda i: {"path": int(i[0]), "t": float(t[int(rel[i[0]].argmax())])},
                  details={"terminal_mean": float(rel[:, -1].mean()),
                           "max_abs": float(np.abs(Vh - ivp.V).max())}, rows=rows)
    return res


def check_cc4(ts: TermStructureSpec, spec, hf: VarianceFunction, bundle: PathBundle,
              lam: MarketPriceOfRisk | None = None, convention: VixConvention | None = None,
              option_surface=None, tol: float | None = None, ivp: ImpliedVixPath | None = None) -> CheckResult:
    """Drift match between the index-implied VIX and the futures-implied VIX.

    Left: the drift of ``sqrt(h(X))`` under the tilted measure, from Ito's
    formula with derivatives of ``h``.  Right: ``xi + lambda . nu(t,t)``.
    The instantaneous relative residual ``|u - xi_Q| / (|xi_Q| + eps)`` is
    gated; the integrated difference ``int (u - xi_Q) ds`` is reported.
    """
    if option_surface is not None:
        raise NotImplementedError("cc4 with an option surface is evaluated through vix_coefficients")
    lam = _lam(lam, spec.dim)
    ivp = ivp or implied_vix_path(ts, bundle, lam)
    t = ivp.times
    K = t.size - 1
    u = np.empty((bundle.n_paths, K + 1))
    for k in range(K + 1):
        st = bundle.states[:, k]
        u[:, k] = ito_drift_of_vix(hf, spec, t[k], st, lam(t[k], st))
    diff = u - ivp.xi_q
    rel = np.abs(diff) / (np.abs(ivp.xi_q) + _EPS)
    dt = bundle.grid.dt
    integ = np.concatenate([np.zeros((diff.shape[0], 1)),
                            np.cumsum(0.5 * (diff[:, 1:] + diff[:, :-1]) * dt, axis=1)], axis=1)
    return _result("cc4", rel, DEFAULT_TOLERANCES["cc4"] if tol is None else tol, "relative",
                   lambda i: {"path": int(i[0]), "t": float(t[i[1]])},
                   details={"index_side_mean": float(u.mean()), "futures_side_mean": float(ivp.xi_q.mean()),
                            "integrated_max_abs": float(np.abs(integ).max()),
                            "integrated_terminal_mean": float(integ[:, -1].mean())},
                   rows=_per_time_rows(rel, t))


@dataclass
class MartingaleResult:
    T: np.ndarray
    drift: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    curve: np.ndarray
    density_mean: float
    density_se: float
    density_min: float
    level: float

    @property
    def contains_zero(self) -> np.ndarray:
        return (self.ci_low <= 0.0) & (self.ci_high >= 0.0)

    @property
    def all_contain_zero(self) -> bool:
        return bool(np.all(self.contains_zero))

    def as_check(self, tol: float | None = None) -> CheckResult:
        width = np.maximum(np.abs(self.ci_low), np.abs(self.ci_high))
        dist = np.where(self.contains_zero, 0.0, np.minimum(np.abs(self.ci_low), np.abs(self.ci_high)))
        r = _result("martingale", dist, 0.0, "ci_distance",
                    lambda i: {"T": float(self.T[i[0]])},
                    details={"max_abs_drift": float(np.abs(self.drift).max()),
                             "max_ci_halfwidth": float(width.max()),
                             "density_mean": self.density_mean, "density_se": self.density_se,
                             "density_min": self.density_min, "level": self.level},
                    rows=[(float(T), "", "all", float(d), float(lo)) for T, d, lo in
                          zip(self.T, self.drift, self.ci_low)])
        r.passed = self.all_contain_zero
        return r


def martingale_diagnostic(ts: TermStructureSpec, bundle: PathBundle, lam: MarketPriceOfRisk | None = None,
                          level: float = 0.95, ivp: ImpliedVixPath | None = None) -> MartingaleResult:
    """Relative drift of ``F(., T)`` under the tilted measure, per mesh maturity.

    Each path contributes ``sum_k (dF/F - nu . dW^Q)`` up to ``T``: the
    ``nu . dW^Q`` control variate removes the martingale noise while keeping
    the mean.  Intervals are Bonferroni-adjusted over maturities.  The
    stochastic-exponential density of ``lambda`` is reported for its mean and
    positivity.
    """
    lam = _lam(lam, ts.n_factors)
    if ivp is None or ivp.martingale is None:
        ivp = implied_vix_path(ts, bundle, lam, martingale=True)
    m = ivp.martingale
    T, Y = m["T"], m["Y"]
    elapsed = T - bundle.grid.t0
    n = Y.shape[0]
    mean = Y.mean(axis=0) / elapsed
    se = Y.std(axis=0, ddof=1) / math.sqrt(n) / elapsed
    z = norm.ppf(1 - (1 - level) / (2 * T.size))
    # density of the measure change, in the decorrelated basis
    C = _bundle_corr(bundle)
    Cp = np.linalg.pinv(C)
    dt, t = bundle.grid.dt, bundle.times
    log_z = np.zeros(n)
    for k in range(bundle.grid.n_steps):
        l = lam(t[k], bundle.states[:, k])
        lc = l @ Cp
        log_z += np.einsum("pf,pf->p", lc, bundle.increments[:, k]) - 0.5 * np.einsum("pf,pf->p", lc, l) * dt
    dens = np.exp(log_z)
    return MartingaleResult(T=T, drift=mean, ci_low=mean - z * se, ci_high=mean + z * se, curve=m["curve"],
                            density_mean=float(dens.mean()),
                            density_se=float(dens.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0,
                            density_min=float(dens.min()), level=level)
