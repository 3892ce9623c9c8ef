"""The squared-VIX function ``h`` and the coefficients of the VIX process.

``h`` maps the model state to the squared VIX in vol points.  It is produced by
Monte Carlo, by a Crank-Nicolson Feynman-Kac solve, or from a closed form, and
is consumed by the consistency checks through :class:`VarianceFunction`.
"""

from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_banded

from .models import StochVolSpec, VectorModelSpec, VixConvention
from .pricing import black76, heston_price
from .sde import NoiseSpec, TimeGrid, integrate, iter_increment_chunks, RNG_BLOCK, resolve_threads

__all__ = [
    "VarianceFunction",
    "VixCoefficients",
    "OptionSurface",
    "BoundaryWarning",
    "TruncationWarning",
    "FKError",
    "InconsistentModelError",
    "h_by_mc",
    "h_by_fk",
    "heston_h",
    "gradient_h",
    "w_from_h",
    "w_from_option_grid",
    "vix_coefficients",
    "generator_residual",
    "stationarity_residual",
    "ito_drift_of_vix",
]


class BoundaryWarning(UserWarning):
    """Gradient requested at or beyond the edge of the state grid."""


class TruncationWarning(UserWarning):
    """Strike integrand has not decayed at the end of the grid."""


class FKError(RuntimeError):
    """Feynman-Kac solve produced an unstable or non-physical solution."""


class InconsistentModelError(ValueError):
    """A Monte Carlo estimate of ``h`` is negative beyond its error bars."""


@dataclass(frozen=True, eq=False)
class VarianceFunction:
    """``h`` on a one-dimensional grid of the state coordinate ``state_index``.

    ``h`` is taken to be independent of every other state component, which
    holds for the one-factor stochastic volatility models and for constant
    coefficient vector models.  Between nodes values are cubic-spline
    interpolated; outside the grid they are clamped to the end nodes.
    """

    grid: np.ndarray
    values: np.ndarray
    provenance: str
    state_index: int = 1
    n_components: int = 2
    stderr: np.ndarray | None = None
    H: np.ndarray | None = None
    H_times: np.ndarray | None = None
    convention: VixConvention = field(default_factory=VixConvention)
    meta: dict = field(default_factory=dict)
    closed_form: tuple[Callable, Callable, Callable] | None = None
    _spline: CubicSpline | None = field(default=None, init=False, repr=False)
    _dspline: CubicSpline | None = field(default=None, init=False, repr=False)
    _d2spline: CubicSpline | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if g.ndim != 1 or g.shape != v.shape or g.size < 2:
            raise ValueError("grid and values must be matching 1-d arrays with >= 2 nodes")
        if np.any(np.diff(g) <= 0):
            raise ValueError("grid must be strictly increasing")
        if self.provenance not in ("mc", "fk", "closed_form"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "values", v)
        if g.size >= 3:
            d1 = np.gradient(v, g, edge_order=2)
            d2 = np.gradient(d1, g, edge_order=2)
        else:
            d1 = np.full_like(v, (v[1] - v[0]) / (g[1] - g[0]))
            d2 = np.zeros_like(v)
        object.__setattr__(self, "_spline", CubicSpline(g, v))
        object.__setattr__(self, "_dspline", CubicSpline(g, d1))
        object.__setattr__(self, "_d2spline", CubicSpline(g, d2))

    # -- scalar-coordinate access ----------------------------------------
    def _clip(self, x):
        return np.clip(np.asarray(x, dtype=float), self.grid[0], self.grid[-1])

    def __call__(self, x):
        if self.closed_form is not None:
            return self.closed_form[0](np.asarray(x, dtype=float))
        return self._spline(self._clip(x))

    def dh(self, x):
        """First derivative; nodal central differences, spline-interpolated."""
        if self.closed_form is not None:
            return self.closed_form[1](np.asarray(x, dtype=float))
        return self._dspline(self._clip(x))

    def d2h(self, x):
        if self.closed_form is not None:
            return self.closed_form[2](np.asarray(x, dtype=float))
        return self._d2spline(self._clip(x))

    def at_boundary(self, x) -> np.ndarray:
        if self.closed_form is not None:
            return np.zeros(np.shape(x), dtype=bool)
        x = np.asarray(x, dtype=float)
        lo, hi = self.grid[min(1, self.grid.size - 1)], self.grid[max(self.grid.size - 2, 0)]
        return (x < lo) | (x > hi)

    @property
    def interior(self) -> np.ndarray:
        return self.grid[1:-1]

    # -- state-vector access ---------------------------------------------
    def of_states(self, states):
        return self(np.asarray(states)[..., self.state_index])

    def gradient_states(self, states):
        states = np.asarray(states, dtype=float)
        out = np.zeros(states.shape)
        out[..., self.state_index] = self.dh(states[..., self.state_index])
        return out

    def hessian_states(self, states):
        states = np.asarray(states, dtype=float)
        out = np.zeros(states.shape + (states.shape[-1],))
        i = self.state_index
        out[..., i, i] = self.d2h(states[..., i])
        return out

    # -- serialisation ---------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "provenance": self.provenance,
            "state_index": self.state_index,
            "n_components": self.n_components,
            "convention": {"tau_star": self.convention.tau_star, "N": self.convention.N,
                           "measure": self.convention.measure},
            "grid": self.grid.tolist(),
            "values": self.values.tolist(),
            "gradient": np.asarray(self.dh(self.grid)).tolist(),
            "stderr": None if self.stderr is None else np.asarray(self.stderr).tolist(),
            "meta": self.meta,
        }

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "VarianceFunction":
        c = d.get("convention", {})
        return cls(
            grid=np.asarray(d["grid"]),
            values=np.asarray(d["values"]),
            provenance=d["provenance"],
            state_index=int(d.get("state_index", 1)),
            n_components=int(d.get("n_components", 2)),
            stderr=None if d.get("stderr") is None else np.asarray(d["stderr"]),
            convention=VixConvention(**c) if c else VixConvention(),
            meta=dict(d.get("meta", {})),
        )

    @classmethod
    def from_json(cls, path) -> "VarianceFunction":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def heston_h(kappa: float, theta: float, convention: VixConvention = VixConvention(),
             grid=None) -> VarianceFunction:
    """Closed-form ``h`` for square-root variance with mean reversion (affine in ``v``)."""
    tau = convention.tau_star
    frac = (1.0 - math.exp(-kappa * tau)) / (kappa * tau)
    scale = convention.scale * tau
    a, b = scale * theta * (1.0 - frac), scale * frac
    grid = np.linspace(1e-4, 1.0, 101) if grid is None else np.asarray(grid, dtype=float)
    return VarianceFunction(
        grid=grid,
        values=a + b * grid,
        provenance="closed_form",
        convention=convention,
        meta={"model": "heston", "kappa": kappa, "theta": theta, "a": a, "b": b},
        closed_form=(lambda v: a + b * v, lambda v: np.full(np.shape(v), b), lambda v: np.zeros(np.shape(v))),
    )


# -- Monte Carlo ------------------------------------------------------------

def h_by_mc(spec, convention: VixConvention, x_grid, n_paths: int = 100_000, dt: float | None = None,
            seed: int = 0, scheme: str | None = None, estimator: str | None = None,
            threads: int | None = None, t0: float = 0.0) -> VarianceFunction:
    """Estimate ``h`` node by node with common random numbers across nodes.

    ``estimator`` is ``"integrated_variance"`` (default for stochastic-vol
    specs: time integral of ``X`` by the trapezoid rule) or ``"log_contract"``
    (``-(N/tau*) E ln(F_tau/F_0)``, the only option for vector specs).
    ``t0`` shifts the simulation start, for time-homogeneity checks.
    """
    x_grid = np.atleast_1d(np.asarray(x_grid, dtype=float))
    tau = convention.tau_star
    dt = tau / 200 if dt is None else dt
    grid = TimeGrid.from_dt(t0, t0 + tau, dt)
    if estimator is None:
        estimator = "integrated_variance" if isinstance(spec, StochVolSpec) else "log_contract"
    if estimator == "integrated_variance" and not isinstance(spec, StochVolSpec):
        raise ValueError("integrated_variance estimator needs a stochastic-vol spec")
    if n_paths < 2:
        raise ValueError("need at least two paths for an error estimate")
    noise = NoiseSpec(spec.dim, spec.correlation, seed=seed)
    idx = spec.state_index

    def node_spec(x):
        if isinstance(spec, StochVolSpec):
            return replace(spec, x0=float(x))
        x0 = spec.x0.copy()
        x0[idx] = x
        return replace(spec, x0=x0)

    specs = [node_spec(x) for x in x_grid]

    def work(item):
        start, dW = item
        out = np.empty((len(specs), dW.shape[0]))
        for n, s in enumerate(specs):
            paths = integrate(s, grid, dW, scheme, first_path=start)
            if estimator == "integrated_variance":
                xs = paths[:, :, 1]
                out[n] = grid.dt * (0.5 * xs[:, 0] + xs[:, 1:-1].sum(axis=1) + 0.5 * xs[:, -1])
            else:
                out[n] = -2.0 * np.log(paths[:, -1, 0] / paths[:, 0, 0])
        return out

    chunks = iter_increment_chunks(noise, grid, n_paths, chunk=RNG_BLOCK * 8)
    n_threads = resolve_threads(threads)
    if n_threads == 1:
        parts = [work(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            parts = list(pool.map(work, chunks))
    samples = convention.scale * np.concatenate(parts, axis=1)
    mean = samples.mean(axis=1)
    se = samples.std(axis=1, ddof=1) / math.sqrt(n_paths)
    bad = mean < -3.0 * se
    if bad.any():
        raise InconsistentModelError(
            f"inconsistent model/convention: negative h estimate at x={x_grid[bad][0]!r}")
    if x_grid.size < 2:
        g = np.array([x_grid[0], x_grid[0] * (1 + 1e-9) + 1e-12])
        vals, errs = np.repeat(mean, 2), np.repeat(se, 2)
    else:
        g, vals, errs = x_grid, mean, se
    return VarianceFunction(
        grid=g, values=vals, provenance="mc", state_index=idx, n_components=len(spec.components),
        stderr=errs, convention=convention,
        meta={"n_paths": n_paths, "dt": grid.dt, "seed": seed, "estimator": estimator, "model": spec.name},
    )


# -- Feynman-Kac -------------------------------------------------------------

def _fd_operator(x, mu, sig2):
    """Tridiagonal generator ``mu d/dx + sig2/2 d2/dx2`` on a non-uniform grid.

    Returns ``(lower, diag, upper)``.  Central differences, switching to
    upwinding where the cell Peclet number exceeds 2.  End rows impose a zero
    second derivative, leaving a one-sided first derivative.
    """
    n = x.size
    lo, di, up = np.zeros(n), np.zeros(n), np.zeros(n)
    hm = x[1:-1] - x[:-2]
    hp = x[2:] - x[1:-1]
    m, s = mu[1:-1], 0.5 * sig2[1:-1]
    c_lo = 2 * s / (hm * (hm + hp))
    c_up = 2 * s / (hp * (hm + hp))
    c_di = -2 * s / (hm * hp)
    peclet = np.abs(m) * np.maximum(hm, hp) / np.maximum(s, 1e-300)
    central = peclet <= 2.0
    d_lo = np.where(central, -hp / (hm * (hm + hp)), np.where(m < 0, -1.0 / hm, 0.0))
    d_di = np.where(central, (hp - hm) / (hm * hp), np.where(m < 0, 1.0 / hm, -1.0 / hp))
    d_up = np.where(central, hm / (hp * (hm + hp)), np.where(m < 0, 0.0, 1.0 / hp))
    lo[1:-1] = c_lo + m * d_lo
    di[1:-1] = c_di + m * d_di
    up[1:-1] = c_up + m * d_up
    h0, h1 = x[1] - x[0], x[-1] - x[-2]
    di[0], up[0] = -mu[0] / h0, mu[0] / h0
    lo[-1], di[-1] = -mu[-1] / h1, mu[-1] / h1
    return lo, di, up


def _banded(lo, di, up, a):
    """Banded storage of ``I - a*A`` for :func:`scipy.linalg.solve_banded`."""
    ab = np.zeros((3, di.size))
    ab[0, 1:] = -a * up[:-1]
    ab[1] = 1.0 - a * di
    ab[2, :-1] = -a * lo[1:]
    return ab


def _apply(lo, di, up, v):
    out = di * v
    out[1:] += lo[1:] * v[:-1]
    out[:-1] += up[:-1] * v[1:]
    return out


def h_by_fk(spec: StochVolSpec, convention: VixConvention, state_grid=None, time_steps: int = 200,
            n_x: int = 400, x_center: float | None = None, width: float | None = None) -> VarianceFunction:
    """Solve the backward Cauchy problem for ``H`` and return ``h = H(0, .)``.

    ``dH/dt + mu H' + sigma^2/2 H'' + (N/(2 tau*)) x = 0`` with ``H(tau*, x) = 0``.
    Default grid: ``n_x`` log-spaced nodes on ``[xc e^{-6s}, xc e^{6s}]`` with
    ``s`` the standard deviation of ``ln X`` over the horizon implied by
    ``sigma(xc)/xc``, floored at 0.1 and capped at 1.  The first step is
    replaced by two implicit half steps (Rannacher start).
    """
    if not isinstance(spec, StochVolSpec):
        raise TypeError("h_by_fk needs a one-factor stochastic-vol spec")
    tau = convention.tau_star
    if state_grid is None:
        xc = spec.x0 if x_center is None else float(x_center)
        if width is None:
            width = float(np.clip(abs(spec.sigma(xc)) / xc * math.sqrt(tau), 0.1, 1.0))
        x = xc * np.exp(np.linspace(-6 * width, 6 * width, n_x))
    else:
        x = np.asarray(state_grid, dtype=float)
    if x.size < 4 or np.any(np.diff(x) <= 0):
        raise ValueError("state grid must be increasing with at least 4 nodes")
    mu = np.asarray(spec.mu(x), dtype=float)
    sig2 = np.asarray(spec.sigma(x), dtype=float) ** 2
    lo, di, up = _fd_operator(x, mu, sig2)
    c = convention.scale
    src = c * x
    dt = tau / time_steps
    G = np.zeros((time_steps + 1, x.size))  # G[n] = H(tau - n dt)
    g = np.zeros_like(x)
    ie_half = _banded(lo, di, up, 0.5 * dt)
    for _ in range(2):
        g = solve_banded((1, 1), ie_half, g + 0.5 * dt * src)
    G[1] = g
    cn = _banded(lo, di, up, 0.5 * dt)
    for n in range(1, time_steps):
        rhs = g + 0.5 * dt * _apply(lo, di, up, g) + dt * src
        g = solve_banded((1, 1), cn, rhs)
        G[n + 1] = g
    h = G[-1]
    stiff = dt * float(np.max(np.abs(di)))
    if not np.all(np.isfinite(h)) or np.any(h[1:-1] <= 0):
        suggest = max(2 * time_steps, int(math.ceil(stiff / 2.0)))
        raise FKError(f"unstable Feynman-Kac solve (dt*|A| = {stiff:.3g}); try time_steps >= {suggest}")
    H = G[::-1].copy()
    return VarianceFunction(
        grid=x, values=h, provenance="fk", state_index=1, n_components=2,
        H=H, H_times=np.linspace(0.0, tau, time_steps + 1), convention=convention,
        meta={"n_x": x.size, "time_steps": time_steps, "model": spec.name,
              "x_min": float(x[0]), "x_max": float(x[-1]), "dt_stiffness": stiff},
    )


def generator_residual(hf: VarianceFunction, spec: StochVolSpec, x=None) -> np.ndarray:
    """``mu h' + sigma^2 h''/2`` on the grid interior.

    For ``h`` built from an integrated expectation this equals
    ``(N/(2 tau*)) (E_x[X_tau*] - x)``; it is not zero in general.
    """
    x = hf.interior if x is None else np.asarray(x, dtype=float)
    return spec.mu(x) * hf.dh(x) + 0.5 * spec.sigma(x) ** 2 * hf.d2h(x)


def stationarity_residual(hf: VarianceFunction, spec: StochVolSpec) -> np.ndarray:
    """Solver self-check ``mu h' + sigma^2 h''/2 + c x + dH/dt(0+)`` on the interior.

    Needs the stored ``H`` of an FK solve.  The time derivative is a one-sided
    second-order difference.
    """
    if hf.H is None:
        raise ValueError("stationarity residual needs the time-dependent H of an FK solve")
    dt = hf.H_times[1] - hf.H_times[0]
    dHdt = (-3 * hf.H[0] + 4 * hf.H[1] - hf.H[2]) / (2 * dt)
    x = hf.grid
    res = generator_residual(hf, spec, x) + hf.convention.scale * x + dHdt
    return res[1:-1]


# -- gradients and diffusion weights -----------------------------------------

def gradient_h(hf: VarianceFunction, states) -> np.ndarray:
    """Gradient of ``h`` with respect to every state component.

    Points outside the grid interior fall back to one-sided differences and
    raise a :class:`BoundaryWarning`.
    """
    states = np.atleast_1d(np.asarray(states, dtype=float))
    if np.any(hf.at_boundary(states[..., hf.state_index])):
        warnings.warn("gradient evaluated at the state-grid boundary (one-sided difference)",
                      BoundaryWarning, stacklevel=2)
    return hf.gradient_states(states)


def w_from_h(hf: VarianceFunction, states) -> np.ndarray:
    """Diffusion weights ``w_i = (dh/dx_i) / (2h)``."""
    states = np.atleast_1d(np.asarray(states, dtype=float))
    h = hf.of_states(states)
    if np.any(h <= 0):
        raise ValueError("h must be positive to form w")
    return gradient_h(hf, states) / (2.0 * np.asarray(h)[..., None])


def w_from_option_grid(strikes, dtheta, V2: float, convention: VixConvention,
                       warn_threshold: float = 1e-6) -> np.ndarray:
    """``w_i = (1/(2 tau* V^2)) int dTheta/dx_i / k^2 m(dk)`` by quadrature.

    ``dtheta`` has shape ``(n_components, n_strikes)``; ``V2`` is the squared
    VIX in vol points.
    """
    k = np.asarray(strikes, dtype=float)
    d = np.atleast_2d(np.asarray(dtheta, dtype=float))
    if d.shape[1] != k.size:
        raise ValueError("dtheta must be (n_components, n_strikes)")
    if V2 <= 0:
        raise ValueError("V^2 must be positive")
    integrand = d / k**2
    peak = np.max(np.abs(integrand), axis=1)
    ends = np.maximum(np.abs(integrand[:, 0]), np.abs(integrand[:, -1]))
    if np.any((peak > 0) & (ends > warn_threshold * peak)):
        warnings.warn("option-grid integrand not decayed at the strike-grid ends", TruncationWarning,
                      stacklevel=2)
    weights = convention.quadrature_weights(k)
    return integrand @ weights / (2.0 * convention.tau_star * V2)


@dataclass(frozen=True, eq=False)
class OptionSurface:
    """OTM option prices on a strike grid at a fixed tenor, with bump partials.

    ``pricer(k, tau, t, state)`` returns undiscounted ``(call, put)`` arrays.
    Calls and puts are bumped separately and the OTM side is always chosen
    by the unbumped forward, so partials stay smooth across ``k = F``.
    """

    pricer: Callable
    strikes: np.ndarray
    tau: float
    rel_bump: float = 1e-4
    time_homogeneous: bool = True
    name: str = "custom"

    def _otm(self, state, sel_F, tau=None, t=0.0):
        call, put = self.pricer(self.strikes, self.tau if tau is None else tau, t, np.asarray(state, float))
        # average at k = F so the jump in the F-partial sits on a trapezoid node symmetrically
        return np.where(self.strikes < sel_F, put, np.where(self.strikes > sel_F, call, 0.5 * (put + call)))

    def theta(self, state, t: float = 0.0) -> np.ndarray:
        return self._otm(state, state[0], t=t)

    def _bump(self, state, i):
        return self.rel_bump * max(abs(state[i]), 1e-8)

    def partial(self, state, i: int, t: float = 0.0) -> np.ndarray:
        state = np.asarray(state, dtype=float)
        b = self._bump(state, i)
        up, dn = state.copy(), state.copy()
        up[i] += b
        dn[i] -= b
        return (self._otm(up, state[0], t=t) - self._otm(dn, state[0], t=t)) / (2 * b)

    def second_partial(self, state, i: int, j: int, t: float = 0.0) -> np.ndarray:
        state = np.asarray(state, dtype=float)
        bi, bj = self._bump(state, i), self._bump(state, j)
        if i == j:
            up, dn = state.copy(), state.copy()
            up[i] += bi
            dn[i] -= bi
            return (self._otm(up, state[0], t=t) - 2 * self._otm(state, state[0], t=t)
                    + self._otm(dn, state[0], t=t)) / bi**2
        total = 0.0
        for si, sj, sign in ((1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)):
            s = state.copy()
            s[i] += si * bi
            s[j] += sj * bj
            total = total + sign * self._otm(s, state[0], t=t)
        return total / (4 * bi * bj)

    def calendar_partial(self, state, t: float = 0.0) -> np.ndarray:
        """``dTheta/dt`` at fixed tenor; identically zero for time-homogeneous pricers."""
        if self.time_homogeneous:
            return np.zeros_like(self.strikes)
        b = max(1e-6, self.rel_bump * self.tau)
        return (self._otm(state, state[0], t=t + b) - self._otm(state, state[0], t=t - b)) / (2 * b)

    def h(self, state, convention: VixConvention, t: float = 0.0) -> float:
        """Squared continuous-strike VIX ``(1/tau) int Theta / k^2 m(dk)``."""
        w = convention.quadrature_weights(self.strikes)
        return float(self.theta(state, t) / self.strikes**2 @ w / self.tau)

    @classmethod
    def black(cls, sigma: float, strikes, tau: float, **kw) -> "OptionSurface":
        def pricer(k, tau_, t, state):
            return black76(state[0], k, tau_, sigma, "call"), black76(state[0], k, tau_, sigma, "put")
        return cls(pricer, np.asarray(strikes, dtype=float), tau, name="black", **kw)

    @classmethod
    def heston(cls, kappa, theta, eta, rho, strikes, tau: float, **kw) -> "OptionSurface":
        """State is ``(F, v)``."""
        def pricer(k, tau_, t, state):
            call = heston_price(state[0], k, tau_, state[1], kappa, theta, eta, rho, "call")
            return call, call - (state[0] - k)
        return cls(pricer, np.asarray(strikes, dtype=float), tau, name="heston", **kw)


@dataclass(frozen=True)
class VixCoefficients:
    """Coefficients of ``dV/V`` at one state.

    ``u1`` is ``None`` when no option surface with calendar partials was
    supplied; ``drift`` is then ``None`` as well.  ``drift`` is the assembled
    ``dt`` coefficient of ``dV/V`` and ``loading`` the factor loadings of
    ``dV/V``.
    """

    t: float
    x: np.ndarray
    V: float
    w: np.ndarray
    u2: float
    uij: np.ndarray
    u1: float | None = None
    drift: float | None = None
    loading: np.ndarray | None = None
    w_surface: np.ndarray | None = None

    @property
    def u1_available(self) -> bool:
        return self.u1 is not None


def vix_coefficients(hf: VarianceFunction | None, spec, state, convention: VixConvention | None = None,
                     surface: OptionSurface | None = None, t: float = 0.0) -> VixCoefficients:
    """Evaluate ``u1, u2, u_ij, w`` at one state vector.

    With a surface every integral is a strike quadrature of bump partials;
    without one ``w`` and ``u_ij`` come from derivatives of ``h`` and ``u1``
    is left unavailable.  ``u2`` carries the strike-measure density ``N``:
    ``-N / (4 tau* V^2 F^2)``.
    """
    state = np.asarray(state, dtype=float)
    conv = convention or (hf.convention if hf is not None else VixConvention())
    tau, n = conv.tau_star, state.size
    F = state[0]
    if surface is not None:
        k = surface.strikes
        m = conv.quadrature_weights(k) / k**2
        V2 = surface.h(state, conv, t)
        if V2 <= 0:
            raise ValueError("V^2 must be positive")
        grads = np.array([surface.partial(state, i, t) for i in range(n)])
        w = w_from_option_grid(k, grads, V2, conv)
        uij = np.empty((n, n))
        for i in range(n):
            for j in range(i, n):
                uij[i, j] = uij[j, i] = (surface.second_partial(state, i, j, t) @ m) / (4 * tau * V2)
        uij -= 0.5 * np.outer(w, w)
        u1 = float(surface.calendar_partial(state, t) @ m) / (2 * tau * V2)
        w_surface = w
        if hf is not None:
            w = w_from_h(hf, state[None, :])[0]
    else:
        V2 = float(hf.of_states(state))
        if V2 <= 0:
            raise ValueError("V^2 must be positive")
        w = w_from_h(hf, state[None, :])[0]
        uij = hf.hessian_states(state[None, :])[0] / (4 * V2) - 0.5 * np.outer(w, w)
        # density term from switching puts to calls at k = F
        uij[0, 0] += conv.N / (4 * tau * V2 * F**2)
        u1, w_surface = None, None
    u2 = -conv.N / (4 * tau * V2 * F**2)
    drift = loading = None
    a = spec.drift(t, state[None, :])[0]
    b = spec.loadings(t, state[None, :])[0]
    C = spec.correlation
    cov = b @ C @ b.T
    w_use = w_surface if w_surface is not None else w
    loading = w_use @ b
    if u1 is not None:
        drift = float(u1 + u2 * cov[0, 0] + np.sum(uij * cov) + w_use @ a)
    return VixCoefficients(t=t, x=state, V=math.sqrt(V2), w=w, u2=u2, uij=uij, u1=u1, drift=drift,
                           loading=loading, w_surface=w_surface)


def ito_drift_of_vix(hf: VarianceFunction, spec, t, states, lam=None) -> np.ndarray:
    """``dt`` coefficient of ``d sqrt(h(X)) / sqrt(h(X))`` along states.

    Uses derivatives of ``h`` only, which is valid for time-homogeneous ``h``.
    ``lam`` (shape ``(n, factors)``) adds the Girsanov drift ``b . lam`` so the
    result is the drift under the tilted measure.
    """
    states = np.asarray(states, dtype=float)
    h = hf.of_states(states)
    g = hf.gradient_states(states)
    H = hf.hessian_states(states)
    a = spec.drift(t, states)
    b = spec.loadings(t, states)
    if lam is not None:
        a = a + np.einsum("pif,pf->pi", b, lam)
    cov = np.einsum("pif,fg,pjg->pij", b, spec.correlation, b)
    w = g / (2 * h[:, None])
    return (np.einsum("pi,pi->p", w, a)
            + np.einsum("pij,pij->p", H / (4 * h[:, None, None]) - 0.5 * w[:, :, None] * w[:, None, :], cov))
