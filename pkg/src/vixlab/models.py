"""Model specifications for the index, its variance state and the VIX-futures curve.

Everything here is an immutable value object.  Coefficient functions are
described by :class:`ScalarFn` (one variable) and :class:`TermFn` (a function
of calendar time ``t`` and maturity ``T``) so that specs can round-trip
through JSON scenario files when they use one of the named analytic forms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

__all__ = [
    "ScalarFn",
    "TermFn",
    "StochVolSpec",
    "VectorModelSpec",
    "TermStructureSpec",
    "VixConvention",
    "restricted_drift",
    "proportional_termstructure",
    "builtin",
    "ModelError",
]

DEFAULT_TAU_STAR = 30.0 / 365.0
DEFAULT_N = 2.0 * 100.0**2


class ModelError(ValueError):
    """Invalid model parameters or an inconsistent specification."""


def _fd_step(x, rel, floor):
    return np.maximum(floor, rel * np.abs(x))


@dataclass(frozen=True, eq=False)
class ScalarFn:
    """A real function of one real variable with derivative access.

    Named forms carry analytic derivatives:

    * ``poly``: a generalised power sum ``sum_k c_k x**p_k`` (covers constants,
      affine maps, ``a*x**p`` and ``alpha*sqrt(x)``).  Fractional powers are
      evaluated on ``max(x, 0)``, i.e. the value at 0 is taken by continuity.
    * ``exp``: ``a * exp(b*x)``
    * ``log``: ``a * log(x)``
    * ``tabulated``: monotone cubic (PCHIP) interpolation of ``(xs, ys)``.

    ``callable`` wraps an arbitrary vectorised function; derivatives fall back
    to central differences with step ``max(1e-6, 1e-6*|x|)``.
    """

    kind: str
    params: dict = field(default_factory=dict)
    fn: Callable | None = None
    dfn: Callable | None = None

    # -- constructors ---------------------------------------------------
    @classmethod
    def poly(cls, terms: Sequence[tuple[float, float]]) -> "ScalarFn":
        clean = tuple((float(c), float(p)) for c, p in terms if c != 0.0)
        return cls("poly", {"terms": clean})

    @classmethod
    def constant(cls, c: float) -> "ScalarFn":
        return cls.poly([(c, 0.0)])

    @classmethod
    def affine(cls, a: float, b: float) -> "ScalarFn":
        """``a + b*x``."""
        return cls.poly([(a, 0.0), (b, 1.0)])

    @classmethod
    def power(cls, a: float, p: float) -> "ScalarFn":
        return cls.poly([(a, p)])

    @classmethod
    def sqrt_scaled(cls, alpha: float) -> "ScalarFn":
        """``alpha * sqrt(x)``."""
        return cls.poly([(alpha, 0.5)])

    @classmethod
    def exp(cls, a: float, b: float) -> "ScalarFn":
        return cls("exp", {"a": float(a), "b": float(b)})

    @classmethod
    def log(cls, a: float = 1.0) -> "ScalarFn":
        return cls("log", {"a": float(a)})

    @classmethod
    def tabulated(cls, xs, ys) -> "ScalarFn":
        xs = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float)
        if xs.ndim != 1 or xs.shape != ys.shape or xs.size < 2:
            raise ModelError("tabulated function needs matching 1-d arrays of length >= 2")
        if np.any(np.diff(xs) <= 0):
            raise ModelError("tabulated abscissae must be strictly increasing")
        return cls("tabulated", {"xs": tuple(xs), "ys": tuple(ys)},
                   fn=PchipInterpolator(xs, ys, extrapolate=True))

    @classmethod
    def from_callable(cls, fn: Callable, dfn: Callable | None = None) -> "ScalarFn":
        return cls("callable", {}, fn=fn, dfn=dfn)

    # -- evaluation -----------------------------------------------------
    @property
    def terms(self) -> tuple[tuple[float, float], ...]:
        return self.params.get("terms", ())

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "poly":
            out = np.zeros_like(x)
            for c, p in self.terms:
                out = out + c * _pow(x, p)
            return out
        if self.kind == "exp":
            return self.params["a"] * np.exp(self.params["b"] * x)
        if self.kind == "log":
            return self.params["a"] * np.log(x)
        if self.kind == "tabulated":
            return np.asarray(self.fn(x), dtype=float)
        if self.kind == "callable":
            return np.asarray(self.fn(x), dtype=float)
        raise ModelError(f"unknown ScalarFn kind {self.kind!r}")

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "poly":
            out = np.zeros_like(x)
            for c, p in self.terms:
                if p != 0.0:
                    out = out + c * p * _pow(x, p - 1.0)
            return out
        if self.kind == "exp":
            return self.params["a"] * self.params["b"] * np.exp(self.params["b"] * x)
        if self.kind == "log":
            return self.params["a"] / x
        if self.kind == "tabulated":
            return np.asarray(self.fn.derivative()(x), dtype=float)
        if self.dfn is not None:
            return np.asarray(self.dfn(x), dtype=float)
        h = _fd_step(x, 1e-6, 1e-6)
        return (self(x + h) - self(x - h)) / (2.0 * h)

    def second_derivative(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "poly":
            out = np.zeros_like(x)
            for c, p in self.terms:
                if p not in (0.0, 1.0):
                    out = out + c * p * (p - 1.0) * _pow(x, p - 2.0)
            return out
        if self.kind == "exp":
            return self.params["a"] * self.params["b"] ** 2 * np.exp(self.params["b"] * x)
        if self.kind == "log":
            return -self.params["a"] / x**2
        if self.kind == "tabulated":
            return np.asarray(self.fn.derivative(2)(x), dtype=float)
        h = _fd_step(x, 1e-4, 1e-4)
        return (self(x + h) - 2.0 * self(x) + self(x - h)) / h**2

    # -- serialisation --------------------------------------------------
    def to_dict(self) -> dict:
        if self.kind == "callable":
            raise ModelError("callable ScalarFn cannot be serialised")
        if self.kind == "poly":
            return {"kind": "poly", "terms": [list(t) for t in self.terms]}
        if self.kind == "tabulated":
            return {"kind": "tabulated", "xs": list(self.params["xs"]), "ys": list(self.params["ys"])}
        return {"kind": self.kind, **self.params}

    @classmethod
    def from_dict(cls, d: dict) -> "ScalarFn":
        d = dict(d)
        kind = d.pop("kind")
        if kind == "poly":
            return cls.poly([tuple(t) for t in d["terms"]])
        if kind == "constant":
            return cls.constant(d["value"])
        if kind == "affine":
            return cls.affine(d["a"], d["b"])
        if kind == "power":
            return cls.power(d["a"], d["p"])
        if kind == "sqrt":
            return cls.sqrt_scaled(d["alpha"])
        if kind == "exp":
            return cls.exp(d["a"], d["b"])
        if kind == "log":
            return cls.log(d.get("a", 1.0))
        if kind == "tabulated":
            return cls.tabulated(d["xs"], d["ys"])
        raise ModelError(f"unknown ScalarFn kind {kind!r}")


def _pow(x, p):
    if p == 0.0:
        return np.ones_like(x)
    if float(p).is_integer():
        return x**p
    with np.errstate(divide="ignore"):
        return np.power(np.maximum(x, 0.0), p)


@dataclass(frozen=True, eq=False)
class TermFn:
    """A coefficient ``f(t, T)`` on the triangle ``0 <= t <= T``.

    Kinds: ``constant`` (``c``), ``exp_decay`` (``gamma*exp(-kappa*(T-t))``)
    and ``callable``.  ``dT`` is the maturity derivative.
    """

    kind: str
    params: dict = field(default_factory=dict)
    fn: Callable | None = None

    @classmethod
    def constant(cls, c: float) -> "TermFn":
        return cls("constant", {"c": float(c)})

    @classmethod
    def exp_decay(cls, gamma: float, kappa: float) -> "TermFn":
        return cls("exp_decay", {"gamma": float(gamma), "kappa": float(kappa)})

    @classmethod
    def from_callable(cls, fn: Callable) -> "TermFn":
        return cls("callable", {}, fn=fn)

    def __call__(self, t, T):
        t = np.asarray(t, dtype=float)
        T = np.asarray(T, dtype=float)
        if self.kind == "constant":
            return np.full(np.broadcast(t, T).shape, self.params["c"])
        if self.kind == "exp_decay":
            return self.params["gamma"] * np.exp(-self.params["kappa"] * (T - t))
        return np.asarray(self.fn(t, T), dtype=float) * np.ones(np.broadcast(t, T).shape)

    def dT(self, t, T):
        t = np.asarray(t, dtype=float)
        T = np.asarray(T, dtype=float)
        if self.kind == "constant":
            return np.zeros(np.broadcast(t, T).shape)
        if self.kind == "exp_decay":
            return -self.params["kappa"] * self(t, T)
        h = _fd_step(T, 1e-6, 1e-6)
        return (self(t, T + h) - self(t, T - h)) / (2.0 * h)

    @property
    def is_zero(self) -> bool:
        if self.kind == "constant":
            return self.params["c"] == 0.0
        if self.kind == "exp_decay":
            return self.params["gamma"] == 0.0
        return False

    def to_dict(self) -> dict:
        if self.kind == "callable":
            raise ModelError("callable TermFn cannot be serialised")
        return {"kind": self.kind, **self.params}

    @classmethod
    def from_dict(cls, d) -> "TermFn":
        if isinstance(d, (int, float)):
            return cls.constant(d)
        d = dict(d)
        kind = d.pop("kind")
        if kind == "constant":
            return cls.constant(d.get("c", d.get("value", 0.0)))
        if kind == "exp_decay":
            return cls.exp_decay(d["gamma"], d["kappa"])
        raise ModelError(f"unknown TermFn kind {kind!r}")


@dataclass(frozen=True, eq=False)
class StochVolSpec:
    """One-factor stochastic volatility model for the index future.

    ``dF/F = sqrt(X) dW`` and ``dX = mu(X) dt + sigma(X) dZ`` with
    ``corr(W, Z) = rho``.  Factor order in simulations is ``(W, Z)``.
    """

    mu: ScalarFn
    sigma: ScalarFn
    rho: float = 0.0
    x0: float = 0.04
    f0: float = 100.0
    name: str = "custom"
    params: dict = field(default_factory=dict)
    sqrt_type: bool = True

    def __post_init__(self):
        if not self.x0 > 0:
            raise ModelError("x0 must be positive")
        if not self.f0 > 0:
            raise ModelError("f0 must be positive")
        if not -1.0 <= self.rho <= 1.0:
            raise ModelError("|rho| must not exceed 1")

    components = ("F", "X")
    factors = ("W", "Z")
    state_index = 1

    @property
    def dim(self) -> int:
        return 2

    @property
    def correlation(self) -> np.ndarray:
        return np.array([[1.0, self.rho], [self.rho, 1.0]])

    @property
    def initial_state(self) -> np.ndarray:
        return np.array([self.f0, self.x0])

    def drift(self, t, states):
        """Absolute drift of every state component, shape ``(n, 2)``."""
        x = np.maximum(states[..., 1], 0.0)
        out = np.zeros_like(states)
        out[..., 1] = self.mu(x)
        return out

    def loadings(self, t, states):
        """Absolute diffusion loadings on the ``(W, Z)`` factors, shape ``(n, 2, 2)``."""
        f = states[..., 0]
        x = np.maximum(states[..., 1], 0.0)
        out = np.zeros(states.shape + (2,))
        out[..., 0, 0] = f * np.sqrt(x)
        out[..., 1, 1] = self.sigma(x)
        return out


@dataclass(frozen=True, eq=False)
class VectorModelSpec:
    """The geometric state vector ``dX^i = X^i mu^i dt + X^i sigma^i . dW``.

    Component 0 is the index future.  ``drift_fn(t, X)`` returns relative drifts
    of shape ``(n, d+1)`` and ``vol_fn(t, X)`` relative volatility rows of shape
    ``(n, d+1, n_factors)``.  Factors are independent Brownian motions.
    """

    x0: np.ndarray
    drift_fn: Callable
    vol_fn: Callable
    n_factors: int
    name: str = "custom"
    params: dict = field(default_factory=dict)
    state_index: int = 0
    sqrt_type: bool = False

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        object.__setattr__(self, "x0", x0)
        if np.any(x0 <= 0):
            raise ModelError("initial state must be positive")
        probe = np.asarray(self.vol_fn(0.0, x0[None, :]))
        if probe.shape != (1, x0.size, self.n_factors):
            raise ModelError(f"vol_fn returned shape {probe.shape}, expected {(1, x0.size, self.n_factors)}")
        probe = np.asarray(self.drift_fn(0.0, x0[None, :]))
        if probe.shape != (1, x0.size):
            raise ModelError(f"drift_fn returned shape {probe.shape}, expected {(1, x0.size)}")

    @classmethod
    def constant(cls, x0, mu, sigma, name="custom", **kw) -> "VectorModelSpec":
        """Constant relative coefficients; ``sigma`` is ``(d+1, n_factors)``."""
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        if sigma.shape[0] != x0.size or mu.size != x0.size:
            raise ModelError("dimension mismatch between x0, mu and sigma")
        return cls(
            x0=x0,
            drift_fn=lambda t, X: np.broadcast_to(mu, X.shape).copy(),
            vol_fn=lambda t, X: np.broadcast_to(sigma, X.shape + (sigma.shape[1],)).copy(),
            n_factors=sigma.shape[1],
            name=name,
            params={"mu": mu.tolist(), "sigma": sigma.tolist(), **kw},
        )

    @property
    def dim(self) -> int:
        return self.n_factors

    @property
    def components(self) -> tuple[str, ...]:
        return tuple(f"X{i}" for i in range(self.x0.size))

    @property
    def factors(self) -> tuple[str, ...]:
        return tuple(f"W{j}" for j in range(self.n_factors))

    @property
    def correlation(self) -> np.ndarray:
        return np.eye(self.n_factors)

    @property
    def initial_state(self) -> np.ndarray:
        return self.x0.copy()

    def drift(self, t, states):
        return states * self.drift_fn(t, states)

    def loadings(self, t, states):
        return states[..., :, None] * self.vol_fn(t, states)


@dataclass(frozen=True, eq=False)
class TermStructureSpec:
    """VIX futures family ``dF(t,T) = F(t,T) (mu_v dt + nu . dW)``.

    ``nu`` holds one :class:`TermFn` per noise factor, in the factor order of
    the index model the curve is simulated against.
    """

    initial_curve: ScalarFn
    mu_v: TermFn
    nu: tuple[TermFn, ...]
    T_star: float
    name: str = "custom"

    def __post_init__(self):
        if not self.T_star > 0:
            raise ModelError("T_star must be positive")
        probe = np.linspace(0.0, self.T_star, 65)
        if np.any(~np.isfinite(self.initial_curve(probe))) or np.any(self.initial_curve(probe) <= 0):
            raise ModelError("initial VIX futures curve must be positive on [0, T_star]")

    @property
    def n_factors(self) -> int:
        return len(self.nu)

    def nu_vec(self, t, T) -> np.ndarray:
        return np.stack([f(t, T) for f in self.nu], axis=-1)

    def nu_vec_dT(self, t, T) -> np.ndarray:
        return np.stack([f.dT(t, T) for f in self.nu], axis=-1)

    def derivative_bounds(self, n: int = 33) -> dict[str, float]:
        """Largest |d/dT| of the curve, ``mu_v`` and ``nu`` on a probe mesh."""
        Ts = np.linspace(0.0, self.T_star, n)
        tt, TT = np.meshgrid(Ts, Ts, indexing="ij")
        mask = tt <= TT
        return {
            "initial_curve": float(np.max(np.abs(self.initial_curve.derivative(Ts)))),
            "mu_v": float(np.max(np.abs(self.mu_v.dT(tt, TT)[mask]))),
            "nu": float(np.max(np.abs(self.nu_vec_dT(tt, TT)[mask]))),
        }


@dataclass(frozen=True)
class VixConvention:
    """Horizon ``tau_star``, scale ``N`` and the strike measure of the VIX."""

    tau_star: float = DEFAULT_TAU_STAR
    N: float = DEFAULT_N
    measure: str = "continuous"

    def __post_init__(self):
        if not self.tau_star > 0:
            raise ModelError("tau_star must be positive")
        if not self.N > 0:
            raise ModelError("N must be positive")
        if self.measure not in ("continuous", "discrete"):
            raise ModelError("measure must be 'continuous' or 'discrete'")

    def quadrature_weights(self, strikes) -> np.ndarray:
        """Weights ``m(dk)`` on a strike grid.

        ``continuous`` is ``N`` times trapezoid weights; ``discrete`` is ``N``
        times the CBOE strike increments (central, one-sided at the ends).
        """
        k = np.asarray(strikes, dtype=float)
        if k.size < 2:
            raise ModelError("need at least two strikes")
        dk = np.diff(k)
        w = np.empty_like(k)
        if self.measure == "continuous":
            w[0], w[-1] = dk[0] / 2, dk[-1] / 2
            w[1:-1] = (dk[:-1] + dk[1:]) / 2
        else:
            w[0], w[-1] = dk[0], dk[-1]
            w[1:-1] = (k[2:] - k[:-2]) / 2
        return self.N * w

    @property
    def scale(self) -> float:
        """``N / (2 tau*)``, the factor turning expected integrated variance into ``h``."""
        return self.N / (2.0 * self.tau_star)


def restricted_drift(sigma: ScalarFn, gamma: float) -> ScalarFn:
    """Drift ``mu(x) = sigma(x) * (sigma'(x)/2 - gamma)`` tied to a vol function.

    This is the drift that makes proportional VIX-futures volatility with
    diagonal level ``gamma`` compatible with the variance dynamics.  For power
    sums the result is again a power sum, so ``alpha*sqrt(x)`` maps to
    ``alpha**2/4 - alpha*gamma*sqrt(x)`` with no singularity at 0.
    """
    gamma = float(gamma)
    if sigma.kind == "poly":
        terms: dict[float, float] = {}
        for c1, p1 in sigma.terms:
            terms[p1] = terms.get(p1, 0.0) - gamma * c1
            for c2, p2 in sigma.terms:
                if p2 != 0.0:
                    p = p1 + p2 - 1.0
                    terms[p] = terms.get(p, 0.0) + 0.5 * c1 * c2 * p2
        return ScalarFn.poly(sorted(((c, p) for p, c in terms.items()), key=lambda t: t[1]))

    def mu(x):
        return sigma(x) * (0.5 * sigma.derivative(x) - gamma)

    return ScalarFn.from_callable(mu)


def proportional_termstructure(
    initial_curve: ScalarFn,
    beta: TermFn | float,
    T_star: float,
    n_factors: int = 2,
    factor: int = 1,
    mu_v: TermFn | None = None,
) -> TermStructureSpec:
    """Futures family ``dF(t,T) = beta(t,T) F(t,T) dZ`` (``Z`` = ``factor``).

    ``mu_v`` defaults to zero; pass a non-zero one only to inject a drift for
    diagnostics.
    """
    if not isinstance(beta, TermFn):
        beta = TermFn.constant(float(beta))
    Ts = np.linspace(0.0, T_star, 41)
    tt, TT = np.meshgrid(Ts, Ts, indexing="ij")
    vals = beta(tt, TT)[tt <= TT]
    if np.any(vals < 0):
        raise ModelError("beta must be non-negative on 0 <= t <= T <= T_star")
    zero = TermFn.constant(0.0)
    nu = tuple(beta if j == factor else zero for j in range(n_factors))
    return TermStructureSpec(
        initial_curve=initial_curve,
        mu_v=mu_v if mu_v is not None else zero,
        nu=nu,
        T_star=T_star,
        name="proportional",
    )


def _positive(params, *names):
    for n in names:
        if n not in params:
            raise ModelError(f"missing parameter {n!r}")
        if not params[n] > 0:
            raise ModelError(f"parameter {n!r} must be positive, got {params[n]!r}")


def builtin(name: str, **params):
    """Construct one of the bundled models.

    ``heston``: kappa, theta, eta, v0, rho[, f0]
    ``cir_restricted``: alpha, gamma, x0[, rho, f0]
    ``gbm_index``: sigma0[, mu0, f0]
    ``custom``: mu, sigma (ScalarFn or dicts), x0[, rho, f0]
    """
    if name == "heston":
        _positive(params, "kappa", "theta", "eta", "v0")
        k, th, eta = params["kappa"], params["theta"], params["eta"]
        return StochVolSpec(
            mu=ScalarFn.affine(k * th, -k),
            sigma=ScalarFn.sqrt_scaled(eta),
            rho=float(params.get("rho", 0.0)),
            x0=float(params["v0"]),
            f0=float(params.get("f0", 100.0)),
            name="heston",
            params=dict(params),
        )
    if name == "cir_restricted":
        _positive(params, "alpha", "gamma", "x0")
        sigma = ScalarFn.sqrt_scaled(params["alpha"])
        return StochVolSpec(
            mu=restricted_drift(sigma, params["gamma"]),
            sigma=sigma,
            rho=float(params.get("rho", 0.0)),
            x0=float(params["x0"]),
            f0=float(params.get("f0", 100.0)),
            name="cir_restricted",
            params=dict(params),
        )
    if name == "gbm_index":
        _positive(params, "sigma0")
        return VectorModelSpec.constant(
            x0=[float(params.get("f0", 100.0))],
            mu=[float(params.get("mu0", 0.0))],
            sigma=[[float(params["sigma0"])]],
            name="gbm_index",
        )
    if name == "custom":
        mu, sigma = params.get("mu"), params.get("sigma")
        if mu is None or sigma is None:
            raise ModelError("custom model needs 'mu' and 'sigma'")
        if isinstance(mu, dict):
            mu = ScalarFn.from_dict(mu)
        if isinstance(sigma, dict):
            sigma = ScalarFn.from_dict(sigma)
        _positive(params, "x0")
        return StochVolSpec(
            mu=mu,
            sigma=sigma,
            rho=float(params.get("rho", 0.0)),
            x0=float(params["x0"]),
            f0=float(params.get("f0", 100.0)),
            name="custom",
            params={k: v for k, v in params.items() if k not in ("mu", "sigma")},
            sqrt_type=bool(params.get("sqrt_type", True)),
        )
    raise ModelError(f"unknown builtin model {name!r}")
