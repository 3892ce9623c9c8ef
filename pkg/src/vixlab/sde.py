"""Correlated Brownian increments and pathwise SDE integration.

Randomness is counter based: paths are grouped in fixed blocks of
:data:`RNG_BLOCK` and each block owns a Philox stream keyed by
``(seed, stream_id, block)``.  Work is split into chunks that are multiples of
the block size, so the output never depends on how many worker threads ran.
"""

from __future__ import annotations

import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from .models import StochVolSpec, VectorModelSpec

__all__ = [
    "TimeGrid",
    "NoiseSpec",
    "PathBundle",
    "SimulationError",
    "RNG_BLOCK",
    "psd_cholesky",
    "generate_increments",
    "iter_increment_chunks",
    "integrate",
    "simulate",
    "default_scheme",
    "resolve_threads",
    "coarsen",
]

RNG_BLOCK = 256
CHUNK_BLOCKS = 8
EXPLOSION_CAP = 1e12
SCHEMES = ("euler", "full_truncation_euler", "milstein")
BINARY_MAGIC = b"VIXPATH1"
BINARY_VERSION = 1
_HEADER = struct.Struct("<8sIIIIIdd")


class SimulationError(RuntimeError):
    """Raised when a path leaves the finite, bounded region."""


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    t_end: float
    n_steps: int

    def __post_init__(self):
        if not self.t_end > self.t0:
            raise ValueError("t_end must exceed t0")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError("n_steps must be a positive integer")

    @classmethod
    def from_dt(cls, t0: float, t_end: float, dt: float) -> "TimeGrid":
        n = max(1, int(round((t_end - t0) / dt)))
        return cls(t0, t_end, n)

    @property
    def dt(self) -> float:
        return (self.t_end - self.t0) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_steps + 1)


def psd_cholesky(corr, tol: float = 1e-12) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == corr`` for PSD (possibly singular) input.

    Zero pivots are allowed: the column is set to zero, so ``rho = 1`` yields
    identical factor rows.
    """
    a = np.array(corr, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("correlation must be a square matrix")
    if not np.allclose(a, a.T, atol=1e-14):
        raise ValueError("correlation must be symmetric")
    if not np.allclose(np.diag(a), 1.0, atol=1e-14):
        raise ValueError("correlation must have unit diagonal")
    n = a.shape[0]
    L = np.zeros_like(a)
    for j in range(n):
        d = a[j, j] - L[j, :j] @ L[j, :j]
        if d < -tol:
            raise ValueError("correlation matrix is not positive semi-definite")
        if d <= tol:
            rest = a[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]
            if np.any(np.abs(rest) > 1e-9):
                raise ValueError("correlation matrix is not positive semi-definite")
            continue
        L[j, j] = np.sqrt(d)
        L[j + 1:, j] = (a[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    dim: int
    correlation: np.ndarray | None = None
    seed: int = 0
    stream_id: int = 0
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        corr = np.eye(self.dim) if self.correlation is None else np.asarray(self.correlation, dtype=float)
        if corr.shape != (self.dim, self.dim):
            raise ValueError(f"correlation shape {corr.shape} does not match dim {self.dim}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        object.__setattr__(self, "correlation", corr)
        object.__setattr__(self, "chol", psd_cholesky(corr))

    def block_generator(self, block: int) -> np.random.Generator:
        key = np.random.SeedSequence([int(self.seed), int(self.stream_id), int(block)])
        return np.random.Generator(np.random.Philox(key))


def _block_normals(noise: NoiseSpec, n_steps: int, block: int) -> np.ndarray:
    return noise.block_generator(block).standard_normal((RNG_BLOCK, n_steps, noise.dim))


def _increments_range(noise: NoiseSpec, grid: TimeGrid, start: int, stop: int) -> np.ndarray:
    """Correlated increments for paths ``start:stop`` (shape paths x steps x factors)."""
    b0, b1 = start // RNG_BLOCK, (stop - 1) // RNG_BLOCK
    z = np.concatenate([_block_normals(noise, grid.n_steps, b) for b in range(b0, b1 + 1)])
    z = z[start - b0 * RNG_BLOCK: stop - b0 * RNG_BLOCK]
    return np.sqrt(grid.dt) * (z @ noise.chol.T)


def generate_increments(noise: NoiseSpec, grid: TimeGrid, n_paths: int) -> np.ndarray:
    """All increments at once, shape ``(n_paths, n_steps, dim)``."""
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    return _increments_range(noise, grid, 0, n_paths)


def iter_increment_chunks(noise: NoiseSpec, grid: TimeGrid, n_paths: int,
                          chunk: int = RNG_BLOCK * CHUNK_BLOCKS) -> Iterator[tuple[int, np.ndarray]]:
    """Yield ``(first_path, increments)`` chunks without holding every path in memory."""
    chunk = max(RNG_BLOCK, chunk - chunk % RNG_BLOCK)
    for start in range(0, n_paths, chunk):
        yield start, _increments_range(noise, grid, start, min(n_paths, start + chunk))


def default_scheme(spec) -> str:
    return "full_truncation_euler" if getattr(spec, "sqrt_type", False) else "euler"


def resolve_threads(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get("VIXLAB_THREADS", "1") or 1)
    return max(1, int(threads))


def _check(states: np.ndarray, step: int, first_path: int):
    bad = ~np.isfinite(states) | (np.abs(states) > EXPLOSION_CAP)
    if bad.any():
        p = int(np.argwhere(bad.any(axis=tuple(range(1, states.ndim))))[0, 0])
        kind = "non-finite" if not np.all(np.isfinite(states[p])) else "exploding"
        raise SimulationError(f"{kind} state on path {first_path + p} at step {step}")


def integrate(spec, grid: TimeGrid, dW: np.ndarray, scheme: str | None = None,
              first_path: int = 0) -> np.ndarray:
    """Integrate ``spec`` along given factor increments; returns ``(paths, steps+1, comps)``."""
    scheme = scheme or default_scheme(spec)
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
    if dW.shape[2] != spec.dim:
        raise ValueError(f"spec has {spec.dim} factors but increments carry {dW.shape[2]}")
    if isinstance(spec, StochVolSpec):
        return _integrate_stoch_vol(spec, grid, dW, scheme, first_path)
    if isinstance(spec, VectorModelSpec):
        return _integrate_vector(spec, grid, dW, scheme, first_path)
    raise TypeError(f"cannot simulate {type(spec).__name__}")


def _integrate_stoch_vol(spec: StochVolSpec, grid, dW, scheme, first_path):
    n, m, _ = dW.shape
    dt = grid.dt
    out = np.empty((n, m + 1, 2))
    f = np.full(n, spec.f0)
    x = np.full(n, spec.x0)
    out[:, 0, 0], out[:, 0, 1] = f, x
    truncate = scheme != "euler"
    for k in range(m):
        xe = np.maximum(x, 0.0) if truncate else x
        dw, dz = dW[:, k, 0], dW[:, k, 1]
        vol = spec.sigma(xe)
        # log-Euler for the index keeps F positive
        f = f * np.exp(-0.5 * np.maximum(xe, 0.0) * dt + np.sqrt(np.maximum(xe, 0.0)) * dw)
        x_new = x + spec.mu(xe) * dt + vol * dz
        if scheme == "milstein":
            # sigma * sigma' has a finite limit where sigma' blows up (sqrt at 0)
            with np.errstate(invalid="ignore", divide="ignore"):
                ss = vol * spec.sigma.derivative(xe)
            ss = np.where(vol == 0.0, 0.0, ss)
            x_new = x_new + 0.5 * ss * (dz * dz - dt)
        x = x_new
        out[:, k + 1, 0] = f
        out[:, k + 1, 1] = np.maximum(x, 0.0) if truncate else x
        _check(out[:, k + 1], k + 1, first_path)
    return out


def _integrate_vector(spec: VectorModelSpec, grid, dW, scheme, first_path):
    n, m, _ = dW.shape
    dt = grid.dt
    t = grid.times
    out = np.empty((n, m + 1, spec.x0.size))
    x = np.broadcast_to(spec.x0, (n, spec.x0.size)).copy()
    out[:, 0] = x
    for k in range(m):
        xe = np.maximum(x, 0.0) if scheme == "full_truncation_euler" else x
        mu = spec.drift_fn(t[k], xe)
        sig = spec.vol_fn(t[k], xe)
        shock = np.einsum("pif,pf->pi", sig, dW[:, k])
        step = mu * dt + shock
        if scheme == "milstein":
            # frozen-coefficient correction for geometric components
            step = step + 0.5 * (shock**2 - np.einsum("pif,pif->pi", sig, sig) * dt)
        x = x + x * step
        out[:, k + 1] = np.maximum(x, 0.0) if scheme == "full_truncation_euler" else x
        _check(out[:, k + 1], k + 1, first_path)
    return out


@dataclass(frozen=True, eq=False)
class PathBundle:
    """Simulated states with the factor increments that produced them."""

    grid: TimeGrid
    states: np.ndarray
    components: tuple[str, ...]
    increments: np.ndarray | None = None
    factors: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.states.ndim != 3 or self.states.shape[1] != self.grid.n_steps + 1:
            raise ValueError("states must be (paths, n_steps+1, components)")
        if self.states.shape[2] != len(self.components):
            raise ValueError("component names do not match state width")
        if self.increments is not None:
            if self.increments.shape[:2] != (self.states.shape[0], self.grid.n_steps):
                raise ValueError("increments must be (paths, n_steps, factors)")
            if len(self.factors) != self.increments.shape[2]:
                raise ValueError("factor names do not match increment width")
        self.states.setflags(write=False)
        if self.increments is not None:
            self.increments.setflags(write=False)

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    def component(self, name: str) -> np.ndarray:
        return self.states[:, :, self.components.index(name)]

    def with_increments(self, increments: np.ndarray, **meta) -> "PathBundle":
        return replace(self, increments=np.array(increments), meta={**self.meta, **meta})

    # -- export ---------------------------------------------------------
    def write_csv(self, path) -> None:
        """Long format ``path,step,t,component,value`` with round-trip float formatting."""
        t = [repr(float(v)) for v in self.times]
        with open(path, "w", newline="\n") as fh:
            fh.write("path,step,t,component,value\n")
            for p in range(self.n_paths):
                rows = []
                for s in range(self.grid.n_steps + 1):
                    for c, name in enumerate(self.components):
                        rows.append(f"{p},{s},{t[s]},{name},{float(self.states[p, s, c])!r}\n")
                fh.write("".join(rows))

    @classmethod
    def read_csv(cls, path, grid: TimeGrid) -> "PathBundle":
        with open(path) as fh:
            header = fh.readline().strip()
            if header != "path,step,t,component,value":
                raise ValueError(f"{path}: line 1: unexpected header {header!r}")
            rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
        names: list[str] = []
        for r in rows:
            if r[3] not in names:
                names.append(r[3])
        n_paths = max(int(r[0]) for r in rows) + 1
        states = np.empty((n_paths, grid.n_steps + 1, len(names)))
        for r in rows:
            states[int(r[0]), int(r[1]), names.index(r[3])] = float(r[4])
        return cls(grid, states, tuple(names))

    def write_binary(self, path) -> None:
        """``VIXPATH1`` header, a length-prefixed JSON name table, then f64 states and increments."""
        n_fac = 0 if self.increments is None else self.increments.shape[2]
        table = {"components": list(self.components), "factors": list(self.factors)}
        if "factor_correlation" in self.meta:
            table["factor_correlation"] = self.meta["factor_correlation"]
        names = json.dumps(table).encode()
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(BINARY_MAGIC, BINARY_VERSION, self.n_paths, self.grid.n_steps,
                                  len(self.components), n_fac, self.grid.t0, self.grid.t_end))
            fh.write(struct.pack("<I", len(names)))
            fh.write(names)
            fh.write(np.ascontiguousarray(self.states, dtype="<f8").tobytes())
            if n_fac:
                fh.write(np.ascontiguousarray(self.increments, dtype="<f8").tobytes())

    @classmethod
    def read_binary(cls, path) -> "PathBundle":
        with open(path, "rb") as fh:
            raw = fh.read()
        magic, version, n_paths, n_steps, n_comp, n_fac, t0, t_end = _HEADER.unpack_from(raw, 0)
        if magic != BINARY_MAGIC:
            raise ValueError(f"{path}: not a VIXPATH1 file")
        if version != BINARY_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        off = _HEADER.size
        (name_len,) = struct.unpack_from("<I", raw, off)
        off += 4
        names = json.loads(raw[off:off + name_len])
        off += name_len
        n_state = n_paths * (n_steps + 1) * n_comp
        states = np.frombuffer(raw, "<f8", n_state, off).reshape(n_paths, n_steps + 1, n_comp).copy()
        off += 8 * n_state
        inc = None
        if n_fac:
            inc = np.frombuffer(raw, "<f8", n_paths * n_steps * n_fac, off).reshape(n_paths, n_steps, n_fac).copy()
        meta = {"factor_correlation": names["factor_correlation"]} if "factor_correlation" in names else {}
        return cls(TimeGrid(t0, t_end, n_steps), states, tuple(names["components"]), inc,
                   tuple(names["factors"]), meta)


def simulate(spec, noise: NoiseSpec, grid: TimeGrid, n_paths: int, scheme: str | None = None,
             threads: int | None = None, keep_increments: bool = True) -> PathBundle:
    """Simulate ``n_paths`` paths of ``spec`` on ``grid``.

    Output is bit-identical for any ``threads`` value.
    """
    if n_paths < 1:
        raise ValueError("empty simulation: n_paths must be positive")
    if noise.dim != spec.dim:
        raise ValueError(f"noise has {noise.dim} factors, model needs {spec.dim}")
    scheme = scheme or default_scheme(spec)
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
    chunk = RNG_BLOCK * CHUNK_BLOCKS
    starts = list(range(0, n_paths, chunk))

    def work(start):
        dW = _increments_range(noise, grid, start, min(n_paths, start + chunk))
        return integrate(spec, grid, dW, scheme, first_path=start), dW

    n_threads = resolve_threads(threads)
    if n_threads == 1 or len(starts) == 1:
        parts = [work(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            parts = list(pool.map(work, starts))
    states = np.concatenate([p[0] for p in parts])
    inc = np.concatenate([p[1] for p in parts]) if keep_increments else None
    return PathBundle(
        grid=grid,
        states=states,
        components=tuple(spec.components),
        increments=inc,
        factors=tuple(spec.factors) if keep_increments else (),
        meta={"scheme": scheme, "seed": int(noise.seed), "stream_id": int(noise.stream_id),
              "model": spec.name, "factor_correlation": np.asarray(spec.correlation).tolist()},
    )


def coarsen(bundle: PathBundle, spec, factor: int, scheme: str | None = None) -> PathBundle:
    """Re-integrate ``spec`` on a grid ``factor`` times coarser, summing the fine increments.

    Both bundles then sample the same Brownian paths, which is what a strong
    convergence comparison needs.
    """
    if bundle.increments is None:
        raise ValueError("bundle carries no increments")
    g = bundle.grid
    if factor < 1 or g.n_steps % factor:
        raise ValueError(f"{g.n_steps} steps cannot be coarsened by {factor}")
    dW = bundle.increments.reshape(bundle.n_paths, g.n_steps // factor, factor, -1).sum(axis=2)
    grid = TimeGrid(g.t0, g.t_end, g.n_steps // factor)
    scheme = scheme or bundle.meta.get("scheme")
    return replace(bundle, grid=grid, states=integrate(spec, grid, dW, scheme), increments=dW,
                   meta={**bundle.meta, "coarsened": factor})
