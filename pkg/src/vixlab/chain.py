"""Option chains, the CBOE single-expiry VIX, 30-day interpolation and static replication."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .models import ScalarFn
from .pricing import black76

__all__ = [
    "OptionQuote",
    "OptionChain",
    "VixComputation",
    "ReplicationWeights",
    "ChainError",
    "ChainParseError",
    "compute_forward_pcp",
    "atm_strike",
    "select_strikes",
    "compute_single_expiry_vix",
    "interpolate_vix_30d",
    "replication_weights",
    "apply_replication",
    "read_chain",
    "write_chain_csv",
    "black_chain",
]

CSV_HEADER = ["strike", "call_bid", "call_ask", "put_bid", "put_ask"]
_FIELDS = ["strikes", "call_bid", "call_ask", "put_bid", "put_ask"]


class ChainError(ValueError):
    """Invalid chain or a chain that cannot produce a VIX value."""


class ChainParseError(ChainError):
    """Malformed chain file; the message names the file and line."""


@dataclass(frozen=True)
class OptionQuote:
    strike: float
    bid: float
    ask: float
    kind: str

    def __post_init__(self):
        if not self.strike > 0:
            raise ChainError(f"strike must be positive, got {self.strike}")
        if self.kind not in ("call", "put"):
            raise ChainError(f"kind must be call or put, got {self.kind!r}")
        if not 0 <= self.bid <= self.ask:
            raise ChainError(f"need 0 <= bid <= ask at strike {self.strike}")

    @property
    def mid(self) -> float:
        return 0.5 * (self.bid + self.ask)


@dataclass(frozen=True, eq=False)
class OptionChain:
    """Quotes for one expiry, stored column-wise and sorted by strike."""

    days_to_expiry: int
    rate: float
    strikes: np.ndarray
    call_bid: np.ndarray
    call_ask: np.ndarray
    put_bid: np.ndarray
    put_ask: np.ndarray
    expiry_time: float | None = None
    spot_time: str | None = None

    def __post_init__(self):
        cols = [np.asarray(getattr(self, n), dtype=float) for n in _FIELDS]
        if len({c.shape for c in cols}) != 1 or cols[0].ndim != 1:
            raise ChainError("quote columns must be 1-d arrays of equal length")
        order = np.argsort(cols[0], kind="stable")
        cols = [c[order] for c in cols]
        for name, c in zip(_FIELDS, cols):
            object.__setattr__(self, name, c)
        k = self.strikes
        if k.size and (np.any(k <= 0) or np.any(np.diff(k) <= 0)):
            raise ChainError("strikes must be positive and distinct")
        for side in ("call", "put"):
            b, a = getattr(self, f"{side}_bid"), getattr(self, f"{side}_ask")
            if np.any(b < 0) or np.any(a < b):
                i = int(np.argmax((b < 0) | (a < b)))
                raise ChainError(f"{side} quote at strike {k[i]} violates 0 <= bid <= ask")
        if self.expiry_time is None:
            object.__setattr__(self, "expiry_time", self.days_to_expiry / 365.0)
        if not self.expiry_time > 0:
            raise ChainError("expiry_time must be positive")

    @classmethod
    def from_quotes(cls, quotes: Sequence[OptionQuote], days_to_expiry: int, rate: float,
                    **kw) -> "OptionChain":
        calls = {q.strike: q for q in quotes if q.kind == "call"}
        puts = {q.strike: q for q in quotes if q.kind == "put"}
        if set(calls) != set(puts):
            missing = sorted(set(calls) ^ set(puts))
            raise ChainError(f"strike {missing[0]} lacks a call or a put quote")
        k = sorted(calls)
        return cls(days_to_expiry, rate, np.array(k),
                   np.array([calls[s].bid for s in k]), np.array([calls[s].ask for s in k]),
                   np.array([puts[s].bid for s in k]), np.array([puts[s].ask for s in k]), **kw)

    @property
    def quotes(self) -> list[OptionQuote]:
        out = []
        for i, s in enumerate(self.strikes):
            out.append(OptionQuote(float(s), float(self.call_bid[i]), float(self.call_ask[i]), "call"))
            out.append(OptionQuote(float(s), float(self.put_bid[i]), float(self.put_ask[i]), "put"))
        return out

    @property
    def call_mid(self) -> np.ndarray:
        return 0.5 * (self.call_bid + self.call_ask)

    @property
    def put_mid(self) -> np.ndarray:
        return 0.5 * (self.put_bid + self.put_ask)

    def scaled(self, c: float) -> "OptionChain":
        """Chain with strikes and prices multiplied by ``c``."""
        return OptionChain(self.days_to_expiry, self.rate, c * self.strikes, c * self.call_bid,
                           c * self.call_ask, c * self.put_bid, c * self.put_ask, self.expiry_time,
                           self.spot_time)


@dataclass(frozen=True)
class VixComputation:
    forward: float
    k0: float
    included_strikes: tuple[float, ...]
    per_strike_contribution: tuple[tuple[float, float, float, float], ...]
    sub_index: float
    expiry_time: float
    days_to_expiry: int
    rate: float

    @property
    def variance(self) -> float:
        """``(sub_index/100)^2``, the bracket of the CBOE formula."""
        return (self.sub_index / 100.0) ** 2

    def to_dict(self) -> dict:
        return {
            "forward": self.forward,
            "k0": self.k0,
            "included_strikes": list(self.included_strikes),
            "per_strike_contribution": [
                {"strike": k, "delta_k": dk, "theta": th, "weight": w}
                for k, dk, th, w in self.per_strike_contribution
            ],
            "sub_index": self.sub_index,
            "expiry_time": self.expiry_time,
            "days_to_expiry": self.days_to_expiry,
            "rate": self.rate,
        }


def atm_strike(chain: OptionChain) -> int:
    """Index of the strike minimising ``|C - P|`` (lowest strike on ties)."""
    if chain.strikes.size == 0:
        raise ChainError("no strikes")
    diff = np.abs(chain.call_mid - chain.put_mid)
    if np.all(np.isnan(diff)):
        raise ChainError("no strike has both call and put mid prices")
    return int(np.nanargmin(diff))


def compute_forward_pcp(chain: OptionChain) -> float:
    """Put-call parity forward ``k0 + e^{r tau} (C0 - P0)``."""
    i = atm_strike(chain)
    return float(chain.strikes[i] + math.exp(chain.rate * chain.expiry_time)
                 * (chain.call_mid[i] - chain.put_mid[i]))


def _scan(bids: np.ndarray, order: range) -> list[int]:
    keep, zeros = [], 0
    for j in order:
        if bids[j] > 0:
            keep.append(j)
            zeros = 0
        else:
            zeros += 1
            if zeros == 2:
                break
    return keep


def select_strikes(chain: OptionChain, k0: float) -> list[float]:
    """Strikes entering the sum, ascending.

    Puts are scanned down from ``k0`` and calls up from it.  Zero bids are
    skipped and a scan stops at the second consecutive zero bid.  ``k0`` itself
    is always included.
    """
    hits = np.flatnonzero(chain.strikes == k0)
    if hits.size != 1:
        raise ChainError(f"k0={k0} is not a strike of the chain")
    i0 = int(hits[0])
    puts = _scan(chain.put_bid, range(i0 - 1, -1, -1))
    calls = _scan(chain.call_bid, range(i0 + 1, chain.strikes.size))
    idx = sorted(puts) + [i0] + calls
    return [float(chain.strikes[i]) for i in idx]


def _delta_k(k: np.ndarray) -> np.ndarray:
    if k.size == 1:
        return np.zeros(1)
    dk = np.empty_like(k)
    dk[0] = k[1] - k[0]
    dk[-1] = k[-1] - k[-2]
    dk[1:-1] = 0.5 * (k[2:] - k[:-2])
    return dk


def compute_single_expiry_vix(chain: OptionChain) -> VixComputation:
    """Single-expiry sub-index in vol points.

    ``Delta k`` uses neighbours within the included set; a lone ``k0`` gets
    ``Delta k = 0`` and contributes nothing.
    """
    i0 = atm_strike(chain)
    k0 = float(chain.strikes[i0])
    F = compute_forward_pcp(chain)
    included = select_strikes(chain, k0)
    if not included:
        raise ChainError("no usable quotes")
    pos = np.searchsorted(chain.strikes, included)
    k = chain.strikes[pos]
    theta = np.where(k < k0, chain.put_mid[pos], chain.call_mid[pos])
    theta[k == k0] = 0.5 * (chain.put_mid[i0] + chain.call_mid[i0])
    dk = _delta_k(k)
    tau, r = chain.expiry_time, chain.rate
    weight = 2.0 * math.exp(r * tau) / tau * dk / k**2
    bracket = float(weight @ theta) - (F / k0 - 1.0) ** 2 / tau
    if bracket < 0:
        raise ChainError(f"negative variance: bracket = {bracket!r}")
    contrib = tuple((float(a), float(b), float(c), float(d)) for a, b, c, d in zip(k, dk, theta, weight))
    return VixComputation(
        forward=F, k0=k0, included_strikes=tuple(included), per_strike_contribution=contrib,
        sub_index=100.0 * math.sqrt(bracket), expiry_time=tau, days_to_expiry=chain.days_to_expiry, rate=r,
    )


def interpolate_vix_30d(v1: VixComputation, v2: VixComputation, chain1: OptionChain | None = None,
                        chain2: OptionChain | None = None, target_days: int = 30) -> float:
    """Blend two sub-indices into the 30-day index (vol points).

    Year fractions come from the chains when given, else from the computations.
    """
    n1 = chain1.days_to_expiry if chain1 is not None else v1.days_to_expiry
    n2 = chain2.days_to_expiry if chain2 is not None else v2.days_to_expiry
    t1 = chain1.expiry_time if chain1 is not None else v1.expiry_time
    t2 = chain2.expiry_time if chain2 is not None else v2.expiry_time
    if n2 == n1:
        raise ZeroDivisionError("both expiries have the same day count")
    if not n1 <= target_days <= n2:
        raise ChainError(f"expiries ({n1}, {n2} days) do not bracket {target_days} days")
    a = t1 * (v1.sub_index / 100.0) ** 2 * (n2 - target_days) / (n2 - n1)
    b = t2 * (v2.sub_index / 100.0) ** 2 * (target_days - n1) / (n2 - n1)
    return 100.0 * math.sqrt(365.0 / target_days * (a + b))


# -- static replication -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ReplicationWeights:
    anchor: float
    value_at_anchor: float
    linear_coeff: float
    grid: np.ndarray
    put_weights: np.ndarray
    call_weights: np.ndarray

    @property
    def put_strikes(self) -> np.ndarray:
        return self.grid[self.grid <= self.anchor]

    @property
    def call_strikes(self) -> np.ndarray:
        return self.grid[self.grid >= self.anchor]


def _trapezoid_weights(k: np.ndarray) -> np.ndarray:
    w = np.zeros_like(k)
    if k.size > 1:
        d = np.diff(k)
        w[:-1] += 0.5 * d
        w[1:] += 0.5 * d
    return w


def replication_weights(f: ScalarFn, y: float, grid) -> ReplicationWeights:
    """Option weights ``f''(k) dk`` on either side of the anchor ``y``.

    ``y`` is inserted into the grid if it is not already a node, so each side
    is integrated by the trapezoid rule on its own interval.
    """
    g = np.unique(np.asarray(grid, dtype=float))
    if not g[0] <= y <= g[-1]:
        raise ValueError(f"anchor {y} outside strike grid [{g[0]}, {g[-1]}]")
    g = np.union1d(g, [y])
    lower, upper = g[g <= y], g[g >= y]
    f2 = lambda k: np.asarray(f.second_derivative(k), dtype=float)
    return ReplicationWeights(
        anchor=float(y),
        value_at_anchor=float(f(y)),
        linear_coeff=float(f.derivative(y)),
        grid=g,
        put_weights=f2(lower) * _trapezoid_weights(lower),
        call_weights=f2(upper) * _trapezoid_weights(upper),
    )


def apply_replication(w: ReplicationWeights, x) -> np.ndarray:
    """Value of the replicating portfolio when the underlying ends at ``x``."""
    x = np.asarray(x, dtype=float)
    xs = x[..., None]
    calls = np.maximum(xs - w.call_strikes, 0.0) @ w.call_weights
    puts = np.maximum(w.put_strikes - xs, 0.0) @ w.put_weights
    return w.value_at_anchor + w.linear_coeff * (x - w.anchor) + calls + puts


# -- IO -----------------------------------------------------------------------

def _parse_float(text: str, path, line: int, col: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ChainParseError(f"{path}:{line}: column {col!r}: cannot parse {text!r} as a number") from None
    if not math.isfinite(v):
        raise ChainParseError(f"{path}:{line}: column {col!r}: non-finite value {text!r}")
    return v


def _meta_fields(meta: dict, path) -> tuple[int, float, str | None]:
    try:
        days = meta["days_to_expiry"]
        rate = meta["rate"]
    except KeyError as e:
        raise ChainParseError(f"{path}: missing field {e.args[0]!r}") from None
    if not isinstance(days, int) or isinstance(days, bool) or days <= 0:
        raise ChainParseError(f"{path}: days_to_expiry must be a positive integer")
    if not isinstance(rate, (int, float)) or isinstance(rate, bool):
        raise ChainParseError(f"{path}: rate must be a number")
    return days, float(rate), meta.get("spot_time")


def _build(rows, path, days, rate, spot) -> OptionChain:
    if not rows:
        raise ChainParseError(f"{path}: no quote rows")
    seen: dict[float, int] = {}
    for line, r in rows:
        if r[0] in seen:
            raise ChainParseError(f"{path}:{line}: duplicate strike {r[0]} (first at line {seen[r[0]]})")
        seen[r[0]] = line
        if r[0] <= 0:
            raise ChainParseError(f"{path}:{line}: strike must be positive")
        if not (0 <= r[1] <= r[2]) or not (0 <= r[3] <= r[4]):
            raise ChainParseError(f"{path}:{line}: quotes must satisfy 0 <= bid <= ask")
    a = np.array([r for _, r in rows])
    return OptionChain(days, rate, a[:, 0], a[:, 1], a[:, 2], a[:, 3], a[:, 4], spot_time=spot)


def read_chain(path) -> OptionChain:
    """Load a chain from CSV (plus ``<stem>.meta.json`` sidecar) or from single-file JSON."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ChainParseError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from None
        days, rate, spot = _meta_fields(doc, path)
        quotes = doc.get("quotes")
        if not isinstance(quotes, list):
            raise ChainParseError(f"{path}: 'quotes' must be a list")
        rows = []
        for n, q in enumerate(quotes):
            where = f"quotes[{n}]"
            if not isinstance(q, dict) or set(q) != set(CSV_HEADER):
                raise ChainParseError(f"{path}: {where}: expected keys {CSV_HEADER}")
            rows.append((where, [_parse_float(str(q[c]), path, where, c) for c in CSV_HEADER]))
        return _build(rows, path, days, rate, spot)
    sidecar = path.with_name(path.stem + ".meta.json")
    if not sidecar.exists():
        raise ChainParseError(f"{path}: missing sidecar {sidecar.name}")
    try:
        meta = json.loads(sidecar.read_text())
    except json.JSONDecodeError as e:
        raise ChainParseError(f"{sidecar}:{e.lineno}: invalid JSON ({e.msg})") from None
    days, rate, spot = _meta_fields(meta, sidecar)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise ChainParseError(f"{path}:1: header must be {','.join(CSV_HEADER)}")
        for rec in reader:
            line = reader.line_num
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != 5:
                raise ChainParseError(f"{path}:{line}: expected 5 fields, got {len(rec)}")
            rows.append((line, [_parse_float(c.strip(), path, line, col) for c, col in zip(rec, CSV_HEADER)]))
    return _build(rows, path, days, rate, spot)


def write_chain_csv(chain: OptionChain, path, spot_time: str | None = None) -> None:
    """Write ``chain`` as CSV plus JSON sidecar."""
    path = Path(path)
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for row in zip(chain.strikes, chain.call_bid, chain.call_ask, chain.put_bid, chain.put_ask):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    meta = {"days_to_expiry": chain.days_to_expiry, "rate": chain.rate,
            "spot_time": spot_time or chain.spot_time or "2024-01-02T16:00:00Z"}
    path.with_name(path.stem + ".meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def black_chain(F: float, sigma: float, days: int, rate: float = 0.0, lo: float = 0.5, hi: float = 2.0,
                spacing: float = 0.001, spread: float = 0.0) -> OptionChain:
    """Synthetic chain from Black prices on strikes ``F*(lo + i*spacing)``.

    With ``spread = 0`` bid equals ask equals the discounted model price.
    """
    n = int(round((hi - lo) / spacing))
    k = np.round(F * (lo + spacing * np.arange(n + 1)), 10)
    tau = days / 365.0
    df = math.exp(-rate * tau)
    c = black76(F, k, tau, sigma, "call", df)
    p = black76(F, k, tau, sigma, "put", df)
    half = 0.5 * spread
    return OptionChain(days, rate, k, np.maximum(c - half, 0.0), c + half, np.maximum(p - half, 0.0), p + half)
