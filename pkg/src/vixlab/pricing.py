"""Undiscounted option pricers used to build synthetic option surfaces."""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

__all__ = ["black76", "heston_price", "heston_cf"]


def black76(F, k, tau, sigma, kind="call", df=1.0):
    """Black price of a call or put on a future; ``df`` is the discount factor."""
    F, k = np.asarray(F, dtype=float), np.asarray(k, dtype=float)
    sd = sigma * np.sqrt(tau)
    if sd <= 0:
        intrinsic = np.maximum(F - k, 0.0) if kind == "call" else np.maximum(k - F, 0.0)
        return df * intrinsic
    d1 = (np.log(F / k) + 0.5 * sd * sd) / sd
    d2 = d1 - sd
    if kind == "call":
        return df * (F * ndtr(d1) - k * ndtr(d2))
    if kind == "put":
        return df * (k * ndtr(-d2) - F * ndtr(-d1))
    raise ValueError(f"kind must be 'call' or 'put', got {kind!r}")


def heston_cf(u, tau, v0, kappa, theta, eta, rho):
    """Characteristic function of ``ln(F_tau/F_0)`` under Heston (stable branch)."""
    u = np.asarray(u, dtype=complex)
    b = kappa - 1j * rho * eta * u
    d = np.sqrt(b * b + eta * eta * (1j * u + u * u))
    g = (b - d) / (b + d)
    e = np.exp(-d * tau)
    C = kappa * theta / eta**2 * ((b - d) * tau - 2.0 * np.log((1.0 - g * e) / (1.0 - g)))
    D = (b - d) / eta**2 * (1.0 - e) / (1.0 - g * e)
    return np.exp(C + D * v0)


# Gauss-Legendre nodes on [0, U] shared by all calls
_GL_X, _GL_W = np.polynomial.legendre.leggauss(256)


def heston_price(F, k, tau, v0, kappa, theta, eta, rho, kind="call", u_max=200.0, panels=4):
    """Undiscounted Heston price via the single-integral (Lewis) representation.

    Vectorised over strikes ``k``.  The integrand is integrated with composite
    Gauss-Legendre on ``[0, u_max]``.
    """
    k = np.atleast_1d(np.asarray(k, dtype=float))
    edges = np.linspace(0.0, u_max, panels + 1)
    us = np.concatenate([0.5 * (b - a) * _GL_X + 0.5 * (a + b) for a, b in zip(edges[:-1], edges[1:])])
    ws = np.concatenate([0.5 * (b - a) * _GL_W for a, b in zip(edges[:-1], edges[1:])])
    phi = heston_cf(us - 0.5j, tau, v0, kappa, theta, eta, rho)
    x = np.log(F / k)
    integrand = np.real(np.exp(1j * np.outer(x, us)) * phi) / (us * us + 0.25)
    call = F - np.sqrt(F * k) / np.pi * (integrand @ ws)
    if kind == "call":
        return call
    if kind == "put":
        return call - (F - k)
    raise ValueError(f"kind must be 'call' or 'put', got {kind!r}")
