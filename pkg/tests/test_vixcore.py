import json
import math
import warnings

import mpmath as mp
import numpy as np
import pytest

from vixlab.models import ScalarFn, StochVolSpec, VixConvention, builtin
from vixlab.vixcore import (
    BoundaryWarning,
    InconsistentModelError,
    OptionSurface,
    VarianceFunction,
    generator_residual,
    gradient_h,
    h_by_fk,
    h_by_mc,
    heston_h,
    stationarity_residual,
    vix_coefficients,
    w_from_h,
    w_from_option_grid,
)

CONV = VixConvention()
TAU = CONV.tau_star
C = CONV.scale  # N / (2 tau*)


def heston_oracle(kappa, theta, v0, tau=TAU):
    """100^2 times the mean of v over [0, tau], in 40-digit arithmetic."""
    mp.mp.dps = 40
    k, th, v, t = map(mp.mpf, (kappa, theta, v0, tau))
    return float(10**4 * (th + (v - th) * (1 - mp.e ** (-k * t)) / (k * t)))


def heston_ab(kappa, theta, tau=TAU):
    mp.mp.dps = 40
    frac = (1 - mp.e ** (-mp.mpf(kappa) * tau)) / (mp.mpf(kappa) * tau)
    return float(10**4 * theta * (1 - frac)), float(10**4 * frac)


def frozen(v):
    return StochVolSpec(ScalarFn.constant(0.0), ScalarFn.constant(0.0), x0=v, sqrt_type=False)


HESTON = builtin("heston", kappa=2.0, theta=0.04, eta=0.3, v0=0.04, rho=-0.7)
RESTRICTED = builtin("cir_restricted", alpha=0.5, gamma=0.3, x0=0.04)


@pytest.fixture(scope="module")
def fk_heston():
    return h_by_fk(HESTON, CONV, time_steps=400, n_x=400)


@pytest.fixture(scope="module")
def fk_restricted():
    return h_by_fk(RESTRICTED, CONV, state_grid=np.geomspace(1e-3, 0.5, 401), time_steps=400)


# -- h by Monte Carlo -----------------------------------------------------------

def test_frozen_state_mc():
    hf = h_by_mc(frozen(0.05), CONV, [0.01, 0.05, 0.2], n_paths=4, dt=TAU / 10)
    np.testing.assert_allclose(hf.values, [100.0, 500.0, 2000.0], rtol=1e-12)
    np.testing.assert_array_equal(hf.stderr, 0.0)


def test_heston_headline_is_twenty():
    assert heston_oracle(2.0, 0.04, 0.04) == pytest.approx(400.0, abs=1e-9)
    hf = heston_h(2.0, 0.04)
    assert float(hf(0.04)) == pytest.approx(400.0, rel=1e-14)
    assert math.sqrt(hf(0.04)) == pytest.approx(20.0, rel=1e-14)


def test_heston_mc_against_closed_form():
    spec = builtin("heston", kappa=2.0, theta=0.04, eta=0.3, v0=0.09, rho=-0.7)
    hf = h_by_mc(spec, CONV, [0.04, 0.09], n_paths=100_000, seed=2, threads=4)
    for x, v, se in zip(hf.grid, hf.values, hf.stderr):
        assert abs(v - heston_oracle(2.0, 0.04, x)) < 3 * se


def test_log_contract_estimator_agrees():
    spec = builtin("heston", kappa=2.0, theta=0.04, eta=0.3, v0=0.04, rho=-0.7)
    hf = h_by_mc(spec, CONV, [0.04], n_paths=100_000, seed=5, estimator="log_contract", threads=4)
    assert abs(hf.values[0] - 400.0) < 3 * hf.stderr[0] + 1.0


def test_negative_mc_estimate_is_an_error():
    spec = builtin("gbm_index", sigma0=0.2, mu0=2.0)
    with pytest.raises(InconsistentModelError, match="inconsistent model/convention"):
        h_by_mc(spec, CONV, [100.0], n_paths=1000)


def test_time_homogeneity():
    a = h_by_mc(RESTRICTED, CONV, [0.02, 0.04, 0.08], n_paths=4000, seed=1)
    b = h_by_mc(RESTRICTED, CONV, [0.02, 0.04, 0.08], n_paths=4000, seed=1, t0=0.5)
    np.testing.assert_allclose(a.values, b.values, rtol=1e-9)


# -- h by Feynman-Kac -------------------------------------------------------------

def test_fk_frozen_state():
    x = np.geomspace(0.001, 1.0, 50)
    hf = h_by_fk(frozen(0.04), CONV, state_grid=x, time_steps=50)
    np.testing.assert_allclose(hf.values, 1e4 * x, rtol=1e-12)
    # H(t, x) = c x (tau* - t)
    np.testing.assert_allclose(hf.H[25], C * x * (TAU - hf.H_times[25]), rtol=1e-12)


def test_fk_heston_matches_closed_form(fk_heston):
    x = fk_heston.interior
    oracle = np.array([heston_oracle(2.0, 0.04, v) for v in x])
    assert np.max(np.abs(fk_heston(x) / oracle - 1)) < 1e-3


def test_fk_solver_satisfies_its_own_pde(fk_heston):
    res = stationarity_residual(fk_heston, HESTON)
    assert np.max(np.abs(res[5:-5])) < 1e-3 * C * fk_heston.grid[-1]


def test_fk_agrees_with_mc_for_restricted_model(fk_restricted):
    nodes = [0.01, 0.02, 0.04, 0.08, 0.16]
    mc = h_by_mc(RESTRICTED, CONV, nodes, n_paths=20_000, dt=TAU / 400, seed=9, threads=4)
    z = (mc.values - fk_restricted(np.array(nodes))) / mc.stderr
    assert np.all(np.abs(z) < 3), z


def test_generator_of_h_is_expected_drift_of_state(fk_heston):
    # L h = c (E_x[X_tau*] - x); for mean reversion E_x[X_tau] = theta + (x - theta) e^{-kappa tau}
    x = fk_heston.interior[20:-20]
    expected = C * (0.04 + (x - 0.04) * math.exp(-2.0 * TAU) - x)
    got = generator_residual(fk_heston, HESTON, x)
    np.testing.assert_allclose(got, expected, rtol=2e-3, atol=1e-3 * C * 0.04)


# -- gradients and w ------------------------------------------------------------

def test_heston_gradient_is_constant(fk_heston):
    _, b = heston_ab(2.0, 0.04)
    x = fk_heston.interior[40:-40]
    np.testing.assert_allclose(fk_heston.dh(x), b, rtol=1e-4)
    g = gradient_h(heston_h(2.0, 0.04), np.array([[100.0, 0.07]]))
    np.testing.assert_allclose(g, [[0.0, b]], rtol=1e-14)


def test_constant_h_has_zero_gradient():
    hf = VarianceFunction(np.linspace(0, 1, 11), np.full(11, 400.0), "fk")
    np.testing.assert_allclose(w_from_h(hf, np.array([[100.0, 0.3]])), 0.0, atol=1e-25)


def test_heston_w_formula():
    a, b = heston_ab(2.0, 0.04)
    hf = heston_h(2.0, 0.04)
    for v in (0.01, 0.04, 0.2):
        w = w_from_h(hf, np.array([[100.0, v]]))[0]
        assert w[0] == 0.0
        assert w[1] == pytest.approx(b / (2 * (a + b * v)), rel=1e-13)


def test_w_needs_positive_h():
    hf = VarianceFunction(np.linspace(0, 1, 5), np.array([-1.0, 0, 1, 2, 3]), "fk")
    with pytest.raises(ValueError, match="positive"):
        w_from_h(hf, np.array([[100.0, 0.0]]))


def test_boundary_gradient_warns(fk_heston):
    with pytest.warns(BoundaryWarning):
        gradient_h(fk_heston, np.array([[100.0, fk_heston.grid[-1] * 2]]))


def test_square_root_exponential_h_satisfies_the_loading_identity():
    # h = C exp(4 gamma sqrt(x) / alpha) solves sigma h' = 2 gamma h exactly
    alpha, gamma = 0.5, 0.3
    k = 4 * gamma / alpha
    f = (lambda x: 300.0 * np.exp(k * np.sqrt(x)),
         lambda x: 300.0 * np.exp(k * np.sqrt(x)) * k / (2 * np.sqrt(x)),
         lambda x: np.zeros_like(x))
    x = np.linspace(0.005, 0.3, 30)
    hf = VarianceFunction(x, f[0](x), "closed_form", closed_form=f)
    w = w_from_h(hf, np.column_stack([np.full_like(x, 100.0), x]))[:, 1]
    np.testing.assert_allclose(w * RESTRICTED.sigma(x), gamma, rtol=1e-13)


# The following three identities would hold if the generator of h vanished for the
# restricted square-root model.  It does not (see test_generator_of_h_is_expected_drift_of_state),
# so they fail by a wide margin; kept as strict xfails to document it.
X_PROBE = np.array([0.01, 0.02, 0.04, 0.06, 0.1])


@pytest.mark.xfail(strict=True, reason="sigma h' = 2 gamma h does not hold for the restricted model")
def test_restricted_loading_identity(fk_restricted):
    lhs = RESTRICTED.sigma(X_PROBE) * fk_restricted.dh(X_PROBE)
    np.testing.assert_allclose(lhs, 2 * 0.3 * fk_restricted(X_PROBE), rtol=1e-2)


@pytest.mark.xfail(strict=True, reason="w sigma = gamma does not hold for the restricted model")
def test_restricted_w_sigma_equals_gamma(fk_restricted):
    st_ = np.column_stack([np.full_like(X_PROBE, 100.0), X_PROBE])
    w = w_from_h(fk_restricted, st_)[:, 1]
    np.testing.assert_allclose(w * RESTRICTED.sigma(X_PROBE), 0.3, rtol=1e-2)


@pytest.mark.xfail(strict=True, reason="the generator of h is c (E_x X_tau - x), not 0")
def test_restricted_generator_vanishes(fk_restricted):
    res = generator_residual(fk_restricted, RESTRICTED, X_PROBE)
    assert np.max(np.abs(res)) <= 1e-2 * C * X_PROBE.max()


def test_restricted_loading_ratio_values(fk_restricted):
    ratio = RESTRICTED.sigma(X_PROBE) * fk_restricted.dh(X_PROBE) / (2 * fk_restricted(X_PROBE))
    assert np.all(ratio > 0.3)
    assert np.all(np.diff(ratio) < 0)


# -- option-surface representation ---------------------------------------------

STRIKES = np.arange(20.0, 400.0, 0.25)


def test_zero_partials_give_zero_w():
    assert np.all(w_from_option_grid(STRIKES, np.zeros((2, STRIKES.size)), 400.0, CONV) == 0.0)


def test_heston_surface_w_matches_w_from_h():
    state = np.array([100.0, 0.04])
    surf = OptionSurface.heston(2.0, 0.04, 0.3, -0.7, STRIKES, TAU)
    w_surf = w_from_option_grid(STRIKES, [surf.partial(state, i) for i in range(2)], surf.h(state, CONV), CONV)
    w_h = w_from_h(heston_h(2.0, 0.04), state[None, :])[0]
    assert w_surf[1] == pytest.approx(w_h[1], rel=1e-2)
    # h does not depend on F, so the F-weight is quadrature noise only
    assert abs(w_surf[0] * state[0]) < 1e-3


def test_black_forward_bump_gives_zero_weight():
    state = np.array([100.0])
    surf = OptionSurface.black(0.2, STRIKES, TAU)
    V2 = surf.h(state, CONV)
    assert V2 == pytest.approx(400.0, rel=1e-3)
    w0 = w_from_option_grid(STRIKES, [surf.partial(state, 0)], V2, CONV)[0]
    assert abs(w0 * state[0]) < 1e-3


def test_truncated_strike_grid_warns():
    from vixlab.vixcore import TruncationWarning
    surf = OptionSurface.black(0.2, np.arange(95.0, 105.0, 0.5), TAU)
    with pytest.warns(TruncationWarning):
        w_from_option_grid(surf.strikes, [surf.partial(np.array([100.0]), 0)], 0.04, VixConvention(N=1.0))


# -- coefficients -----------------------------------------------------------------

def test_u2_direct_substitution():
    conv1 = VixConvention(N=1.0)
    hf = VarianceFunction(np.linspace(0.001, 1, 101), np.full(101, 400.0), "fk", convention=conv1)
    co = vix_coefficients(hf, HESTON, [100.0, 0.04], conv1)
    assert co.V == 20.0
    assert co.u2 == pytest.approx(-1 / (4 * (30 / 365) * 400 * 1e4), rel=1e-14)


def test_u2_scales_with_strike_density():
    hf = heston_h(2.0, 0.04)
    co = vix_coefficients(hf, HESTON, [100.0, 0.04])
    assert co.u2 == pytest.approx(-CONV.N / (4 * TAU * 400.0 * 1e4), rel=1e-12)


def test_w_part_matches_w_from_h(fk_heston):
    st_ = np.array([100.0, 0.05])
    co = vix_coefficients(fk_heston, HESTON, st_)
    np.testing.assert_array_equal(co.w, w_from_h(fk_heston, st_[None, :])[0])
    assert co.u1 is None and co.drift is None and not co.u1_available
    np.testing.assert_allclose(co.uij, co.uij.T)


def test_heston_surface_uij_is_symmetric():
    state = np.array([100.0, 0.04])
    surf = OptionSurface.heston(2.0, 0.04, 0.3, -0.7, STRIKES[::4], TAU, rel_bump=1e-3)
    co = vix_coefficients(None, HESTON, state, VixConvention(N=1.0), surface=surf)
    assert co.uij[0, 1] == pytest.approx(co.uij[1, 0], rel=1e-12)
    assert co.u1 == 0.0 and co.u1_available
    assert np.isfinite(co.drift)


def test_nonpositive_variance_is_an_error():
    hf = VarianceFunction(np.linspace(0.001, 1, 5), np.zeros(5), "fk")
    with pytest.raises(ValueError, match="positive"):
        vix_coefficients(hf, HESTON, [100.0, 0.04])


# -- serialisation --------------------------------------------------------------

def test_json_round_trip(fk_restricted, tmp_path):
    fk_restricted.to_json(tmp_path / "h.json")
    back = VarianceFunction.from_json(tmp_path / "h.json")
    assert back.provenance == "fk"
    x = np.linspace(0.002, 0.4, 50)
    np.testing.assert_array_equal(back(x), fk_restricted(x))
    np.testing.assert_array_equal(back.dh(x), fk_restricted.dh(x))
    doc = json.loads((tmp_path / "h.json").read_text())
    assert {"grid", "values", "provenance"} <= set(doc)


def test_closed_form_json_keeps_provenance():
    hf = heston_h(2.0, 0.04)
    back = VarianceFunction.from_dict(json.loads(hf.to_json()))
    assert back.provenance == "closed_form"
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        np.testing.assert_allclose(back(np.array([0.05])), hf(np.array([0.05])), rtol=1e-12)
