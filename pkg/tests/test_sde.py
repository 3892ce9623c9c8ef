import math

import numpy as np
import pytest

from vixlab.models import ScalarFn, StochVolSpec, VectorModelSpec, builtin
from vixlab.sde import (
    NoiseSpec,
    PathBundle,
    SimulationError,
    TimeGrid,
    coarsen,
    generate_increments,
    integrate,
    iter_increment_chunks,
    psd_cholesky,
    simulate,
)


def test_time_grid_invariants():
    g = TimeGrid(0.0, 1.0, 4)
    assert g.dt == 0.25
    np.testing.assert_array_equal(g.times, [0, 0.25, 0.5, 0.75, 1.0])
    with pytest.raises(ValueError):
        TimeGrid(1.0, 1.0, 4)
    with pytest.raises(ValueError):
        TimeGrid(0.0, 1.0, 0)


def test_identity_correlation_gives_uncorrelated_factors():
    dW = generate_increments(NoiseSpec(2, seed=11), TimeGrid(0.0, 1.0, 1), 100_000)[:, 0]
    assert abs(np.corrcoef(dW.T)[0, 1]) < 0.01
    assert abs(dW.mean()) < 4 / math.sqrt(dW.size)
    assert dW.var() == pytest.approx(1.0, rel=0.02)


def test_target_correlation_is_reproduced():
    dW = generate_increments(NoiseSpec(2, [[1, -0.7], [-0.7, 1]], seed=5), TimeGrid(0.0, 1.0, 1), 100_000)[:, 0]
    assert np.corrcoef(dW.T)[0, 1] == pytest.approx(-0.7, abs=0.01)


def test_same_seed_same_increments():
    g = TimeGrid(0.0, 1.0, 17)
    a = generate_increments(NoiseSpec(3, seed=99), g, 700)
    b = generate_increments(NoiseSpec(3, seed=99), g, 700)
    assert a.tobytes() == b.tobytes()
    c = generate_increments(NoiseSpec(3, seed=99, stream_id=1), g, 700)
    assert not np.array_equal(a, c)


def test_path_streams_do_not_depend_on_path_count():
    g = TimeGrid(0.0, 1.0, 9)
    a = generate_increments(NoiseSpec(2, seed=3), g, 300)
    b = generate_increments(NoiseSpec(2, seed=3), g, 1000)
    assert a.tobytes() == b[:300].tobytes()
    chunks = np.concatenate([c for _, c in iter_increment_chunks(NoiseSpec(2, seed=3), g, 1000, chunk=512)])
    assert chunks.tobytes() == b.tobytes()


def test_perfect_correlation_duplicates_the_factor():
    dW = generate_increments(NoiseSpec(2, [[1, 1], [1, 1]], seed=1), TimeGrid(0.0, 1.0, 5), 50)
    np.testing.assert_array_equal(dW[..., 0], dW[..., 1])


def test_non_psd_correlation_is_rejected():
    bad = [[1, 0.9, -0.9], [0.9, 1, 0.9], [-0.9, 0.9, 1]]
    with pytest.raises(ValueError, match="positive semi-definite"):
        NoiseSpec(3, bad)
    with pytest.raises(ValueError, match="unit diagonal"):
        psd_cholesky([[2.0, 0.0], [0.0, 1.0]])


def test_ode_limit():
    m = 0.3
    spec = VectorModelSpec.constant([2.0], [m], [[0.0]])
    for n in (50, 200):
        b = simulate(spec, NoiseSpec(1, seed=0), TimeGrid(0.0, 1.0, n), 3)
        err = abs(b.states[0, -1, 0] - 2.0 * math.exp(m))
        assert err < 2.0 * m**2 * math.exp(m) / n
    assert np.all(b.states[:, -1, 0] == b.states[0, -1, 0])


def test_gbm_mean_is_a_martingale():
    spec = builtin("gbm_index", sigma0=0.2)
    b = simulate(spec, NoiseSpec(1, seed=2024), TimeGrid(0.0, 1.0, 20), 100_000, threads=4)
    f = b.states[:, -1, 0]
    se = f.std(ddof=1) / math.sqrt(f.size)
    assert abs(f.mean() - 100.0) < 3 * se


def test_restricted_square_root_model_stays_non_negative():
    spec = builtin("cir_restricted", alpha=0.5, gamma=0.3, x0=0.04)
    b = simulate(spec, NoiseSpec(2, spec.correlation, seed=42), TimeGrid(0.0, 30 / 365, 200), 5000)
    assert b.meta["scheme"] == "full_truncation_euler"
    assert np.all(b.component("X") >= 0.0)
    assert np.all(np.isfinite(b.states))


def test_plain_euler_may_go_negative_where_truncation_does_not():
    spec = builtin("heston", kappa=0.5, theta=0.01, eta=1.0, v0=0.01)
    g = TimeGrid(0.0, 1.0, 50)
    noise = NoiseSpec(2, seed=8)
    assert simulate(spec, noise, g, 2000, scheme="euler").component("X").min() < 0
    assert simulate(spec, noise, g, 2000).component("X").min() >= 0


@pytest.mark.parametrize("model", ["heston", "gbm"])
def test_output_is_independent_of_thread_count(model):
    if model == "heston":
        spec = builtin("heston", kappa=2.0, theta=0.04, eta=0.3, v0=0.04, rho=-0.7)
    else:
        spec = VectorModelSpec.constant([100.0, 1.0], [0.0, 0.1], [[0.2, 0.0], [0.1, 0.3]])
    g = TimeGrid(0.0, 0.5, 40)
    runs = [simulate(spec, NoiseSpec(spec.dim, spec.correlation, seed=7), g, 5000, threads=t) for t in (1, 3, 8)]
    for r in runs[1:]:
        assert r.states.tobytes() == runs[0].states.tobytes()
        assert r.increments.tobytes() == runs[0].increments.tobytes()


@pytest.mark.parametrize("scheme", ["euler", "full_truncation_euler", "milstein"])
def test_reintegration_reproduces_states(scheme):
    spec = builtin("cir_restricted", alpha=0.5, gamma=0.3, x0=0.04, rho=0.4)
    b = simulate(spec, NoiseSpec(2, spec.correlation, seed=1), TimeGrid(0.0, 0.1, 30), 600, scheme=scheme)
    again = integrate(spec, b.grid, b.increments, scheme)
    assert again.tobytes() == b.states.tobytes()


def test_weak_error_shrinks_when_step_is_quartered():
    mu, T = 1.0, 1.0
    spec = VectorModelSpec.constant([100.0], [mu], [[0.2]])
    fine = simulate(spec, NoiseSpec(1, seed=4), TimeGrid(0.0, T, 32), 100_000)
    coarse = coarsen(fine, spec, 4)
    exact = 100.0 * math.exp(mu * T)
    e_fine = abs(fine.states[:, -1, 0].mean() - exact)
    e_coarse = abs(coarse.states[:, -1, 0].mean() - exact)
    assert e_fine < e_coarse
    # first order: quartering dt should cut the bias about four-fold
    assert 2.5 < e_coarse / e_fine < 6.0


def test_coarsen_sums_increments():
    spec = builtin("heston", kappa=2.0, theta=0.04, eta=0.3, v0=0.04)
    b = simulate(spec, NoiseSpec(2, seed=3), TimeGrid(0.0, 1.0, 12), 10)
    c = coarsen(b, spec, 3)
    assert c.grid.n_steps == 4
    np.testing.assert_allclose(c.increments.sum(axis=1), b.increments.sum(axis=1), rtol=1e-12, atol=1e-15)
    with pytest.raises(ValueError):
        coarsen(b, spec, 5)


def test_explosion_is_reported_with_path_and_step():
    spec = StochVolSpec(ScalarFn.poly([(50.0, 3.0)]), ScalarFn.constant(0.0), x0=1.0, sqrt_type=False)
    with pytest.raises(SimulationError, match=r"path 0 at step \d+"):
        simulate(spec, NoiseSpec(2, seed=0), TimeGrid(0.0, 1.0, 100), 2, scheme="euler")


def test_empty_simulation():
    spec = builtin("gbm_index", sigma0=0.2)
    with pytest.raises(ValueError, match="empty simulation"):
        simulate(spec, NoiseSpec(1), TimeGrid(0.0, 1.0, 10), 0)


def test_dimension_mismatch():
    spec = builtin("gbm_index", sigma0=0.2)
    with pytest.raises(ValueError, match="factors"):
        simulate(spec, NoiseSpec(2), TimeGrid(0.0, 1.0, 10), 5)


def test_bundle_is_immutable():
    b = simulate(builtin("gbm_index", sigma0=0.2), NoiseSpec(1), TimeGrid(0.0, 1.0, 3), 4)
    with pytest.raises(ValueError):
        b.states[0, 0, 0] = 1.0


def test_csv_round_trip(tmp_path):
    spec = builtin("heston", kappa=2.0, theta=0.04, eta=0.3, v0=0.04, rho=-0.5)
    b = simulate(spec, NoiseSpec(2, spec.correlation, seed=5), TimeGrid(0.0, 0.25, 6), 7)
    b.write_csv(tmp_path / "p.csv")
    back = PathBundle.read_csv(tmp_path / "p.csv", b.grid)
    assert back.states.tobytes() == b.states.tobytes()
    assert back.components == ("F", "X")
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "path,step,t,component,value"


def test_binary_round_trip(tmp_path):
    spec = builtin("heston", kappa=2.0, theta=0.04, eta=0.3, v0=0.04, rho=-0.5)
    b = simulate(spec, NoiseSpec(2, spec.correlation, seed=5), TimeGrid(0.0, 0.25, 6), 7)
    b.write_binary(tmp_path / "p.bin")
    raw = (tmp_path / "p.bin").read_bytes()
    assert raw[:8] == b"VIXPATH1"
    back = PathBundle.read_binary(tmp_path / "p.bin")
    assert back.states.tobytes() == b.states.tobytes()
    assert back.increments.tobytes() == b.increments.tobytes()
    assert back.factors == ("W", "Z")
    assert back.grid == b.grid
    np.testing.assert_array_equal(back.meta["factor_correlation"], spec.correlation)


def test_binary_rejects_foreign_file(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"NOTPATHS" + bytes(64))
    with pytest.raises(ValueError, match="VIXPATH1"):
        PathBundle.read_binary(tmp_path / "x.bin")
