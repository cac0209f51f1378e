import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import brownian, gbm, point
from sfdemc.engine import (CoefficientModel, PathJob, SimulationError, StepScheme,
                           TraceObserver, broadcast_initial, default_block_size, euler_step,
                           init_state, run_block, run_paths, simulate_path)
from sfdemc.models import LinearSddeParams, MarketModel, build_linear_sdde, build_market
from sfdemc.oracles import ou_variance
from sfdemc.rng import NoiseStream, normal_block
from sfdemc.segment import SegmentError, SegmentGrid, new_segment


def _job(model, eta, dt, n_steps, seed=1, **kw):
    scheme = StepScheme.aligned(eta.grid, dt)
    return PathJob(model, scheme, 0.0, n_steps, seed, broadcast_initial(model, eta), **kw)


def test_scheme_alignment():
    g = SegmentGrid(1.0, 10)
    s = StepScheme.aligned(g, 0.025)
    assert s.substeps == 4 and s.dt * 4 == pytest.approx(0.1)
    assert StepScheme.aligned(SegmentGrid(0.0, 0), 0.3).dt == 0.3
    with pytest.raises(SegmentError):
        StepScheme.aligned(g, 0.03)
    with pytest.raises(ValueError):
        StepScheme(0.0)
    assert StepScheme(0.1).n_steps(0.0, 1.0) == 10
    with pytest.raises(ValueError):
        StepScheme(0.3).n_steps(0.0, 1.0)


def test_frozen_dynamics():
    model = CoefficientModel(2, 1, 0.0, lambda t, x, s: 0.0, lambda t, x, s: 0.0, memoryless=True)
    eta = point([1.5, -2.0], dim=2)
    state, _ = simulate_path(model, eta, 0.0, 1.0, StepScheme(0.01), NoiseStream(3, 0))
    assert state.x.tolist() == [1.5, -2.0] and state.t == pytest.approx(1.0)


def test_euler_step_formula():
    model = brownian(mu=0.5, sigma=2.0)
    state = init_state(model, point(1.0))
    out = euler_step(state, model, StepScheme(0.1), [0.3])
    assert out.x[0] == 1.0 + 0.5 * 0.1 + 2.0 * 0.3
    assert state.x[0] == 1.0
    with pytest.raises(ValueError):
        euler_step(state, model, StepScheme(0.1), [math.nan])


def _plain_euler(h, g, x0, dt, n_steps, seed, pid):
    """Segment-free reference fed the same increments, same operation order."""
    x = np.array([x0])
    sq = math.sqrt(dt)
    for k in range(n_steps):
        dw = normal_block(seed, np.array([pid]), k, 1)[0] * sq
        x = x + h(x) * dt + g(x) * dw[0:1]
    return x


@pytest.mark.parametrize("r", [0.0, 0.5])
def test_zero_memory_reduction_is_bit_identical(r):
    mu, sigma = 0.05, 0.2
    model = gbm(mu, sigma, r=r)
    eta = point(100.0, r=r, m=10 if r else 0)
    job = _job(model, eta, 0.01, 100, seed=9)
    res = run_block(job, np.arange(20))
    for pid in range(20):
        ref = _plain_euler(lambda x: mu * x, lambda x: sigma * x, 100.0, 0.01, 100, 9, pid)
        assert res["x_stop"][pid, 0] == ref[0]


def test_memoryless_flag_spot_check(rng):
    grid = SegmentGrid(1.0, 8)
    models = [build_linear_sdde(LinearSddeParams(-1.0, 0.0, 0.3, 1.0)), gbm(r=1.0),
              build_market(MarketModel(new_segment(SegmentGrid(0.0, 0), 1, constant=100.0), 1.0,
                                       0.05, 0.2, lambda seg, x: x[..., 0]))]
    for model in models:
        assert model.memoryless
        r = model.memory
        g = grid if r else SegmentGrid(0.0, 0)
        x = rng.uniform(50, 150, size=(6, 1))
        segs = [new_segment(g, 1, table=rng.uniform(50, 150, size=g.size)).broadcast(6)
                for _ in range(3)]
        for fn in (model.drift, model.diffusion):
            outs = [np.asarray(fn(0.3, x, s)) for s in segs]
            assert all(np.array_equal(outs[0], o) for o in outs[1:])


def test_partition_independence():
    model = build_linear_sdde(LinearSddeParams(-1.0, 0.5, 0.3, 0.2))
    eta = new_segment(SegmentGrid(0.2, 4), 1, linear=(0.0, 1.0))
    n = 1000
    ref = run_paths(_job(model, eta, 0.025, 80, block_size=1000), n)
    for bs, workers in ((256, 1), (100, 2), (64, 3)):
        out = run_paths(_job(model, eta, 0.025, 80, block_size=bs), n, workers=workers)
        assert np.array_equal(out["x_stop"], ref["x_stop"])


def test_block_size_depends_on_shape_only():
    eta = point(0.0, r=1.0, m=1000)
    job = _job(brownian(r=1.0), eta, 0.001, 10)
    assert default_block_size(job) == 7936  # 8e6 // 1001, rounded down to 256
    assert default_block_size(_job(brownian(), point(0.0), 0.1, 10)) == 65536


def test_simulate_path_matches_batch():
    model = build_linear_sdde(LinearSddeParams(-0.5, 0.3, 1.0, 0.5))
    eta = new_segment(SegmentGrid(0.5, 5), 1, constant=1.0)
    res = run_block(_job(model, eta, 0.1, 20, seed=4), np.arange(8))
    state, (trace,) = simulate_path(model, eta, 0.0, 2.0, StepScheme(0.1), NoiseStream(4, 6),
                                    [TraceObserver()])
    assert state.x[0] == res["x_stop"][6, 0]
    assert trace["trace_x"].shape == (1, 21, 1)
    assert trace["trace_x"][0, -1, 0] == state.x[0]
    assert np.allclose(state.seg.nodes()[:, 0], trace["trace_x"][0, -6:, 0])


def test_blow_up_names_path():
    model = build_linear_sdde(LinearSddeParams(3000.0, 0.0, 1.0, 0.0))
    with pytest.raises(SimulationError) as err:
        run_block(_job(model, point(1.0), 0.01, 1000), np.arange(5))
    assert err.value.path is not None and err.value.t is not None
    assert "path" in str(err.value)


def test_log_stepper_stays_positive():
    model = CoefficientModel(1, 1, 0.0, lambda t, x, s: 0.0, lambda t, x, s: 3.0,
                             memoryless=True, stepper="log")
    res = run_block(_job(model, point(1.0), 0.1, 100), np.arange(500))
    assert (res["x_stop"] > 0).all()


def test_ou_variance_matches():
    theta, sigma, T, dt = 1.0, 0.8, 2.0, 1e-3
    model = CoefficientModel(1, 1, 0.0, lambda t, x, s: -theta * x, lambda t, x, s: sigma,
                             memoryless=True)
    x = run_paths(_job(model, point(0.0), dt, round(T / dt)), 20_000)["x_stop"][:, 0]
    ref = ou_variance(T, theta, sigma).value
    assert abs(x.var(ddof=1) - ref) < 5 * ref * math.sqrt(2 / len(x))


def test_trace_thinning():
    job = _job(brownian(), point(0.0), 0.1, 10, observers=lambda: [TraceObserver(every=5)])
    res = run_paths(job, 3)
    assert np.allclose(res["trace_t"][:3], [0.0, 0.5, 1.0])
    assert res["trace_x"].shape == (3, 3, 1)


@given(st.integers(1, 6), st.integers(0, 3))
def test_memory_grid_must_match_model(m, extra):
    model = brownian(r=1.0)
    eta = new_segment(SegmentGrid(1.0 + extra, m), 1, constant=0.0)
    if extra:
        with pytest.raises(SegmentError):
            init_state(model, eta)
    else:
        assert init_state(model, eta).x.tolist() == [0.0]
