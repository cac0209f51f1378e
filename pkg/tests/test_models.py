import math

import numpy as np
import pytest

from conftest import point
from sfdemc.boundary import ExitCurve
from sfdemc.engine import StepScheme, simulate_path
from sfdemc.feynman_kac import KillingSpec, McConfig, TerminalFunctional, fk_terminal
from sfdemc.models import (EcoliModel, LinearSddeParams, MarketModel, build_ecoli,
                           build_linear_sdde, build_market, call_payoff, delayed_ratio_vol,
                           ks_distance, price_european, put_payoff, run_length_distribution,
                           step_grid, table_vol)
from sfdemc.oracles import bs_call, inverse_gaussian_cdf, method_of_steps
from sfdemc.rng import NoiseStream
from sfdemc.segment import SegmentError, SegmentGrid, new_segment

S0, K, R, SIG = 100.0, 100.0, 0.05, 0.2


def test_linear_sdde_flags_and_frozen_dynamics():
    assert build_linear_sdde(LinearSddeParams(1.0, 0.0, 1.0, 1.0)).memoryless
    assert not build_linear_sdde(LinearSddeParams(1.0, 0.5, 1.0, 1.0)).memoryless
    frozen = build_linear_sdde(LinearSddeParams(0.0, 0.0, 0.0, 1.0))
    eta = new_segment(SegmentGrid(1.0, 10), 1, linear=(3.0, 2.0))
    state, _ = simulate_path(frozen, eta, 0.0, 5.0, StepScheme(0.1), NoiseStream(1, 0))
    assert state.x.tolist() == [2.0]
    with pytest.raises(ValueError):
        LinearSddeParams(1.0, 0.0, 1.0, -1.0)


def test_deterministic_delay_equation_converges():
    errs = []
    for dt in (0.01, 0.005):
        model = build_linear_sdde(LinearSddeParams(-1.0, 0.5, 0.0, 1.0))
        eta = new_segment(SegmentGrid(1.0, round(1 / dt)), 1, constant=1.0)
        state, _ = simulate_path(model, eta, 0.0, 3.3, StepScheme(dt), NoiseStream(0, 0))
        errs.append(abs(state.x[0] - method_of_steps(-1.0, 0.5, 1.0, 1.0, 3.3).value))
    assert errs[1] < errs[0] < 0.01
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.2)


def _market(vol, payoff=None, r=0.0, m=0):
    psi = new_segment(SegmentGrid(r, m), 1, constant=S0)
    return MarketModel(psi, 1.0, R, vol, payoff or call_payoff(K))


def test_market_matches_black_scholes():
    est = price_european(_market(SIG), 0.0, McConfig(100_000, 5, 0.05))
    ref = bs_call(S0, K, R, SIG, 1.0).value
    assert abs(est.mean - ref) <= 3 * est.stderr


def test_put_call_parity_and_martingale():
    cfg = McConfig(40_000, 12, 0.01)
    vol = delayed_ratio_vol(SIG, 0.1)
    call = price_european(_market(vol, call_payoff(K), 0.1, 10), 0.0, cfg)
    put = price_european(_market(vol, put_payoff(K), 0.1, 10), 0.0, cfg)
    fwd = price_european(_market(vol, TerminalFunctional.of_endpoint(lambda x: x[..., 0]), 0.1, 10),
                         0.0, cfg)
    assert call.mean - put.mean == pytest.approx(fwd.mean - K * math.exp(-R), abs=1e-9)
    assert abs(fwd.mean - S0) <= 3 * fwd.stderr


def test_table_vol_martingale():
    vol = table_vol([0.8, 1.0, 1.2], [0.4, 0.2, 0.1], 0.1)
    m = _market(vol, TerminalFunctional.of_endpoint(lambda x: x[..., 0]), 0.1, 10)
    est = price_european(m, 0.0, McConfig(20_000, 3, 0.01))
    assert abs(est.mean - S0) <= 3 * est.stderr
    with pytest.raises(ValueError):
        table_vol([1.0, 0.5], [0.2, 0.2], 0.1)
    with pytest.raises(ValueError):
        table_vol([1.0], [-0.2], 0.1)


def test_market_validation():
    with pytest.raises(ValueError):
        MarketModel(point(-1.0), 1.0, R, SIG, call_payoff(K))
    with pytest.raises(SegmentError):
        MarketModel(point([1.0, 2.0], dim=2), 1.0, R, SIG, call_payoff(K))
    with pytest.raises(ValueError):
        price_european(_market(SIG), 2.0, McConfig(10, 1, 0.1))


def test_time_dependent_rate():
    m = MarketModel(point(S0), 1.0, lambda t: 0.02 + 0.06 * t, SIG,
                    TerminalFunctional.constant(1.0), rate_bound=0.1)
    est = price_european(m, 0.0, McConfig(10, 1, 0.01))
    assert est.mean == pytest.approx(math.exp(-0.05), rel=1e-12)


def _cell(mu=1.0, sigma=1.0, threshold=1.0, gain=0.0, r=0.0, m=0):
    grid = SegmentGrid(r, m)
    zeta0 = new_segment(grid, 1, constant=0.0)
    if gain:
        drift = lambda t, z, zs, ls, th: mu + gain * (zs.head[..., 0] - zs.value_at(-r)[..., 0])
    else:
        drift = lambda t, z, zs, ls, th: mu
    return EcoliModel(drift, lambda *a: sigma, lambda c, th, z: c - z, lambda x, t: x[0],
                      2.0, threshold, zeta0, new_segment(grid, 1, constant=0.0),
                      [1.0, 0.0], [0.5, 0.0], memoryless=not gain)


def test_ecoli_position_is_linear():
    cell = _cell()
    assert np.allclose(cell.position(np.array([0.0, 1.5])), [[0.5, 0.0], [3.5, 0.0]])
    model, dom, eta = build_ecoli(cell)
    assert model.dim_x == 2 and model.dim_w == 1 and eta.dim == 2
    assert dom.upper == (math.inf, 1.0)


def test_ecoli_sensing_ode():
    # zeta' = X1(t) - zeta with X1(t) = 0.5 + 2t and zeta(0) = 0
    cell = _cell(sigma=0.0, mu=0.0)
    model, _, eta = build_ecoli(cell)
    state, _ = simulate_path(model, eta, 0.0, 1.0, StepScheme(1e-4), NoiseStream(0, 0))
    exact = 2.0 * 1.0 - 1.5 + 1.5 * math.exp(-1.0)
    assert state.x[0] == pytest.approx(exact, abs=1e-3)


def test_run_length_matches_inverse_gaussian():
    curve = run_length_distribution(_cell(mu=1.0, sigma=1.0), step_grid(3.0, 1e-3),
                                    McConfig(20_000, 7, 1e-3), bridge=True)
    ks = ks_distance(curve, lambda t: inverse_gaussian_cdf(t, 1.0, 1.0, 1.0).value)
    assert ks <= 0.02
    assert curve.q[0] == 1.0


def test_memory_feedback_changes_law():
    base = run_length_distribution(_cell(), [1.0], McConfig(4000, 7, 0.01))
    fed = run_length_distribution(_cell(gain=-2.0, r=0.5, m=50), [1.0], McConfig(4000, 7, 0.01))
    assert fed.q[-1] > base.q[-1]


def test_ks_distance_and_grid():
    times = step_grid(2.0, 0.5)
    assert times.tolist() == [0.0, 0.5, 1.0, 1.5, 2.0]
    cdf = lambda t: 1 - math.exp(-t)
    curve = ExitCurve(times, np.array([math.exp(-t) for t in times]), np.zeros(5), 10)
    # exact at the nodes; the gap across a step is the jump of the true CDF
    assert ks_distance(curve, cdf) == pytest.approx(math.exp(0) - math.exp(-0.5))
    with pytest.raises(ValueError):
        step_grid(1.0, 0.3)
