import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import brownian, gbm, point
from sfdemc.feynman_kac import (BoundViolation, KillingSpec, McConfig, TerminalFunctional,
                                fk_forward, fk_terminal, fk_terminal_time_dep, summarize,
                                tower_check)
from sfdemc.models import LinearSddeParams, build_linear_sdde, call_payoff, digital_payoff
from sfdemc.oracles import bs_call
from sfdemc.segment import QuasiTameFunctional, SegmentGrid, new_segment

ENDPOINT = TerminalFunctional.of_endpoint(lambda x: x[..., 0])


@given(arrays(float, st.integers(2, 200), elements=st.floats(-1e3, 1e3)))
def test_summarize_matches_numpy(y):
    mean, se = summarize(y)
    assert mean == pytest.approx(y.mean(), abs=1e-9)
    assert se == pytest.approx(y.std(ddof=1) / math.sqrt(len(y)), abs=1e-9)


def test_summarize_antithetic_uses_pairs():
    y = np.array([1.0, 3.0, 2.0, 2.0, 0.0, 6.0])
    mean, se = summarize(y, antithetic=True)
    pairs = np.array([2.0, 2.0, 3.0])
    assert mean == pytest.approx(pairs.mean())
    assert se == pytest.approx(pairs.std(ddof=1) / math.sqrt(3))


def test_config_validation():
    with pytest.raises(ValueError):
        McConfig(1, 0, 0.1)
    with pytest.raises(ValueError):
        McConfig(5, 0, 0.1, antithetic=True)
    with pytest.raises(ValueError):
        KillingSpec(lambda *a: 0.0, sign=0)


def test_constant_killing_is_exact():
    kappa, T = 0.3, 1.0
    cfg = McConfig(1000, 5, 0.01)
    est = fk_terminal(brownian(), TerminalFunctional.constant(1.0), KillingSpec.const(kappa),
                      0.0, point(0.0), T, cfg)
    assert abs(est.mean - math.exp(-kappa * T)) <= 4 * math.ulp(math.exp(-kappa * T))
    assert est.stderr == 0.0
    plus = fk_terminal(brownian(), TerminalFunctional.constant(1.0), KillingSpec.const(kappa, +1),
                       0.0, point(0.0), T, cfg)
    assert plus.mean == pytest.approx(math.exp(kappa * T), rel=1e-14)


def test_time_dependent_constant_rate_reduces_bitwise():
    cfg = McConfig(3000, 8, 0.01)
    f = call_payoff(100.0)
    a = fk_terminal(gbm(), f, KillingSpec.const(0.05), 0.0, point(100.0), 1.0, cfg)
    b = fk_terminal_time_dep(gbm(), f, KillingSpec(lambda s, x, seg: 0.05, -1, 1.0, True),
                             0.0, point(100.0), 1.0, cfg)
    assert (a.mean, a.stderr) == (b.mean, b.stderr)
    with pytest.raises(ValueError):
        fk_terminal(gbm(), f, KillingSpec(lambda s, x, seg: s, -1, 1.0, True), 0.0,
                    point(100.0), 1.0, cfg)


def test_time_dependent_rate_integral():
    # c(s) = s on [0, 1]: weight exp(-1/2) exactly integrated by the trapezoid rule
    kill = KillingSpec(lambda s, x, seg: s, -1, 1.0, True)
    est = fk_terminal_time_dep(brownian(), TerminalFunctional.constant(1.0), kill, 0.0,
                               point(0.0), 1.0, McConfig(10, 1, 0.01))
    assert est.mean == pytest.approx(math.exp(-0.5), rel=1e-13)


def test_rate_bound_violation():
    kill = KillingSpec(lambda s, x, seg: x[..., 0] ** 2, -1, c_max=0.5)
    with pytest.raises(BoundViolation):
        fk_terminal(brownian(), TerminalFunctional.constant(1.0), kill, 0.0, point(0.0), 2.0,
                    McConfig(200, 1, 0.01))


def test_payoff_linearity_is_exact():
    cfg = McConfig(5000, 3, 0.01)
    f1 = digital_payoff(100.0)
    f2 = TerminalFunctional.of_endpoint(lambda x: (x[..., 0] > 100.0) + 1.0)
    kill = KillingSpec.none()
    e1 = fk_terminal(gbm(), f1, kill, 0.0, point(100.0), 1.0, cfg)
    e2 = fk_terminal(gbm(), f2, kill, 0.0, point(100.0), 1.0, cfg)
    w = fk_terminal(gbm(), TerminalFunctional.constant(1.0), kill, 0.0, point(100.0), 1.0, cfg)
    assert e2.mean == e1.mean + w.mean
    assert e2.stderr == e1.stderr


def test_payoff_linearity_with_discount():
    cfg = McConfig(5000, 3, 0.01)
    kill = KillingSpec.const(0.05)
    f1 = call_payoff(100.0)
    f2 = TerminalFunctional.of_endpoint(lambda x: np.maximum(x[..., 0] - 100.0, 0.0) + 1.0)
    e1 = fk_terminal(gbm(), f1, kill, 0.0, point(100.0), 1.0, cfg)
    e2 = fk_terminal(gbm(), f2, kill, 0.0, point(100.0), 1.0, cfg)
    assert e2.mean - e1.mean == pytest.approx(math.exp(-0.05), rel=1e-12)


def test_antithetic_agrees_and_reduces_variance():
    f = call_payoff(100.0)
    kill = KillingSpec.const(0.05)
    plain = fk_terminal(gbm(), f, kill, 0.0, point(100.0), 1.0, McConfig(40_000, 2, 0.01))
    anti = fk_terminal(gbm(), f, kill, 0.0, point(100.0), 1.0,
                       McConfig(40_000, 2, 0.01, antithetic=True))
    assert abs(plain.mean - anti.mean) <= 3 * math.hypot(plain.stderr, anti.stderr)
    assert anti.stderr <= plain.stderr
    ref = bs_call(100, 100, 0.05, 0.2, 1.0).value
    assert abs(anti.mean - ref) <= 4 * anti.stderr + 0.05  # Euler bias at dt = 0.01


def test_workers_give_identical_estimates():
    model = build_linear_sdde(LinearSddeParams(-1.0, 0.5, 0.5, 0.1))
    eta = new_segment(SegmentGrid(0.1, 5), 1, constant=1.0)
    ests = [fk_terminal(model, ENDPOINT, KillingSpec.const(0.1), 0.0, eta, 1.0,
                        McConfig(3000, 17, 0.02, workers=w, block_size=512)) for w in (1, 2, 4)]
    assert len({(e.mean, e.stderr) for e in ests}) == 1


def test_forward_representation():
    model = brownian(mu=0.5)
    est = fk_forward(model, ENDPOINT, 2.0, point(1.0), McConfig(20_000, 4, 0.01))
    assert abs(est.mean - 2.0) <= 4 * est.stderr
    with pytest.raises(ValueError):
        bad = brownian()
        bad.time_homogeneous = False
        fk_forward(bad, ENDPOINT, 1.0, point(0.0), McConfig(10, 1, 0.1))


def test_quasi_tame_payoff():
    # average of the window plus the endpoint, for a frozen path with value 2
    grid = SegmentGrid(1.0, 10)
    qt = QuasiTameFunctional(2, lambda I, x: I[..., 0, 0] + x[..., 0], [lambda v: v],
                             [lambda s: np.ones_like(s)])
    model = build_linear_sdde(LinearSddeParams(0.0, 0.0, 0.0, 1.0))
    model.memory = 1.0
    est = fk_terminal(model, TerminalFunctional(quasi_tame=qt), KillingSpec.none(), 0.0,
                      new_segment(grid, 1, constant=2.0), 3.0, McConfig(4, 1, 0.1))
    assert est.mean == pytest.approx(4.0, rel=1e-12)


def test_tower_property():
    cfg_o = McConfig(200, 11, 0.02)
    cfg_i = McConfig(200, 11, 0.02)
    rep = tower_check(gbm(), call_payoff(100.0), KillingSpec.const(0.05), 0.0, 0.5, 1.0,
                      point(100.0), cfg_o, cfg_i)
    assert abs(rep.z) <= 3
    same = tower_check(gbm(), call_payoff(100.0), KillingSpec.const(0.05), 0.0, 0.0, 1.0,
                       point(100.0), cfg_o, cfg_i)
    assert same.residual == 0.0 and same.z == 0.0
    with pytest.raises(ValueError):
        tower_check(gbm(), call_payoff(100.0), KillingSpec.none(), 0.5, 0.2, 1.0,
                    point(100.0), cfg_o, cfg_i)


def test_tower_with_memory():
    model = build_linear_sdde(LinearSddeParams(-0.5, 0.4, 0.5, 0.2))
    eta = new_segment(SegmentGrid(0.2, 4), 1, linear=(0.0, 1.0))
    cfg = McConfig(150, 3, 0.05)
    rep = tower_check(model, ENDPOINT, KillingSpec.const(0.2), 0.0, 0.4, 1.0, eta, cfg, cfg)
    assert abs(rep.z) <= 3
