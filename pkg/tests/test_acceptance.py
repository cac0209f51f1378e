"""The eleven acceptance criteria, at production sizes.

The claim suite runs once per session (about ten minutes on one core) with
worker-count reruns; every criterion then re-checks its own tolerance on the
recorded rows and prints one PASS/FAIL line.
"""

import math

import pytest

from sfdemc import oracles
from sfdemc.verify import DETERMINISM_WORKERS, FULL, run_suite

SEED = 20240611
EPS = 2.0 ** -52


@pytest.fixture(scope="module")
def claims():
    results = run_suite(SEED, quick=False, check_determinism=True)
    return {r.claim: r for r in results}


def report(capsys, number, title, ok, detail):
    with capsys.disabled():
        print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'} {title}: {detail}")


def within(r, k=3.0):
    return abs(r.estimate - r.oracle) <= k * r.stderr


def test_01_zero_memory_call(claims, capsys):
    r = claims["1.call_zero_memory"]
    ok = within(r) and r.oracle == oracles.bs_call(100, 100, 0.05, 0.2, 1).value
    report(capsys, 1, "memoryless GBM call vs Black-Scholes", ok,
           f"{r.estimate:.5f} +- {r.stderr:.5f} vs {r.oracle:.5f}")
    assert ok


def test_02_discount(claims, capsys):
    r = claims["2.discount_exact"]
    ok = abs(r.estimate - math.exp(-0.05)) <= 4 * EPS * math.exp(-0.05) and r.passed
    report(capsys, 2, "unit payoff equals exp(-rT)", ok, f"{r.estimate!r} vs {math.exp(-0.05)!r}")
    assert ok


def test_03_delay_dynamics(claims, capsys):
    v, rate = claims["3.delay_value"], claims["3.delay_rate"]
    ok = abs(v.estimate - 3.5) <= 5e-3 and abs(rate.estimate - 2.0) <= 0.4
    report(capsys, 3, "deterministic delay equation", ok,
           f"X(2) = {v.estimate:.6f}, error ratio on halving dt = {rate.estimate:.4f}")
    assert ok


def test_04_exit_law(claims, capsys):
    q05, q1, inv = claims["4.exit_q0.5"], claims["4.exit_q1"], claims["4.curve_invariants"]
    ok = within(q05) and within(q1) and inv.passed
    report(capsys, 4, "Brownian exit from (-1, 1)", ok,
           f"q(0.5) = {q05.estimate:.5f} vs {q05.oracle:.5f} (z {q05.z:+.2f}), "
           f"q(1) = {q1.estimate:.5f} vs {q1.oracle:.5f} (z {q1.z:+.2f})")
    assert ok


def test_05_mean_exit_time(claims, capsys):
    r = claims["5.mean_exit_time"]
    ok = r.oracle == 1.0 and within(r)
    report(capsys, 5, "mean exit time via the Poisson estimator", ok,
           f"{r.estimate:.5f} +- {r.stderr:.5f}")
    assert ok


def test_06_mixed_whole_space(claims, capsys):
    r = claims["6.mixed_whole_space"]
    ok = r.passed and r.estimate == r.oracle
    report(capsys, 6, "whole-space mixed problem equals terminal estimator bitwise", ok,
           f"{r.estimate!r} vs {r.oracle!r}")
    assert ok


def test_07_tower(claims, capsys):
    r = claims["7.tower"]
    ok = within(r)
    report(capsys, 7, "tower property, nested estimate", ok,
           f"residual {r.oracle - r.estimate:+.5f}, pooled stderr {r.stderr:.5f}")
    assert ok


def test_08_killing(claims, capsys):
    plus, minus = claims["8.killing_plus"], claims["8.killing_minus"]
    ok = all(abs(r.estimate - r.oracle) <= 4 * EPS * r.oracle and r.passed
             for r in (plus, minus))
    report(capsys, 8, "constant killing weights, both signs", ok,
           f"{plus.estimate!r} vs {plus.oracle!r}; {minus.estimate!r} vs {minus.oracle!r}")
    assert ok


def test_09_run_and_tumble(claims, capsys):
    ks, ramp = claims["9.run_length_ks"], claims["9.ramp_run_length"]
    ok = ks.estimate <= 0.01 and abs(ramp.estimate - 0.5) <= FULL.ks_dt
    report(capsys, 9, "run-length law and deterministic ramp", ok,
           f"KS distance {ks.estimate:.5f}, ramp tumble at {ramp.estimate!r}")
    assert ok


def test_10_parallel_determinism(claims, capsys):
    rows = [claims[f"10.workers_{w}"] for w in DETERMINISM_WORKERS]
    ok = all(r.estimate == r.oracle for r in rows)
    report(capsys, 10, "byte-identical reruns at 2 and 8 workers", ok,
           ", ".join(f"{int(r.estimate)}/{int(r.oracle)} rows" for r in rows))
    assert ok


def test_11_ci_scaling(claims, capsys):
    r = claims["11.ci_scaling"]
    ok = abs(r.estimate - 0.5) <= 0.1
    report(capsys, 11, "stderr ratio between 4N and N paths", ok, f"{r.estimate:.4f}")
    assert ok
