"""Oracle-versus-estimator claim suite.

Each claim compares a Monte Carlo (or deterministic) estimate with an
independent reference and records a verdict.  The full suite uses the
production sizes; ``quick`` shrinks path counts and coarsens steps for smoke
runs while keeping every pass criterion unchanged.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import oracles
from .boundary import DomainSpec, ExitCurve, exit_distribution, fk_dirichlet_mixed, fk_poisson
from .engine import CoefficientModel, StepScheme, simulate_path
from .feynman_kac import KillingSpec, McConfig, TerminalFunctional, fk_terminal, tower_check
from .models import (EcoliModel, LinearSddeParams, MarketModel, build_linear_sdde, call_payoff,
                     ks_distance, price_european, run_length_distribution, step_grid)
from .rng import NoiseStream, derive_seed
from .segment import SegmentGrid, new_segment

HEADER = "claim,oracle,estimate,stderr,z,pass"
_EPS = 2.0 ** -52


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return repr(float(v))


@dataclass
class ClaimResult:
    claim: str
    oracle: float
    estimate: float
    stderr: float
    z: float
    passed: bool
    detail: str = ""

    def csv_row(self) -> str:
        return ",".join([self.claim, _fmt(self.oracle), _fmt(self.estimate), _fmt(self.stderr),
                         _fmt(self.z), _fmt(self.passed)])


def _stat(claim, oracle, est, se, k=3.0, detail="") -> ClaimResult:
    z = (est - oracle) / se if se > 0 else (0.0 if est == oracle else math.inf)
    return ClaimResult(claim, oracle, est, se, z, bool(abs(z) <= k), detail)


def _exact(claim, oracle, est, ok, detail="") -> ClaimResult:
    return ClaimResult(claim, oracle, est, 0.0, math.nan, bool(ok), detail)


def _bits(x: float) -> bytes:
    return struct.pack("<d", x)


@dataclass(frozen=True)
class Scale:
    call_n: int
    call_dt: float
    exit_n: int
    exit_dt: float
    poisson_n: int
    poisson_dt: float
    poisson_horizon: float
    tower_n: int
    tower_dt: float
    ks_n: int
    ks_dt: float
    ks_horizon: float
    ci_n: int


FULL = Scale(1_000_000, 1e-3, 100_000, 1e-4, 100_000, 1e-3, 10.0, 2000, 0.01,
             100_000, 1e-4, 5.0, 100_000)
QUICK = Scale(100_000, 1e-3, 50_000, 1e-3, 20_000, 1e-3, 10.0, 300, 0.01,
              100_000, 1e-3, 4.0, 25_000)


# -- shared problem data ----------------------------------------------------------

S0, K, RATE, VOL, T_EXP = 100.0, 100.0, 0.05, 0.2, 1.0
_G0 = SegmentGrid(0.0, 0)


def _market(payoff) -> MarketModel:
    return MarketModel(new_segment(_G0, 1, constant=S0), T_EXP, RATE, VOL, payoff)


def _gbm_euler() -> CoefficientModel:
    return CoefficientModel(1, 1, 0.0, lambda t, x, s: RATE * x,
                            lambda t, x, s: (VOL * x)[..., None], memoryless=True, name="gbm")


def _brownian() -> CoefficientModel:
    return CoefficientModel(1, 1, 0.0, lambda t, x, s: 0.0, lambda t, x, s: 1.0,
                            memoryless=True, name="brownian")


def _ecoli(mu, sigma, threshold=1.0) -> EcoliModel:
    z = new_segment(_G0, 1, constant=0.0)
    return EcoliModel(lambda *a: mu, lambda *a: sigma, lambda c, th, zeta: 0.0,
                      lambda x, t: 0.0, 1.0, threshold, z, z, [1.0], [0.0],
                      memoryless=True)


# -- claims ------------------------------------------------------------------------

def _call_estimate(n, seed, dt, workers):
    """Discounted call on the memoryless GBM, Euler-stepped by the engine."""
    return fk_terminal(_gbm_euler(), call_payoff(K), KillingSpec.const(RATE), 0.0,
                       new_segment(_G0, 1, constant=S0), T_EXP,
                       McConfig(n, seed, dt, workers=workers))


def claim_call(seed, workers, sc: Scale) -> list[ClaimResult]:
    est = _call_estimate(sc.call_n, derive_seed(seed, 1), sc.call_dt, workers)
    ref = oracles.bs_call(S0, K, RATE, VOL, T_EXP).value
    return [_stat("1.call_zero_memory", ref, est.mean, est.stderr)]


def claim_discount(seed, workers, sc: Scale) -> list[ClaimResult]:
    est = price_european(_market(TerminalFunctional.constant(1.0)), 0.0,
                         McConfig(1000, derive_seed(seed, 2), sc.call_dt, workers=workers))
    ref = math.exp(-RATE * T_EXP)
    ok = abs(est.mean - ref) <= 4 * _EPS * ref and est.stderr == 0.0
    return [_exact("2.discount_exact", ref, est.mean, ok)]


def _mos_error(dt: float) -> tuple[float, float]:
    p = LinearSddeParams(0.0, 1.0, 0.0, 1.0)
    grid = SegmentGrid(1.0, round(1.0 / dt))
    eta = new_segment(grid, 1, constant=1.0)
    state, _ = simulate_path(build_linear_sdde(p), eta, 0.0, 2.0,
                             StepScheme.aligned(grid, dt), NoiseStream(0, 0))
    x = float(state.x[0])
    return x, abs(x - oracles.method_of_steps(0.0, 1.0, 1.0, 1.0, 2.0).value)


def claim_delay(seed, workers, sc: Scale) -> list[ClaimResult]:
    ref = oracles.method_of_steps(0.0, 1.0, 1.0, 1.0, 2.0).value
    x1, e1 = _mos_error(1e-3)
    _, e2 = _mos_error(5e-4)
    ratio = e1 / e2 if e2 > 0 else math.inf
    return [_exact("3.delay_value", ref, x1, e1 <= 5e-3),
            _exact("3.delay_rate", 2.0, ratio, abs(ratio - 2.0) <= 0.4)]


def claim_exit(seed, workers, sc: Scale) -> list[ClaimResult]:
    dom = DomainSpec.box(-1.0, 1.0)
    curve = exit_distribution(_brownian(), dom, new_segment(_G0, 1, constant=0.0), [0.5, 1.0],
                              McConfig(sc.exit_n, derive_seed(seed, 4), sc.exit_dt,
                                       workers=workers), bridge=True)
    out = []
    for t, q, se in zip(curve.times, curve.q, curve.stderr):
        ref = oracles.brownian_exit_survival(float(t), 1.0).value
        out.append(_stat(f"4.exit_q{t:g}", ref, float(q), float(se)))
    out.append(_exact("4.curve_invariants", 1.0, float(curve_ok(curve)), curve_ok(curve)))
    return out


def curve_ok(curve: ExitCurve) -> bool:
    """Survival values in [0, 1] and nonincreasing in time."""
    q = np.asarray(curve.q)
    return bool(((q >= 0) & (q <= 1)).all() and (np.diff(q) <= 0).all())


def claim_mean_exit(seed, workers, sc: Scale) -> list[ClaimResult]:
    est = fk_poisson(_brownian(), lambda seg, x: -1.0, None, KillingSpec.none(),
                     DomainSpec.box(-1.0, 1.0), new_segment(_G0, 1, constant=0.0),
                     sc.poisson_horizon,
                     McConfig(sc.poisson_n, derive_seed(seed, 5), sc.poisson_dt, workers=workers),
                     bridge=True)
    ref = oracles.brownian_mean_exit_time(0.0, 1.0).value
    return [_stat("5.mean_exit_time", ref, est.mean, est.stderr)]


def claim_mixed(seed, workers, sc: Scale) -> list[ClaimResult]:
    cfg = McConfig(10_000, derive_seed(seed, 6), sc.call_dt, workers=workers)
    eta = new_segment(_G0, 1, constant=S0)
    kill = KillingSpec.const(RATE)
    plain = fk_terminal(_gbm_euler(), call_payoff(K), kill, 0.0, eta, T_EXP, cfg)
    mixed = fk_dirichlet_mixed(_gbm_euler(), call_payoff(K), None, kill,
                               DomainSpec.whole_space(), 0.0, eta, T_EXP, cfg)
    same = (_bits(plain.mean) == _bits(mixed.mean) and
            _bits(plain.stderr) == _bits(mixed.stderr))
    return [ClaimResult("6.mixed_whole_space", plain.mean, mixed.mean, mixed.stderr, 0.0, same)]


def claim_tower(seed, workers, sc: Scale) -> list[ClaimResult]:
    eta = new_segment(_G0, 1, constant=S0)
    rep = tower_check(_gbm_euler(), call_payoff(K), KillingSpec.const(RATE), 0.0, 0.5, T_EXP,
                      eta, McConfig(sc.tower_n, derive_seed(seed, 7), sc.tower_dt, workers=workers),
                      McConfig(sc.tower_n, derive_seed(seed, 7), sc.tower_dt, workers=workers))
    return [_stat("7.tower", rep.direct.mean, rep.nested.mean, rep.stderr)]


def claim_killing(seed, workers, sc: Scale) -> list[ClaimResult]:
    kappa, T = 0.3, 1.0
    out = []
    for sign, name in ((1, "8.killing_plus"), (-1, "8.killing_minus")):
        est = fk_terminal(_brownian(), TerminalFunctional.constant(1.0),
                          KillingSpec.const(kappa, sign), 0.0, new_segment(_G0, 1, constant=0.0),
                          T, McConfig(1000, derive_seed(seed, 8), 1e-3, workers=workers))
        ref = math.exp(sign * kappa * T)
        ok = abs(est.mean - ref) <= 4 * _EPS * ref and est.stderr == 0.0
        out.append(_exact(name, ref, est.mean, ok))
    return out


def claim_run_length(seed, workers, sc: Scale) -> list[ClaimResult]:
    mu = sigma = tau0 = 1.0
    curve = run_length_distribution(_ecoli(mu, sigma, tau0), step_grid(sc.ks_horizon, sc.ks_dt),
                                    McConfig(sc.ks_n, derive_seed(seed, 9), sc.ks_dt,
                                             workers=workers), bridge=True)
    if not curve_ok(curve):
        raise AssertionError("run-length survival curve violates its invariants")
    ks = ks_distance(curve, lambda t: oracles.inverse_gaussian_cdf(t, mu, sigma, tau0).value)
    ell = 2.0
    ramp = run_length_distribution(_ecoli(ell, 0.0, tau0), step_grid(1.0, sc.ks_dt),
                                   McConfig(2, derive_seed(seed, 9), sc.ks_dt))
    tau = float(ramp.times[np.argmax(ramp.q < 1.0)]) if (ramp.q < 1).any() else math.inf
    return [_exact("9.run_length_ks", 0.0, ks, ks <= 0.01),
            _exact("9.ramp_run_length", tau0 / ell, tau, abs(tau - tau0 / ell) <= sc.ks_dt)]


def claim_ci_scaling(seed, workers, sc: Scale) -> list[ClaimResult]:
    s = derive_seed(seed, 11)
    small = _call_estimate(sc.ci_n, s, sc.call_dt, workers)
    big = _call_estimate(4 * sc.ci_n, s, sc.call_dt, workers)
    ratio = big.stderr / small.stderr
    return [_exact("11.ci_scaling", 0.5, ratio, abs(ratio - 0.5) <= 0.1)]


CLAIMS: list[Callable] = [claim_call, claim_discount, claim_delay, claim_exit, claim_mean_exit,
                          claim_mixed, claim_tower, claim_killing, claim_run_length]
DETERMINISM_WORKERS = (2, 8)


def run_claims(seed: int, workers: int = 1, quick: bool = False,
               claims: list[Callable] | None = None, log: Callable[[str], None] | None = None
               ) -> list[ClaimResult]:
    sc = QUICK if quick else FULL
    out = []
    for fn in claims or CLAIMS:
        for res in fn(seed, workers, sc):
            out.append(res)
            if log:
                log(f"{'PASS' if res.passed else 'FAIL'} {res.claim}: estimate {res.estimate:.6g}"
                    f" vs oracle {res.oracle:.6g} (stderr {res.stderr:.3g})")
    return out


def determinism(base: list[ClaimResult], seed: int, quick: bool,
                log: Callable[[str], None] | None = None) -> list[ClaimResult]:
    """Rerun the claims at other worker counts and compare rows byte for byte."""
    ref = [r.csv_row() for r in base]
    out = []
    for w in DETERMINISM_WORKERS:
        rows = [r.csv_row() for r in run_claims(seed, w, quick)]
        same = sum(a == b for a, b in zip(ref, rows)) if len(rows) == len(ref) else 0
        res = _exact(f"10.workers_{w}", float(len(ref)), float(same), same == len(ref))
        out.append(res)
        if log:
            log(f"{'PASS' if res.passed else 'FAIL'} {res.claim}: {same}/{len(ref)} rows identical")
    return out


def run_suite(seed: int, quick: bool = False, check_determinism: bool = True,
              log: Callable[[str], None] | None = None) -> list[ClaimResult]:
    """All claims at one worker, the worker-count reruns, then the error-scaling check."""
    base = run_claims(seed, 1, quick, log=log)
    extra = determinism(base, seed, quick, log) if check_determinism else []
    tail = run_claims(seed, 1, quick, claims=[claim_ci_scaling], log=log)
    return base + extra + tail


def to_csv(results: list[ClaimResult]) -> str:
    return "\n".join([HEADER] + [r.csv_row() for r in results]) + "\n"
