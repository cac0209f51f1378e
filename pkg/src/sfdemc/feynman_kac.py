"""Monte Carlo estimators of expectations weighted by ``exp(sign * int c ds)``."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .engine import (CoefficientModel, Observer, PathJob, SimulationError, StepScheme,
                     Stopper, broadcast_initial, run_block)
from .parallel import map_blocks
from .rng import derive_seed
from .segment import QuasiTameFunctional, Segment, SegmentError


class BoundViolation(SimulationError):
    """A rate exceeded its declared bound."""


@dataclass(frozen=True)
class KillingSpec:
    """Rate ``c(t, x, segment)`` entering the weight ``exp(sign * int c ds)``.

    ``constant`` marks a rate that is a known number; its integral is then
    computed in closed form instead of by quadrature.
    """

    rate: Callable
    sign: int = -1
    c_max: float = math.inf
    time_dependent: bool = False
    constant: float | None = None

    def __post_init__(self):
        if self.sign not in (1, -1):
            raise ValueError("exponent sign must be +1 or -1")
        if not self.c_max >= 0:
            raise ValueError("rate bound must be nonnegative")
        if self.constant is not None and abs(self.constant) > self.c_max:
            raise ValueError("constant rate exceeds its bound")

    @classmethod
    def const(cls, kappa: float, sign: int = -1) -> "KillingSpec":
        kappa = float(kappa)
        return cls(lambda t, x, seg: kappa, sign, abs(kappa), False, kappa)

    @classmethod
    def none(cls) -> "KillingSpec":
        return cls.const(0.0)


@dataclass(frozen=True)
class TerminalFunctional:
    """Payoff ``f(segment, x)``; returns one value per path."""

    f: Callable | None = None
    quasi_tame: QuasiTameFunctional | None = None

    def __post_init__(self):
        if (self.f is None) == (self.quasi_tame is None):
            raise ValueError("give exactly one of a callable or a quasi-tame functional")

    def __call__(self, seg: Segment, x: np.ndarray) -> np.ndarray:
        if self.quasi_tame is not None:
            return self.quasi_tame(seg, x)
        return self.f(seg, x)

    @classmethod
    def constant(cls, value: float) -> "TerminalFunctional":
        value = float(value)
        return cls(lambda seg, x: np.full(x.shape[:-1], value))

    @classmethod
    def of_endpoint(cls, fn: Callable[[np.ndarray], np.ndarray]) -> "TerminalFunctional":
        return cls(lambda seg, x: fn(x))


@dataclass(frozen=True)
class McConfig:
    n_paths: int
    seed: int
    scheme: StepScheme | float
    antithetic: bool = False
    workers: int = 1
    block_size: int | None = None

    def __post_init__(self):
        if not isinstance(self.scheme, StepScheme):
            object.__setattr__(self, "scheme", StepScheme(float(self.scheme)))
        if self.n_paths < 2:
            raise ValueError("at least two paths are needed for an error estimate")
        if self.antithetic and self.n_paths % 2:
            raise ValueError("antithetic sampling needs an even number of paths")
        if self.block_size is not None and (self.block_size < 2 or self.block_size % 2):
            raise ValueError("block size must be an even number >= 2")

    def for_grid(self, eta: Segment) -> StepScheme:
        return StepScheme.aligned(eta.grid, self.scheme.dt)


@dataclass
class McEstimate:
    mean: float
    stderr: float
    n: int
    dt: float
    wall_time: float = 0.0
    extras: dict = field(default_factory=dict)

    @property
    def ci95(self) -> tuple[float, float]:
        return (self.mean - 1.96 * self.stderr, self.mean + 1.96 * self.stderr)

    def row(self) -> dict:
        lo, hi = self.ci95
        return {"mean": self.mean, "stderr": self.stderr, "ci_lo": lo, "ci_hi": hi,
                "n": self.n, "dt": self.dt}


def summarize(y: np.ndarray, antithetic: bool = False) -> tuple[float, float]:
    """Mean and standard error of per-path samples with exact ordered summation.

    Antithetic pairs ``(2j, 2j+1)`` are averaged first and the error is taken
    from the pair means, which are the independent units.
    """
    y = np.asarray(y, float)
    if not np.isfinite(y).all():
        raise SimulationError("non-finite per-path value", path=int(np.flatnonzero(~np.isfinite(y))[0]))
    units = 0.5 * (y[0::2] + y[1::2]) if antithetic else y
    n = len(units)
    ref = float(units[0])
    mean = ref + math.fsum((units - ref).tolist()) / n
    var = math.fsum(((units - mean) ** 2).tolist()) / (n - 1) if n > 1 else math.inf
    return mean, math.sqrt(var / n)


# -- observers ----------------------------------------------------------------

def _as_rows(v, n_rows: int) -> np.ndarray:
    v = np.asarray(v, float)
    return v if v.ndim == 0 else v.reshape(n_rows)


class KillingObserver(Observer):
    """Trapezoid integral of the rate, and optionally of ``source * weight``.

    Sums are Neumaier-compensated.  A state-free rate keeps scalar accumulators;
    one that never changes along the run gets the closed form ``c * (steps * dt)``,
    the same expression used for declared constants.
    """

    def __init__(self, kill: KillingSpec, dt: float, n: int, source: Callable | None = None):
        self.kill, self.dt, self.source = kill, dt, source
        self.integral = np.zeros(n)
        self.source_integral = np.zeros(n) if source is not None else None
        self._alive = np.ones(n, bool)

    def _rate(self, t, x, seg):
        c = _as_rows(self.kill.rate(t, x, seg), len(x))
        bad = ~(np.abs(c) <= self.kill.c_max * (1 + 1e-12))
        if c.ndim == 0:
            if bad:
                raise BoundViolation(f"rate {float(c)} exceeds bound {self.kill.c_max}", t=t)
        elif (bad & self._alive).any():
            r = int(np.flatnonzero(bad & self._alive)[0])
            raise BoundViolation(f"rate {c[r]} exceeds bound {self.kill.c_max}", t=t, x=x[r])
        return c

    def _src(self, x, seg, acc):
        s = _as_rows(self.source(seg, x), len(x))
        return s * np.exp(self.kill.sign * acc)

    def start(self, t, x, seg):
        self._c = self._rate(t, x, seg)
        self._c0 = self._c
        self._flat = self._c.ndim == 0
        self._steps = 0
        self._acc = self._c * 0.0
        self._cmp = self._c * 0.0
        if self.source is not None:
            self._s = self._src(x, seg, self._acc)
            self._sacc = self._s * 0.0
            self._scmp = self._s * 0.0

    @staticmethod
    def _add(acc, cmp, y):
        tot = acc + y
        cmp = cmp + np.where(np.abs(acc) >= np.abs(y), (acc - tot) + y, (y - tot) + acc)
        return tot, cmp

    def update(self, t, x, seg):
        c = self._rate(t, x, seg)
        self._steps += 1
        if self._flat and not (c.ndim == 0 and c == self._c0):
            self._flat = False
        self._acc, self._cmp = self._add(self._acc, self._cmp, 0.5 * self.dt * (self._c + c))
        self._c = c
        if self.source is not None:
            s = self._src(x, seg, self._acc + self._cmp)
            self._sacc, self._scmp = self._add(self._sacc, self._scmp,
                                               0.5 * self.dt * (self._s + s))
            self._s = s

    def finish(self, rows, slots, t, x, seg, exited):
        tot = self._acc + self._cmp
        if self._flat:
            tot = np.float64(float(self._c0) * (self._steps * self.dt))
        self.integral[slots] = tot if tot.ndim == 0 else tot[rows]
        if self.source is not None:
            st = self._sacc + self._scmp
            self.source_integral[slots] = st if st.ndim == 0 else st[rows]
        self._alive[rows] = False

    def compact(self, keep):
        self._alive = self._alive[keep]
        for name in ("_c", "_acc", "_cmp", "_s", "_sacc", "_scmp"):
            v = getattr(self, name, None)
            if v is not None and v.ndim:
                setattr(self, name, v[keep])

    def result(self):
        out = {"kill_integral": self.integral}
        if self.source is not None:
            out["source_integral"] = self.source_integral
        return out


class StopValueObserver(Observer):
    """Evaluates ``f(segment, x)`` on survivors and ``g(tau, segment, x)`` on exits."""

    def __init__(self, f: Callable, g: Callable | None, n: int):
        self.f, self.g = f, g
        self.value = np.zeros(n)

    def finish(self, rows, slots, t, x, seg, exited):
        fn = self.g if exited else self.f
        if fn is None:
            return
        xs = x[rows]
        v = fn(t, seg.take(rows), xs) if exited else fn(seg.take(rows), xs)
        v = np.broadcast_to(np.asarray(v, float), (len(xs),))
        if not np.isfinite(v).all():
            r = int(np.flatnonzero(~np.isfinite(v))[0])
            raise SimulationError("non-finite payoff", t=t, x=xs[r])
        self.value[slots] = v

    def result(self):
        return {"value": self.value}


# -- drivers ------------------------------------------------------------------

def _job(model: CoefficientModel, eta: Segment, t0: float, T: float, cfg: McConfig,
         seed: int | None = None, stopper: Stopper | None = None, initial=None) -> PathJob:
    scheme = cfg.for_grid(eta)
    return PathJob(model, scheme, t0, scheme.n_steps(t0, T),
                   cfg.seed if seed is None else seed,
                   initial or broadcast_initial(model, eta), antithetic=cfg.antithetic,
                   stopper=stopper, block_size=cfg.block_size)


def run_weighted(job: PathJob, n_paths: int, kill: KillingSpec, f: Callable | None,
                 g: Callable | None = None, source: Callable | None = None,
                 workers: int = 1, keep_final: bool = False) -> dict:
    """Simulate and return per-path stop values, rate integrals and stopping data."""
    blocks = job.blocks(n_paths)

    def one(b):
        ids = blocks[b]
        obs = [KillingObserver(kill, job.scheme.dt, len(ids), source),
               StopValueObserver(f, g, len(ids))]
        return run_block(job, ids, observers=obs, keep_final=keep_final)

    parts = map_blocks(one, len(blocks), workers)
    out = {k: np.concatenate([p[k] for p in parts]) for k in parts[0] if k != "final_seg"}
    if kill.constant is not None:
        # closed-form integral; keeps the weight exact for constant rates
        out["kill_integral"] = kill.constant * (out["tau_step"] * job.scheme.dt)
    if keep_final:
        out["final_seg"] = Segment.concat([p["final_seg"] for p in parts])
    return out


def weights(kill: KillingSpec, integral: np.ndarray) -> np.ndarray:
    return np.exp(kill.sign * integral)


def _check_weights(kill: KillingSpec, w: np.ndarray, horizon: float) -> None:
    if math.isinf(kill.c_max):
        return
    lo = math.exp(-kill.c_max * horizon) * (1 - 1e-12)
    hi = math.exp(kill.c_max * horizon) * (1 + 1e-12)
    if not ((w >= lo) & (w <= hi)).all():
        raise BoundViolation("path weight outside the range implied by the rate bound")


def _estimate(y, cfg: McConfig, dt: float, t_start: float, **extras) -> McEstimate:
    mean, se = summarize(y, cfg.antithetic)
    return McEstimate(mean, se, len(y), dt, time.perf_counter() - t_start, extras)


def fk_terminal(model: CoefficientModel, f: TerminalFunctional | Callable, kill: KillingSpec,
                t: float, eta: Segment, T: float, cfg: McConfig) -> McEstimate:
    """Estimate ``E[f(X_T, X(T)) exp(sign * int_t^T c ds)]`` from history ``eta`` at time ``t``."""
    if kill.time_dependent:
        raise ValueError("rate depends on time; use fk_terminal_time_dep")
    return _fk_terminal(model, f, kill, t, eta, T, cfg)


def fk_terminal_time_dep(model: CoefficientModel, f, kill: KillingSpec, t: float,
                         eta: Segment, T: float, cfg: McConfig) -> McEstimate:
    """As :func:`fk_terminal` with the rate sampled at each step time."""
    return _fk_terminal(model, f, kill, t, eta, T, cfg)


def _fk_terminal(model, f, kill, t, eta, T, cfg) -> McEstimate:
    t_start = time.perf_counter()
    job = _job(model, eta, t, T, cfg)
    res = run_weighted(job, cfg.n_paths, kill, f, workers=cfg.workers)
    w = weights(kill, res["kill_integral"])
    _check_weights(kill, w, T - t)
    return _estimate(res["value"] * w, cfg, job.scheme.dt, t_start)


def fk_forward(model: CoefficientModel, f, t: float, eta: Segment, cfg: McConfig) -> McEstimate:
    """``E[f(X_t, X(t))]`` from history ``eta`` at time 0, for a time-homogeneous model."""
    if not model.time_homogeneous:
        raise ValueError("forward representation needs time-homogeneous coefficients")
    return fk_terminal(model, f, KillingSpec.none(), 0.0, eta, t, cfg)


@dataclass
class TowerReport:
    direct: McEstimate
    nested: McEstimate
    residual: float
    stderr: float

    @property
    def z(self) -> float:
        if self.stderr == 0:
            return 0.0 if self.residual == 0 else math.inf
        return self.residual / self.stderr


def tower_check(model: CoefficientModel, f, kill: KillingSpec, t: float, s: float, T: float,
                eta: Segment, cfg_outer: McConfig, cfg_inner: McConfig) -> TowerReport:
    """Compare ``u(t)`` with a nested estimate of ``E[u(s, X_s) exp(sign * int_t^s c)]``.

    Inner path ``i`` of outer sample ``o`` uses global index ``o * N_inner + i``
    on a seed derived from the outer one, so nested streams are independent of
    the direct and outer runs.
    """
    if not t <= s <= T:
        raise ValueError("need t <= s <= T")
    if eta.grid.m and cfg_inner.scheme.dt != cfg_outer.scheme.dt:
        raise SegmentError("nested runs on a memory grid need equal time steps")
    seed = cfg_outer.seed
    direct = _fk_terminal(model, f, kill, t, eta, T, replace(cfg_outer, seed=derive_seed(seed, 1)))
    if s == t:
        return TowerReport(direct, direct, 0.0, 0.0)
    t_start = time.perf_counter()
    n_out, n_in = cfg_outer.n_paths, cfg_inner.n_paths
    outer_job = _job(model, eta, t, s, cfg_outer, seed=derive_seed(seed, 2))
    outer = run_weighted(outer_job, n_out, kill, None, workers=cfg_outer.workers, keep_final=True)
    w_out = weights(kill, outer["kill_integral"])
    finals: Segment = outer["final_seg"]

    inner_job = _job(model, eta, s, T, cfg_inner, seed=derive_seed(seed, 3),
                     initial=lambda ids: finals.take(ids // n_in))
    inner = run_weighted(inner_job, n_out * n_in, kill, f, workers=cfg_outer.workers)
    y_in = (inner["value"] * weights(kill, inner["kill_integral"])).reshape(n_out, n_in)
    u = np.array([summarize(row)[0] for row in y_in])
    mean, se = summarize(u * w_out)
    nested = McEstimate(mean, se, n_out, outer_job.scheme.dt, time.perf_counter() - t_start,
                        {"n_inner": n_in})
    return TowerReport(direct, nested, direct.mean - nested.mean,
                       math.hypot(direct.stderr, nested.stderr))
