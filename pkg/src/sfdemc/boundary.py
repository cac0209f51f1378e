"""Stopped dynamics on a domain: exit times, boundary-value and source representations."""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass
from typing import Callable

import numba as nb
import numpy as np

from .engine import (CoefficientModel, PathJob, PathState, StepScheme, Stopper,
                     TraceObserver, broadcast_initial, run_block, StopStateObserver)
from .feynman_kac import (KillingSpec, McConfig, McEstimate, _check_weights, _estimate, _job,
                          run_weighted, summarize, weights)
from .rng import NoiseStream, key_words, uniform_at
from .segment import Segment

ENDPOINT_ONLY = "endpoint_only"
SEGMENT_AND_ENDPOINT = "segment_and_endpoint"


@dataclass(frozen=True)
class DomainSpec:
    """Open region ``D`` (box, optionally cut down by a predicate) and segment constraint.

    In ``segment_and_endpoint`` mode a state is interior only if every segment
    node lies in ``D`` and the largest node norm is at most ``M``.
    """

    lower: tuple[float, ...] | None = None
    upper: tuple[float, ...] | None = None
    inside: Callable[[np.ndarray], np.ndarray] | None = None
    mode: str = ENDPOINT_ONLY
    M: float = math.inf

    def __post_init__(self):
        if self.mode not in (ENDPOINT_ONLY, SEGMENT_AND_ENDPOINT):
            raise ValueError(f"unknown domain mode {self.mode!r}")
        if (self.lower is None) != (self.upper is None):
            raise ValueError("box needs both lower and upper bounds")
        if self.lower is not None:
            lo = tuple(float(v) for v in self.lower)
            hi = tuple(float(v) for v in self.upper)
            if len(lo) != len(hi) or not all(a < b for a, b in zip(lo, hi)):
                raise ValueError("box bounds must satisfy lower < upper componentwise")
            object.__setattr__(self, "lower", lo)
            object.__setattr__(self, "upper", hi)
        if not self.M > 0:
            raise ValueError("segment bound must be positive")

    @classmethod
    def whole_space(cls) -> "DomainSpec":
        return cls()

    @classmethod
    def box(cls, lower, upper, mode: str = ENDPOINT_ONLY, M: float = math.inf) -> "DomainSpec":
        return cls(tuple(np.atleast_1d(lower)), tuple(np.atleast_1d(upper)), None, mode, M)

    @property
    def unbounded(self) -> bool:
        return (self.lower is None and self.inside is None and math.isinf(self.M))

    @property
    def is_box(self) -> bool:
        return self.lower is not None and self.inside is None

    def contains(self, x: np.ndarray) -> np.ndarray:
        """Pointwise membership of ``x`` (shape ``(..., d)``) in the open set ``D``."""
        x = np.asarray(x, float)
        ok = np.ones(x.shape[:-1], bool)
        if self.lower is not None:
            if x.shape[-1] != len(self.lower):
                raise ValueError(f"box has dimension {len(self.lower)}, state has {x.shape[-1]}")
            for j, (a, b) in enumerate(zip(self.lower, self.upper)):
                if a > -math.inf:
                    ok &= x[..., j] > a
                if b < math.inf:
                    ok &= x[..., j] < b
        if self.inside is not None:
            ok &= np.asarray(self.inside(x), bool)
        return ok

    def _norm_ok(self, x):
        if math.isinf(self.M):
            return True
        return np.sqrt((x * x).sum(axis=-1)) <= self.M

    def interior(self, x: np.ndarray, seg: Segment) -> np.ndarray:
        if self.mode == ENDPOINT_ONLY:
            return self.contains(x)
        nodes = seg.nodes()
        return (self.contains(nodes) & self._norm_ok(nodes)).all(axis=0) & self.contains(x)


def is_interior(state: PathState, dom: DomainSpec) -> bool:
    return bool(dom.interior(state.x, state.seg))


class DomainStopper(Stopper):
    """Exit test at grid instants, with an optional Brownian-bridge crossing test.

    The bridge test applies to box domains: for each finite face the chance
    that a Brownian bridge with the step's diffusion crosses it between two
    interior grid values is ``exp(-2 (b - x0)(b - x1) / (s^2 dt))``, and a
    keyed uniform decides.  Segment-mode checks are incremental: the full
    segment is checked once, afterwards only each new state.
    """

    def __init__(self, dom: DomainSpec, dt: float, seed: int, bridge: bool = False):
        if bridge and not dom.is_box:
            raise ValueError("bridge correction needs a box domain")
        if bridge and dom.mode != ENDPOINT_ONLY:
            raise ValueError("bridge correction applies to endpoint-only domains")
        self.dom, self.dt, self.seed, self.bridge = dom, dt, seed, bridge
        if dom.lower is not None:
            self.lo = np.asarray(dom.lower)
            self.hi = np.asarray(dom.upper)

    def initial(self, x, seg):
        return ~self.dom.interior(x, seg)

    def check(self, t, x_old, x_new, g, seg, ids, step):
        out = ~self.dom.contains(x_new)
        if self.dom.mode == SEGMENT_AND_ENDPOINT:
            out |= ~self.dom._norm_ok(x_new)
        if self.bridge:
            var = np.broadcast_to((np.asarray(g) ** 2).sum(axis=-1), x_new.shape)
            k0, k1 = key_words(self.seed)
            _bridge_kernel(x_old, x_new, var, self.lo, self.hi, self.dt,
                           np.ascontiguousarray(ids, dtype=np.int64), step, k0, k1, out)
        return out


@nb.njit(cache=True)
def _bridge_kernel(x0, x1, var, lo, hi, dt, ids, step, k0, k1, out):
    # a uniform is drawn only when the stay probability is below 1 in floating
    # point; otherwise no uniform in (0, 1) could flag a crossing anyway
    for i in range(x0.shape[0]):
        if out[i]:
            continue
        stay = 1.0
        for j in range(x0.shape[1]):
            v = var[i, j]
            if v > 0:
                s = -2.0 / (v * dt)
                # for e < -38, 1 - exp(e) rounds to exactly 1.0
                if lo[j] > -np.inf:
                    e = s * (x0[i, j] - lo[j]) * (x1[i, j] - lo[j])
                    if e > -38.0:
                        stay *= -math.expm1(e)
                if hi[j] < np.inf:
                    e = s * (hi[j] - x0[i, j]) * (hi[j] - x1[i, j])
                    if e > -38.0:
                        stay *= -math.expm1(e)
        if stay < 1.0 and uniform_at(k0, k1, ids[i], step) >= stay:
            out[i] = True


def _stopper(dom: DomainSpec, scheme: StepScheme, seed: int, bridge: bool):
    if dom.unbounded:
        return None
    return DomainStopper(dom, scheme.dt, seed, bridge)


@dataclass
class ExitRecord:
    exited: bool
    tau: float
    state_at_stop: PathState
    trace_t: np.ndarray | None = None
    trace_x: np.ndarray | None = None

    def stopped_path(self, times: np.ndarray) -> np.ndarray:
        """``X(min(t, tau))`` sampled at grid times of the recorded trace."""
        idx = np.searchsorted(self.trace_t, np.minimum(times, self.tau), side="right") - 1
        return self.trace_x[np.clip(idx, 0, len(self.trace_t) - 1)]


def simulate_killed(model: CoefficientModel, eta: Segment, dom: DomainSpec, t0: float,
                    horizon: float, scheme: StepScheme, stream: NoiseStream,
                    bridge: bool = False, trace: bool = False) -> ExitRecord:
    """Run one path until it leaves ``dom`` or reaches ``horizon``."""
    n = scheme.n_steps(t0, horizon)
    job = PathJob(model, scheme, t0, n, stream.seed, broadcast_initial(model, eta),
                  stopper=_stopper(dom, scheme, stream.seed, bridge))
    stop_obs = StopStateObserver()
    obs = [stop_obs] + ([TraceObserver()] if trace else [])
    res = run_block(job, np.array([stream.path_index]), observers=obs)
    seg = stop_obs.segments[0]
    tau = t0 + int(res["tau_step"][0]) * scheme.dt
    rec = ExitRecord(bool(res["exited"][0]), tau, PathState(tau, seg.head.copy(), seg))
    if trace:
        rec.trace_t, rec.trace_x = res["trace_t"], res["trace_x"][0]
    return rec


def _require_discount(kill: KillingSpec):
    if kill.sign != -1:
        raise ValueError("boundary representations use the discount exp(-int c); set sign=-1")


def fk_dirichlet_mixed(model: CoefficientModel, f, g: Callable | None, kill: KillingSpec,
                       dom: DomainSpec, t: float, eta: Segment, T: float, cfg: McConfig,
                       bridge: bool = False) -> McEstimate:
    """``E[f(X_T) 1{no exit} e^{-int c} + g(tau, X_tau) 1{exit} e^{-int_t^tau c}]``.

    ``g`` receives the stopping time and the stopped segment and endpoint.
    """
    _require_discount(kill)
    t_start = time.perf_counter()
    scheme = cfg.for_grid(eta)
    job = _job(model, eta, t, T, cfg, stopper=_stopper(dom, scheme, cfg.seed, bridge))
    res = run_weighted(job, cfg.n_paths, kill, f, g, workers=cfg.workers)
    w = weights(kill, res["kill_integral"])
    _check_weights(kill, w, T - t)
    return _estimate(res["value"] * w, cfg, job.scheme.dt, t_start,
                     exit_fraction=float(res["exited"].mean()))


def fk_poisson(model: CoefficientModel, source: Callable, g: Callable | None, kill: KillingSpec,
               dom: DomainSpec, eta: Segment, horizon: float, cfg: McConfig,
               bridge: bool = False, t: float = 0.0) -> McEstimate:
    """``-E[int_0^tau source e^{-int c} ds] + E[g(stopped) e^{-int_0^tau c}]``.

    ``tau`` is capped at ``horizon``; capped paths also pay ``g`` at the cap.
    The capped fraction is reported and a warning raised above one percent.
    """
    _require_discount(kill)
    t_start = time.perf_counter()
    scheme = cfg.for_grid(eta)
    job = _job(model, eta, t, horizon, cfg, stopper=_stopper(dom, scheme, cfg.seed, bridge))
    capped_value = (lambda seg, x: g(horizon, seg, x)) if g is not None else None
    res = run_weighted(job, cfg.n_paths, kill, capped_value, g, source=source,
                       workers=cfg.workers)
    w = weights(kill, res["kill_integral"])
    _check_weights(kill, w, horizon - t)
    capped = float((~res["exited"]).mean())
    if capped > 0.01 and not dom.unbounded:
        warnings.warn(f"{100 * capped:.2f}% of paths reached the horizon cap {horizon}; "
                      "the estimate is biased", RuntimeWarning, stacklevel=2)
    y = res["value"] * w - res["source_integral"]
    return _estimate(y, cfg, job.scheme.dt, t_start, capped_fraction=capped)


@dataclass
class ExitCurve:
    times: np.ndarray
    q: np.ndarray
    stderr: np.ndarray
    n: int
    wall_time: float = 0.0

    def __post_init__(self):
        if np.any(np.diff(self.times) < 0):
            raise ValueError("time grid must be ascending")
        if np.any((self.q < 0) | (self.q > 1)):
            raise ValueError("survival probabilities must lie in [0, 1]")
        if np.any(np.diff(self.q) > 0):
            raise ValueError("survival curve must be nonincreasing")

    def rows(self):
        return [{"t": float(t), "q": float(q), "stderr": float(s)}
                for t, q, s in zip(self.times, self.q, self.stderr)]


def survival_from_steps(tau_step: np.ndarray, exited: np.ndarray, steps: np.ndarray,
                        antithetic: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Fraction of paths with no exit detected at or before each step index.

    The arithmetic mirrors :func:`summarize` on the 0/1 survival indicators
    (sums of such indicators are exact), so each point equals the mean a
    scalar estimator would report for the same paths, bit for bit.
    """
    steps = np.asarray(steps, dtype=np.int64)
    n_paths = len(tau_step)
    first = np.where(exited, tau_step, np.iinfo(np.int64).max)
    died = np.searchsorted(np.sort(first), steps, side="right")
    alive = (n_paths - died).astype(float)
    if antithetic:
        n = n_paths // 2
        ref = 0.5 * ((first[0] > steps).astype(float) + (first[1] > steps))
        q = ref + (0.5 * alive - ref * n) / n
        both = np.searchsorted(np.sort(np.minimum(first[0::2], first[1::2])), steps,
                               side="right")
        c1 = (n - both).astype(float)
        chalf = alive - 2 * c1
        c0 = n - c1 - chalf
        var = (c1 * (1 - q) ** 2 + chalf * (0.5 - q) ** 2 + c0 * q ** 2) / (n - 1)
        return q, np.sqrt(np.maximum(var, 0.0) / n)
    ref = (first[0] > steps).astype(float)
    q = ref + (alive - ref * n_paths) / n_paths
    var = np.maximum(q * (1 - q), 0.0) * n_paths / (n_paths - 1)
    return q, np.sqrt(var / n_paths)


def exit_distribution(model: CoefficientModel, dom: DomainSpec, eta: Segment, time_grid,
                      cfg: McConfig, t0: float = 0.0, bridge: bool = False) -> ExitCurve:
    """Survival curve ``q(t) = P(no exit by t)`` on ``time_grid`` (times from ``t0``)."""
    t_start = time.perf_counter()
    times = np.asarray(time_grid, float)
    if times.ndim != 1 or len(times) == 0 or np.any(np.diff(times) < 0) or times[0] < t0:
        raise ValueError("time grid must be a nonempty ascending sequence from the start time")
    scheme = cfg.for_grid(eta)
    steps = np.array([scheme.n_steps(t0, t) for t in times])
    job = _job(model, eta, t0, times[-1], cfg, stopper=_stopper(dom, scheme, cfg.seed, bridge))
    res = run_weighted(job, cfg.n_paths, KillingSpec.none(), None, workers=cfg.workers)
    q, se = survival_from_steps(res["tau_step"], res["exited"], steps, cfg.antithetic)
    return ExitCurve(times, q, se, cfg.n_paths, time.perf_counter() - t_start)
