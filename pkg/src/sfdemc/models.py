"""Ready-made models: linear delay equations, a hereditary market, a run-and-tumble cell."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .boundary import DomainSpec, ExitCurve, exit_distribution
from .engine import CoefficientModel
from .feynman_kac import KillingSpec, McConfig, McEstimate, TerminalFunctional, fk_terminal_time_dep
from .segment import Segment, SegmentError


# -- linear delay equation ----------------------------------------------------

@dataclass(frozen=True)
class LinearSddeParams:
    """``dX = (a X(t) + b X(t - r)) dt + sigma0 dW``."""

    a: float
    b: float
    sigma0: float
    r: float

    def __post_init__(self):
        for name in ("a", "b", "sigma0", "r"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.r < 0:
            raise ValueError("delay must be nonnegative")


def build_linear_sdde(p: LinearSddeParams) -> CoefficientModel:
    a, b, s, r = p.a, p.b, p.sigma0, p.r
    if b == 0:
        drift = lambda t, x, seg: a * x
    else:
        drift = lambda t, x, seg: a * x + b * seg.value_at(-r)
    return CoefficientModel(1, 1, r, drift, lambda t, x, seg: s,
                            time_homogeneous=True, memoryless=(b == 0), name="linear-sdde")


# -- hereditary market --------------------------------------------------------

def const_vol(sigma: float) -> Callable[[Segment], float]:
    sigma = float(sigma)
    return lambda seg: sigma


def delayed_ratio_vol(sigma: float, lag: float) -> Callable[[Segment], np.ndarray]:
    """``sigma * S(t - lag) / S(t)``."""
    sigma, lag = float(sigma), float(lag)
    return lambda seg: sigma * seg.value_at(-lag)[..., 0] / seg.head[..., 0]


def table_vol(ratios, vols, lag: float) -> Callable[[Segment], np.ndarray]:
    """Volatility interpolated linearly in ``S(t) / S(t - lag)``, flat outside the table."""
    ratios, vols = np.asarray(ratios, float), np.asarray(vols, float)
    if ratios.ndim != 1 or ratios.shape != vols.shape or len(ratios) < 1:
        raise ValueError("volatility table needs matching 1-d ratio and value lists")
    if np.any(np.diff(ratios) <= 0):
        raise ValueError("volatility table ratios must be strictly increasing")
    if np.any(vols < 0):
        raise ValueError("volatilities must be nonnegative")
    lag = float(lag)
    return lambda seg: np.interp(seg.head[..., 0] / seg.value_at(-lag)[..., 0], ratios, vols)


def call_payoff(K: float) -> TerminalFunctional:
    return TerminalFunctional.of_endpoint(lambda x: np.maximum(x[..., 0] - K, 0.0))


def put_payoff(K: float) -> TerminalFunctional:
    return TerminalFunctional.of_endpoint(lambda x: np.maximum(K - x[..., 0], 0.0))


def digital_payoff(K: float) -> TerminalFunctional:
    return TerminalFunctional.of_endpoint(lambda x: (x[..., 0] > K).astype(float))


@dataclass
class MarketModel:
    """Price ``dS/S = f(S_t) dt + g(S_t) dW`` with deterministic short rate.

    ``rate`` is a number or a function of time; ``drift`` and ``vol`` are
    numbers or functionals of the price segment.  Leaving ``drift`` unset
    prices under the risk-neutral drift ``f = r(t)``.  ``payoff`` takes
    ``(segment, S(T))`` or is a :class:`TerminalFunctional`.
    """

    psi: Segment
    expiry: float
    rate: float | Callable[[float], float]
    vol: float | Callable[[Segment], np.ndarray]
    payoff: Callable
    drift: float | Callable[[Segment], np.ndarray] | None = None
    rate_bound: float | None = None

    def __post_init__(self):
        if self.psi.dim != 1:
            raise SegmentError("price history must be one-dimensional")
        if not (self.psi.nodes() > 0).all():
            raise ValueError("price history must be strictly positive")
        if self.expiry < 0:
            raise ValueError("expiry must be nonnegative")

    def rate_at(self, t: float) -> float:
        return float(self.rate(t)) if callable(self.rate) else float(self.rate)


def _functional(v) -> Callable[[Segment], np.ndarray]:
    if callable(v):
        return v
    v = float(v)
    return lambda seg: v


def build_market(m: MarketModel) -> CoefficientModel:
    """Multiplicative model on the price; stepped in log space to keep ``S > 0``."""
    vol = _functional(m.vol)
    if m.drift is None:
        drift = lambda t, x, seg: np.broadcast_to(m.rate_at(t), x.shape)
    else:
        f = _functional(m.drift)

        def drift(t, x, seg):
            v = np.asarray(f(seg), float)
            return np.broadcast_to(v[..., None] if v.ndim else v, x.shape)

    def diffusion(t, x, seg):
        g = np.asarray(vol(seg), float)
        return np.broadcast_to(g[..., None, None] if g.ndim else g, x.shape + (1,))

    return CoefficientModel(1, 1, m.psi.grid.r, drift, diffusion,
                            time_homogeneous=not callable(m.rate) or m.drift is not None,
                            memoryless=m.psi.grid.r == 0, stepper="log", name="market")


def discount_spec(m: MarketModel) -> KillingSpec:
    if callable(m.rate):
        bound = math.inf if m.rate_bound is None else m.rate_bound
        return KillingSpec(lambda s, x, seg: m.rate_at(s), -1, bound, time_dependent=True)
    return KillingSpec.const(m.rate)


def price_european(m: MarketModel, t: float, cfg: McConfig) -> McEstimate:
    """``E[exp(-int_t^T r(s) ds) payoff(S_T, S(T))]`` given the history ``psi`` at ``t``."""
    if t > m.expiry:
        raise ValueError("valuation time is after expiry")
    payoff = m.payoff
    return fk_terminal_time_dep(build_market(m), payoff, discount_spec(m), t, m.psi,
                                m.expiry, cfg)


# -- run and tumble -----------------------------------------------------------

@dataclass
class EcoliModel:
    """Internal state ``(zeta, Lambda)`` of a swimming cell during one run.

    ``Lambda`` follows ``d Lambda = drift dt + noise dW`` with both callables of
    ``(t, zeta, zeta_seg, lam_seg, theta)``; ``zeta`` follows the sensing ODE
    ``zeta' = sensing(field(X(t), t), theta, zeta)``.  The cell tumbles when
    ``Lambda`` reaches ``threshold``.  Position moves linearly,
    ``X(t) = x0 + t * speed * theta``.
    """

    drift: Callable
    noise: Callable
    sensing: Callable
    field: Callable
    speed: float
    threshold: float
    zeta0: Segment
    lam0: Segment
    theta: np.ndarray
    x0: np.ndarray
    memoryless: bool = False

    def __post_init__(self):
        self.theta = np.atleast_1d(np.asarray(self.theta, float))
        self.x0 = np.atleast_1d(np.asarray(self.x0, float))
        if self.theta.shape != self.x0.shape:
            raise ValueError("direction and position must have the same dimension")
        if self.speed < 0:
            raise ValueError("speed must be nonnegative")
        if self.zeta0.grid != self.lam0.grid or self.zeta0.dim != 1 or self.lam0.dim != 1:
            raise SegmentError("zeta and Lambda histories must be scalar on one grid")

    def position(self, t) -> np.ndarray:
        t = np.asarray(t, float)
        return self.x0 + t[..., None] * (self.speed * self.theta)


def build_ecoli(e: EcoliModel) -> tuple[CoefficientModel, DomainSpec, Segment]:
    """Model on ``(zeta, Lambda)``, the threshold domain and the stacked initial segment."""
    grid = e.zeta0.grid

    def args(t, x, seg):
        return t, x[..., 0], seg.component(0), seg.component(1), e.theta

    # every path of a run shares X(t), so the field is sampled once per step;
    # state-free coefficients keep their small shapes and broadcast in the step
    def drift(t, x, seg):
        c = e.field(e.position(t), t)
        dz = np.asarray(e.sensing(c, e.theta, x[..., 0]), float)
        dl = np.asarray(e.drift(*args(t, x, seg)), float)
        if dz.ndim == 0 and dl.ndim == 0:
            return np.array([dz, dl])
        shape = x.shape[:-1]
        return np.stack([np.broadcast_to(dz, shape), np.broadcast_to(dl, shape)], axis=-1)

    def diffusion(t, x, seg):
        s = np.asarray(e.noise(*args(t, x, seg)), float)
        if s.ndim == 0:
            return np.array([[0.0], [float(s)]])
        return np.stack([np.zeros_like(s), s], axis=-1)[..., None]

    model = CoefficientModel(2, 1, grid.r, drift, diffusion, time_homogeneous=False,
                             memoryless=e.memoryless, name="run-and-tumble")
    dom = DomainSpec.box((-math.inf, -math.inf), (math.inf, e.threshold))
    eta = Segment(grid, np.concatenate([e.zeta0.nodes(), e.lam0.nodes()], axis=-1))
    return model, dom, eta


def run_length_distribution(e: EcoliModel, time_grid, cfg: McConfig,
                            bridge: bool = False) -> ExitCurve:
    """``P(no tumble by t)`` on ``time_grid``."""
    model, dom, eta = build_ecoli(e)
    return exit_distribution(model, dom, eta, time_grid, cfg, bridge=bridge)


def step_grid(horizon: float, dt: float) -> np.ndarray:
    """All step instants ``0, dt, ..., horizon``."""
    n = round(horizon / dt)
    if abs(n * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ValueError("horizon is not a multiple of the step")
    return np.arange(n + 1) * dt


def ks_distance(curve: ExitCurve, cdf: Callable[[float], float]) -> float:
    """Sup distance between the empirical exit-time CDF ``1 - q`` and ``cdf`` on the curve's span.

    The empirical CDF is constant between grid instants, so on each interval
    the largest gap is at one of its two ends.
    """
    F_emp = 1.0 - curve.q
    F = np.array([cdf(float(t)) for t in curve.times])
    gaps = np.abs(F_emp - F)
    if len(F) > 1:
        gaps = np.maximum(gaps, np.append(np.abs(F_emp[:-1] - F[1:]), 0.0))
    return float(gaps.max())
