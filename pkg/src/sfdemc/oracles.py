"""Closed-form and exact reference values for the Monte Carlo estimators.

Everything here is pure scalar math on the standard library (plus numpy's
polynomial class for the delay-equation recursion) and shares no code with
the simulation engine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from numpy.polynomial import Polynomial

_SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class OracleResult:
    value: float
    method: str
    error_bound: float | None = None

    def __post_init__(self):
        if self.error_bound is not None and not self.error_bound >= 0:
            raise ValueError("error bound must be nonnegative")

    def __float__(self) -> float:
        return self.value


def norm_cdf(x: float) -> float:
    """Standard normal CDF, accurate in both tails."""
    return 0.5 * math.erfc(-x / _SQRT2)


def log_norm_cdf(x: float) -> float:
    """``log(norm_cdf(x))`` without underflow for very negative ``x``."""
    if x > -30.0:
        return math.log(norm_cdf(x))
    # asymptotic expansion of the Mills ratio
    z = -x
    z2 = z * z
    series = 1.0 - 1.0 / z2 + 3.0 / z2**2 - 15.0 / z2**3 + 105.0 / z2**4
    return -0.5 * z2 - math.log(z * math.sqrt(2 * math.pi)) + math.log(series)


def _positive(**kw):
    for name, v in kw.items():
        if not (v > 0 and math.isfinite(v)):
            raise ValueError(f"{name} must be positive and finite, got {v}")


def bs_call(S0: float, K: float, r: float, sigma: float, T: float) -> OracleResult:
    """Black-Scholes price of a European call.

    The degenerate limits ``sigma = 0`` (discounted intrinsic value of the
    forward) and ``K = 0`` (the spot) are returned exactly.
    """
    _positive(S0=S0, T=T)
    if K < 0 or sigma < 0:
        raise ValueError("strike and volatility must be nonnegative")
    disc = math.exp(-r * T)
    if K == 0:
        return OracleResult(S0, "black-scholes", 0.0)
    if sigma == 0:
        return OracleResult(max(S0 - K * disc, 0.0), "black-scholes", 0.0)
    v = sigma * math.sqrt(T)
    d1 = (math.log(S0 / K) + (r + 0.5 * sigma * sigma) * T) / v
    d2 = d1 - v
    return OracleResult(S0 * norm_cdf(d1) - K * disc * norm_cdf(d2), "black-scholes", 1e-12 * S0)


def bs_put(S0: float, K: float, r: float, sigma: float, T: float) -> OracleResult:
    call = bs_call(S0, K, r, sigma, T)
    return OracleResult(call.value - S0 + K * math.exp(-r * T), "black-scholes parity",
                        call.error_bound)


def bs_digital(S0: float, K: float, r: float, sigma: float, T: float) -> OracleResult:
    """Cash-or-nothing call paying 1 if ``S_T > K``."""
    _positive(S0=S0, K=K, sigma=sigma, T=T)
    v = sigma * math.sqrt(T)
    d2 = (math.log(S0 / K) + (r - 0.5 * sigma * sigma) * T) / v
    return OracleResult(math.exp(-r * T) * norm_cdf(d2), "black-scholes", 1e-15)


def brownian_exit_survival(t: float, L: float, x0: float = 0.0, sigma: float = 1.0,
                           tol: float = 1e-13) -> OracleResult:
    """``P(sigma W stays in (-L, L) up to t | start x0)`` by the sine eigenfunction series.

    For ``x0 = 0`` this is ``(4/pi) sum_k (-1)^k/(2k+1) exp(-(2k+1)^2 pi^2 sigma^2 t / (8 L^2))``.
    Terms are added until a geometric majorant of the remaining tail is below
    ``tol``; that majorant is reported as the error bound.
    """
    _positive(L=L, sigma=sigma)
    if t < 0:
        raise ValueError("time must be nonnegative")
    if abs(x0) >= L:
        return OracleResult(0.0, "exit series", 0.0)
    if t == 0:
        return OracleResult(1.0, "exit series", 0.0)
    c = math.pi**2 * sigma**2 * t / (8 * L * L)
    phase = math.pi * (x0 + L) / (2 * L)
    terms = []
    k = 0
    while True:
        j = 2 * k + 1
        decay = math.exp(-j * j * c)
        terms.append(4.0 / (math.pi * j) * math.sin(j * phase) * decay)
        jn = j + 2
        tail = 4.0 / math.pi * math.exp(-jn * jn * c) / -math.expm1(-4 * jn * c)
        k += 1
        if tail <= tol:
            break
    return OracleResult(math.fsum(terms), "exit series", tail)


def brownian_mean_exit_time(x0: float, L: float, sigma: float = 1.0) -> OracleResult:
    """Expected exit time of ``x0 + sigma W`` from ``(-L, L)``: ``(L^2 - x0^2) / sigma^2``."""
    _positive(L=L, sigma=sigma)
    if abs(x0) > L:
        raise ValueError("start must lie in the closed interval")
    return OracleResult((L * L - x0 * x0) / sigma**2, "closed form", 0.0)


def inverse_gaussian_cdf(t: float, mu: float, sigma: float, barrier: float) -> OracleResult:
    """``P(T_b <= t)`` for the first time ``mu s + sigma W_s`` reaches ``barrier > 0``."""
    _positive(sigma=sigma, barrier=barrier)
    if t <= 0:
        return OracleResult(0.0, "inverse gaussian", 0.0)
    if math.isinf(t):
        return OracleResult(1.0 if mu >= 0 else math.exp(2 * mu * barrier / sigma**2),
                            "inverse gaussian", 0.0)
    s = sigma * math.sqrt(t)
    first = norm_cdf((mu * t - barrier) / s)
    second = math.exp(2 * mu * barrier / sigma**2 + log_norm_cdf(-(mu * t + barrier) / s))
    return OracleResult(min(1.0, first + second), "inverse gaussian", 1e-14)


def _resolvent(q: Polynomial, a: float, b: float) -> Polynomial:
    """Polynomial ``S`` with ``S' - a S = b q``."""
    if a == 0:
        return (b * q).integ()
    out = Polynomial([0.0])
    scale = -b / a
    for _ in range(len(q.coef)):
        out = out + scale * q
        q = q.deriv()
        scale /= a
    return out


def method_of_steps(a: float, b: float, r: float, eta: float, T: float) -> OracleResult:
    """Exact solution of ``x' = a x(t) + b x(t - r)`` with constant history ``eta``.

    On each delay interval the solution has the form ``exp(a s) P(s) + Q(s)``
    in local time ``s``; both polynomials follow from the previous interval in
    closed form, so the value is exact up to rounding.
    """
    if T < 0 or r < 0:
        raise ValueError("horizon and delay must be nonnegative")
    for name, v in (("a", a), ("b", b), ("eta", eta)):
        if not math.isfinite(v):
            raise ValueError(f"{name} must be finite")
    if r == 0:
        return OracleResult(eta * math.exp((a + b) * T), "method of steps", 0.0)
    if b == 0:
        return OracleResult(eta * math.exp(a * T), "method of steps", 0.0)
    P, Q = Polynomial([0.0]), Polynomial([float(eta)])
    x_end = float(eta)
    t0 = 0.0
    while True:
        # history on this interval is the previous piece exp(a s) P(s) + Q(s)
        R = b * P.integ()
        S = _resolvent(Q, a, b)
        K = x_end - R(0.0) - S(0.0)
        P, Q = R + K, S
        if T <= t0 + r:
            s = T - t0
            val = math.exp(a * s) * P(s) + Q(s)
            return OracleResult(float(val), "method of steps", 1e-12 * max(1.0, abs(val)))
        x_end = math.exp(a * r) * P(r) + Q(r)
        t0 += r


def ou_variance(T: float, theta: float, sigma: float) -> OracleResult:
    """``Var X_T`` for ``dX = -theta X dt + sigma dW`` from a deterministic start."""
    _positive(theta=theta)
    if T < 0:
        raise ValueError("time must be nonnegative")
    if math.isinf(T):
        return OracleResult(sigma**2 / (2 * theta), "closed form", 0.0)
    return OracleResult(-sigma**2 * math.expm1(-2 * theta * T) / (2 * theta), "closed form", 0.0)
