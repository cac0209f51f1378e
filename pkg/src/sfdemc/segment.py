"""Discretised memory segments.

A segment is the history window ``eta(s), s in [-r, 0]`` sampled on a uniform
grid of ``m + 1`` nodes.  Node ``0`` sits at lag ``-r`` and node ``m`` at lag
``0``.  Values are stored in a ring so advancing the window by one node costs
O(d) per path rather than O(m d).

Segments may carry a leading batch shape: ``values`` has shape
``(m + 1, *batch, d)``.  Point evaluations then return arrays of shape
``(*batch, d)``, which is what vectorised coefficient functions receive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_REL = 1e-12


class SegmentError(ValueError):
    """Shape, range or alignment violation on a segment."""


@dataclass(frozen=True)
class SegmentGrid:
    """Uniform node grid on ``[-r, 0]``.

    ``r`` is authoritative and the node spacing is ``r / m``.  Node lags are
    computed as ``-r * (m - j) / m`` so both endpoints are exact.
    """

    r: float
    m: int

    def __post_init__(self):
        if not math.isfinite(self.r) or self.r < 0:
            raise SegmentError(f"memory length must be finite and >= 0, got {self.r}")
        if self.r == 0 and self.m != 0:
            raise SegmentError("r = 0 requires m = 0")
        if self.r > 0 and (int(self.m) != self.m or self.m < 1):
            raise SegmentError(f"r > 0 requires an integer m >= 1, got {self.m}")
        object.__setattr__(self, "m", int(self.m))

    @classmethod
    def from_spacing(cls, r: float, delta: float) -> "SegmentGrid":
        if r == 0:
            return cls(0.0, 0)
        m = round(r / delta)
        if m < 1 or abs(m * delta - r) > _REL * max(1.0, r):
            raise SegmentError(f"spacing {delta} does not divide memory length {r}")
        return cls(float(r), m)

    @property
    def delta(self) -> float:
        return self.r / self.m if self.m else 0.0

    @property
    def size(self) -> int:
        return self.m + 1

    def lags(self) -> np.ndarray:
        if self.m == 0:
            return np.zeros(1)
        j = np.arange(self.m + 1)
        return -self.r * (self.m - j) / self.m

    def matches(self, r: float) -> bool:
        return abs(self.r - r) <= _REL * max(1.0, r)


class Segment:
    """Ring-buffered history window, optionally batched over paths.

    Between node instants (when the time step is a fraction ``1/k`` of the node
    spacing) the committed nodes lag the present by ``phase * delta``; the live
    head value is kept separately and ``value_at`` interpolates through it, so
    ``value_at(0)`` is always the current state.
    """

    __slots__ = ("grid", "dim", "_buf", "_start", "_head", "_sub", "_k")

    def __init__(self, grid: SegmentGrid, values: np.ndarray):
        values = np.array(values, dtype=float)
        if values.ndim < 2 or values.shape[0] != grid.size:
            raise SegmentError(
                f"expected node table with leading size {grid.size} and a state axis, "
                f"got shape {values.shape}")
        if not np.isfinite(values).all():
            raise SegmentError("segment values must be finite")
        self.grid = grid
        self.dim = values.shape[-1]
        self._buf = values
        self._start = 0
        self._head = None
        self._sub = 0
        self._k = 1

    # -- layout -----------------------------------------------------------
    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self._buf.shape[1:-1]

    def _phys(self, j: int) -> int:
        return (self._start + j) % self.grid.size

    @property
    def phase(self) -> float:
        return self._sub / self._k

    def _committed(self) -> np.ndarray:
        if self._start == 0:
            return self._buf
        return np.roll(self._buf, -self._start, axis=0)

    def nodes(self) -> np.ndarray:
        """Values at the grid lags ``-r .. 0``, logical order, shape ``(m+1, *batch, d)``."""
        if self._sub == 0:
            return self._committed().copy()
        return np.stack([self.value_at(s) for s in self.grid.lags()])

    @property
    def head(self) -> np.ndarray:
        if self._sub:
            return self._head
        return self._buf[self._phys(self.grid.m)]

    # -- evaluation -------------------------------------------------------
    def value_at(self, s: float) -> np.ndarray:
        """State at lag ``s``; linear interpolation between nodes."""
        g = self.grid
        if s > 0 or s < -g.r * (1 + _REL) - _REL:
            raise SegmentError(f"lag {s} outside [-{g.r}, 0]")
        if g.m == 0 or s >= 0:
            return self.head
        u = (s + g.r) / g.delta + self.phase
        u = min(max(u, 0.0), g.m + self.phase)
        if abs(u - round(u)) <= _REL:
            u = float(round(u))  # node lags hit their node exactly
        if u >= g.m:
            if self._sub == 0:
                return self._buf[self._phys(g.m)]
            w = (u - g.m) / self.phase
            return (1 - w) * self._buf[self._phys(g.m)] + w * self._head
        j = int(u)
        w = u - j
        lo = self._buf[self._phys(j)]
        if w == 0.0:
            return lo
        return (1 - w) * lo + w * self._buf[self._phys(j + 1)]

    def sup_norm(self) -> np.ndarray:
        """Largest Euclidean node norm, per path."""
        return np.sqrt((self.nodes() ** 2).sum(axis=-1)).max(axis=0)

    # -- mutation ---------------------------------------------------------
    def push(self, v) -> "Segment":
        """Commit ``v`` as the newest node, dropping the node at lag ``-r``. In place."""
        v = np.asarray(v, dtype=float)
        slot = self._start
        self._buf[slot] = v
        self._start = (slot + 1) % self.grid.size
        self._sub = 0
        self._head = None
        return self

    def advance(self, v: np.ndarray, k: int) -> None:
        """One time step of size ``delta / k``; commits a node every ``k`` calls."""
        if self._sub + 1 >= k or self.grid.m == 0:
            self.push(v)
        else:
            self._k = k
            self._sub += 1
            self._head = v

    # -- copies -----------------------------------------------------------
    def copy(self) -> "Segment":
        out = Segment.__new__(Segment)
        out.grid = self.grid
        out.dim = self.dim
        out._buf = self._buf.copy()
        out._start = self._start
        out._head = None if self._head is None else self._head.copy()
        out._sub = self._sub
        out._k = self._k
        return out

    def take(self, index) -> "Segment":
        """Sub-batch along the (single) batch axis."""
        out = Segment.__new__(Segment)
        out.grid = self.grid
        out.dim = self.dim
        out._buf = self._buf[:, index]
        out._start = self._start
        out._head = None if self._head is None else self._head[index]
        out._sub = self._sub
        out._k = self._k
        return out

    def broadcast(self, n: int) -> "Segment":
        """Replicate an unbatched segment over ``n`` paths."""
        if self.batch_shape:
            raise SegmentError("broadcast expects an unbatched segment")
        out = Segment.__new__(Segment)
        out.grid = self.grid
        out.dim = self.dim
        out._buf = np.repeat(self._buf[:, None, :], n, axis=1)
        out._start = self._start
        out._head = None if self._head is None else np.repeat(self._head[None], n, axis=0)
        out._sub = self._sub
        out._k = self._k
        return out

    @staticmethod
    def concat(parts: "list[Segment]") -> "Segment":
        """Join batched segments sharing grid and ring phase along the batch axis."""
        first = parts[0]
        for p in parts[1:]:
            if (p.grid, p.dim, p._start, p._sub, p._k) != \
                    (first.grid, first.dim, first._start, first._sub, first._k):
                raise SegmentError("segments differ in grid or ring phase")
        out = first.copy()
        out._buf = np.concatenate([p._buf for p in parts], axis=1)
        if first._head is not None:
            out._head = np.concatenate([p._head for p in parts], axis=0)
        return out

    def component(self, i: int) -> "Segment":
        """View on state coordinate ``i`` as a one-dimensional segment (shares storage)."""
        out = Segment.__new__(Segment)
        out.grid = self.grid
        out.dim = 1
        out._buf = self._buf[..., i:i + 1]
        out._start = self._start
        out._head = None if self._head is None else self._head[..., i:i + 1]
        out._sub = self._sub
        out._k = self._k
        return out

    def __repr__(self) -> str:
        return (f"Segment(r={self.grid.r}, m={self.grid.m}, dim={self.dim}, "
                f"batch={self.batch_shape})")


def new_segment(grid: SegmentGrid, dim: int, *, constant=None, linear=None,
                table=None, func: Callable[[np.ndarray], np.ndarray] | None = None) -> Segment:
    """Build an initial segment from exactly one description.

    ``constant`` is a scalar or d-vector, ``linear`` a pair ``(a, b)`` of values
    at lags ``-r`` and ``0``, ``table`` the node values listed from lag ``-r``,
    and ``func`` a callable sampled at the node lags.
    """
    given = [x is not None for x in (constant, linear, table, func)]
    if sum(given) != 1:
        raise SegmentError("give exactly one of constant, linear, table, func")
    n = grid.size
    if constant is not None:
        c = np.broadcast_to(np.asarray(constant, float).reshape(-1), (dim,)) \
            if np.ndim(constant) == 0 else np.asarray(constant, float)
        if c.shape != (dim,):
            raise SegmentError(f"constant has shape {c.shape}, expected ({dim},)")
        values = np.tile(c, (n, 1))
    elif linear is not None:
        a, b = (np.broadcast_to(np.asarray(v, float), (dim,)) for v in linear)
        w = np.linspace(0.0, 1.0, n)[:, None] if n > 1 else np.ones((1, 1))
        values = (1 - w) * a + w * b
    elif table is not None:
        values = np.asarray(table, float)
        if values.ndim == 1 and dim == 1:
            values = values[:, None]
        if values.shape != (n, dim):
            raise SegmentError(f"table has shape {values.shape}, expected ({n}, {dim})")
    else:
        values = np.asarray(func(grid.lags()), float).reshape(n, -1)
        if values.shape != (n, dim):
            raise SegmentError(f"sampled function gave shape {values.shape}, expected ({n}, {dim})")
    return Segment(grid, values)


def roll(seg: Segment, new_value, inplace: bool = False) -> Segment:
    """Advance the window by one node and make ``new_value`` the present."""
    v = np.asarray(new_value, float)
    if v.shape[-1:] != (seg.dim,) and not (seg.dim == 1 and v.ndim == 0):
        raise SegmentError(f"value of shape {v.shape} does not match dimension {seg.dim}")
    if not np.isfinite(v).all():
        raise SegmentError("rolled value must be finite")
    out = seg if inplace else seg.copy()
    return out.push(np.broadcast_to(v, seg.head.shape))


def value_at(seg: Segment, s: float) -> np.ndarray:
    return seg.value_at(s)


def _trapezoid(nodes: np.ndarray, delta: float) -> np.ndarray:
    # integrate along the node axis (axis 0)
    if nodes.shape[0] == 1:
        return np.zeros(nodes.shape[1:])
    return delta * (0.5 * (nodes[0] + nodes[-1]) + nodes[1:-1].sum(axis=0))


def l2_norm(seg: Segment) -> np.ndarray:
    """Trapezoid approximation of the L2 norm over ``[-r, 0]``."""
    sq = (seg.nodes() ** 2).sum(axis=-1)
    out = np.sqrt(np.maximum(_trapezoid(sq, seg.grid.delta), 0.0))
    return out[()] if out.ndim == 0 else out


@dataclass
class QuasiTameFunctional:
    """``h((int f_j(eta(s)) g_j(s) ds)_j ; eta(0))`` with ``k - 1`` weighted integrals.

    ``weights`` entries may be callables of the lag array or arrays of node
    values; ``outer`` receives the integrals with shape ``(*batch, k-1, d)`` and
    the endpoint with shape ``(*batch, d)``.
    """

    k: int
    outer: Callable[[np.ndarray, np.ndarray], np.ndarray]
    inner_maps: Sequence[Callable[[np.ndarray], np.ndarray]] = field(default_factory=list)
    weights: Sequence = field(default_factory=list)

    def __post_init__(self):
        if self.k < 1:
            raise SegmentError("quasi-tame order k must be >= 1")
        if len(self.inner_maps) != self.k - 1 or len(self.weights) != self.k - 1:
            raise SegmentError(f"need k-1 = {self.k - 1} inner maps and weights")

    def __call__(self, seg: Segment, x=None) -> np.ndarray:
        return eval_quasi_tame(self, seg)


def eval_quasi_tame(qt: QuasiTameFunctional, seg: Segment) -> np.ndarray:
    endpoint = seg.head
    if qt.k == 1:
        return qt.outer(np.zeros(endpoint.shape[:-1] + (0, seg.dim)), endpoint)
    nodes = seg.nodes()
    lags = seg.grid.lags()
    integrals = []
    for f, g in zip(qt.inner_maps, qt.weights):
        gv = np.asarray(g(lags) if callable(g) else g, float)
        if gv.shape != (seg.grid.size,):
            raise SegmentError(f"weight sampled to shape {gv.shape}, expected ({seg.grid.size},)")
        fv = np.asarray(f(nodes), float)
        if fv.shape != nodes.shape:
            raise SegmentError(f"inner map returned shape {fv.shape}, expected {nodes.shape}")
        w = gv.reshape((-1,) + (1,) * (nodes.ndim - 1))
        integrals.append(_trapezoid(fv * w, seg.grid.delta))
    return qt.outer(np.stack(integrals, axis=-2), endpoint)


def _grid_steps(seg: Segment, t: float) -> int:
    g = seg.grid
    if t < 0:
        raise SegmentError(f"extension time must be >= 0, got {t}")
    if g.m == 0:
        return 1 if t > 0 else 0
    n = round(t / g.delta)
    if abs(n * g.delta - t) > _REL * max(1.0, t):
        raise SegmentError(f"time {t} is not a multiple of the node spacing {g.delta}")
    return n


def extend_frozen(seg: Segment, v, t: float) -> Segment:
    """Segment at time ``t`` of the path that holds ``v`` constant after lag 0."""
    n = _grid_steps(seg, t)
    out = seg.copy()
    v = np.broadcast_to(np.asarray(v, float), seg.head.shape)
    for _ in range(min(n, seg.grid.size)):
        out.push(v)
    return out


def shift_operator_fd(phi: Callable[[Segment, np.ndarray], np.ndarray], seg: Segment,
                      h: float) -> np.ndarray:
    """Forward difference ``(Phi(frozen extension by h) - Phi(seg)) / h``."""
    if h <= 0:
        raise SegmentError(f"step must be positive, got {h}")
    head = seg.head
    ext = extend_frozen(seg, head, h)
    return (np.asarray(phi(ext, ext.head)) - np.asarray(phi(seg, head))) / h
