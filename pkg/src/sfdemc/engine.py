"""Euler-Maruyama time stepping of delay SDEs with segment-valued state.

The equation is ``dX = H(t, X(t), X_t) dt + G(t, X(t), X_t) dW`` where ``X_t``
is the memory segment.  Paths are simulated in fixed-size blocks; a block is a
batch of paths advanced together with numpy, drawing its noise from the
counter-based streams in :mod:`sfdemc.rng`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .parallel import map_blocks
from .rng import NoiseStream, normal_block
from .segment import Segment, SegmentError, SegmentGrid

_REL = 1e-9


class SimulationError(RuntimeError):
    """A path produced a non-finite (or otherwise invalid) state."""

    def __init__(self, message: str, t: float | None = None, path: int | None = None,
                 x=None):
        super().__init__(message, t, path, x)
        self.message = message
        self.t = t
        self.path = path
        self.x = x

    def __str__(self) -> str:
        where = []
        if self.path is not None:
            where.append(f"path {self.path}")
        if self.t is not None:
            where.append(f"t={self.t:.6g}")
        if self.x is not None:
            where.append(f"x={np.asarray(self.x).tolist()}")
        return f"{self.message} ({', '.join(where)})" if where else self.message


@dataclass
class CoefficientModel:
    """Drift and diffusion functionals of ``(t, x, segment)``.

    ``drift`` returns shape ``(..., d)`` and ``diffusion`` shape ``(..., d, n)``;
    scalars broadcast.  With ``stepper="log"`` both are read as relative
    coefficients of ``dX / X`` and the state is advanced multiplicatively.
    """

    dim_x: int
    dim_w: int
    memory: float
    drift: Callable
    diffusion: Callable
    time_homogeneous: bool = True
    memoryless: bool = False
    stepper: str = "euler"
    name: str = "model"

    def __post_init__(self):
        if self.stepper not in ("euler", "log"):
            raise ValueError(f"unknown stepper {self.stepper!r}")
        if self.dim_x < 1 or self.dim_w < 1:
            raise ValueError("state and noise dimensions must be >= 1")
        if self.memory < 0:
            raise ValueError("memory length must be >= 0")


@dataclass(frozen=True)
class StepScheme:
    """Time step ``dt = delta / substeps`` tied to the memory node spacing."""

    dt: float
    substeps: int = 1

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"time step must be positive, got {self.dt}")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")

    @classmethod
    def aligned(cls, grid: SegmentGrid, dt: float) -> "StepScheme":
        """Scheme whose step divides the node spacing of ``grid``.

        The step is re-derived as ``delta / k`` so that ``k * dt`` reproduces the
        spacing; a step that does not divide the spacing is rejected.
        """
        if grid.m == 0:
            return cls(float(dt), 1)
        k = round(grid.delta / dt)
        if k < 1 or abs(k * dt - grid.delta) > _REL * grid.delta:
            raise SegmentError(
                f"node spacing {grid.delta} is not a multiple of the time step {dt}")
        return cls(grid.delta / k, k)

    def n_steps(self, t0: float, t1: float) -> int:
        if t1 < t0:
            raise ValueError(f"horizon {t1} precedes start {t0}")
        n = round((t1 - t0) / self.dt)
        if abs(n * self.dt - (t1 - t0)) > _REL * max(1.0, t1 - t0):
            raise ValueError(f"interval [{t0}, {t1}] is not a multiple of dt={self.dt}")
        return n


@dataclass
class PathState:
    t: float
    x: np.ndarray
    seg: Segment


def _check_grid(model: CoefficientModel, eta: Segment) -> None:
    if not eta.grid.matches(model.memory):
        raise SegmentError(
            f"segment covers r={eta.grid.r} but the model remembers r={model.memory}")
    if eta.dim != model.dim_x:
        raise SegmentError(f"segment has dimension {eta.dim}, model expects {model.dim_x}")


def init_state(model: CoefficientModel, eta: Segment, t0: float = 0.0) -> PathState:
    _check_grid(model, eta)
    seg = eta.copy()
    return PathState(float(t0), seg.head.copy(), seg)


def _coefficients(model: CoefficientModel, t, x, seg):
    d, n = model.dim_x, model.dim_w
    h = np.asarray(model.drift(t, x, seg), float)
    g = np.asarray(model.diffusion(t, x, seg), float)
    if h.ndim == 0:
        h = np.broadcast_to(h, (d,))
    if g.ndim == 0:
        g = np.broadcast_to(g, (d, n))
    return h, g


def _increment(model: CoefficientModel, t, x, seg, dw, dt):
    """One explicit step; returns the new state and the diffusion used."""
    h, g = _coefficients(model, t, x, seg)
    if model.stepper == "euler":
        if model.dim_w == 1:
            noise = g[..., 0] * dw[..., 0:1]
        else:
            noise = np.einsum("...ij,...j->...i", g, dw)
        return x + h * dt + noise, g
    if model.dim_w == 1:
        gi = g[..., 0]
        return x * np.exp((h - 0.5 * gi * gi) * dt + gi * dw[..., 0:1]), g
    expo = (h - 0.5 * (g * g).sum(axis=-1)) * dt + np.einsum("...ij,...j->...i", g, dw)
    return x * np.exp(expo), g


def euler_step(state: PathState, model: CoefficientModel, scheme: StepScheme, dw,
               inplace: bool = False) -> PathState:
    """Advance ``state`` by ``scheme.dt`` with Brownian increment ``dw`` (shape ``(..., n)``)."""
    dw = np.asarray(dw, float)
    if not np.isfinite(dw).all():
        raise ValueError("Brownian increment must be finite")
    with np.errstate(over="ignore", invalid="ignore"):
        x_new, _ = _increment(model, state.t, state.x, state.seg, dw, scheme.dt)
    x_new = np.broadcast_to(x_new, state.x.shape).copy()
    if not np.isfinite(x_new).all():
        raise SimulationError("non-finite state after step", t=state.t, x=state.x)
    seg = state.seg if inplace else state.seg.copy()
    seg.advance(x_new, scheme.substeps)
    return PathState(state.t + scheme.dt, x_new, seg)


class Observer:
    """Per-step hook on a block of paths.

    Rows of the current arrays map to block slots; paths leave through
    :meth:`finish` (at their stopping time or the horizon) and dead rows are
    dropped through :meth:`compact`.
    """

    def start(self, t, x, seg):
        pass

    def update(self, t, x, seg):
        pass

    def finish(self, rows, slots, t, x, seg, exited):
        pass

    def compact(self, keep):
        pass

    def result(self) -> dict:
        return {}


class TraceObserver(Observer):
    """Records ``(t, x)`` for every path after every ``every``-th step."""

    def __init__(self, every: int = 1):
        self.every = every
        self._i = 0
        self.times: list[float] = []
        self.states: list[np.ndarray] = []

    def start(self, t, x, seg):
        self.times.append(t)
        self.states.append(x.copy())

    def update(self, t, x, seg):
        self._i += 1
        if self._i % self.every == 0:
            self.times.append(t)
            self.states.append(x.copy())

    def result(self):
        return {"trace_t": np.array(self.times), "trace_x": np.stack(self.states, axis=-2)}


class StopStateObserver(Observer):
    """Keeps the segment of each path at its stopping time (small batches only)."""

    def __init__(self):
        self.segments: dict[int, Segment] = {}

    def finish(self, rows, slots, t, x, seg, exited):
        idx = np.flatnonzero(rows)
        for r, s in zip(idx, slots):
            self.segments[int(s)] = seg.take(r).copy()


class Stopper:
    """Decides which live rows leave the domain; see :mod:`sfdemc.boundary`."""

    def initial(self, x, seg) -> np.ndarray:
        raise NotImplementedError

    def check(self, t, x_old, x_new, g, seg, ids, step) -> np.ndarray:
        raise NotImplementedError


@dataclass
class PathJob:
    """Everything needed to simulate any block of paths of one experiment."""

    model: CoefficientModel
    scheme: StepScheme
    t0: float
    n_steps: int
    seed: int
    initial: Callable[[np.ndarray], Segment]
    observers: Callable[[], Sequence[Observer]] = lambda: ()
    antithetic: bool = False
    stopper: Stopper | None = None
    block_size: int | None = None

    def blocks(self, n_paths: int) -> list[np.ndarray]:
        bs = self.block_size or default_block_size(self)
        return [np.arange(a, min(a + bs, n_paths)) for a in range(0, n_paths, bs)]


def default_block_size(job: PathJob) -> int:
    """Paths per block, from the problem shape only (never from the worker count)."""
    nodes = round(job.model.memory / job.scheme.dt / job.scheme.substeps) + 1 \
        if job.model.memory > 0 else 1
    per_path = nodes * job.model.dim_x
    b = int(8_000_000 // per_path)
    return max(256, min(65536, b - b % 256))


def broadcast_initial(model: CoefficientModel, eta: Segment) -> Callable[[np.ndarray], Segment]:
    _check_grid(model, eta)
    if eta.batch_shape:
        raise SegmentError("initial segment must be unbatched; use a callable for per-path data")
    return lambda ids: eta.broadcast(len(ids))


def run_block(job: PathJob, ids: np.ndarray, observers: Sequence[Observer] | None = None,
              keep_final: bool = False) -> dict:
    """Simulate the paths ``ids`` to the horizon or their stopping time.

    Returns per-path ``tau_step`` (steps taken before stopping), ``exited``,
    ``x_stop`` and whatever the observers report.
    """
    model, scheme = job.model, job.scheme
    dt, k, n = scheme.dt, scheme.substeps, model.dim_w
    sq = math.sqrt(dt)
    ids = np.asarray(ids, dtype=np.int64)
    B = len(ids)
    obs = list(job.observers() if observers is None else observers)

    seg = job.initial(ids)
    x = seg.head.copy()
    slots = np.arange(B)
    live = np.ones(B, bool)
    n_live = B
    tau_step = np.full(B, job.n_steps, dtype=np.int64)
    exited = np.zeros(B, bool)
    x_stop = np.empty((B, model.dim_x))
    nodes = seg.grid.size

    t = job.t0
    for o in obs:
        o.start(t, x, seg)

    def stop(rows, step, t, flag):
        nonlocal n_live
        s = slots[rows]
        tau_step[s] = step
        exited[s] = flag
        x_stop[s] = x[rows]
        for o in obs:
            o.finish(rows, s, t, x, seg, flag)
        live[rows] = False
        n_live -= int(rows.sum())

    if job.stopper is not None:
        out = job.stopper.initial(x, seg)
        if out.any():
            stop(out, 0, t, True)

    for i in range(job.n_steps):
        if n_live == 0:
            break
        t = job.t0 + i * dt
        z = normal_block(job.seed, ids[slots], i, n, job.antithetic)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            x_new, g = _increment(model, t, x, seg, z * sq, dt)
        if x_new.shape != x.shape:
            x_new = np.broadcast_to(x_new, x.shape).copy()
        if not np.isfinite(x_new).all():
            bad = ~np.isfinite(x_new).all(axis=-1) & live
            if bad.any():
                r = int(np.flatnonzero(bad)[0])
                raise SimulationError("non-finite state", t=t, path=int(ids[slots[r]]), x=x[r])
        if model.stepper == "log" and not (x_new > 0).all():
            bad = ~(x_new > 0).all(axis=-1) & live
            if bad.any():
                r = int(np.flatnonzero(bad)[0])
                raise SimulationError("multiplicative scheme lost positivity", t=t,
                                      path=int(ids[slots[r]]), x=x[r])
        x_old = x
        x = x_new
        seg.advance(x, k)
        t_new = job.t0 + (i + 1) * dt
        for o in obs:
            o.update(t_new, x, seg)
        if job.stopper is not None:
            out = job.stopper.check(t, x_old, x, g, seg, ids[slots], i) & live
            if out.any():
                stop(out, i + 1, t_new, True)
            n_dead = len(slots) - n_live
            if n_dead * (16 if nodes <= 4 else 4) >= len(slots):
                keep = live.copy()
                x = x[keep]
                seg = seg.take(keep)
                slots = slots[keep]
                live = live[keep]
                for o in obs:
                    o.compact(keep)

    if n_live:
        stop(live.copy(), job.n_steps, job.t0 + job.n_steps * dt, False)

    res = {"tau_step": tau_step, "exited": exited, "x_stop": x_stop}
    for o in obs:
        res.update(o.result())
    if keep_final:
        res["final_seg"] = seg
    return res


def run_paths(job: PathJob, n_paths: int, workers: int = 1) -> dict:
    """Run ``n_paths`` paths block by block and concatenate per-path results in path order."""
    blocks = job.blocks(n_paths)
    parts = map_blocks(lambda b: run_block(job, blocks[b]), len(blocks), workers)
    return {key: np.concatenate([p[key] for p in parts]) for key in parts[0]}


def simulate_path(model: CoefficientModel, eta: Segment, t0: float, T: float,
                  scheme: StepScheme, stream: NoiseStream,
                  observers: Iterable[Observer] = ()) -> tuple[PathState, list[dict]]:
    """Simulate the single path ``stream.path_index`` on ``[t0, T]``."""
    observers = list(observers)
    job = PathJob(model, scheme, t0, scheme.n_steps(t0, T), stream.seed,
                  broadcast_initial(model, eta))
    res = run_block(job, np.array([stream.path_index]), observers=observers, keep_final=True)
    seg = res["final_seg"].take(0)
    state = PathState(t0 + job.n_steps * scheme.dt, seg.head.copy(), seg)
    return state, [o.result() for o in observers]

