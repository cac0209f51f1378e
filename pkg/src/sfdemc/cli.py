"""Command-line front end: ``sfdemc <command> --config run.yaml``.

Exit status: 0 success, 1 a verify claim failed, 2 configuration error,
3 runtime numerical error.
"""

from __future__ import annotations

import argparse
import functools
import json
import math
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .boundary import DomainSpec, exit_distribution, fk_dirichlet_mixed, fk_poisson
from .config import (COMMANDS, BrownianCfg, ConfigError, EcoliCfg, GbmCfg, LinearSddeCfg,
                     MarketCfg, RunConfig, parse_config)
from .engine import CoefficientModel, PathJob, SimulationError, TraceObserver, \
    broadcast_initial, run_block
from .feynman_kac import (BoundViolation, KillingSpec, McConfig, TerminalFunctional,
                          fk_terminal, fk_terminal_time_dep)
from .models import (EcoliModel, LinearSddeParams, MarketModel, build_linear_sdde, call_payoff,
                     delayed_ratio_vol, digital_payoff, put_payoff, run_length_distribution,
                     table_vol)
from .parallel import map_blocks
from .segment import Segment, SegmentError, SegmentGrid, new_segment
from . import verify as suite

EXIT_OK, EXIT_CLAIM, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


# -- building blocks from a config ------------------------------------------------

def _grid(cfg: RunConfig) -> SegmentGrid:
    return SegmentGrid(cfg.memory.r, cfg.grid_m)


def _segment(cfg: RunConfig, dim: int = 1) -> Segment:
    ini, grid = cfg.initial, _grid(cfg)
    if ini.kind == "constant":
        return new_segment(grid, dim, constant=1.0 if ini.value is None else ini.value)
    if ini.kind == "linear":
        if ini.start is None or ini.end is None:
            raise ConfigError("initial.kind linear needs initial.start and initial.end")
        return new_segment(grid, dim, linear=(ini.start, ini.end))
    if ini.values is None:
        raise ConfigError("initial.kind table needs initial.values")
    return new_segment(grid, dim, table=ini.values)


def _payoff(cfg: RunConfig) -> TerminalFunctional:
    p = cfg.payoff
    return {
        "call": lambda: call_payoff(p.K),
        "put": lambda: put_payoff(p.K),
        "digital": lambda: digital_payoff(p.K),
        "constant": lambda: TerminalFunctional.constant(p.value),
        "identity": lambda: TerminalFunctional.of_endpoint(lambda x: x[..., 0]),
        "square": lambda: TerminalFunctional.of_endpoint(lambda x: (x * x).sum(axis=-1)),
    }[p.kind]()


def _killing(cfg: RunConfig) -> KillingSpec:
    k = cfg.killing
    if k.slope == 0:
        spec = KillingSpec.const(k.rate, k.sign)
        if k.bound is not None and abs(k.rate) > k.bound:
            raise ConfigError("killing.rate exceeds killing.bound")
        return spec
    rate, slope = k.rate, k.slope
    return KillingSpec(lambda s, x, seg: rate + slope * s, k.sign,
                       math.inf if k.bound is None else k.bound, time_dependent=True)


def _market(cfg: RunConfig, psi: Segment) -> MarketModel:
    mc: MarketCfg = cfg.model
    v = mc.vol
    lag = cfg.memory.r if v.lag is None else v.lag
    if v.kind == "const":
        vol = v.sigma
    else:
        if not 0 < lag <= cfg.memory.r:
            raise ConfigError("model.vol.lag must lie in (0, memory.r]")
        if v.kind == "delayed-ratio":
            vol = delayed_ratio_vol(v.sigma, lag)
        else:
            if v.ratios is None or v.values is None:
                raise ConfigError("user-table volatility needs model.vol.ratios and values")
            vol = table_vol(v.ratios, v.values, lag)
    return MarketModel(psi, cfg.numerics.horizon, mc.rate, vol, _payoff(cfg), mc.drift)


def _ecoli(cfg: RunConfig) -> EcoliModel:
    ec: EcoliCfg = cfg.model
    grid = _grid(cfg)
    lam0 = _segment(cfg)
    zeta0 = new_segment(grid, 1, constant=ec.zeta0)
    r = cfg.memory.r
    mu, gain, sigma, k = ec.mu, ec.memory_gain, ec.sigma, ec.sensing_rate
    grad = np.zeros(len(ec.x0)) if ec.gradient is None else np.asarray(ec.gradient, float)
    if grad.shape != (len(ec.x0),):
        raise ConfigError("model.gradient must match the dimension of model.x0")
    if gain != 0 and r > 0:
        drift = lambda t, z, zs, ls, th: mu + gain * (zs.head[..., 0] - zs.value_at(-r)[..., 0])
    else:
        drift = lambda t, z, zs, ls, th: mu
    return EcoliModel(drift, lambda *a: sigma, lambda c, th, z: k * (c - z),
                      lambda x, t: float(grad @ x), ec.speed, ec.threshold, zeta0, lam0,
                      ec.theta, ec.x0, memoryless=(gain == 0 or r == 0))


def build_model(cfg: RunConfig) -> tuple[CoefficientModel, Segment]:
    mc, r = cfg.model, cfg.memory.r
    eta = _segment(cfg)
    if isinstance(mc, BrownianCfg):
        mu, s = mc.mu, mc.sigma
        model = CoefficientModel(1, 1, r, lambda t, x, seg: mu, lambda t, x, seg: s,
                                 memoryless=True, name="brownian")
    elif isinstance(mc, GbmCfg):
        mu, s = mc.mu, mc.sigma
        if mc.scheme == "log":
            model = CoefficientModel(1, 1, r, lambda t, x, seg: mu, lambda t, x, seg: s,
                                     memoryless=True, stepper="log", name="gbm")
        else:
            model = CoefficientModel(1, 1, r, lambda t, x, seg: mu * x,
                                     lambda t, x, seg: (s * x)[..., None],
                                     memoryless=True, name="gbm")
    elif isinstance(mc, LinearSddeCfg):
        delay = r if mc.delay is None else mc.delay
        if not 0 <= delay <= r:
            raise ConfigError("model.delay must lie in [0, memory.r]")
        model = build_linear_sdde(LinearSddeParams(mc.a, mc.b, mc.sigma, delay))
        model.memory = r
    elif isinstance(mc, MarketCfg):
        from .models import build_market
        model = build_market(_market(cfg, eta))
    else:
        from .models import build_ecoli
        model, _, eta = build_ecoli(_ecoli(cfg))
    return model, eta


def _domain(cfg: RunConfig) -> DomainSpec:
    d = cfg.domain
    if d is None:
        return DomainSpec.whole_space()
    if (d.lower is None) != (d.upper is None):
        raise ConfigError("domain needs both lower and upper")
    if d.lower is None:
        return DomainSpec(mode=d.mode, M=d.M)
    return DomainSpec.box(d.lower, d.upper, d.mode, d.M)


def _mc(cfg: RunConfig) -> McConfig:
    n = cfg.numerics
    return McConfig(n.n_paths, n.seed, n.dt, n.antithetic, n.workers, n.block_size)


def _time_grid(cfg: RunConfig) -> np.ndarray:
    n = cfg.numerics
    if cfg.exit.times is not None:
        return np.asarray(cfg.exit.times, float)
    steps = round((n.horizon - n.t0) / n.dt)
    idx = sorted({round(i * steps / cfg.exit.points) for i in range(cfg.exit.points + 1)})
    return n.t0 + np.asarray(idx) * n.dt


# -- output -----------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _csv(header: list[str], rows: list[list]) -> str:
    return "\n".join([",".join(header)] + [",".join(_fmt(v) for v in r) for r in rows]) + "\n"


@functools.lru_cache(maxsize=1)
def describe_version() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# -- commands ---------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, out: Path) -> tuple[dict, dict]:
    model, eta = build_model(cfg)
    mc = _mc(cfg)
    scheme = mc.for_grid(eta)
    n = cfg.numerics
    job = PathJob(model, scheme, n.t0, scheme.n_steps(n.t0, n.horizon), n.seed,
                  broadcast_initial(model, eta), antithetic=n.antithetic,
                  block_size=n.block_size)
    blocks = job.blocks(n.n_paths)
    every = cfg.output.trace_every
    parts = map_blocks(lambda b: run_block(job, blocks[b], observers=[TraceObserver(every)]),
                       len(blocks), n.workers)
    times = parts[0]["trace_t"]
    traces = np.concatenate([p["trace_x"] for p in parts])
    d = model.dim_x
    cols = [f"x_{i + 1}" for i in range(d)]
    files = {}
    if cfg.output.layout == "long":
        rows = [[pid, t, *traces[pid, j]] for pid in range(len(traces))
                for j, t in enumerate(times)]
        files["simulate.csv"] = _csv(["path_id", "t", *cols], rows)
    else:
        for pid in range(len(traces)):
            rows = [[t, *traces[pid, j]] for j, t in enumerate(times)]
            files[f"paths/path_{pid}.csv"] = _csv(["t", *cols], rows)
    record = {"paths": int(len(traces)), "steps": int(len(times) - 1), "dim": d}
    return files, record


def _estimate_files(name: str, est) -> tuple[dict, dict]:
    row = est.row()
    header = ["mean", "stderr", "ci_lo", "ci_hi", "n", "dt"]
    record = {k: row[k] for k in header}
    record["wall_time"] = est.wall_time
    record.update(est.extras)
    return {f"{name}.csv": _csv(header, [[row[k] for k in header]])}, record


def cmd_fk_eval(cfg: RunConfig, out: Path, boundary: bool = False) -> tuple[dict, dict]:
    model, eta = build_model(cfg)
    n, kill, f, mc = cfg.numerics, _killing(cfg), _payoff(cfg), _mc(cfg)
    if boundary:
        if cfg.domain is None:
            raise ConfigError("fk-eval --boundary needs a domain section")
        if kill.sign != -1:
            raise ConfigError("boundary problems need killing.sign: -1")
        gval = cfg.boundary.value
        g = lambda tau, seg, x: np.full(x.shape[:-1], gval)
        if cfg.boundary.source is not None:
            sval = cfg.boundary.source
            est = fk_poisson(model, lambda seg, x: sval, g, kill, _domain(cfg), eta, n.horizon,
                             mc, bridge=n.bridge, t=n.t0)
        else:
            est = fk_dirichlet_mixed(model, f, g, kill, _domain(cfg), n.t0, eta, n.horizon, mc,
                                     bridge=n.bridge)
    elif kill.time_dependent:
        est = fk_terminal_time_dep(model, f, kill, n.t0, eta, n.horizon, mc)
    else:
        est = fk_terminal(model, f, kill, n.t0, eta, n.horizon, mc)
    return _estimate_files("fk-eval", est)


def _curve_files(name: str, curve) -> tuple[dict, dict]:
    rows = [[r["t"], r["q"], r["stderr"]] for r in curve.rows()]
    record = {"n": curve.n, "t": curve.times.tolist(), "q": curve.q.tolist(),
              "stderr": curve.stderr.tolist(), "wall_time": curve.wall_time}
    return {f"{name}.csv": _csv(["t", "q", "stderr"], rows)}, record


def cmd_exit_dist(cfg: RunConfig, out: Path) -> tuple[dict, dict]:
    model, eta = build_model(cfg)
    curve = exit_distribution(model, _domain(cfg), eta, _time_grid(cfg), _mc(cfg),
                              t0=cfg.numerics.t0, bridge=cfg.numerics.bridge)
    return _curve_files("exit-dist", curve)


def cmd_price(cfg: RunConfig, out: Path) -> tuple[dict, dict]:
    from .models import price_european
    est = price_european(_market(cfg, _segment(cfg)), cfg.numerics.t0, _mc(cfg))
    return _estimate_files("price", est)


def cmd_ecoli(cfg: RunConfig, out: Path) -> tuple[dict, dict]:
    if cfg.numerics.t0 != 0:
        raise ConfigError("ecoli runs start at numerics.t0 = 0")
    curve = run_length_distribution(_ecoli(cfg), _time_grid(cfg), _mc(cfg),
                                    bridge=cfg.numerics.bridge)
    return _curve_files("ecoli", curve)


def cmd_verify(cfg: RunConfig, out: Path, quick: bool = False) -> tuple[dict, dict]:
    log = lambda msg: print(msg, file=sys.stderr, flush=True)
    results = suite.run_suite(cfg.numerics.seed, quick=quick or cfg.verify.quick,
                              check_determinism=cfg.verify.determinism, log=log)
    record = {"claims": [{"claim": r.claim, "oracle": r.oracle, "estimate": r.estimate,
                          "stderr": r.stderr, "z": r.z, "pass": r.passed} for r in results],
              "all_passed": all(r.passed for r in results)}
    return {"verify.csv": suite.to_csv(results)}, record


# -- driver -----------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sfdemc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, type=Path, help="YAML run configuration")
        s.add_argument("--seed", type=int, help="override numerics.seed")
        s.add_argument("--workers", type=int, help="override numerics.workers")
        s.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        s.add_argument("--json", action="store_true", help="print a JSON record instead of CSV")
        if name == "fk-eval":
            s.add_argument("--boundary", action="store_true",
                           help="stop paths at the domain boundary")
        if name == "verify":
            s.add_argument("--quick", action="store_true", help="reduced sizes for a smoke run")
    return p


def _component(exc: BaseException) -> str:
    if isinstance(exc, BoundViolation):
        return "killing"
    if isinstance(exc, SimulationError):
        return "engine"
    if isinstance(exc, SegmentError):
        return "segment"
    if isinstance(exc, ConfigError):
        return "config"
    return type(exc).__module__.rsplit(".", 1)[-1]


def _fail(exc: BaseException, code: int) -> int:
    print(f"sfdemc: error in {_component(exc)}: {exc}", file=sys.stderr)
    return code


def run(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    started = time.perf_counter()
    try:
        text = args.config.read_text()
    except OSError as exc:
        return _fail(ConfigError(f"cannot read config: {exc}"), EXIT_CONFIG)
    try:
        cfg = parse_config(text, args.command)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.workers is not None:
            overrides["workers"] = args.workers
        if overrides:
            cfg.numerics = replace(cfg.numerics, **overrides)
        if cfg.numerics.seed < 0 or cfg.numerics.workers < 1:
            raise ConfigError("seed must be >= 0 and workers >= 1")
    except (ConfigError, SegmentError) as exc:
        return _fail(exc, EXIT_CONFIG)

    handlers = {"simulate": cmd_simulate, "fk-eval": cmd_fk_eval, "exit-dist": cmd_exit_dist,
                "price": cmd_price, "ecoli": cmd_ecoli, "verify": cmd_verify}
    kwargs = {}
    if args.command == "fk-eval":
        kwargs["boundary"] = args.boundary
    if args.command == "verify":
        kwargs["quick"] = args.quick
    try:
        files, record = handlers[args.command](cfg, args.out, **kwargs)
    except ConfigError as exc:
        return _fail(exc, EXIT_CONFIG)
    except (SimulationError, ArithmeticError) as exc:
        return _fail(exc, EXIT_RUNTIME)
    except (ValueError, SegmentError) as exc:
        return _fail(exc, EXIT_CONFIG)

    wall = time.perf_counter() - started
    args.out.mkdir(parents=True, exist_ok=True)
    for name, content in files.items():
        path = args.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(content)
    json_record = json.dumps(record, indent=2, default=float)
    if args.json:
        (args.out / f"{args.command}.json").write_text(json_record + "\n")
    manifest = {"command": args.command, "config": cfg.text, "seed": cfg.numerics.seed,
                "workers": cfg.numerics.workers, "version": describe_version(),
                "wall_time": wall, "outputs": sorted(files)}
    (args.out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    if args.json:
        print(json_record)
    elif len(files) == 1:
        print(next(iter(files.values())), end="")
    else:
        print(f"wrote {len(files)} files to {args.out}")
    if args.command == "verify" and not record["all_passed"]:
        return EXIT_CLAIM
    return EXIT_OK


def main() -> None:
    sys.exit(run())
