"""Strict YAML run configuration.

Every key has a default except ``model.kind``, ``numerics.n_paths`` and
``numerics.seed``.  Unknown keys are rejected so a typo can never be silently
ignored.  Example::

    model:   {kind: gbm, mu: 0.05, sigma: 0.2}
    initial: {kind: constant, value: 100.0}
    numerics: {n_paths: 100000, seed: 7, dt: 0.001, horizon: 1.0}
    payoff:  {kind: call, K: 100.0}
    killing: {rate: 0.05, sign: -1}
"""

from __future__ import annotations

import math
import types
import typing
from dataclasses import MISSING, dataclass, field, fields, is_dataclass
from typing import Any, Union

import yaml

COMMANDS = ("simulate", "fk-eval", "exit-dist", "price", "ecoli", "verify")
_REL = 1e-9


class ConfigError(ValueError):
    """Invalid configuration document."""


# -- sections -------------------------------------------------------------------

@dataclass
class BrownianCfg:
    kind: str
    mu: float = 0.0
    sigma: float = 1.0


@dataclass
class GbmCfg:
    kind: str
    mu: float = 0.05
    sigma: float = 0.2
    scheme: str = "euler"


@dataclass
class LinearSddeCfg:
    kind: str
    a: float = 0.0
    b: float = 0.0
    sigma: float = 0.0
    delay: float | None = None


@dataclass
class VolCfg:
    kind: str = "const"
    sigma: float = 0.2
    lag: float | None = None
    ratios: list[float] | None = None
    values: list[float] | None = None


@dataclass
class MarketCfg:
    kind: str
    rate: float = 0.05
    drift: float | None = None
    vol: VolCfg = field(default_factory=VolCfg)


@dataclass
class EcoliCfg:
    kind: str
    mu: float = 1.0
    sigma: float = 1.0
    threshold: float = 1.0
    speed: float = 1.0
    theta: list[float] = field(default_factory=lambda: [1.0])
    x0: list[float] = field(default_factory=lambda: [0.0])
    zeta0: float = 0.0
    sensing_rate: float = 0.0
    gradient: list[float] | None = None
    memory_gain: float = 0.0


MODEL_KINDS = {"brownian": BrownianCfg, "gbm": GbmCfg, "linear_sdde": LinearSddeCfg,
               "market": MarketCfg, "ecoli": EcoliCfg}


@dataclass
class MemoryCfg:
    r: float = 0.0
    m: int | None = None


@dataclass
class InitialCfg:
    kind: str = "constant"
    value: float | list[float] | None = None
    start: float | list[float] | None = None
    end: float | list[float] | None = None
    values: list[float | list[float]] | None = None


@dataclass
class NumericsCfg:
    n_paths: int | None = None
    seed: int | None = None
    dt: float = 1e-3
    horizon: float = 1.0
    t0: float = 0.0
    antithetic: bool = False
    workers: int = 1
    bridge: bool = False
    block_size: int | None = None


@dataclass
class DomainCfg:
    lower: list[float] | None = None
    upper: list[float] | None = None
    mode: str = "endpoint_only"
    M: float = math.inf


@dataclass
class PayoffCfg:
    kind: str = "constant"
    K: float = 100.0
    value: float = 1.0


@dataclass
class KillingCfg:
    rate: float = 0.0
    slope: float = 0.0
    sign: int = -1
    bound: float | None = None


@dataclass
class BoundaryCfg:
    value: float = 0.0
    source: float | None = None


@dataclass
class ExitCfg:
    times: list[float] | None = None
    points: int = 10


@dataclass
class OutputCfg:
    trace_every: int = 1
    layout: str = "long"


@dataclass
class VerifyCfg:
    quick: bool = False
    determinism: bool = True


@dataclass
class RunConfig:
    command: str
    text: str
    model: Any
    memory: MemoryCfg
    initial: InitialCfg
    numerics: NumericsCfg
    domain: DomainCfg | None
    payoff: PayoffCfg
    killing: KillingCfg
    boundary: BoundaryCfg
    exit: ExitCfg
    output: OutputCfg
    verify: VerifyCfg

    @property
    def substeps(self) -> int:
        return substeps(self.memory, self.numerics.dt)

    @property
    def grid_m(self) -> int:
        return grid_m(self.memory, self.numerics.dt)


# -- strict builder -------------------------------------------------------------

def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp)).replace("typing.", "")


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    if origin in (Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        errors = []
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(a, value, where)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(f"{where}: expected {' or '.join(_type_name(a) for a in args)}, "
                          f"got {value!r}")
    if origin is list:
        (inner,) = typing.get_args(tp)
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return [_coerce(inner, v, f"{where}[{i}]") for i, v in enumerate(value)]
    if is_dataclass(tp):
        return build(tp, value, where)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise TypeError(f"unsupported schema type {tp}")


def build(cls, data, where: str):
    """Instantiate dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in fields(cls)]
    unknown = sorted(str(k) for k in data if k not in names)
    if unknown:
        raise ConfigError(f"unknown key {where}.{unknown[0]!r} "
                          f"(allowed: {', '.join(names)})")
    kwargs = {}
    for f in fields(cls):
        if f.name in data:
            kwargs[f.name] = _coerce(hints[f.name], data[f.name], f"{where}.{f.name}")
        elif f.default is MISSING and f.default_factory is MISSING:
            raise ConfigError(f"missing required key {where}.{f.name}")
    return cls(**kwargs)


# -- grid rules -----------------------------------------------------------------

def grid_m(mem: MemoryCfg, dt: float) -> int:
    """Subinterval count: explicit, or one node per time step."""
    if mem.r == 0:
        return 0
    if mem.m is not None:
        return mem.m
    m = round(mem.r / dt)
    if m < 1 or abs(m * dt - mem.r) > _REL * mem.r:
        raise ConfigError(f"memory r={mem.r} is not a multiple of dt={dt}")
    return m


def substeps(mem: MemoryCfg, dt: float) -> int:
    m = grid_m(mem, dt)
    if m == 0:
        return 1
    delta = mem.r / m
    k = round(delta / dt)
    if k < 1 or abs(k * dt - delta) > _REL * delta:
        raise ConfigError(f"node spacing r/m={delta} is not a multiple of dt={dt}")
    return k


# -- top level ------------------------------------------------------------------

_SECTIONS = ("model", "memory", "initial", "numerics", "domain", "payoff", "killing",
             "boundary", "exit", "output", "verify")


def parse_config(text: str, command: str) -> RunConfig:
    """Parse and validate a YAML document for ``command``."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed document: {exc}") from None
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("top level must be a mapping")
    unknown = sorted(str(k) for k in doc if k not in _SECTIONS)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} (allowed: {', '.join(_SECTIONS)})")

    model = None
    if doc.get("model") is not None or command != "verify":
        raw = doc.get("model")
        if not isinstance(raw, dict) or "kind" not in raw:
            raise ConfigError("missing required key model.kind")
        kind = raw["kind"]
        if kind not in MODEL_KINDS:
            raise ConfigError(f"model.kind: unknown kind {kind!r} "
                              f"(allowed: {', '.join(MODEL_KINDS)})")
        model = build(MODEL_KINDS[kind], raw, "model")

    numerics = build(NumericsCfg, doc.get("numerics"), "numerics")
    if numerics.seed is None:
        raise ConfigError("missing required key numerics.seed")
    if numerics.n_paths is None and command != "verify":
        raise ConfigError("missing required key numerics.n_paths")

    cfg = RunConfig(
        command=command, text=text, model=model,
        memory=build(MemoryCfg, doc.get("memory"), "memory"),
        initial=build(InitialCfg, doc.get("initial"), "initial"),
        numerics=numerics,
        domain=build(DomainCfg, doc["domain"], "domain") if doc.get("domain") is not None else None,
        payoff=build(PayoffCfg, doc.get("payoff"), "payoff"),
        killing=build(KillingCfg, doc.get("killing"), "killing"),
        boundary=build(BoundaryCfg, doc.get("boundary"), "boundary"),
        exit=build(ExitCfg, doc.get("exit"), "exit"),
        output=build(OutputCfg, doc.get("output"), "output"),
        verify=build(VerifyCfg, doc.get("verify"), "verify"),
    )
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    n = cfg.numerics
    if not (n.dt > 0 and math.isfinite(n.dt)):
        raise ConfigError("numerics.dt must be positive")
    if n.seed < 0:
        raise ConfigError("numerics.seed must be nonnegative")
    if n.workers < 1:
        raise ConfigError("numerics.workers must be >= 1")
    if cfg.command == "verify":
        return
    if n.n_paths < 2:
        raise ConfigError("numerics.n_paths must be >= 2")
    if n.antithetic and n.n_paths % 2:
        raise ConfigError("numerics.n_paths must be even with antithetic sampling")
    if n.horizon < n.t0:
        raise ConfigError("numerics.horizon precedes numerics.t0")
    steps = round((n.horizon - n.t0) / n.dt)
    if abs(steps * n.dt - (n.horizon - n.t0)) > _REL * max(1.0, n.horizon):
        raise ConfigError("numerics.horizon - t0 is not a multiple of numerics.dt")
    if cfg.memory.r < 0:
        raise ConfigError("memory.r must be nonnegative")
    if cfg.memory.m is not None and (cfg.memory.m < 1) == (cfg.memory.r > 0):
        raise ConfigError("memory.m must be >= 1 when r > 0 and 0 when r = 0")
    substeps(cfg.memory, n.dt)
    if cfg.initial.kind not in ("constant", "linear", "table"):
        raise ConfigError(f"initial.kind: unknown kind {cfg.initial.kind!r}")
    if cfg.payoff.kind not in ("call", "put", "digital", "constant", "identity", "square"):
        raise ConfigError(f"payoff.kind: unknown kind {cfg.payoff.kind!r}")
    if cfg.killing.sign not in (1, -1):
        raise ConfigError("killing.sign must be 1 or -1")
    if cfg.domain is not None and cfg.domain.mode not in ("endpoint_only", "segment_and_endpoint"):
        raise ConfigError(f"domain.mode: unknown mode {cfg.domain.mode!r}")
    if cfg.output.layout not in ("long", "per_path"):
        raise ConfigError(f"output.layout: unknown layout {cfg.output.layout!r}")
    if cfg.output.trace_every < 1:
        raise ConfigError("output.trace_every must be >= 1")
    if cfg.exit.points < 1:
        raise ConfigError("exit.points must be >= 1")
    kind = type(cfg.model)
    if cfg.command == "price" and kind is not MarketCfg:
        raise ConfigError("price needs model.kind: market")
    if cfg.command == "ecoli" and kind is not EcoliCfg:
        raise ConfigError("ecoli needs model.kind: ecoli")
    if cfg.command == "exit-dist" and cfg.domain is None:
        raise ConfigError("exit-dist needs a domain section")
    if kind is MarketCfg and cfg.model.vol.kind not in ("const", "delayed-ratio", "user-table"):
        raise ConfigError(f"model.vol.kind: unknown kind {cfg.model.vol.kind!r}")
    if kind is GbmCfg and cfg.model.scheme not in ("euler", "log"):
        raise ConfigError(f"model.scheme: unknown scheme {cfg.model.scheme!r}")
