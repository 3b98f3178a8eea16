"""Flat ``section.key = value`` experiment configuration.

Format: one assignment per line, ``#`` starts a comment, blank lines are
ignored, keys are dotted paths with at most one dot. Unknown keys, type
mismatches and missing required keys raise :class:`ConfigError` naming the
offending key.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, fields, replace
from typing import Any, Callable

from fedavg_lab.errors import ConfigError
from fedavg_lab.objectives import KINDS

AUTO = "auto"
CONSTANT_NAMES = ("a", "b", "alpha", "beta", "tau1", "tau2", "sigma")


@dataclass(frozen=True)
class ObjectiveBlock:
    kind: str
    d: int = 8
    n: int = 64
    hidden: int = 32
    spread: float = 0.0
    noise: float = 0.1
    scale: float = 1.0
    init_scale: float = 1.0
    data_seed: int = 0
    data_csv: str | None = None


@dataclass(frozen=True)
class ClientsBlock:
    N: int
    partition: str = "contiguous"


@dataclass(frozen=True)
class FedAvgBlock:
    K: int
    eta_l: float | str = AUTO
    eta_g: float | str = AUTO
    R: int | str = 100
    B: int = 8
    full_batch: bool = False
    eta_g_sentinel: float = 1e3


@dataclass(frozen=True)
class ProbeBlock:
    radius: float = 1.0
    pairs: int = 2048
    M: int = 1000
    points: int = 8
    seed: int = 0


@dataclass(frozen=True)
class ConstantsBlock:
    a: float | None = None
    b: float | None = None
    alpha: float | None = None
    beta: float | None = None
    tau1: float | None = None
    tau2: float | None = None
    sigma: float | None = None

    def given(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in CONSTANT_NAMES if getattr(self, k) is not None}

    @property
    def complete(self) -> bool:
        return len(self.given()) == len(CONSTANT_NAMES)


@dataclass(frozen=True)
class MonitorBlock:
    l_star: float | None = None


@dataclass(frozen=True)
class GDBlock:
    T: int = 100


@dataclass(frozen=True)
class ExperimentConfig:
    objective: ObjectiveBlock
    clients: ClientsBlock
    fedavg: FedAvgBlock
    probe: ProbeBlock = field(default_factory=ProbeBlock)
    constants: ConstantsBlock = field(default_factory=ConstantsBlock)
    monitor: MonitorBlock = field(default_factory=MonitorBlock)
    gd: GDBlock = field(default_factory=GDBlock)
    seeds: tuple[int, ...] = tuple(range(20))
    epsilon: float | None = None
    output: str = "out"

    @property
    def auto_rates(self) -> bool:
        return self.fedavg.eta_l == AUTO or self.fedavg.eta_g == AUTO

    @property
    def needs_probe(self) -> bool:
        return self.auto_rates and not self.constants.complete

    def config_hash(self) -> str:
        """SHA-256 of the canonical serialization, ignoring the output directory."""
        text = serialize(replace(self, output=""))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# value converters


def _int(lo: int | None = None) -> Callable[[str], int]:
    def conv(raw: str) -> int:
        try:
            value = int(raw, 10)
        except ValueError:
            raise ValueError(f"expected an integer, got {raw!r}") from None
        if lo is not None and value < lo:
            raise ValueError(f"must be >= {lo}, got {value}")
        return value

    return conv


def _float(positive: bool = False, nonneg: bool = False) -> Callable[[str], float]:
    def conv(raw: str) -> float:
        try:
            value = float(raw)
        except ValueError:
            raise ValueError(f"expected a number, got {raw!r}") from None
        if not math.isfinite(value):
            raise ValueError(f"must be finite, got {raw!r}")
        if positive and not value > 0:
            raise ValueError(f"must be positive, got {value}")
        if nonneg and value < 0:
            raise ValueError(f"must be >= 0, got {value}")
        return value

    return conv


def _optional(conv: Callable[[str], Any]) -> Callable[[str], Any]:
    def wrapped(raw: str) -> Any:
        return None if raw.lower() in ("", "none") else conv(raw)

    return wrapped


def _or_auto(conv: Callable[[str], Any]) -> Callable[[str], Any]:
    def wrapped(raw: str) -> Any:
        return AUTO if raw.lower() == AUTO else conv(raw)

    return wrapped


def _choice(*options: str) -> Callable[[str], str]:
    def conv(raw: str) -> str:
        if raw not in options:
            raise ValueError(f"must be one of {', '.join(options)}, got {raw!r}")
        return raw

    return conv


def _bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _str(raw: str) -> str:
    if not raw:
        raise ValueError("must not be empty")
    return raw


def _seeds(raw: str) -> tuple[int, ...]:
    out: list[int] = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..", 1)
            a, b = _int(0)(lo.strip()), _int(0)(hi.strip())
            if b < a:
                raise ValueError(f"empty seed range {part!r}")
            out.extend(range(a, b + 1))
        else:
            out.append(_int(0)(part))
    if not out:
        raise ValueError("seed list is empty")
    if len(set(out)) != len(out):
        raise ValueError("seeds must be distinct")
    return tuple(out)


SCHEMA: dict[str, Callable[[str], Any]] = {
    "objective.kind": _choice(*KINDS),
    "objective.d": _int(1),
    "objective.n": _int(1),
    "objective.hidden": _int(1),
    "objective.spread": _float(nonneg=True),
    "objective.noise": _float(nonneg=True),
    "objective.scale": _float(positive=True),
    "objective.init_scale": _float(positive=True),
    "objective.data_seed": _int(0),
    "objective.data_csv": _optional(_str),
    "clients.N": _int(1),
    "clients.partition": _choice("contiguous", "interleaved"),
    "fedavg.K": _int(1),
    "fedavg.eta_l": _or_auto(_float(positive=True)),
    "fedavg.eta_g": _or_auto(_float(positive=True)),
    "fedavg.R": _or_auto(_int(1)),
    "fedavg.B": _int(1),
    "fedavg.full_batch": _bool,
    "fedavg.eta_g_sentinel": _float(positive=True),
    "probe.radius": _float(positive=True),
    "probe.pairs": _int(1),
    "probe.M": _int(2),
    "probe.points": _int(1),
    "probe.seed": _int(0),
    **{f"constants.{name}": _optional(_float(nonneg=True)) for name in CONSTANT_NAMES},
    "monitor.l_star": _optional(_float()),
    "gd.T": _int(0),
    "seeds": _seeds,
    "epsilon": _optional(_float(positive=True)),
    "output": _str,
}
REQUIRED = ("objective.kind", "clients.N", "fedavg.K")
SECTIONS = {
    "objective": ObjectiveBlock,
    "clients": ClientsBlock,
    "fedavg": FedAvgBlock,
    "probe": ProbeBlock,
    "constants": ConstantsBlock,
    "monitor": MonitorBlock,
    "gd": GDBlock,
}


def parse_config(text: str) -> ExperimentConfig:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{key}: unknown key (line {lineno})")
        if key in values:
            raise ConfigError(f"{key}: duplicate key (line {lineno})")
        try:
            values[key] = SCHEMA[key](raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    for key in REQUIRED:
        if key not in values:
            raise ConfigError(f"{key}: missing required key")
    blocks = {}
    for section, cls in SECTIONS.items():
        kwargs = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith(section + ".")}
        blocks[section] = cls(**kwargs)
    top = {k: v for k, v in values.items() if "." not in k}
    cfg = ExperimentConfig(**blocks, **top)
    _cross_check(cfg)
    return cfg


def _cross_check(cfg: ExperimentConfig) -> None:
    if cfg.fedavg.R == AUTO and cfg.epsilon is None:
        raise ConfigError("fedavg.R: 'auto' needs epsilon to be set")
    if cfg.objective.data_csv is None and cfg.clients.N > cfg.objective.n:
        raise ConfigError(f"clients.N: {cfg.clients.N} clients exceed objective.n = {cfg.objective.n} points")


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def serialize(cfg: ExperimentConfig) -> str:
    """Canonical text form; ``parse_config(serialize(c)) == c``."""
    lines = []
    for section in SECTIONS:
        block = getattr(cfg, section)
        for f in fields(block):
            lines.append(f"{section}.{f.name} = {_format(getattr(block, f.name))}")
    for name in ("seeds", "epsilon", "output"):
        lines.append(f"{name} = {_format(getattr(cfg, name))}")
    return "\n".join(lines) + "\n"


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
