"""Experiment configuration shared by the runners and the CLI."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace

from ..errors import InvalidArgumentError

EXPERIMENTS = ("counterexample", "max-closure", "arbitrage", "oracle", "simulate")
SCHEMES = ("exact", "euler")
# schemes used when none is given: distributional runs use the exact law,
# runs that need every node of S coupled to W use Euler
DEFAULT_SCHEME = {"counterexample": "exact", "max-closure": "euler", "arbitrage": "euler",
                  "simulate": "exact", "oracle": "exact"}
PATHWISE = ("max-closure", "arbitrage")


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "counterexample"
    a: float = 1.0
    T: float = 1.0
    paths: int = 100_000
    steps: int = 4096
    seed: int = 42
    n_list: tuple = (0.0, 1.0, 2.0, 4.0, 8.0)
    scheme: str | None = None
    bridge: bool = True
    level: float = 0.99
    out: str | None = None
    nu1: str = "nu_n:2"
    nu2: str = "zero"
    checkpoint: float | None = None
    refine_paths: int | None = None
    block_size: int = 1024
    threshold: float = 0.01
    hedge_ceiling: float = 0.05
    record_runtime: bool = False
    # oracle subcommand only
    quantity: str = "expected-z"
    tol: float = 1e-9
    x0: float = 1.0
    u: float = 1.0
    t: float = 0.0
    x: float = 1.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "n_list", tuple(float(n) for n in self.n_list))
        if self.scheme is None:
            object.__setattr__(self, "scheme", DEFAULT_SCHEME.get(self.experiment, "exact"))
        self.validate()

    def validate(self):
        if self.experiment not in EXPERIMENTS:
            raise InvalidArgumentError(f"unknown experiment {self.experiment!r}")
        for name in ("a", "T"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and v > 0 and math.isfinite(v)):
                raise InvalidArgumentError(f"{name} must be a positive finite number, got {v!r}")
        if self.experiment != "oracle":
            if self.paths < 100:
                raise InvalidArgumentError("paths must be at least 100")
            if self.steps < 16:
                raise InvalidArgumentError("steps must be at least 16")
        if not 0 <= self.seed < 2**64:
            raise InvalidArgumentError("seed must be an unsigned 64-bit integer")
        if any(not (n >= 0 and math.isfinite(n)) for n in self.n_list) or not self.n_list:
            raise InvalidArgumentError("n-list must be a non-empty list of non-negative numbers")
        if self.scheme not in SCHEMES:
            raise InvalidArgumentError(f"scheme must be one of {SCHEMES}")
        if self.experiment in PATHWISE and self.scheme != "euler":
            raise InvalidArgumentError(
                f"{self.experiment} integrates against W after the passage time and needs scheme "
                "'euler'; the exact scheme is right in law only")
        if not 0 < self.level < 1:
            raise InvalidArgumentError("level must lie in (0, 1)")
        if self.checkpoint is not None and not 0 < self.checkpoint <= self.T:
            raise InvalidArgumentError("checkpoint must lie in (0, T]")
        if self.refine_paths is not None and self.refine_paths < 100:
            raise InvalidArgumentError("refine-paths must be at least 100")
        if self.block_size < 1:
            raise InvalidArgumentError("block size must be positive")

    @property
    def n_refine(self) -> int:
        return min(self.paths, self.refine_paths or 8192)

    def with_(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        """Config echo for reports; output paths and runtime switches are left out."""
        d = asdict(self)
        for k in ("out", "record_runtime", "extra"):
            d.pop(k)
        d["n_list"] = list(self.n_list)
        if self.experiment != "oracle":
            for k in ("quantity", "tol", "x0", "u", "t", "x"):
                d.pop(k)
        return d


_FIELDS = {f.name for f in fields(ExperimentConfig)}
_ALIASES = {"n": "n_list", "n-list": "n_list", "refine-paths": "refine_paths",
            "block-size": "block_size", "hedge-ceiling": "hedge_ceiling"}


def config_from_mapping(data: dict, **defaults) -> ExperimentConfig:
    """Build a config from a JSON-like mapping, rejecting unknown keys."""
    merged = dict(defaults)
    for key, value in data.items():
        key = _ALIASES.get(key, key)
        if key not in _FIELDS:
            raise InvalidArgumentError(f"unknown config key {key!r}")
        merged[key] = value
    if isinstance(merged.get("n_list"), str):
        merged["n_list"] = parse_n_list(merged["n_list"])
    return ExperimentConfig(**merged)


def load_config_file(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidArgumentError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise InvalidArgumentError("config file must hold a JSON object")
    return data


def parse_n_list(text: str) -> tuple:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise InvalidArgumentError(f"cannot parse n-list {text!r}") from exc
