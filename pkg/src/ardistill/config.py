"""Experiment configuration: flat ``key = value`` files with optional ``[section]`` headers."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .diffusion import SCHEDULE_PRESETS
from .worlds import WorldSpec

VARIANTS = ("causal_cd", "causal_ode", "causal_dmd", "bidir_ode", "none")
TEACHERS = ("learned", "oracle")
REAL_SCORES = ("oracle", "sequence_oracle", "bidir_net")
GRAD_DEPTHS = ("last_unit", "all_units", "full")
WORLD_PARAMS = ("a", "s", "s0", "mu")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    # [world]  a, s, s0, mu left at "default" take the chosen world's values
    world: str = "gaussian_ar"
    d: int = 2
    N: int = 8
    a: float = math.nan
    s: float = math.nan
    s0: float = math.nan
    mu: float = math.nan
    chunk: int = 1
    # [model]
    hidden: int = 256
    depth: int = 4
    k: int = 4
    time_freqs: int = 8
    index_dim: int = 8
    # [sampling]
    schedule: str = "two_step"
    asd: bool = True
    K: int = 48
    # [stage1]
    teacher: str = "learned"
    steps1: int = 20000
    lr1: float = 1e-3
    # [stage2]
    stage2: str = "causal_cd"
    steps2: int = 5000
    lr2: float = 1e-3
    ema_beta: float = 0.99
    num_pairs: int = 0  # 0: one pair per stage-2 supervision event
    pair_reuse: int = 48  # pairs kept per teacher trajectory
    bidir_teacher: str = "oracle"
    # [stage3]
    steps3: int = 1000
    lr3: float = 1e-4
    lr_fake: float = 1e-3
    fake_ratio: int = 5
    grad_depth: str = "last_unit"
    real_score: str = "oracle"
    # [eval]
    eval_rollouts: int = 2000
    n_boot: int = 100
    # [run]
    batch: int = 64
    seed: int = 0

    def __post_init__(self):
        checks = [
            (self.world in ("gaussian_ar", "branching_gmm"), f"world must be gaussian_ar or branching_gmm, got {self.world!r}"),
            (self.stage2 in VARIANTS, f"stage2 must be one of {VARIANTS}, got {self.stage2!r}"),
            (self.schedule in SCHEDULE_PRESETS, f"schedule must be one of {sorted(SCHEDULE_PRESETS)}, got {self.schedule!r}"),
            (self.teacher in TEACHERS, f"teacher must be one of {TEACHERS}, got {self.teacher!r}"),
            (self.bidir_teacher in ("oracle", "learned"), f"bidir_teacher must be oracle or learned, got {self.bidir_teacher!r}"),
            (self.real_score in REAL_SCORES, f"real_score must be one of {REAL_SCORES}, got {self.real_score!r}"),
            (self.grad_depth in GRAD_DEPTHS, f"grad_depth must be one of {GRAD_DEPTHS}, got {self.grad_depth!r}"),
            (self.N % self.chunk == 0, f"chunk {self.chunk} must divide N={self.N}"),
            (0.0 <= self.ema_beta < 1.0, f"ema_beta must lie in [0, 1), got {self.ema_beta}"),
            (1 <= self.pair_reuse <= self.K, f"pair_reuse must lie in [1, K={self.K}], got {self.pair_reuse}"),
            (min(self.steps1, self.steps2, self.steps3) >= 0, "step budgets must be non-negative"),
            (self.batch >= 1 and self.K >= 1, "batch and K must be positive"),
            (not (self.stage2 == "none" and self.teacher == "oracle"), "stage2=none needs a learned teacher"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def world_spec(self) -> WorldSpec:
        extra = {k: getattr(self, k) for k in WORLD_PARAMS if not math.isnan(getattr(self, k))}
        make = WorldSpec.gaussian_ar if self.world == "gaussian_ar" else WorldSpec.branching_gmm
        if self.world == "branching_gmm":
            extra.pop("s0", None)
        else:
            extra.pop("mu", None)
        return make(d=self.d, N=self.N, **extra)

    def as_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        d = {k: ("default" if isinstance(v, float) and math.isnan(v) else v) for k, v in self.as_dict().items()}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **kw) -> ExperimentConfig:
        return parse_overrides(self, [f"{k}={v}" for k, v in kw.items()])

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.as_dict().items())


FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _fmt(v) -> str:
    if isinstance(v, float) and math.isnan(v):
        return "default"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _convert(key: str, raw: str):
    kind = FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError
        if kind == "int":
            return int(raw)
        if kind == "float":
            if key in WORLD_PARAMS and raw.lower() == "default":
                return math.nan
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: expected {kind}, got {raw!r}") from None


def _apply(base: dict, pairs: list[tuple[str, str]]) -> dict:
    out = dict(base)
    for key, raw in pairs:
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}; valid keys: {', '.join(sorted(FIELD_TYPES))}")
        out[key] = _convert(key, raw)
    return out


def _split(item: str, where: str) -> tuple[str, str]:
    if "=" not in item:
        raise ConfigError(f"{where}: expected key=value, got {item!r}")
    key, raw = item.split("=", 1)
    return key.strip(), raw.strip()


def parse_text(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    pairs = []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        pairs.append(_split(line, f"line {n}"))
    return ExperimentConfig(**_apply((base or ExperimentConfig()).as_dict(), pairs))


def parse_overrides(base: ExperimentConfig, items: list[str]) -> ExperimentConfig:
    return ExperimentConfig(**_apply(base.as_dict(), [_split(i, "override") for i in items]))


def parse_config(path: str | Path | None = None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Defaults, then the file (if any), then ``key=value`` overrides."""
    cfg = ExperimentConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cfg = parse_text(p.read_text(), cfg)
    return parse_overrides(cfg, overrides or [])
