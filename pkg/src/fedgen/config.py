"""Run configuration: INI files with one section per module.

Resolution order, later wins: built-in defaults, a named preset, a config
file, then ``section.key=value`` overrides from the command line.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

from fedgen.core import LearnerConfig
from fedgen.envgen import DisturbanceParams
from fedgen.rollout import SimConfig

PRESETS = ("full", "desk", "synthetic")


@dataclass(frozen=True)
class RunSection:
    mode: str = "motion"
    learners: int = 4
    rounds: int = 300
    seed: int = 0
    eval_size: int = 500
    eval_seed: int = 1
    workers: int = 1
    out: str = "runs/default"


@dataclass(frozen=True)
class MotionSection:
    layers: tuple[int, ...] = (24, 16, 16, 1)
    sigma_init: float = 0.05
    sigma_floor: float = 1e-3
    pairs: int = 15
    resample_each_round: bool = False
    corpus: str = ""
    grad_lipschitz: float = 0.0


@dataclass(frozen=True)
class SyntheticSection:
    kind: str = "double_well"
    dim: int = 1
    n_wells: int = 4
    m1: float = -1.0
    d1: float = 0.1
    m2: float = 1.0
    d2: float = 0.65
    base: float = 0.7
    a: float = 1.0
    curvature: float = 0.1
    sigma_y: float = 0.0
    sigma_z: float = 0.01
    noise: str = "bernoulli"
    init_low: float = -2.0
    init_high: float = 2.0


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    disturbance: DisturbanceParams = field(default_factory=DisturbanceParams)
    motion: MotionSection = field(default_factory=MotionSection)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)

    def __post_init__(self):
        if self.run.mode not in ("motion", "synthetic"):
            raise ValueError(f"run.mode must be motion or synthetic, got {self.run.mode!r}")
        if self.run.learners < 1 or self.run.rounds < 1 or self.run.eval_size < 1:
            raise ValueError("learners, rounds and eval_size must be positive")
        if self.motion.layers[0] != 24 or self.motion.layers[-1] != 1:
            raise ValueError(f"policy layers must start at 24 and end at 1, got {self.motion.layers}")
        if self.motion.sigma_init < self.motion.sigma_floor:
            raise ValueError("sigma_init must not be below sigma_floor")
        if self.motion.corpus and not Path(self.motion.corpus).is_dir():
            raise ValueError(f"corpus directory {self.motion.corpus!r} does not exist")
        if self.synthetic.kind not in ("double_well", "quadratic_well", "multi_well"):
            raise ValueError(f"unknown synthetic kind {self.synthetic.kind!r}")

    def with_run(self, **kw) -> "RunConfig":
        return replace(self, run=replace(self.run, **kw))

    def with_learner(self, **kw) -> "RunConfig":
        return replace(self, learner=replace(self.learner, **kw))


# section name in the file -> attribute of RunConfig
SECTIONS = {
    "run": "run",
    "learner": "learner",
    "sim": "sim",
    "disturbance": "disturbance",
    "motion": "motion",
    "synthetic": "synthetic",
}


def _parse(value: str, like):
    if isinstance(like, bool):
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(int(v) for v in value.replace(" ", "").split(",") if v)
    return value.strip()


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def apply_overrides(cfg: RunConfig, items: dict[str, dict[str, str]]) -> RunConfig:
    updates = {}
    for section, values in items.items():
        if section not in SECTIONS:
            raise ValueError(f"unknown config section [{section}]")
        current = updates.get(SECTIONS[section], getattr(cfg, SECTIONS[section]))
        known = {f.name: getattr(current, f.name) for f in fields(current)}
        changes = {}
        for key, raw in values.items():
            if key not in known:
                raise ValueError(f"unknown key {key!r} in section [{section}]")
            try:
                changes[key] = _parse(raw, known[key])
            except ValueError as exc:
                raise ValueError(f"[{section}] {key}: {exc}") from exc
        updates[SECTIONS[section]] = replace(current, **changes)
    return replace(cfg, **updates)


def parse_ini(text: str) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string(text)
    return {s: dict(parser[s]) for s in parser.sections()}


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")
    return resources.files("fedgen").joinpath("presets", f"{name}.cfg").read_text()


def parse_set(pairs: Sequence[str]) -> dict[str, dict[str, str]]:
    """``["learner.q=0.1", ...]`` -> ``{"learner": {"q": "0.1"}}``."""
    out: dict[str, dict[str, str]] = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ValueError(f"override must look like section.key=value, got {pair!r}")
        out.setdefault(section.strip(), {})[name.strip()] = value
    return out


def load_config(
    preset: str | None = None, path: str | Path | None = None, overrides: Sequence[str] = ()
) -> RunConfig:
    cfg = RunConfig()
    if preset:
        cfg = apply_overrides(cfg, parse_ini(preset_text(preset)))
    if path:
        cfg = apply_overrides(cfg, parse_ini(Path(path).read_text()))
    if overrides:
        cfg = apply_overrides(cfg, parse_set(overrides))
    return cfg


def dump_config(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, attr in SECTIONS.items():
        obj = getattr(cfg, attr)
        parser[section] = {f.name: _format(getattr(obj, f.name)) for f in fields(obj)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
