"""Experiment configuration: one YAML document with fixed sections.

Unknown keys are rejected with the line they appear on. Command-line
overrides ``--section.key=value`` are parsed as YAML scalars and take
precedence over the file, which takes precedence over defaults.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .exceptions import ConfigError, InvalidArgumentError, OutOfScopeError
from .refsolver import Scenario
from .train import TrainConfig
from .zoo.config import OUT_OF_SCOPE, ArchConfig, preset

SECTIONS = ("scenario", "pipeline", "arch", "stepper", "train", "eval")
TOP_LEVEL = SECTIONS + ("seed", "output")

PIPELINE_DEFAULTS = {"boundaries": None, "fractions": [0.7, 0.1], "horiz_factor": 1,
                     "vert_groups": None, "time_factor": 1, "store_dtype": "<f8"}
ARCH_DEFAULTS = {"id": "swin", "size": "tiny"}
STEPPER_DEFAULTS = {"centflux": True, "massfixer": True}
EVAL_DEFAULTS = {"run_days": 90, "mode": "quarterly", "max_runs": None, "decorrelation": "quarterly",
                 "rollout_steps": None, "stations": True, "lead": 40, "ablation": []}


def _key_lines(text):
    """Map ``(section, key)`` and ``(key,)`` tuples to 1-based line numbers."""
    lines = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"malformed YAML: {exc}", line=mark.line + 1 if mark else None) from exc
    if root is None:
        return lines
    if not isinstance(root, yaml.MappingNode):
        raise ConfigError("configuration must be a mapping", line=root.start_mark.line + 1)
    for k, v in root.value:
        lines[(k.value,)] = k.start_mark.line + 1
        if isinstance(v, yaml.MappingNode):
            for k2, _ in v.value:
                lines[(k.value, k2.value)] = k2.start_mark.line + 1
    return lines


def parse_override(flag):
    """``--section.key=value`` -> ``(("section", "key"), value)``."""
    body = flag[2:] if flag.startswith("--") else flag
    if "=" not in body:
        raise ConfigError(f"override {flag!r} must look like --section.key=value")
    path, raw = body.split("=", 1)
    try:
        value = yaml.safe_load(raw) if raw != "" else ""
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {flag!r}: cannot parse value") from exc
    return tuple(path.split(".")), value


def _known_keys(section):
    if section == "scenario":
        return {f.name for f in fields(Scenario)}
    if section == "train":
        return {f.name for f in fields(TrainConfig)}
    if section == "arch":
        return {f.name for f in fields(ArchConfig)} | {"size"}
    return set({"pipeline": PIPELINE_DEFAULTS, "stepper": STEPPER_DEFAULTS, "eval": EVAL_DEFAULTS}[section])


@dataclass
class ExperimentConfig:
    scenario: Scenario
    pipeline: dict
    arch: ArchConfig
    arch_size: str
    stepper: dict
    train: TrainConfig
    eval: dict
    seed: int = 0
    output: str = "out"
    raw: dict = field(default_factory=dict)

    @property
    def hash(self):
        return config_hash(self.resolved())

    @classmethod
    def from_text(cls, text, overrides=()):
        lines = _key_lines(text)
        data = yaml.safe_load(text) if text.strip() else {}
        return cls.from_dict(data or {}, overrides, lines)

    @classmethod
    def load(cls, path, overrides=()):
        return cls.from_text(Path(path).read_text(), overrides)

    @classmethod
    def from_dict(cls, data, overrides=(), lines=None):
        lines = lines or {}
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a mapping", line=1)
        data = copy.deepcopy(data)
        for key in data:
            if key not in TOP_LEVEL:
                raise ConfigError(f"unknown top-level key {key!r}", line=lines.get((key,)))
        for sec in SECTIONS:
            sec_val = data.get(sec) or {}
            if not isinstance(sec_val, dict):
                raise ConfigError(f"section {sec!r} must be a mapping", line=lines.get((sec,)))
            data[sec] = sec_val
            for key in sec_val:
                if key not in _known_keys(sec):
                    raise ConfigError(f"unknown key {sec}.{key}", line=lines.get((sec, key)))
        for ov in overrides:
            path, value = parse_override(ov) if isinstance(ov, str) else ov
            if len(path) == 1 and path[0] in ("seed", "output"):
                data[path[0]] = value
            elif len(path) == 2 and path[0] in SECTIONS and path[1] in _known_keys(path[0]):
                data[path[0]][path[1]] = value
            else:
                raise ConfigError(f"unknown override key {'.'.join(path)}")
        return cls._build(data, lines)

    @classmethod
    def _build(cls, data, lines):
        seed = int(data.get("seed", 0))
        arch_d = {**ARCH_DEFAULTS, **data["arch"]}
        if arch_d["id"] in OUT_OF_SCOPE:
            raise OutOfScopeError(f"architecture {arch_d['id']!r} is out of scope for this package",
                                  line=lines.get(("arch", "id")))

        def guarded(section, fn):
            try:
                return fn()
            except ConfigError:
                raise
            except (InvalidArgumentError, TypeError, ValueError) as exc:
                raise ConfigError(f"{section}: {exc}", line=lines.get((section,))) from exc

        scen_d = {"seed": seed, **data["scenario"]}
        scenario = guarded("scenario", lambda: Scenario.from_dict(scen_d))
        size = arch_d.pop("size")
        arch = guarded("arch", lambda: preset(arch_d.pop("id"), size, **arch_d))
        train_d = {"seed": seed, **data["train"]}
        train = guarded("train", lambda: TrainConfig.from_dict(train_d))
        pipeline = {**PIPELINE_DEFAULTS, **data["pipeline"]}
        stepper = {**STEPPER_DEFAULTS, **data["stepper"]}
        ev = {**EVAL_DEFAULTS, **data["eval"]}
        if ev["mode"] not in ("quarterly", "stride"):
            raise ConfigError(f"eval.mode must be quarterly or stride, got {ev['mode']!r}",
                              line=lines.get(("eval", "mode")))
        raw = {k: data[k] for k in SECTIONS}
        raw["seed"] = seed
        raw["output"] = str(data.get("output", "out"))
        return cls(scenario, pipeline, arch, size, stepper, train, ev, seed, raw["output"], raw)

    def resolved(self):
        """Fully expanded settings, suitable for rerunning the experiment."""
        arch = self.arch.to_dict()
        arch["size"] = self.arch_size
        return {"scenario": self.scenario.to_dict(), "pipeline": dict(self.pipeline), "arch": arch,
                "stepper": dict(self.stepper), "train": self.train.to_dict(), "eval": dict(self.eval),
                "seed": self.seed, "output": self.output}


def config_hash(d):
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()
