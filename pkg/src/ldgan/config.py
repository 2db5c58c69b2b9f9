"""Run configuration: one JSON document covering every pipeline stage.

A config file mirrors the dataclass tree below, section by section.  Every
field has a default, so an empty document (or no file at all) describes a
valid run.  Unknown keys are rejected instead of silently ignored, which
catches typos before they cost a training run.  CLI flags override single
keys after the file is parsed.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .autoencoder import AETrainConfig
from .dataio import SynthConfig
from .errors import ConfigError
from .gan import GanTrainConfig
from .recovery import TaskTrainConfig

TASK_KINDS = ("csi", "rgb", "sisr")

# CLI task names against the operator module's internal kind strings.
OPERATOR_OF_TASK = {"csi": "cassi", "rgb": "rgb", "sisr": "sisr"}


@dataclass
class OperatorConfig:
    """Which degradation the recovery stage inverts, plus its parameters."""

    task: str = "csi"
    transmittance: float = 0.5  # coded aperture open fraction (csi)
    k_s: int = 4  # spatial decimation kernel (sisr)
    k_l: int = 4  # spectral decimation factor (sisr)

    def validate(self):
        if self.task not in TASK_KINDS:
            raise ConfigError(f"task must be one of {TASK_KINDS}, got '{self.task}'")
        if not 0.0 < self.transmittance <= 1.0:
            raise ConfigError(f"transmittance must lie in (0, 1], got {self.transmittance}")
        if self.k_s < 1 or self.k_l < 1:
            raise ConfigError("k_s and k_l must be >= 1")


@dataclass
class AnalysisConfig:
    """Toggles for the endmember and PCA summaries of generated pools."""

    q: int = 4  # endmembers extracted per source
    components: int = 3  # principal components reported
    samples: int = 100  # cubes pooled per source, capped at pool size

    def validate(self):
        if self.q < 1 or self.components < 1:
            raise ConfigError("q and components must be >= 1")
        if self.samples < 2:
            raise ConfigError("samples must be >= 2 (pca needs at least two)")


@dataclass
class RunConfig:
    """Everything one run needs, from synthesis through analysis."""

    seed: int = 0
    out: str = "run"
    deterministic: bool = False
    test_count: int = 40
    sample_count: int = 0  # generated pool size; 0 means match the train split
    synth: SynthConfig = field(default_factory=SynthConfig)
    operator: OperatorConfig = field(default_factory=OperatorConfig)
    ae: AETrainConfig = field(default_factory=AETrainConfig)
    gan: GanTrainConfig = field(default_factory=GanTrainConfig)
    task: TaskTrainConfig = field(default_factory=TaskTrainConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def validate(self):
        if self.test_count < 1:
            raise ConfigError("test_count must be >= 1")
        if self.sample_count < 0:
            raise ConfigError("sample_count must be >= 0")
        for section in (self.synth, self.operator, self.ae, self.gan,
                        self.task, self.analysis):
            section.validate()
        if self.ae.channels >= self.synth.l:
            raise ConfigError(
                f"ae.channels={self.ae.channels} must stay below synth.l={self.synth.l}"
            )


_SECTIONS = {
    "synth": SynthConfig,
    "operator": OperatorConfig,
    "ae": AETrainConfig,
    "gan": GanTrainConfig,
    "task": TaskTrainConfig,
    "analysis": AnalysisConfig,
}


def _checked(cls, name, key, value):
    """Reject JSON values whose type disagrees with the field default."""
    want = type(getattr(cls(), name))
    label = f"{key}.{name}" if key else name
    if want is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"config key '{label}' must be a boolean")
    elif want is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key '{label}' must be an integer")
    elif want is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key '{label}' must be a number")
        value = float(value)
    elif want is str:
        if not isinstance(value, str):
            raise ConfigError(f"config key '{label}' must be a string")
    return value


def _build_section(cls, data, key, default_seed):
    names = [f.name for f in dataclasses.fields(cls)]
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"unknown config key '{key}.{unknown[0]}'")
    kwargs = {}
    for name in names:
        if name not in data:
            continue
        value = data[name]
        if name == "snr_db" and value is None:
            value = math.inf  # JSON has no Infinity literal; null means clean
        else:
            value = _checked(cls, name, key, value)
        kwargs[name] = value
    if "seed" in names and "seed" not in kwargs:
        kwargs["seed"] = default_seed  # the run seed cascades unless pinned
    return cls(**kwargs)


def config_from_dict(data) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    top = [f.name for f in dataclasses.fields(RunConfig)]
    unknown = sorted(set(data) - set(top))
    if unknown:
        raise ConfigError(f"unknown config key '{unknown[0]}'")
    kwargs = {}
    for name in ("seed", "out", "deterministic", "test_count", "sample_count"):
        if name in data:
            kwargs[name] = _checked(RunConfig, name, "", data[name])
    seed = kwargs.get("seed", 0)
    for name, cls in _SECTIONS.items():
        section = data.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"config section '{name}' must be a JSON object")
        kwargs[name] = _build_section(cls, section, name, seed)
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    d = dataclasses.asdict(cfg)
    if math.isinf(d["task"]["snr_db"]):
        d["task"]["snr_db"] = None  # keep the serialized copy strict JSON
    return d


def load_config(path=None) -> RunConfig:
    """Parse a JSON config file; ``None`` gives the all-defaults run."""
    if path is None:
        return config_from_dict({})
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})")
    return config_from_dict(data)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(
        json.dumps(config_to_dict(cfg), indent=1, sort_keys=True) + "\n"
    )


def apply_overrides(cfg: RunConfig, *, seed=None, out=None, deterministic=False,
                    channels=None, mu_ae=None, mu_gan=None, fraction=None,
                    target=None, task=None, source=None) -> RunConfig:
    """Apply CLI flag overrides; a --seed override cascades into every stage."""
    c = copy.deepcopy(cfg)
    if seed is not None:
        c.seed = int(seed)
        for section in (c.synth, c.ae, c.gan, c.task):
            section.seed = int(seed)
    if out is not None:
        c.out = str(out)
    if deterministic:
        c.deterministic = True
    if channels is not None:
        c.ae.channels = int(channels)
    if mu_ae is not None:
        c.ae.mu_ae = float(mu_ae)
    if mu_gan is not None:
        c.gan.mu_gan = float(mu_gan)
    if fraction is not None:
        c.task.fraction = float(fraction)
    if target is not None:
        c.gan.target = str(target)
    if task is not None:
        c.operator.task = str(task)
    if source is not None:
        c.task.source = str(source)
    c.validate()
    return c
