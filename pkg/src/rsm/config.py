"""Flat ``key = value`` run configuration.

One option per line, UTF-8, '#' starts a comment. Unknown keys are
rejected. The resolved configuration is written next to training outputs
so eval/infer can rebuild the exact model.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import ConfigError
from .models import ModelConfig, TASK_CHANGE_DETECTION, TASK_SEGMENTATION

TASK_ALIASES = {
    "seg": TASK_SEGMENTATION,
    "segmentation": TASK_SEGMENTATION,
    "cd": TASK_CHANGE_DETECTION,
    "change_detection": TASK_CHANGE_DETECTION,
}


@dataclasses.dataclass
class RunConfig:
    task: str = TASK_SEGMENTATION
    data: str = ""
    out: str = ""
    seed: int = 0
    epochs: int = 30
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 1e-3
    patch: int = 4
    base_channels: int = 16
    blocks_per_stage: tuple = (1, 1, 2, 1, 1)
    state_dim: int = 8
    mode: str = "ossm"
    expansion: int = 2
    dw_kernel: int = 3
    scan_impl: str = "sequential"
    shared_direction_params: bool = True
    exact_discretization: bool = True
    checked: bool = False

    def model_config(self):
        return ModelConfig(
            task=self.task,
            patch=self.patch,
            base_channels=self.base_channels,
            blocks_per_stage=self.blocks_per_stage,
            state_dim=self.state_dim,
            mode=self.mode,
            expansion=self.expansion,
            dw_kernel=self.dw_kernel,
            shared_direction_params=self.shared_direction_params,
            scan_impl=self.scan_impl,
            exact_discretization=self.exact_discretization,
        )


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(key, raw):
    field = _FIELDS[key]
    raw = raw.strip()
    try:
        if field.type in ("int",):
            return int(raw)
        if field.type in ("float",):
            return float(raw)
        if field.type in ("bool",):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if field.type in ("tuple",):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if key == "task":
            if raw not in TASK_ALIASES:
                raise ValueError(raw)
            return TASK_ALIASES[raw]
        return raw
    except ValueError:
        raise ConfigError(f"config key '{key}': cannot parse value '{raw}'") from None


def parse_config_text(text, source="<config>"):
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got '{line}'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown config key '{key}'")
        values[key] = _coerce(key, raw)
    return values


def load_run_config(path=None, overrides=None):
    """Defaults, then file values, then overrides (CLI flags)."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        values.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    for key, v in (overrides or {}).items():
        if v is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key '{key}'")
        values[key] = _coerce(key, str(v)) if isinstance(v, str) else v
    return RunConfig(**values)


def write_run_config(cfg, path):
    lines = []
    for f in dataclasses.fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(i) for i in v)
        lines.append(f"{f.name} = {v}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
