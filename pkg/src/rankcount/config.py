"""Run configuration: defaults, YAML file values and command-line overrides.

Every resolved value remembers where it came from (``default``, ``file`` or
``flag``). ``dump`` writes YAML that loads back to the same values.
"""
from __future__ import annotations

import copy
import os
import zlib
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .exceptions import RankCountError
from .synth import (
    COUNT_NEGATIVE,
    COUNT_PROMPT,
    EMPTY_NEGATIVE,
    EMPTY_PROMPT,
    RANKING_NEGATIVE,
    RANKING_PROMPT,
)

ROOT_ENV = "RANKCOUNT_ROOT"

DEFAULTS: dict = {
    "seed": 0,
    "data": {
        "image_height": 96,
        "image_width": 96,
        "n_sources": 400,
        "max_count": 200,
        "max_distractors": 30,
        "variants_per_source": 4,
        "removal_range": [0.3, 0.95],
        "noisy_counts": [1, 5, 10, 50, 100, 200],
        "per_count": 60,
        "empty_scenes": 60,
        "noise_sigma": 0.5,
        "noisy_max_distractors": 2,
        "n_test": 100,
    },
    "diffusion": {
        "backend": "toy",
        "entry_point": None,
        "strength": 0.45,
        "guidance_scale": 7.5,
        "steps": 50,
        "ranking_prompt": RANKING_PROMPT,
        "ranking_negative_prompt": RANKING_NEGATIVE,
        "count_prompt": COUNT_PROMPT,
        "count_negative_prompt": COUNT_NEGATIVE,
        "empty_prompt": EMPTY_PROMPT,
        "empty_negative_prompt": EMPTY_NEGATIVE,
    },
    "split": {"validation_fraction": 0.15},
    "augment": {"horizontal_flip_prob": 0.5, "brightness_jitter": 0.2},
    "encoder": {
        "architecture": "toy_cnn",
        "feature_dim": 64,
        "input_size": [48, 48],
        "backbone_weights": None,
    },
    "pretrain": {"epochs": 40, "learning_rate": 5e-5, "batch_size": 8},
    "probe": {"epochs": 40, "learning_rate": 1e-2, "batch_size": 32},
    "evaluate": {"patch_k": 1, "sweep_ks": [1, 2, 3, 4]},
}


class ConfigError(RankCountError):
    exit_code = 1


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value: Any, default: Any) -> Any:
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, (list, tuple))
        value = list(value) if ok else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"config key {key!r}: expected {type(default).__name__}, got {value!r}")
    return value


class RunConfig:
    def __init__(self, values: dict, sources: dict):
        self.values = values
        self.sources = sources

    def get(self, key: str) -> Any:
        node = self.values
        for part in key.split("."):
            node = node[part]
        return node

    def section(self, name: str) -> dict:
        return copy.deepcopy(self.values[name])

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    def stage_seed(self, stage: str) -> int:
        """Independent seed per stage, derived from the master seed."""
        ss = np.random.SeedSequence([self.seed, zlib.crc32(stage.encode())])
        return int(ss.generate_state(1)[0] & 0x7FFFFFFF)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.values)

    def dump(self, provenance: bool = True) -> str:
        lines = []

        def fmt(v):
            return yaml.safe_dump(v, default_flow_style=True, width=1 << 16).strip().removesuffix("...").strip()

        def walk(node, prefix, indent):
            for k, v in node.items():
                key = f"{prefix}{k}"
                pad = "  " * indent
                if isinstance(v, dict):
                    lines.append(f"{pad}{k}:")
                    walk(v, key + ".", indent + 1)
                else:
                    tag = f"  # {self.sources[key]}" if provenance else ""
                    lines.append(f"{pad}{k}: {fmt(v)}{tag}")

        walk(self.values, "", 0)
        return "\n".join(lines) + "\n"

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values


def parse_assignment(text: str) -> tuple[str, Any]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"expected KEY=VALUE, got {text!r}")
    return key.strip(), yaml.safe_load(raw) if raw.strip() else None


def load_config(path=None, flags: Optional[dict] = None) -> RunConfig:
    """Resolve defaults <- file <- flags. Unknown keys are rejected."""
    flat_default = _flatten(DEFAULTS)
    values = dict(flat_default)
    sources = {k: "default" for k in values}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must be a mapping")
        for k, v in _flatten(data).items():
            if k not in flat_default:
                raise ConfigError(f"unknown config key {k!r} in {path}")
            values[k] = _coerce(k, v, flat_default[k])
            sources[k] = "file"
    for k, v in (flags or {}).items():
        if k not in flat_default:
            raise ConfigError(f"unknown config key {k!r}")
        values[k] = _coerce(k, v, flat_default[k])
        sources[k] = "flag"
    nested: dict = {}
    for k, v in values.items():
        node = nested
        *parents, leaf = k.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = v
    return RunConfig(nested, sources)


def show_config(config: RunConfig) -> str:
    return config.dump(provenance=True)


def artifact_root(explicit=None) -> Path:
    if explicit:
        return Path(explicit)
    return Path(os.environ.get(ROOT_ENV, "runs"))
