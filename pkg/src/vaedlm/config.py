"""Run configuration: one strict JSON document covering data, training and evaluation."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field

from .evaluator import OodSpec
from .pde import PdeSpec
from .trainer import TrainConfig


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    pde: Optional[PdeSpec] = None
    n_samples: int = Field(500, ge=1)
    data_seed: int = 0
    train: TrainConfig = TrainConfig()
    scenarios: list[OodSpec] = Field(default_factory=list)
    eval_samples: int = Field(30, ge=1)
    out_dir: str = "runs"
    threads: Optional[int] = None


def load_run_config(path) -> RunConfig:
    return RunConfig.model_validate(json.loads(Path(path).read_text()))


def config_keys(model: type[BaseModel] = RunConfig, prefix: str = "") -> list:
    """Dotted names of every recognised key, for ``--help``."""
    keys = []
    for name, info in model.model_fields.items():
        ann = info.annotation
        inner = getattr(ann, "__args__", (ann,))
        sub = next((a for a in inner if isinstance(a, type) and issubclass(a, BaseModel)), None)
        if sub is None and isinstance(ann, type) and issubclass(ann, BaseModel):
            sub = ann
        if sub is not None:
            keys.extend(config_keys(sub, f"{prefix}{name}."))
        else:
            keys.append(f"{prefix}{name}")
    return keys
