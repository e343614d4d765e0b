"""
Run Configuration
One JSON RunConfig; precedence is CLI flags > config file > SACF_* environment > defaults
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from pydantic import BaseModel, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import InputError, MissingArtifactError
from .experts import AugConfig, ExpertHyper
from .gate_sca import GateHyper
from .pipeline import EvalMode
from .synth_gen import GenConfig


class PathsConfig(BaseModel):
    dataset_dir: Path = Path("runs/data")
    model_dir: Path = Path("runs/models")
    report_dir: Path = Path("runs/reports")

    def model_file(self, target: str) -> Path:
        return self.model_dir / f"{target}.json"


class RunConfig(BaseSettings):
    """Everything a run needs: paths, generator, hyperparameters, routing threshold, seed."""

    model_config = SettingsConfigDict(
        env_prefix="SACF_",
        env_file=".env",
        env_nested_delimiter="__",
        extra="forbid",
    )

    paths: PathsConfig = Field(default_factory=PathsConfig)
    gen: GenConfig = Field(default_factory=GenConfig)
    expert: ExpertHyper = Field(default_factory=ExpertHyper)
    gate: GateHyper = Field(default_factory=GateHyper)
    aug: AugConfig = Field(default_factory=AugConfig)
    tau: Optional[float] = Field(default=None, ge=0.0, le=1.0)  # None -> the gate's calibrated tau
    modes: List[EvalMode] = Field(default_factory=lambda: list(EvalMode))
    seed: int = Field(default=0, ge=0)
    threads: int = Field(default=1, ge=1)
    strict: bool = False
    filter_noninclusive: bool = True

    @model_validator(mode="after")
    def _propagate_seed(self):
        # sub-configs without an explicit seed inherit the global one
        for name in ("gen", "expert", "gate"):
            sub = getattr(self, name)
            if "seed" not in sub.model_fields_set:
                object.__setattr__(self, name, sub.model_copy(update={"seed": self.seed}))
        return self


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: invalid JSON config ({e.msg}, line {e.lineno})") from e
    if not isinstance(data, dict):
        raise InputError(f"{path}: config must be a JSON object")
    return data


def load_run_config(config_path: Optional[Union[str, Path]] = None,
                    overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Build a RunConfig; init kwargs (file + flags) outrank the environment."""
    data = read_config_file(config_path) if config_path else {}
    data = deep_merge(data, {k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return RunConfig(**data)
    except ValidationError as e:
        details = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise InputError(f"invalid configuration: {details}") from e
