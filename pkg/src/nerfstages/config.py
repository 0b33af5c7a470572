"""Run configuration: one file holds every knob of an experiment.

Loaded from JSON or YAML; unknown keys are rejected at every level. Values
not given fall back to the desk-scale defaults below.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import SchemaError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SceneSettings(_Strict):
    source: Literal["analytic", "manifest"] = "analytic"
    name: str = "tri-sphere"
    manifest: Optional[str] = None
    # separate held-out manifest; when absent the test set is the split remainder
    test_manifest: Optional[str] = None
    resolution: int = Field(64, ge=11)
    n_train: int = Field(5, ge=1)
    n_test: int = Field(30, ge=0)
    split_rule: Literal["first-n", "uniform"] = "first-n"
    radius: float = Field(4.0, gt=0)
    elevation_range: tuple[float, float] = (15.0, 60.0)
    n_quadrature: int = Field(512, ge=64)

    @model_validator(mode="after")
    def _manifest_given(self):
        if self.source == "manifest" and not self.manifest:
            raise ValueError("scene.source 'manifest' requires scene.manifest")
        return self


class PseudoSettings(_Strict):
    n_views: int = Field(40, ge=1)
    radius: Optional[float] = None  # defaults to scene.radius
    elevation_range: Optional[tuple[float, float]] = None
    include_sparse: bool = True
    score_against_oracle: bool = True


class RenderSettings(_Strict):
    near: float = Field(2.0, ge=0)
    far: float = 6.0
    n_samples: int = Field(64, ge=2)
    eval_samples: int = Field(64, ge=2)
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    bbox: Optional[tuple[tuple[float, float, float], tuple[float, float, float]]] = (
        (-1.5, -1.5, -1.5),
        (1.5, 1.5, 1.5),
    )

    @model_validator(mode="after")
    def _bounds(self):
        if not self.near < self.far:
            raise ValueError("render.near must be < render.far")
        return self


class FieldSettings(_Strict):
    kind: str
    options: dict = Field(default_factory=dict)


class StageSettings(_Strict):
    iterations: int = Field(1000, ge=0)
    rays_per_batch: int = Field(1024, ge=1)
    lr: Optional[float] = Field(None, ge=0)
    lr_decay: float = Field(0.1, gt=0)
    occlusion_weight: float = Field(0.0, ge=0)
    occlusion_k: int = Field(10, ge=1)
    freq_ramp_fraction: float = Field(0.0, ge=0, le=1)
    reset_optimizer: bool = True
    upsample: list[tuple[int, int]] = Field(default_factory=list)


def _stage1_default():
    return StageSettings(
        iterations=3000, rays_per_batch=256, lr=5e-3, lr_decay=0.1,
        occlusion_weight=0.01, occlusion_k=10, freq_ramp_fraction=0.9,
    )


def _stage2_default():
    return StageSettings(iterations=2000, rays_per_batch=512, lr=0.02, lr_decay=0.1)


def _stage3_default():
    # lr None: 0.1x the stage-2 rate
    return StageSettings(iterations=500, rays_per_batch=512, lr=None, lr_decay=0.1)


class RunConfig(_Strict):
    scene: SceneSettings = Field(default_factory=SceneSettings)
    pseudo: PseudoSettings = Field(default_factory=PseudoSettings)
    render: RenderSettings = Field(default_factory=RenderSettings)
    reg_field: FieldSettings = Field(default_factory=lambda: FieldSettings(kind="coordnet"))
    fast_field: FieldSettings = Field(default_factory=lambda: FieldSettings(kind="vm"))
    stage1: StageSettings = Field(default_factory=_stage1_default)
    stage2: StageSettings = Field(default_factory=_stage2_default)
    stage3: StageSettings = Field(default_factory=_stage3_default)
    stages: list[Literal[1, 2, 3]] = Field(default_factory=lambda: [1, 2, 3])
    baseline: Optional[Literal["fast-sparse"]] = None
    seed: int = 0
    threads: int = Field(1, ge=1)

    @model_validator(mode="after")
    def _stage_chain(self):
        st = sorted(set(self.stages))
        if not st or st != list(range(1, len(st) + 1)):
            raise ValueError("stages must be a prefix of [1, 2, 3]")
        self.stages = st
        return self

    def stage3_lr(self) -> float:
        if self.stage3.lr is not None:
            return self.stage3.lr
        return 0.1 * (self.stage2.lr if self.stage2.lr is not None else 0.02)

    def snapshot(self) -> dict:
        """Config as plain JSON data, excluding execution-only knobs."""
        return self.model_dump(mode="json", exclude={"threads"})

    def digest(self) -> str:
        blob = json.dumps(self.snapshot(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _format_error(exc: ValidationError) -> SchemaError:
    err = exc.errors()[0]
    key = ".".join(str(p) for p in err["loc"])
    return SchemaError(err["msg"], key)


def _deep_merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "options":
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_config(data: dict) -> RunConfig:
    """Validate raw config data layered over the full default config."""
    if data is not None and not isinstance(data, dict):
        raise SchemaError("config must be a mapping")
    try:
        merged = _deep_merge(RunConfig().model_dump(mode="json"), data or {})
        return RunConfig.model_validate(merged)
    except ValidationError as exc:
        raise _format_error(exc) from exc


def read_config_file(path) -> dict:
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() in (".yaml", ".yml"):
        data = yaml.safe_load(text)
    else:
        data = json.loads(text)
    if data is not None and not isinstance(data, dict):
        raise SchemaError("config file must hold a mapping at top level")
    return data or {}


def merge_overrides(data: dict, overrides: dict) -> dict:
    """Apply dotted-key overrides (``{"stage1.iterations": 10}``) to raw config data."""
    out = json.loads(json.dumps(data))
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = out
        keys = dotted.split(".")
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return out


def load_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    data = read_config_file(path) if path else {}
    if overrides:
        data = merge_overrides(data, overrides)
    return parse_config(data)
