"""JSON run configuration with schema validation."""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import jsonschema

from .errors import DataError
from .pipeline import PipelineConfig

_num = {"type": "number", "exclusiveMinimum": 0}
_int = {"type": "integer", "minimum": 1}
_opt = lambda schema: {"oneOf": [schema, {"type": "null"}]}  # noqa: E731

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "interval": {"type": "number", "exclusiveMinimum": 0, "maximum": 180},
        "elevation": {"type": "number", "minimum": -89, "maximum": 89},
        "inversion_steps": _int,
        "timesteps": _int,
        "guidance": _num,
        "tau": _opt(_num),
        "resolution": _int,
        "latent_size": _int,
        "texture_resolution": _opt(_int),
        "opt_steps": {"type": "integer", "minimum": 0},
        "lr": _num,
        "seed": {"type": "integer", "minimum": 0},
        "camera_distance": _num,
        "fov": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 180},
        "max_views": _opt(_int),
        "incremental": {"type": "boolean"},
        "per_step_reference": {"type": "boolean"},
        "threads": _int,
        "mesh": {"type": "string"},
        "gaussians": {"type": "string"},
        "reference": {"type": "string"},
        "fixture": {"enum": ["sphere", "cube"]},
        "output": {"type": "string"},
    },
    "not": {"anyOf": [{"required": ["mesh", "gaussians"]},
                      {"required": ["mesh", "fixture"]},
                      {"required": ["gaussians", "fixture"]}]},
}

_ASSET_KEYS = ("mesh", "gaussians", "reference", "fixture", "output")


@dataclass(frozen=True)
class RunConfig:
    pipeline: PipelineConfig
    mesh: Path | None = None
    gaussians: Path | None = None
    reference: Path | None = None
    fixture: str | None = None
    output: Path | None = None


def parse_run_config(data: dict, base: Path | None = None) -> RunConfig:
    """Validate a decoded config object.  Relative paths resolve against ``base``."""
    try:
        jsonschema.validate(data, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise DataError(f"invalid run config at {where}: {exc.message}") from None
    names = {f.name for f in fields(PipelineConfig)}
    try:
        pipe = PipelineConfig(**{k: v for k, v in data.items() if k in names})
    except ValueError as exc:
        raise DataError(f"invalid run config: {exc}") from None
    paths = {}
    for key in ("mesh", "gaussians", "reference", "output"):
        if key in data:
            p = Path(data[key])
            paths[key] = p if p.is_absolute() or base is None else base / p
    return RunConfig(pipe, fixture=data.get("fixture"), **paths)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: {exc.msg}", offset=len(text[:exc.pos].encode())) from None
    return parse_run_config(data, path.parent)


def dump_run_config(cfg: RunConfig) -> dict:
    out = {f.name: getattr(cfg.pipeline, f.name) for f in fields(PipelineConfig)}
    out = {k: v for k, v in out.items() if v is not None}
    for key in _ASSET_KEYS:
        value = getattr(cfg, key)
        if value is not None:
            out[key] = str(value)
    return out
