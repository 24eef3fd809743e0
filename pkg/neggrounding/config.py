"""Tool configuration: built-in defaults, an optional JSON file, then CLI flags."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Mapping

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import MalformedConfig, UnknownKey
from .metrics import Protocol

logger = logging.getLogger(__name__)


class ToolConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    beta: float = Field(2.0, gt=0, allow_inf_nan=False)
    iou_thresh: float = Field(0.5, gt=0, le=1)
    score_thresh: float = Field(0.3, ge=0, le=1)
    retry_limit: int = Field(3, ge=0)
    parallelism: int = Field(8, ge=1)
    max_area_ratio: float = Field(0.85, gt=0, le=1)
    max_instances: int = Field(5, ge=1)
    max_dets: int = Field(100, ge=1)
    protocol: Protocol = Protocol.COCO
    lexicon_dir: Path | None = None
    cue_file: Path | None = None
    endpoint_env: str = "NEGGROUNDING_ENDPOINT"
    api_key_env: str = "NEGGROUNDING_API_KEY"
    generator_model: str = "gpt-4o"
    vqa_model: str = "gpt-4o"
    request_timeout: float = Field(60.0, gt=0)


def read_config_file(path: str | Path) -> dict[str, Any]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise MalformedConfig(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise MalformedConfig(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise MalformedConfig(f"config {path} must hold a JSON object")
    return data


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> ToolConfig:
    """Resolve a ToolConfig. Overrides set to None are treated as absent."""
    values: dict[str, Any] = read_config_file(path) if path else {}
    unknown = sorted(set(values) - set(ToolConfig.model_fields))
    if unknown:
        raise UnknownKey(f"unknown config key(s): {', '.join(unknown)}")
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        cfg = ToolConfig.model_validate(values)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(map(str, err['loc']))}: {err['msg']}" for err in e.errors())
        if any(err["type"] == "extra_forbidden" for err in e.errors()):
            raise UnknownKey(problems) from e
        raise MalformedConfig(problems) from e
    logger.info("config: %s", cfg.model_dump_json())
    return cfg
