"""
Run configuration: one YAML document (JSON is accepted, it is a YAML subset)
with a section per component, validated by the components' pydantic models.
"""

import copy
import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterable, List, Literal, Optional, Union

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, model_validator

from interface.base_context_model import ContextConfig
from interface.base_detector import DetectorConfig
from interface.base_evaluator import EvalConfig
from interface.base_memory import MemoryConfig
from interface.base_rollout import RolloutConfig
from interface.base_scene_generator import SceneConfig
from interface.base_trainer import TrainConfig
from util.errors import ConfigError
from util.tensor_io import config_digest

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_PATH = Path(__file__).parent.parent.parent / "config.yml"
PROFILES = ("toy", "paper-reference")

# Published constants; documentation only, far beyond desk scale.
PAPER_REFERENCE: Dict[str, Any] = {
    "scene": {"image_h": 640, "image_w": 640, "size_range": [8, 600]},
    "detector": {
        "feature_stride": 16,
        "backbone_channels": 512,
        "anchor_scales": [64.0, 128.0, 256.0],
        "proposals_k": 300,
        "proposals_top": 5000,
        "fc_dim": 4096,
    },
    "memory": {"prior_h": 20, "prior_w": 20, "depth": 256, "patch": 14},
    "context": {"channels": 256, "fc_dim": 2048},
    "rollout": {"iterations": 60, "n1": 50},
    "train": {"steps": 30000, "lr_decay_step": 20000, "unroll": 10},
}


class RunConfig(BaseModel):
    profile: Literal["toy", "paper-reference"] = "toy"
    seed: int = Field(0, ge=0)
    scene: SceneConfig = Field(default_factory=SceneConfig)
    detector: DetectorConfig = Field(default_factory=DetectorConfig)
    memory: MemoryConfig = Field(default_factory=MemoryConfig)
    context: ContextConfig = Field(default_factory=ContextConfig)
    rollout: RolloutConfig = Field(default_factory=RolloutConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def _cross_check(self) -> "RunConfig":
        stride = self.detector.feature_stride
        if self.scene.image_h % stride or self.scene.image_w % stride:
            raise ValueError(
                f"image extents {self.scene.image_h}x{self.scene.image_w} must be divisible by detector.feature_stride={stride}"
            )
        if stride & (stride - 1) or stride > 16:
            raise ValueError("detector.feature_stride must be a power of two no larger than 16")
        classes = len(self.scene.classes)
        if self.detector.num_classes is None:
            self.detector.num_classes = classes
        elif self.detector.num_classes != classes:
            raise ValueError(f"detector.num_classes={self.detector.num_classes} but scene lists {classes} classes")
        total = self.detector.total_anchors(self.scene.image_h, self.scene.image_w)
        if self.detector.proposals_k > total:
            raise ValueError(f"detector.proposals_k={self.detector.proposals_k} exceeds the {total} anchors (k <= K)")
        return self

    @property
    def num_classes(self) -> int:
        return len(self.scene.classes)

    def ensure_executable(self) -> None:
        if self.profile == "paper-reference":
            raise ConfigError(
                "profile 'paper-reference' records the published constants for documentation; it is out of desk scale and cannot run"
            )

    def digest(self, *sections: str) -> str:
        """Digest of the named sections, which is what a checkpoint is bound to."""
        payload = {name: getattr(self, name).model_dump(mode="json") for name in sections}
        payload["classes"] = list(self.scene.classes)
        payload["image"] = [self.scene.image_h, self.scene.image_w]
        return config_digest(payload)


def _deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def apply_override(document: Dict[str, Any], assignment: str) -> None:
    """Apply one `dotted.path=value` override; the value is parsed as a YAML scalar."""
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got '{assignment}'")
    key, raw = assignment.split("=", 1)
    path = [part for part in key.strip().split(".") if part]
    if not path:
        raise ConfigError(f"--set has an empty key in '{assignment}'")
    try:
        value = yaml.safe_load(raw) if raw.strip() else ""
    except yaml.YAMLError as e:
        raise ConfigError(f"--set {key}: cannot parse value '{raw}': {e}")
    node = document
    for part in path[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"--set {key}: '{part}' is not a section")
        node = child
    node[path[-1]] = value


def _validation_message(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "<root>"
        lines.append(f"  {location}: {item['msg']}")
    return "invalid configuration:\n" + "\n".join(lines)


def parse_document(text: str, source: str = "<string>") -> Dict[str, Any]:
    try:
        document = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark is not None else ""
        raise ConfigError(f"{source}: YAML syntax error{where}: {getattr(e, 'problem', e)}")
    if document is None:
        return {}
    if not isinstance(document, dict):
        raise ConfigError(f"{source}: top level must be a mapping of sections")
    return document


def build_run_config(document: Dict[str, Any]) -> RunConfig:
    if document.get("profile") == "paper-reference":
        document = _deep_merge(document, PAPER_REFERENCE)
    try:
        return RunConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(_validation_message(e))


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Iterable[str] = (),
    seed: Optional[int] = None,
    profile: Optional[str] = None,
) -> RunConfig:
    """Read the YAML file, apply `--set` overrides, then `--seed` and `--profile`."""
    path = Path(path) if path else DEFAULT_CONFIG_PATH
    if not path.exists():
        raise ConfigError(f"configuration file not found: {path}")
    document = parse_document(path.read_text(encoding="utf-8"), str(path))
    for assignment in overrides:
        apply_override(document, assignment)
    if seed is not None:
        document["seed"] = seed
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile '{profile}'; expected one of {', '.join(PROFILES)}")
        document["profile"] = profile
    config = build_run_config(document)
    logger.debug("Loaded configuration from %s (profile=%s, seed=%d)", path, config.profile, config.seed)
    return config


def dump_run_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False)


def thread_cap(default: int = 4) -> int:
    """Worker threads, capped by SMN_THREADS (environment or .env)."""
    load_dotenv()
    raw = os.getenv("SMN_THREADS")
    if not raw:
        return default
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"SMN_THREADS must be a positive integer, got '{raw}'")
    if value < 1:
        raise ConfigError(f"SMN_THREADS must be a positive integer, got '{raw}'")
    return value
