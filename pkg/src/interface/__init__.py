from .base_context_model import BaseContextModel, ContextConfig, FusedScores, HeadScores, MemoryLogits
from .base_datastore import BaseDatastore
from .base_detector import BaseDetector, BoundingBox, Detection, DetectorConfig, RegionScores, RoI
from .base_evaluator import METRIC_COLUMNS, BaseEvaluator, EvalConfig, EvalResult, Protocol
from .base_memory import BaseMemory, MemoryConfig, MemoryState
from .base_rollout import BaseRollout, IterationRecord, RolloutConfig, RolloutTrace
from .base_scene_generator import BaseSceneGenerator, ContextRule, SceneConfig, SceneRecord
from .base_trainer import BaseTrainer, IterationTargets, LossBreakdown, TrainConfig

__all__ = [
    "BaseContextModel",
    "ContextConfig",
    "FusedScores",
    "HeadScores",
    "MemoryLogits",
    "BaseDatastore",
    "BaseDetector",
    "BoundingBox",
    "Detection",
    "DetectorConfig",
    "RegionScores",
    "RoI",
    "METRIC_COLUMNS",
    "BaseEvaluator",
    "EvalConfig",
    "EvalResult",
    "Protocol",
    "BaseMemory",
    "MemoryConfig",
    "MemoryState",
    "BaseRollout",
    "IterationRecord",
    "RolloutConfig",
    "RolloutTrace",
    "BaseSceneGenerator",
    "ContextRule",
    "SceneConfig",
    "SceneRecord",
    "BaseTrainer",
    "IterationTargets",
    "LossBreakdown",
    "TrainConfig",
]
