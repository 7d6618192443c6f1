from .context_model import ContextModel
from .datastore import Datastore
from .detector import FasterRCNN
from .evaluator import Evaluator
from .memory import SpatialMemory
from .params import SGD, ParameterStore
from .rollout import Rollout
from .scene_generator import SceneGenerator
from .trainer import BASE_CHECKPOINT, MLP_CHECKPOINT, SMN_CHECKPOINT, Trainer, checkpoint_digest

__all__ = [
    "ContextModel",
    "Datastore",
    "FasterRCNN",
    "Evaluator",
    "SpatialMemory",
    "SGD",
    "ParameterStore",
    "Rollout",
    "SceneGenerator",
    "BASE_CHECKPOINT",
    "MLP_CHECKPOINT",
    "SMN_CHECKPOINT",
    "Trainer",
    "checkpoint_digest",
]
