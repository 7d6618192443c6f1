import copy

import numpy as np
import pytest

from impl import SceneGenerator
from smn_pipeline import build_models
from util.config import build_run_config

TINY_DOCUMENT = {
    "seed": 7,
    "scene": {
        "image_h": 32,
        "image_w": 32,
        "classes": ["circle", "square", "triangle"],
        "min_instances": 1,
        "max_instances": 3,
        "size_range": [6, 12],
        "train_images": 4,
        "test_images": 3,
        "rules": [],
    },
    "detector": {
        "feature_stride": 4,
        "backbone_channels": 4,
        "anchor_scales": [6.0, 12.0],
        "anchor_ratios": [1.0],
        "proposals_k": 12,
        "proposals_top": 40,
        "pool_size": 2,
        "fc_dim": 8,
        "rpn_batch": 16,
        "roi_batch": 8,
    },
    "memory": {"prior_h": 2, "prior_w": 2, "depth": 4, "patch": 3},
    "context": {"depth": 3, "channels": 4, "fc_dim": 8},
    "rollout": {"iterations": 3},
    "train": {
        "steps": 2,
        "base_steps": 2,
        "batch_images": 1,
        "rpn_sample_size": 16,
        "roi_sample_size": 8,
        "curriculum": [[2, 1]],
        "checkpoint_every": 100,
        "precision": "float64",
    },
    "eval": {
        "probe_images": 3,
        "protocols": [
            {"name": "N3-softmax", "cap": 3, "emission": "softmax", "proposal_mode": "non-aggressive-top-K"},
            {"name": "N3-hardmax", "cap": 3, "emission": "hardmax", "proposal_mode": "nms-top-k"},
        ],
    },
}


def tiny_overrides():
    """TINY_DOCUMENT as --set assignments, for driving the CLI."""
    out = []

    def walk(prefix, node):
        for key, value in node.items():
            path = f"{prefix}.{key}" if prefix else key
            if isinstance(value, dict):
                walk(path, value)
            else:
                out.append(f"{path}={_yaml_scalar(value)}")

    walk("", TINY_DOCUMENT)
    return out


def _yaml_scalar(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return "[" + ", ".join(_yaml_scalar(v) if not isinstance(v, dict) else _yaml_mapping(v) for v in value) + "]"
    return str(value)


def _yaml_mapping(mapping):
    return "{" + ", ".join(f"{k}: {_yaml_scalar(v)}" for k, v in mapping.items()) + "}"


@pytest.fixture
def tiny_document():
    return copy.deepcopy(TINY_DOCUMENT)


@pytest.fixture
def tiny_config(tiny_document):
    return build_run_config(tiny_document)


@pytest.fixture
def generator(tiny_config):
    return SceneGenerator(tiny_config.scene)


@pytest.fixture
def records(generator):
    return [generator.generate(seed) for seed in range(4)]


@pytest.fixture
def smn_models(tiny_config):
    return build_models(tiny_config, "smn")


@pytest.fixture
def mlp_models(tiny_config):
    return build_models(tiny_config, "mlp")


@pytest.fixture
def base_models(tiny_config):
    return build_models(tiny_config, "baseline")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
