import numpy as np
import pytest

from autograd import Tensor
from autograd import functional as F
from impl import ContextModel
from interface import ContextConfig
from smn_pipeline import build_models
from util.config import build_run_config


@pytest.fixture
def context(smn_models):
    return smn_models.context


@pytest.fixture
def grid(rng):
    return Tensor(rng.uniform(-1.0, 1.0, size=(8, 8, 4)))


ROIS = np.array([[0.0, 0.0, 12.0, 12.0], [8.0, 4.0, 30.0, 20.0]])


def models_with(document, design):
    document["context"]["design"] = design
    return build_models(build_run_config(document), "smn")


def leaf(rng, shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


class TestTower:
    @pytest.mark.parametrize("depth, period, blocks", [(3, 2, [[2, 3]]), (5, 2, [[2, 3], [4, 5]]), (4, 2, [[2, 3], [4]]), (1, 1, [])])
    def test_residual_blocks(self, tiny_config, depth, period, blocks):
        config = ContextConfig(depth=depth, residual_period=period, channels=2, fc_dim=4)
        model = ContextModel(config, tiny_config.detector, 2, build_models(tiny_config, "baseline").params)
        assert model.residual_blocks() == blocks

    def test_depth_below_the_period_is_rejected(self):
        with pytest.raises(ValueError):
            ContextConfig(depth=1, residual_period=2)

    def test_output_matches_the_feature_map(self, context, grid, tiny_config):
        assert context.context_forward(grid).shape == (8, 8, tiny_config.context.channels)


class TestHeads:
    def test_memory_head_shapes(self, context, grid, rng, tiny_config):
        m_conv = context.context_forward(grid)
        objectness, deltas = context.memory_rpn(m_conv)
        cls_logits, cls_deltas = context.memory_classifier(m_conv, ROIS, Tensor(rng.normal(size=(2, tiny_config.detector.fc_dim))))
        anchors = 8 * 8 * tiny_config.detector.anchors_per_location
        assert objectness.shape == (anchors,)
        assert deltas.shape == (anchors, 4)
        assert cls_logits.shape == (2, 4)
        assert cls_deltas.shape == (2, 12)

    def test_reconstruction_heads_read_memory_alone(self, context, grid):
        heads = context.reconstruction_heads(context.context_forward(grid), ROIS)
        assert heads.cls_logits.shape == (2, 4)
        assert heads.cls_deltas.shape == (2, 12)

    def test_context_baseline_has_no_reconstruction_branch(self, mlp_models):
        assert not mlp_models.params.names("mlp/context/recon")
        assert mlp_models.params.names("mlp/context/cls")

    def test_head_scale_shrinks_the_output_weights(self, tiny_document):
        small = build_models(build_run_config(tiny_document), "smn").params
        tiny_document["context"]["head_init_scale"] = 1.0
        large = build_models(build_run_config(tiny_document), "smn").params
        for name in ("smn/context/cls/w", "smn/context/rpn/cls/w"):
            np.testing.assert_allclose(10.0 * small[name].data, large[name].data)


class TestDesigns:
    @pytest.mark.parametrize(
        "design, trains_base, uses, stops",
        [
            ("a", True, (True, True), (False, False)),
            ("b", True, (True, True), (False, False)),
            ("c", True, (True, True), (False, True)),
            ("d", False, (False, True), (True, True)),
        ],
    )
    def test_switches(self, tiny_document, design, trains_base, uses, stops):
        context = models_with(tiny_document, design).context
        assert context.trains_base is trains_base
        assert (context.uses_memory(0), context.uses_memory(1)) == uses
        assert (context.stops_base(0), context.stops_base(1)) == stops

    def test_context_baseline_always_reads_and_never_trains_the_detector(self, mlp_models):
        context = mlp_models.context
        assert not context.trains_base
        assert context.uses_memory(0) and context.stops_base(0)


class TestFuse:
    def test_first_iteration_is_the_detector_alone(self, context, rng):
        base, memory = leaf(rng, (3, 4)), leaf(rng, (3, 4))
        scores = context.fuse(base, memory, 0)
        assert scores.fused is base and scores.memory is None

    def test_later_iterations_add_the_memory(self, context, rng):
        base, memory = leaf(rng, (3, 4)), leaf(rng, (3, 4))
        for iteration in (1, 5):
            fused = context.fuse(base, memory, iteration).fused
            np.testing.assert_array_equal(fused.data, base.data + memory.data)

    def test_zero_memory_leaves_the_scores_alone(self, context, rng):
        base = leaf(rng, (3, 4))
        np.testing.assert_array_equal(context.fuse(base, Tensor(np.zeros((3, 4))), 1).fused.data, base.data)

    def test_detector_branch_gets_no_gradient_after_the_first_iteration(self, context, rng):
        base, memory = leaf(rng, (3, 4)), leaf(rng, (3, 4))
        F.sum_all(context.fuse(base, memory, 1).fused).backward()
        np.testing.assert_array_equal(base.grad_or_zeros(), 0.0)
        np.testing.assert_array_equal(memory.grad, 1.0)

    def test_joint_design_back_propagates_into_the_detector(self, tiny_document, rng):
        context = models_with(tiny_document, "b").context
        base, memory = leaf(rng, (3, 4)), leaf(rng, (3, 4))
        F.sum_all(context.fuse(base, memory, 1).fused).backward()
        np.testing.assert_array_equal(base.grad, 1.0)

    def test_design_a_replaces_the_detector_scores(self, tiny_document, rng):
        context = models_with(tiny_document, "a").context
        base, memory = leaf(rng, (3, 4)), leaf(rng, (3, 4))
        assert context.fuse(base, memory, 0).fused is memory

    def test_missing_memory_falls_back_to_the_detector(self, tiny_document, rng):
        base = leaf(rng, (3, 4))
        for design in ("a", "b", "c", "d"):
            assert models_with(tiny_document, design).context.fuse(base, None, 2).fused is base


def test_region_pooling_uses_the_detector_cells(context, grid, smn_models, monkeypatch):
    seen = []
    pool = F.roi_max_pool

    def recording(fmap, boxes, size):
        seen.append(np.array(boxes))
        return pool(fmap, boxes, size)

    monkeypatch.setattr(F, "roi_max_pool", recording)
    context.reconstruction_heads(context.context_forward(grid), ROIS)
    np.testing.assert_allclose(seen[0], smn_models.detector.map_rois(ROIS))
