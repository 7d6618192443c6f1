import numpy as np
import pytest

from impl import Rollout
from impl.rollout import select_next
from interface import RolloutConfig
from util.box_ops import iou_matrix


def make_rollout(models, **overrides):
    settings = {"iterations": 3}
    settings.update(overrides)
    return Rollout(models.detector, models.memory, models.context, RolloutConfig(**settings))


def brute_force_select(boxes, probs):
    best = None
    for i in range(len(boxes)):
        key = (-probs[i, 1:].max(), tuple(boxes[i]))
        if best is None or key < best[0]:
            best = (key, i)
    return best[1]


class TestSelectNext:
    def test_matches_brute_force_with_ties(self, rng):
        for _ in range(300):
            count = int(rng.integers(1, 12))
            boxes = rng.integers(0, 3, size=(count, 4)).astype(float)
            boxes[:, 2:] += boxes[:, :2] + 1
            probs = np.round(rng.dirichlet(np.ones(4), size=count), 1)
            index, row = select_next(boxes, probs)
            assert index == brute_force_select(boxes, probs)
            np.testing.assert_array_equal(row, probs[index])

    def test_empty_candidates(self):
        with pytest.raises(ValueError):
            select_next(np.zeros((0, 4)), np.zeros((0, 4)))


class TestEmit:
    # classes 0 and 1 within 0.05 of each other
    PROBS = np.array([0.10, 0.46, 0.42, 0.02])
    BOXES = np.array([[1.0, 1.0, 9.0, 9.0], [2.0, 2.0, 10.0, 10.0], [0.0, 0.0, 5.0, 5.0]])

    def test_softmax_emits_both_contenders(self, smn_models):
        detections = make_rollout(smn_models, emission="softmax").emit(self.PROBS, self.BOXES, 4)
        assert [(d.class_id, d.confidence, d.iteration) for d in detections] == [(0, 0.46, 4), (1, 0.42, 4)]
        assert detections[1].box.as_array().tolist() == self.BOXES[1].tolist()

    def test_hardmax_emits_the_winner(self, smn_models):
        detections = make_rollout(smn_models, emission="hardmax").emit(self.PROBS, self.BOXES, 4)
        assert [(d.class_id, d.confidence) for d in detections] == [(0, 0.46)]

    def test_hardmax_background_emits_nothing(self, smn_models):
        probs = np.array([0.7, 0.1, 0.1, 0.1])
        assert make_rollout(smn_models, emission="hardmax").emit(probs, self.BOXES, 0) == []

    def test_score_threshold_raises_the_floor(self, smn_models):
        rollout = make_rollout(smn_models, emission="softmax", score_threshold=0.45)
        assert [d.class_id for d in rollout.emit(self.PROBS, self.BOXES, 0)] == [0]


class TestSequence:
    def test_first_iteration_is_the_base_detector(self, smn_models, records):
        rollout = make_rollout(smn_models)
        base = rollout.base_outputs(records[0].image)
        scored = rollout.score_iteration(base, rollout.init_state(base), 0)
        regions = smn_models.detector.classify_rois(base.feature_map, scored.rois)
        np.testing.assert_array_equal(scored.scores.cls_logits.fused.data, regions.cls_logits.data)
        np.testing.assert_array_equal(scored.scores.rpn_objectness.fused.data, base.rpn_objectness.data)
        assert scored.scores.cls_logits.memory is None

    def test_memory_joins_after_the_first_write(self, smn_models, records):
        rollout = make_rollout(smn_models)
        base = rollout.base_outputs(records[0].image)
        scored = rollout.score_iteration(base, rollout.init_state(base), 1)
        assert scored.scores.cls_logits.memory is not None

    def test_deterministic(self, smn_models, records):
        rollout = make_rollout(smn_models)
        first, second = rollout.detect_sequence(records[1].image), rollout.detect_sequence(records[1].image)
        assert first.to_jsonl() == second.to_jsonl()
        assert first.final_memory_digest == second.final_memory_digest

    def test_replay_reproduces_the_memory(self, smn_models, records):
        rollout = make_rollout(smn_models)
        trace = rollout.detect_sequence(records[2].image)
        assert len(trace.iterations) == 3
        assert rollout.replay(trace, records[2].image) == trace.final_memory_digest

    def test_every_write_changes_the_memory(self, smn_models, records):
        trace = make_rollout(smn_models).detect_sequence(records[0].image)
        digests = [record.memory_digest for record in trace.iterations]
        assert len(set(digests)) == len(digests)

    def test_snapshots_on_request(self, smn_models, records):
        rollout = make_rollout(smn_models)
        assert rollout.detect_sequence(records[0].image).snapshots == []
        trace = rollout.detect_sequence(records[0].image, keep_snapshots=True)
        assert len(trace.snapshots) == 3
        assert trace.snapshots[0].shape == (8, 8, 4)

    def test_score_transform_controls_what_is_written(self, smn_models, records):
        uniform = np.full(4, 0.25)
        trace = make_rollout(smn_models).detect_sequence(records[0].image, score_transform=lambda n, row: uniform)
        for record in trace.iterations:
            np.testing.assert_array_equal(record.class_scores, uniform)

    def test_zero_iterations(self, smn_models, records):
        trace = make_rollout(smn_models, iterations=0).detect_sequence(records[0].image)
        assert trace.iterations == [] and trace.detections() == []

    def test_emitted_iterations_are_numbered(self, smn_models, records):
        trace = make_rollout(smn_models).detect_sequence(records[0].image)
        assert [record.iteration for record in trace.iterations] == [0, 1, 2]
        for record in trace.iterations:
            assert all(d.iteration == record.iteration for d in record.detections)


class TestHybrid:
    def test_base_only_hybrid_matches_the_capped_baseline(self, smn_models, records):
        rollout = make_rollout(smn_models, iterations=3, n1=3, proposal_mode="nms-top-k")
        image = records[0].image
        hybrid = [(d.box, d.class_id, d.confidence) for d in rollout.run(image).detections()]
        baseline = [(d.box, d.class_id, d.confidence) for d in smn_models.detector.detect(image, "nms-top-k", "softmax")[:3]]
        assert hybrid == baseline

    def test_phases(self, smn_models, records):
        trace = make_rollout(smn_models, iterations=3, n1=2).run(records[0].image)
        assert [record.phase for record in trace.iterations][:2] == ["base", "base"]
        assert trace.iterations[-1].phase == "fused"


class TestTail:
    def test_nms_tail_leaves_no_same_class_overlap(self, smn_models, records):
        rollout = make_rollout(smn_models, iterations=3, dedup_tail="nms", emission_floor=0.0)
        detections = rollout.trace_detections(rollout.detect_sequence(records[0].image))
        for class_id in {d.class_id for d in detections}:
            boxes = np.stack([d.box.as_array() for d in detections if d.class_id == class_id])
            overlaps = iou_matrix(boxes, boxes)
            np.fill_diagonal(overlaps, 0.0)
            assert overlaps.max(initial=0.0) <= smn_models.detector.config.nms_iou


def test_context_baseline_single_pass(mlp_models, records):
    rollout = make_rollout(mlp_models)
    detections = rollout.single_pass_detect(records[0].image, "nms-top-k", "hardmax")
    assert all(d.iteration == 0 for d in detections)
    assert len({(d.box, d.class_id) for d in detections}) == len(detections)
