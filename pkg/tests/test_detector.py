import numpy as np
import pytest

from autograd import Tensor
from impl.detector import backbone_strides
from util.errors import ShapeError


@pytest.fixture
def detector(base_models):
    return base_models.detector


@pytest.fixture
def features(detector, records):
    fmap = detector.backbone_forward(detector.image_tensor(records[0].image))
    logits, deltas = detector.rpn_forward(fmap)
    return fmap, logits, deltas


class TestFirstStage:
    def test_shapes(self, detector, features, tiny_config):
        fmap, logits, deltas = features
        anchors = tiny_config.detector.total_anchors(tiny_config.scene.image_h, tiny_config.scene.image_w)
        assert fmap.shape == (8, 8, tiny_config.detector.backbone_channels)
        assert logits.shape == (anchors,)
        assert deltas.shape == (anchors, 4)

    def test_proposal_counts_per_mode(self, detector, features, tiny_config):
        _, logits, deltas = features
        aggressive = detector.proposal_boxes(logits.data, deltas.data, "nms-top-k")
        gentle = detector.proposal_boxes(logits.data, deltas.data, "non-aggressive-top-K")
        assert 0 < len(aggressive.boxes) <= tiny_config.detector.proposals_k
        assert len(gentle.boxes) == tiny_config.detector.proposals_top
        assert np.all(np.diff(gentle.scores) <= 0)

    def test_proposals_stay_inside_the_image(self, detector, features):
        _, logits, deltas = features
        boxes = detector.proposal_boxes(logits.data, deltas.data, "non-aggressive-top-K").boxes
        assert boxes.min() >= 0.0 and boxes[:, [0, 2]].max() <= 32.0 and boxes[:, [1, 3]].max() <= 32.0

    def test_unknown_proposal_mode(self, detector, features):
        _, logits, deltas = features
        with pytest.raises(ValueError):
            detector.proposal_boxes(logits.data, deltas.data, "everything")

    def test_anchor_count_mismatch(self, detector):
        with pytest.raises(ShapeError):
            detector.proposal_boxes(np.zeros(5), np.zeros((5, 4)), "nms-top-k")

    def test_image_must_fit_the_stride(self, detector):
        with pytest.raises(ShapeError):
            detector.backbone_forward(Tensor(np.zeros((30, 32, 3))))

    def test_backbone_strides(self):
        assert backbone_strides(4) == [1, 2, 1, 2]
        with pytest.raises(ShapeError):
            backbone_strides(6)


class TestSecondStage:
    def test_region_shapes(self, detector, features):
        fmap, _, _ = features
        rois = np.array([[0.0, 0.0, 16.0, 16.0], [8.0, 4.0, 30.0, 20.0]])
        regions = detector.classify_rois(fmap, rois)
        assert regions.cls_logits.shape == (2, 4)
        assert regions.cls_deltas.shape == (2, 12)
        assert detector.class_boxes(rois, regions.cls_deltas.data).shape == (2, 3, 4)

    def test_zero_deltas_keep_the_roi(self, detector):
        rois = np.array([[2.0, 3.0, 12.0, 15.0]])
        boxes = detector.class_boxes(rois, np.zeros((1, 12)))
        np.testing.assert_allclose(boxes[0], np.repeat(rois, 3, axis=0))

    def test_rois_map_to_the_cells_the_memory_addresses(self, detector, smn_models):
        rois = np.array([[0.0, 0.0, 32.0, 32.0], [5.0, 7.0, 21.0, 30.0]])
        cells = detector.map_rois(rois)
        np.testing.assert_allclose(cells[0], [0.0, 0.0, 7.0, 7.0])
        for roi, mapped in zip(rois, cells):
            np.testing.assert_allclose(mapped, smn_models.memory.map_box(roi, detector.map_hw))


class TestEmission:
    ROIS = np.array([[2.0, 2.0, 12.0, 12.0], [18.0, 18.0, 28.0, 28.0]])
    # region 0 is torn between classes 0 and 1; region 1 is background
    LOGITS = np.array([[-5.0, 2.0, 1.95, -5.0], [5.0, -5.0, -5.0, -5.0]])

    def test_softmax_emits_every_class_above_the_floor(self, detector):
        candidates = detector.select_detections(self.ROIS, self.LOGITS, np.zeros((2, 12)), "softmax")
        assert [d.class_id for d in candidates.detections] == [0, 1]
        assert candidates.score_rows.shape == (2, 4)

    def test_hardmax_emits_the_argmax_only(self, detector):
        candidates = detector.select_detections(self.ROIS, self.LOGITS, np.zeros((2, 12)), "hardmax")
        assert [d.class_id for d in candidates.detections] == [0]

    def test_unknown_emission(self, detector):
        with pytest.raises(ValueError):
            detector.select_detections(self.ROIS, self.LOGITS, np.zeros((2, 12)), "argmax")

    def test_detect_respects_floor_and_cap(self, detector, records, tiny_config):
        detections = detector.detect(records[0].image, "non-aggressive-top-K", "softmax")
        assert len(detections) <= tiny_config.detector.detections_per_image
        assert all(d.confidence >= tiny_config.detector.score_floor for d in detections)
        assert all(d.iteration == 0 for d in detections)
