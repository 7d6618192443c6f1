import numpy as np
import pytest

from impl import Rollout
from impl.probes import DedupProbe, dedup_probe, reconstruction_recall, score_readoff
from interface import BoundingBox, IterationRecord, RolloutTrace


@pytest.fixture
def rollout(smn_models, tiny_config):
    return Rollout(smn_models.detector, smn_models.memory, smn_models.context, tiny_config.rollout)


def record_with(base_logits, fused_logits, memory_logits=None, iteration=1):
    return IterationRecord(
        iteration=iteration,
        roi=BoundingBox(1.0, 2.0, 9.0, 12.0),
        class_scores=np.full(4, 0.25),
        detections=[],
        base_logits=np.asarray(base_logits, dtype=float),
        memory_logits=None if memory_logits is None else np.asarray(memory_logits, dtype=float),
        fused_logits=np.asarray(fused_logits, dtype=float),
        memory_digest="",
        update_box=BoundingBox(1.0, 2.0, 9.0, 12.0),
    )


class TestScoreReadoff:
    def test_reports_the_fused_winner(self):
        trace = RolloutTrace(iterations=[record_with([0.0, 1.0, 0.0, 0.0], [0.0, 3.0, 0.0, 0.0], [0.0, 2.0, 0.0, 0.0])])
        (row,) = score_readoff(trace)
        assert row["class"] == 0 and row["iteration"] == 1 and row["memory_used"]
        assert row["fused"] > row["base"]
        assert row["delta"] == pytest.approx(row["fused"] - row["base"])
        assert row["box"] == [1.0, 2.0, 9.0, 12.0]

    def test_suppression_shows_as_a_negative_delta(self):
        trace = RolloutTrace(iterations=[record_with([0.0, 4.0, 0.0, 0.0], [3.0, 2.0, 0.0, 0.0], [3.0, -2.0, 0.0, 0.0])])
        (row,) = score_readoff(trace)
        assert row["class"] == -1

    def test_rows_follow_the_trace(self, rollout, records):
        trace = rollout.detect_sequence(records[0].image)
        rows = score_readoff(trace)
        assert [row["iteration"] for row in rows] == [0, 1, 2]
        assert rows[0]["memory_used"] is False and rows[0]["delta"] == 0.0


class TestDedupProbe:
    def test_every_scene_is_accounted_for(self, rollout, records):
        probe = dedup_probe(rollout, records)
        assert probe.scenes + probe.skipped == len(records)
        assert 0.0 <= probe.suppressed_fraction <= 1.0
        assert set(probe.summary()) == {"scenes", "skipped", "suppressed_fraction", "mean_fused", "mean_base"}

    def test_needs_memory(self, mlp_models, tiny_config, records):
        rollout = Rollout(mlp_models.detector, None, mlp_models.context, tiny_config.rollout)
        with pytest.raises(ValueError):
            dedup_probe(rollout, records)

    def test_suppressed_fraction(self):
        probe = DedupProbe(fused_scores=[0.1, 0.6, 0.2], base_scores=[0.9, 0.9, 0.4])
        assert probe.suppressed_fraction == pytest.approx(1.0 / 3.0)
        assert DedupProbe().suppressed_fraction == 0.0


def test_reconstruction_recall_is_a_fraction(rollout, records):
    assert 0.0 <= reconstruction_recall(rollout, records, iterations=2) <= 1.0


def test_reconstruction_recall_needs_the_memory_model(mlp_models, tiny_config, records):
    rollout = Rollout(mlp_models.detector, None, mlp_models.context, tiny_config.rollout)
    with pytest.raises(ValueError):
        reconstruction_recall(rollout, records)
