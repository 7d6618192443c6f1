import csv

import numpy as np
import pytest

from impl.reporter import (
    RESULT_COLUMNS,
    plot_loss_curves,
    plot_memory,
    plot_metric_bars,
    plot_pr_curves,
    plot_score_readoff,
    read_loss_log,
    read_results,
    read_trace,
    write_per_class,
    write_results,
)
from impl.probes import score_readoff
from interface import BoundingBox, Detection, EvalResult, IterationRecord, RolloutTrace
from util.errors import DatasetError, MissingArtifactError

RESULTS = [
    EvalResult(method="baseline", protocol="N3-softmax", ap=0.25, ap50=0.5, per_class_ap50={0: 0.5, 2: 0.25}),
    EvalResult(method="smn", protocol="N3-softmax", ap=0.3, ap50=0.6, per_class_ap50={0: 0.6}),
]


def trace_record(iteration, memory_logits):
    box = BoundingBox(2.0, 3.0, 12.0, 14.0)
    return IterationRecord(
        iteration=iteration,
        roi=box,
        class_scores=np.array([0.1, 0.7, 0.2]),
        detections=[Detection(box, 0, 0.7, iteration)],
        base_logits=np.array([0.0, 2.0, 0.5]),
        memory_logits=memory_logits,
        fused_logits=np.array([0.0, 2.0, 0.5]) if memory_logits is None else np.array([0.0, 2.0, 0.5]) + memory_logits,
        memory_digest=f"digest{iteration}",
        update_box=box,
    )


def is_svg(path):
    return path.exists() and "<svg" in path.read_text(encoding="utf-8")


class TestTables:
    def test_results_round_trip(self, tmp_path):
        path = write_results(RESULTS, tmp_path / "results.csv")
        rows = read_results(path)
        assert list(rows[0]) == RESULT_COLUMNS
        assert [(row["method"], row["AP50"]) for row in rows] == [("baseline", "0.5000"), ("smn", "0.6000")]

    def test_missing_results(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            read_results(tmp_path / "results.csv")

    def test_per_class_leaves_absent_classes_blank(self, tmp_path):
        path = write_per_class(RESULTS, ["circle", "square", "triangle"], tmp_path / "per_class.csv")
        with open(path, newline="") as file:
            rows = list(csv.reader(file))
        assert rows[0] == ["method", "protocol", "circle", "square", "triangle"]
        assert rows[1] == ["baseline", "N3-softmax", "0.5000", "", "0.2500"]

    def test_loss_log(self, tmp_path):
        path = tmp_path / "train_smn.csv"
        path.write_text("step,total\n0,2.5\n1,2.0\n")
        log = read_loss_log(path)
        np.testing.assert_array_equal(log["total"], [2.5, 2.0])
        with pytest.raises(MissingArtifactError):
            read_loss_log(tmp_path / "absent.csv")


class TestPlots:
    def test_pr_curves(self, tmp_path):
        curves = {"smn": (np.array([0.5, 1.0]), np.array([1.0, 0.5])), "empty": (np.zeros(0), np.zeros(0))}
        assert is_svg(plot_pr_curves(curves, tmp_path / "plots" / "pr.svg", title="ring"))

    def test_metric_bars(self, tmp_path):
        rows = [{"method": "smn", "protocol": "N3", "AP50": "0.5"}, {"method": "baseline", "protocol": "N3", "AP50": "0.4"}]
        assert is_svg(plot_metric_bars(rows, tmp_path / "ap50.svg"))

    def test_loss_curves(self, tmp_path):
        log = {"step": np.arange(5.0), "total": np.linspace(3.0, 1.0, 5), "dedup": np.zeros(5)}
        assert is_svg(plot_loss_curves({"smn": log}, tmp_path / "losses.svg", window=2))

    def test_memory_panels(self, tmp_path, rng):
        assert is_svg(plot_memory([rng.normal(size=(8, 8, 4)) for _ in range(3)], tmp_path / "memory.svg"))

    def test_score_readoff_bars(self, tmp_path):
        rows = score_readoff(RolloutTrace([trace_record(0, None), trace_record(1, np.array([0.0, -1.5, 0.0]))]))
        assert is_svg(plot_score_readoff(rows, tmp_path / "explain_0.svg", title="explain_0"))


class TestTraces:
    def test_explain_trace_reads_back(self, tmp_path):
        trace = RolloutTrace([trace_record(0, None), trace_record(1, np.array([0.0, -1.5, 0.0]))], final_memory_digest="digest1")
        path = tmp_path / "explain_0.jsonl"
        path.write_text(trace.to_jsonl(), encoding="utf-8")
        loaded = read_trace(path)
        assert loaded.final_memory_digest == "digest1"
        assert [record.iteration for record in loaded.iterations] == [0, 1]
        assert loaded.iterations[0].memory_logits is None
        np.testing.assert_allclose(loaded.iterations[1].fused_logits, [0.0, 0.5, 0.5])
        assert loaded.iterations[1].detections == trace.iterations[1].detections
        rows = score_readoff(loaded)
        assert rows[1]["delta"] < 0 and not rows[0]["memory_used"]

    def test_missing_trace(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            read_trace(tmp_path / "explain_0.jsonl")

    def test_malformed_trace(self, tmp_path):
        path = tmp_path / "explain_0.jsonl"
        path.write_text('{"iteration": 0}\n', encoding="utf-8")
        with pytest.raises(DatasetError):
            read_trace(path)
