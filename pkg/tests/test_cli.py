import csv
import json

import pytest

from conftest import tiny_overrides
from main import main


def run_cli(command, out_dir, *extra, overrides=None):
    sets = []
    for assignment in tiny_overrides() + list(overrides or []):
        sets += ["--set", assignment]
    return main([command, "--out", str(out_dir), *sets, *extra])


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    out_dir = tmp_path_factory.mktemp("run")
    for command, extra in [
        ("gen-data", []),
        ("train-base", []),
        ("train-smn", []),
        ("train-smn", ["-m", "mlp"]),
        ("compare", []),
    ]:
        assert run_cli(command, out_dir, *extra) == 0, command
    return out_dir


class TestExitCodes:
    def test_malformed_override(self, tmp_path):
        assert run_cli("gen-data", tmp_path, overrides=["no-equals-sign"]) == 2

    def test_invalid_value(self, tmp_path):
        assert run_cli("gen-data", tmp_path, overrides=["rollout.iterations=-1"]) == 2

    def test_paper_reference_refuses_to_run(self, tmp_path):
        assert main(["gen-data", "--out", str(tmp_path), "--profile", "paper-reference"]) == 2

    def test_training_before_data(self, tmp_path):
        assert run_cli("train-base", tmp_path) == 3

    def test_eval_before_training(self, tmp_path):
        assert run_cli("gen-data", tmp_path) == 0
        assert run_cli("eval", tmp_path) == 3

    def test_checkpoint_from_another_config(self, trained_run):
        assert run_cli("train-smn", trained_run, overrides=["detector.nms_iou=0.6"]) == 3

    def test_scene_index_out_of_range(self, trained_run):
        assert run_cli("explain", trained_run, "-i", "99") == 1

    def test_unknown_command(self):
        with pytest.raises(SystemExit):
            main(["train-everything"])


class TestGenData:
    def test_regeneration_is_byte_identical(self, tmp_path):
        assert run_cli("gen-data", tmp_path / "a") == 0
        assert run_cli("gen-data", tmp_path / "b") == 0
        for name in ("train.smnd", "test.smnd"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seed_changes_the_data(self, tmp_path):
        assert run_cli("gen-data", tmp_path / "a") == 0
        assert run_cli("gen-data", tmp_path / "b", "--seed", "8") == 0
        assert (tmp_path / "a" / "train.smnd").read_bytes() != (tmp_path / "b" / "train.smnd").read_bytes()

    def test_writes_annotations_and_config(self, tmp_path):
        assert run_cli("gen-data", tmp_path) == 0
        lines = (tmp_path / "annotations_test.jsonl").read_text().splitlines()
        assert len(lines) == 3
        assert (tmp_path / "config.yml").exists()


def test_eval_of_an_empty_detection_file(tmp_path):
    assert run_cli("gen-data", tmp_path) == 0
    detections = tmp_path / "empty.jsonl"
    detections.write_text("")
    assert run_cli("eval", tmp_path, "-d", str(detections)) == 0
    with open(tmp_path / "results_file.csv", newline="") as file:
        (row,) = list(csv.DictReader(file))
    assert float(row["AP"]) == 0.0


def test_gradcheck_subset(tmp_path, capsys):
    assert run_cli("gradcheck", tmp_path, "--seeds", "2", "--only", "elementwise", "conv2d") == 0
    assert "conv2d" in capsys.readouterr().out


class TestTrainedRun:
    def test_compare_covers_every_method_and_protocol(self, trained_run):
        with open(trained_run / "results.csv", newline="") as file:
            rows = list(csv.DictReader(file))
        assert [(row["method"], row["protocol"]) for row in rows] == [
            (method, protocol) for method in ("baseline", "mlp", "smn") for protocol in ("N3-softmax", "N3-hardmax")
        ]
        assert (trained_run / "per_class.csv").exists()
        assert (trained_run / "detections_smn_N3-softmax.jsonl").exists()
        assert list((trained_run / "plots").glob("pr_*.svg"))

    def test_training_logs(self, trained_run):
        for kind in ("base", "smn", "mlp"):
            assert (trained_run / f"train_{kind}.csv").exists()
            assert (trained_run / f"{kind}.smnc").exists()

    def test_eval_writes_probes(self, trained_run):
        assert run_cli("eval", trained_run, "-m", "smn") == 0
        probes = json.loads((trained_run / "probes.json").read_text())
        assert {"suppressed_fraction", "reconstruction_recall"} <= set(probes)
        assert (trained_run / "results_smn.csv").exists()

    def test_explain(self, trained_run):
        assert run_cli("explain", trained_run, "-i", "1") == 0
        assert len((trained_run / "explain_1.jsonl").read_text().splitlines()) <= 3

    def test_dump_memory(self, trained_run):
        assert run_cli("dump-memory", trained_run) == 0
        assert (trained_run / "memory" / "scene0.svg").exists()
        assert (trained_run / "memory" / "scene0_n0.smnt").exists()

    def test_report(self, trained_run):
        assert run_cli("explain", trained_run, "-i", "1") == 0
        assert run_cli("report", trained_run) == 0
        for name in ("ap50.svg", "ar10.svg", "losses.svg", "explain_1.svg"):
            assert (trained_run / "plots" / name).exists()

    def test_bootstrapping_from_a_shorter_roll_out(self, trained_run):
        assert run_cli("train-smn", trained_run, "--init", str(trained_run / "smn.smnc"), overrides=["train.curriculum=[[3, 1]]"]) == 0
