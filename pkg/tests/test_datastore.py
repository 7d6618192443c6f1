import json

import numpy as np
import pytest

from impl import Datastore
from impl.datastore import read_detections, write_detections
from interface import BoundingBox, Detection
from util.errors import CheckpointError, DatasetError, MissingArtifactError
from util.tensor_io import DIGEST_BYTES, config_digest, read_checkpoint, save_checkpoint

DIGEST = config_digest({"dataset": "tiny"})


@pytest.fixture
def datastore():
    return Datastore()


@pytest.fixture
def dataset_path(tmp_path, datastore, records):
    path = tmp_path / "train.smnd"
    datastore.write_dataset(records, path, DIGEST)
    return path


class TestDataset:
    def test_round_trip(self, datastore, dataset_path, records):
        digest, loaded = datastore.read_dataset(dataset_path)
        assert digest == DIGEST
        assert loaded == records

    def test_empty_dataset(self, datastore, tmp_path):
        path = tmp_path / "empty.smnd"
        datastore.write_dataset([], path, DIGEST)
        assert datastore.read_dataset(path) == (DIGEST, [])

    def test_truncation_is_reported(self, datastore, dataset_path, rng):
        data = dataset_path.read_bytes()
        for cut in rng.integers(0, len(data), size=40):
            dataset_path.write_bytes(data[:cut])
            with pytest.raises(DatasetError):
                datastore.read_dataset(dataset_path)

    def test_trailing_bytes(self, datastore, dataset_path):
        dataset_path.write_bytes(dataset_path.read_bytes() + b"\x00")
        with pytest.raises(DatasetError, match="trailing"):
            datastore.read_dataset(dataset_path)

    def test_bad_magic(self, datastore, dataset_path):
        dataset_path.write_bytes(b"XXXX" + dataset_path.read_bytes()[4:])
        with pytest.raises(DatasetError, match="magic"):
            datastore.read_dataset(dataset_path)

    def test_missing_file(self, datastore, tmp_path):
        with pytest.raises(MissingArtifactError):
            datastore.read_dataset(tmp_path / "absent.smnd")

    def test_digest_length_is_checked(self, datastore, tmp_path, records):
        with pytest.raises(DatasetError):
            datastore.write_dataset(records, tmp_path / "bad.smnd", "abc")

    def test_export_annotations(self, datastore, tmp_path, records):
        path = tmp_path / "annotations.jsonl"
        datastore.export_annotations(records, path)
        lines = [json.loads(line) for line in path.read_text().splitlines()]
        assert [line["seed"] for line in lines] == [r.seed for r in records]
        assert lines[0]["class_ids"] == records[0].class_ids.tolist()


class TestDetectionFile:
    def test_round_trip(self, tmp_path):
        detections = [
            [Detection(BoundingBox(1.0, 2.0, 9.0, 12.0), 1, 0.75, iteration=2)],
            [],
            [Detection(BoundingBox(0.0, 0.0, 4.0, 4.0), 0, 0.5)],
        ]
        path = tmp_path / "dets.jsonl"
        write_detections(detections, path)
        assert read_detections(path, 3) == detections

    def test_empty_file_means_no_detections(self, tmp_path):
        path = tmp_path / "dets.jsonl"
        path.write_text("")
        assert read_detections(path, 2) == [[], []]

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "dets.jsonl"
        path.write_text('{"image": 0, "detections": [{"box": [1, 2, 3], "class_id": 0, "confidence": 0.5}]}\n')
        with pytest.raises(DatasetError, match=":1:"):
            read_detections(path, 1)

    def test_image_index_out_of_range(self, tmp_path):
        path = tmp_path / "dets.jsonl"
        path.write_text('{"image": 4, "detections": []}\n')
        with pytest.raises(DatasetError, match="outside"):
            read_detections(path, 2)

    def test_confidence_survives_exactly(self, tmp_path):
        confidence = float(np.nextafter(0.3, 1.0))
        path = tmp_path / "dets.jsonl"
        write_detections([[Detection(BoundingBox(0.0, 0.0, 1.0, 1.0), 0, confidence)]], path)
        assert read_detections(path, 1)[0][0].confidence == confidence


class TestCheckpointFile:
    # magic, version, digest, count, then the first name's length and bytes
    DIGEST_AT = 8
    NAME_AT = 8 + DIGEST_BYTES + 4 + 2

    @pytest.fixture
    def path(self, tmp_path):
        path = tmp_path / "smn.smnc"
        save_checkpoint(path, {"smn/memory/prior": np.zeros((2, 2, 4))}, "a" * DIGEST_BYTES)
        return path

    def corrupt(self, path, offset):
        data = bytearray(path.read_bytes())
        data[offset] = 0xFF
        path.write_bytes(bytes(data))

    def test_round_trip(self, path):
        digest, tensors = read_checkpoint(path)
        assert digest == "a" * DIGEST_BYTES
        np.testing.assert_array_equal(tensors["smn/memory/prior"], 0.0)

    @pytest.mark.parametrize("offset", [DIGEST_AT, NAME_AT], ids=["digest", "name"])
    def test_undecodable_bytes_are_a_checkpoint_error(self, path, offset):
        self.corrupt(path, offset)
        with pytest.raises(CheckpointError, match="undecodable"):
            read_checkpoint(path)

    def test_undecodable_dataset_digest(self, datastore, dataset_path):
        self.corrupt(dataset_path, self.DIGEST_AT)
        with pytest.raises(DatasetError, match="undecodable"):
            datastore.read_dataset(dataset_path)
