"""
Dataset file (little-endian):

    b"SMND" | u32 version | 64-byte config digest | u32 record count
    per record: u64 seed | u32 n | n x (u32 class id | 4 x f64 box) | u64 blob length | SMNT image blob
"""

import json
import logging
import struct
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from interface.base_datastore import BaseDatastore
from interface.base_detector import Detection
from interface.base_scene_generator import SceneRecord
from util.errors import DatasetError, MissingArtifactError
from util.tensor_io import DIGEST_BYTES, ByteReader, decode_tensor, encode_tensor

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"SMND"
DATASET_VERSION = 1


class Datastore(BaseDatastore):
    def write_dataset(self, records: Sequence[SceneRecord], path: Union[str, Path], digest: str) -> None:
        if len(digest) != DIGEST_BYTES:
            raise DatasetError(f"config digest must be {DIGEST_BYTES} hex characters")
        parts = [DATASET_MAGIC, struct.pack("<I", DATASET_VERSION), digest.encode("ascii"), struct.pack("<I", len(records))]
        for record in records:
            parts.append(struct.pack("<QI", record.seed, record.num_instances))
            for class_id, box in zip(record.class_ids, record.boxes):
                parts.append(struct.pack("<I4d", int(class_id), *(float(v) for v in box)))
            blob = encode_tensor(record.image)
            parts += [struct.pack("<Q", len(blob)), blob]
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(b"".join(parts))
        logger.info("Wrote %d records to %s", len(records), path)

    def read_dataset(self, path: Union[str, Path]) -> Tuple[str, List[SceneRecord]]:
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(str(path), "run gen-data first")
        reader = ByteReader(path.read_bytes(), error=DatasetError)
        if reader.take(4) != DATASET_MAGIC:
            raise DatasetError(f"{path} is not a dataset file (bad magic)")
        (version,) = reader.unpack("<I")
        if version != DATASET_VERSION:
            raise DatasetError(f"{path}: unsupported dataset version {version}")
        digest = reader.text(DIGEST_BYTES, "ascii")
        (count,) = reader.unpack("<I")

        records: List[SceneRecord] = []
        for index in range(count):
            try:
                records.append(self._read_record(reader))
            except DatasetError as e:
                raise DatasetError(str(e), record_index=index)
        if not reader.at_end():
            raise DatasetError(f"{path}: {len(reader.data) - reader.offset} trailing bytes after {count} records")
        return digest, records

    @staticmethod
    def _read_record(reader: ByteReader) -> SceneRecord:
        seed, n = reader.unpack("<QI")
        class_ids = np.zeros(n, dtype=np.int64)
        boxes = np.zeros((n, 4), dtype=np.float64)
        for i in range(n):
            class_id, *box = reader.unpack("<I4d")
            class_ids[i] = class_id
            boxes[i] = box
        (length,) = reader.unpack("<Q")
        image = decode_tensor(reader.take(length))
        if image.ndim != 3 or image.shape[2] != 3:
            raise DatasetError(f"image has shape {image.shape}, expected H x W x 3")
        return SceneRecord(image=image, class_ids=class_ids, boxes=boxes, seed=int(seed))

    def export_annotations(self, records: Sequence[SceneRecord], path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as file:
            for record in records:
                line = {
                    "seed": record.seed,
                    "boxes": [[float(v) for v in box] for box in record.boxes],
                    "class_ids": [int(c) for c in record.class_ids],
                }
                file.write(json.dumps(line) + "\n")


def write_detections(detections: Sequence[Sequence[Detection]], path: Union[str, Path]) -> None:
    """One JSON line per image: {"image": index, "detections": [...]}."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as file:
        for index, image_detections in enumerate(detections):
            file.write(json.dumps({"image": index, "detections": [d.to_dict() for d in image_detections]}) + "\n")


def read_detections(path: Union[str, Path], num_images: int) -> List[List[Detection]]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(str(path))
    detections: List[List[Detection]] = [[] for _ in range(num_images)]
    for line_number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
            index = int(entry["image"])
            parsed = [Detection.from_dict(d) for d in entry["detections"]]
        except (ValueError, KeyError, TypeError) as e:
            raise DatasetError(f"{path}:{line_number}: malformed detection line ({e})")
        if not 0 <= index < num_images:
            raise DatasetError(f"{path}:{line_number}: image index {index} outside the {num_images}-image test set")
        detections[index].extend(parsed)
    return detections
