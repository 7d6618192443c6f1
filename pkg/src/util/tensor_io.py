"""
Little-endian binary formats.

Tensor blob:  b"SMNT" | u32 rank | rank x u32 extents | f32 or f64 payload.
The element width follows from the blob length.

Checkpoint:   b"SMNC" | u32 version | 64-byte config digest | u32 count |
              count x (u16 name length | utf-8 name | u64 blob length | tensor blob)
"""

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple, Union

import numpy as np

from util.errors import CheckpointError, DatasetError, MissingArtifactError

TENSOR_MAGIC = b"SMNT"
CHECKPOINT_MAGIC = b"SMNC"
CHECKPOINT_VERSION = 1
DIGEST_BYTES = 64


def config_digest(section: Union[Mapping[str, Any], Any]) -> str:
    """sha256 over the canonical JSON of a config section (dict or pydantic model)."""
    payload = section.model_dump(mode="json") if hasattr(section, "model_dump") else section
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype == np.float32:
        payload = array.astype("<f4").tobytes()
    else:
        payload = array.astype("<f8").tobytes()
    header = TENSOR_MAGIC + struct.pack("<I", array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    return header + payload


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < 8 or blob[:4] != TENSOR_MAGIC:
        raise DatasetError("not a tensor blob (bad magic)")
    (rank,) = struct.unpack_from("<I", blob, 4)
    header = 8 + 4 * rank
    if len(blob) < header:
        raise DatasetError("tensor header truncated")
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(shape)) if rank else 1
    payload = len(blob) - header
    if count == 0 or payload not in (4 * count, 8 * count):
        raise DatasetError(f"tensor payload of {payload} bytes does not fit shape {shape}")
    dtype = "<f4" if payload == 4 * count else "<f8"
    array = np.frombuffer(blob, dtype=dtype, offset=header, count=count).reshape(shape)
    return array.astype(np.float32 if dtype == "<f4" else np.float64)


def save_tensor(path: Union[str, Path], array: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(str(path))
    return decode_tensor(path.read_bytes())


class ByteReader:
    """Bounds-checked cursor over a byte buffer."""

    def __init__(self, data: bytes, error: type = DatasetError):
        self.data = data
        self.offset = 0
        self.error = error

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise self.error(f"unexpected end of file at byte {self.offset} (needed {size} more)")
        chunk = self.data[self.offset : self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str) -> Tuple[Any, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self, size: int, encoding: str = "utf-8") -> str:
        offset = self.offset
        try:
            return self.take(size).decode(encoding)
        except UnicodeDecodeError:
            raise self.error(f"undecodable {encoding} text at byte {offset}")

    def at_end(self) -> bool:
        return self.offset == len(self.data)


def save_checkpoint(path: Union[str, Path], tensors: Mapping[str, np.ndarray], digest: str) -> None:
    if len(digest) != DIGEST_BYTES:
        raise CheckpointError(f"config digest must be {DIGEST_BYTES} hex characters")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), digest.encode("ascii"), struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        encoded_name = name.encode("utf-8")
        blob = encode_tensor(tensors[name])
        parts += [struct.pack("<H", len(encoded_name)), encoded_name, struct.pack("<Q", len(blob)), blob]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path: Union[str, Path]) -> Tuple[str, Dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(str(path), "train the corresponding stage first")
    reader = ByteReader(path.read_bytes(), error=CheckpointError)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (version,) = reader.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    digest = reader.text(DIGEST_BYTES, "ascii")
    (count,) = reader.unpack("<I")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_length,) = reader.unpack("<H")
        name = reader.text(name_length)
        (blob_length,) = reader.unpack("<Q")
        try:
            tensors[name] = decode_tensor(reader.take(blob_length))
        except DatasetError as e:
            raise CheckpointError(f"{path}: tensor '{name}': {e}")
    return digest, tensors


def load_checkpoint(path: Union[str, Path], expected_digest: str) -> Dict[str, np.ndarray]:
    digest, tensors = read_checkpoint(path)
    if digest != expected_digest:
        raise CheckpointError(f"{path}: config digest {digest[:12]}... does not match the current config {expected_digest[:12]}...")
    return tensors


def file_digest(path: Union[str, Path]) -> str:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(str(path))
    return hashlib.sha256(path.read_bytes()).hexdigest()
