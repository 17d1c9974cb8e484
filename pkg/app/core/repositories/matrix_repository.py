"""
DDSM matrix files: magic ``DDSM``, u32 rows, u32 cols, rows*cols little-endian f32, row-major
"""
import io
import struct
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

from app.shared.errors import StorageError

MAGIC = b"DDSM"
_HEADER = struct.Struct("<4sII")


def encode_matrix(matrix) -> bytes:
    array = np.asarray(matrix, dtype=np.float64)
    if array.ndim == 1:
        array = array.reshape(1, -1)
    if array.ndim != 2:
        raise StorageError(f"DDSM stores 2-D matrices, got shape {array.shape}")
    rows, cols = array.shape
    body = np.ascontiguousarray(array, dtype="<f4").tobytes()
    return _HEADER.pack(MAGIC, rows, cols) + body


def read_matrix_from(stream: BinaryIO) -> np.ndarray:
    header = stream.read(_HEADER.size)
    if len(header) != _HEADER.size:
        raise StorageError("truncated DDSM header")
    magic, rows, cols = _HEADER.unpack(header)
    if magic != MAGIC:
        raise StorageError(f"invalid matrix file: bad magic {magic!r}")
    size = rows * cols * 4
    body = stream.read(size)
    if len(body) != size:
        raise StorageError("truncated DDSM body")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float32)


def decode_matrix(data: bytes) -> np.ndarray:
    return read_matrix_from(io.BytesIO(data))


class MatrixRepository:
    """Reads and writes DDSM files under a root directory"""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    def path_for(self, relative: Union[str, Path]) -> Path:
        return self.root / relative

    def write(self, relative: Union[str, Path], matrix) -> Path:
        path = self.path_for(relative)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(encode_matrix(matrix))
        except OSError as e:
            raise StorageError(f"cannot write {path}: {e}") from e
        return path

    def read(self, relative: Union[str, Path]) -> np.ndarray:
        path = self.path_for(relative)
        try:
            with path.open("rb") as stream:
                return read_matrix_from(stream)
        except OSError as e:
            raise StorageError(f"cannot read {path}: {e}") from e

    def exists(self, relative: Union[str, Path]) -> bool:
        return self.path_for(relative).is_file()
