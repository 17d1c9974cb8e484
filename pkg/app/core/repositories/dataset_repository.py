"""
Synthetic dataset on disk: ``manifest.yaml`` plus DDSM spectrograms and piano rolls
"""
import logging
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import yaml
from pydantic import ValidationError

from app.core.models.run_models import DatasetManifest, ManifestSample
from app.core.repositories.matrix_repository import MatrixRepository
from app.shared.errors import StorageError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.yaml"


class DatasetRepository:
    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.matrices = MatrixRepository(self.root)

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST_NAME

    def save_manifest(self, manifest: DatasetManifest) -> Path:
        path = self.manifest_path
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(yaml.safe_dump(manifest.model_dump(mode="json"), sort_keys=False), encoding="utf-8")
        except OSError as e:
            raise StorageError(f"cannot write {path}: {e}") from e
        logger.info(f"Wrote manifest with {len(manifest.samples)} samples to {path}")
        return path

    def load_manifest(self) -> DatasetManifest:
        path = self.manifest_path
        if not path.is_file():
            raise StorageError(f"dataset manifest not found: {path}")
        try:
            document = yaml.safe_load(path.read_text(encoding="utf-8"))
            return DatasetManifest.model_validate(document)
        except OSError as e:
            raise StorageError(f"cannot read {path}: {e}") from e
        except (yaml.YAMLError, ValidationError) as e:
            raise StorageError(f"invalid dataset manifest {path}: {e}") from e

    def write_matrix(self, relative: str, matrix) -> Path:
        return self.matrices.write(relative, matrix)

    def read_matrix(self, relative: str) -> np.ndarray:
        return self.matrices.read(relative)

    def load_frames(
        self,
        manifest: DatasetManifest,
        splits: Tuple[str, ...] = ("train",),
        source_id: Optional[int] = None,
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Stack isolated-note frames (M x D) with their source labels"""
        frames: List[np.ndarray] = []
        labels: List[np.ndarray] = []
        for sample in manifest.samples:
            if sample.kind != "isolated" or sample.split not in splits:
                continue
            if source_id is not None and sample.sources[0] != source_id:
                continue
            values = self.read_matrix(sample.path)
            frames.append(values.T)
            labels.append(np.full(values.shape[1], sample.sources[0], dtype=np.int64))
        if not frames:
            return np.zeros((0, manifest.d), dtype=np.float32), np.zeros(0, dtype=np.int64)
        return np.concatenate(frames), np.concatenate(labels)

    def test_samples(self, manifest: DatasetManifest) -> List[ManifestSample]:
        return [s for s in manifest.by_split("test") if s.kind == "mixture"]

    def load_snippet(self, sample: ManifestSample) -> Tuple[np.ndarray, Optional[np.ndarray]]:
        """Spectrogram values (D x T) and, when recorded, the piano roll (K x T)"""
        spec = self.read_matrix(sample.path)
        if sample.roll_path is None or not self.matrices.exists(sample.roll_path):
            return spec, None
        return spec, self.read_matrix(sample.roll_path)
