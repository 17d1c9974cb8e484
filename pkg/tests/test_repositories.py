import io
import json

import numpy as np
import pytest
import torch

from app.core.models.decomposition_models import DecompositionResult, MethodKind, TraceRecord
from app.core.models.metric_models import MetricReport
from app.core.models.run_models import DatasetManifest, ManifestSample, ManifestSource
from app.core.models.training_models import EpochRecord
from app.core.repositories.checkpoint_repository import (
    CheckpointRepository,
    decode_checkpoint,
    encode_checkpoint,
)
from app.core.repositories.dataset_repository import DatasetRepository
from app.core.repositories.matrix_repository import MatrixRepository, decode_matrix, encode_matrix, read_matrix_from
from app.core.repositories.results_repository import ResultsRepository
from app.shared.errors import StorageError
from tests.helpers import random_glow, random_realnvp


class TestMatrixFiles:
    def test_layout(self):
        data = encode_matrix(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
        assert data[:4] == b"DDSM"
        assert int.from_bytes(data[4:8], "little") == 2
        assert int.from_bytes(data[8:12], "little") == 3
        assert len(data) == 12 + 6 * 4
        np.testing.assert_array_equal(np.frombuffer(data[12:], dtype="<f4"), np.arange(1, 7))

    def test_decode(self):
        matrix = np.random.default_rng(0).normal(size=(4, 5)).astype(np.float32)
        np.testing.assert_array_equal(decode_matrix(encode_matrix(matrix)), matrix)

    def test_concatenated_matrices_read_in_order(self):
        stream = io.BytesIO(encode_matrix(np.ones((1, 2))) + encode_matrix(np.zeros((3, 1))))
        assert read_matrix_from(stream).shape == (1, 2)
        assert read_matrix_from(stream).shape == (3, 1)

    def test_bad_magic(self):
        with pytest.raises(StorageError, match="invalid matrix file"):
            decode_matrix(b"XXXX" + bytes(8))

    def test_truncated_body(self):
        with pytest.raises(StorageError, match="truncated"):
            decode_matrix(encode_matrix(np.ones((2, 2)))[:-3])

    def test_repository(self, tmp_path):
        repo = MatrixRepository(tmp_path)
        repo.write("a/b.ddsm", np.eye(3))
        assert repo.exists("a/b.ddsm")
        np.testing.assert_array_equal(repo.read("a/b.ddsm"), np.eye(3, dtype=np.float32))
        with pytest.raises(StorageError):
            repo.read("missing.ddsm")


class TestCheckpoints:
    @pytest.mark.parametrize("kind", ["realnvp", "glow"])
    def test_save_load_save_is_bit_exact(self, kind, tmp_path):
        model = random_realnvp(8) if kind == "realnvp" else random_glow(8, 3)
        repo = CheckpointRepository(tmp_path)
        path = repo.save("model", model)
        loaded = repo.load("model")
        assert encode_checkpoint(loaded) == path.read_bytes()
        assert loaded.kind == model.kind
        assert loaded.k_semantic == model.k_semantic
        assert loaded.n_steps == model.n_steps

    @pytest.mark.parametrize("kind", ["realnvp", "glow"])
    def test_loaded_model_computes_the_same_map(self, kind):
        model = random_realnvp(8) if kind == "realnvp" else random_glow(8, 3)
        model = model.to(torch.float32)
        loaded = decode_checkpoint(encode_checkpoint(model))
        x = torch.randn(5, 8)
        with torch.no_grad():
            z, logdet = model(x)
            z_loaded, logdet_loaded = loaded(x)
        torch.testing.assert_close(z_loaded, z)
        torch.testing.assert_close(logdet_loaded, logdet)

    def test_float64_load(self):
        loaded = decode_checkpoint(encode_checkpoint(random_realnvp(4)), dtype=torch.float64)
        assert loaded.dtype == torch.float64

    def test_bad_magic(self):
        data = bytearray(encode_checkpoint(random_realnvp(4)))
        data[:4] = b"NOPE"
        with pytest.raises(StorageError, match="invalid checkpoint file"):
            decode_checkpoint(bytes(data))

    def test_truncated(self):
        data = encode_checkpoint(random_realnvp(4))
        with pytest.raises(StorageError):
            decode_checkpoint(data[:40])

    def test_epoch_log(self, tmp_path):
        history = [EpochRecord(epoch=1, train_loss=2.0, val_loss=2.5, lr=1e-3, wall_ms=3.0)]
        path = CheckpointRepository(tmp_path).write_epoch_log("source_00", history)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,lr,wall_ms,val_semantic_mse"
        assert lines[1].startswith("1,2.0,2.5,")

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(StorageError):
            CheckpointRepository(tmp_path).load("absent")


def _manifest() -> DatasetManifest:
    return DatasetManifest(
        sample_rate=8000,
        window=8,
        hop=4,
        d=4,
        k=2,
        polyphony=1,
        seed=0,
        sources=[ManifestSource(source_id=0, fundamental=100.0), ManifestSource(source_id=1, fundamental=150.0)],
        samples=[
            ManifestSample(name="a", kind="isolated", split="train", path="iso/a.ddsm", sources=[0], frames=3),
            ManifestSample(name="b", kind="isolated", split="validation", path="iso/b.ddsm", sources=[1], frames=2),
            ManifestSample(
                name="mixture_00", kind="mixture", split="test", path="test/m.ddsm",
                roll_path="test/m_roll.ddsm", sources=[0, 1], frames=2,
            ),
        ],
    )


class TestDatasetRepository:
    def test_manifest_round_trip(self, tmp_path):
        repo = DatasetRepository(tmp_path)
        repo.save_manifest(_manifest())
        assert repo.load_manifest() == _manifest()

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(StorageError, match="dataset manifest not found"):
            DatasetRepository(tmp_path).load_manifest()

    def test_frames_and_snippets(self, tmp_path):
        repo = DatasetRepository(tmp_path)
        manifest = _manifest()
        repo.write_matrix("iso/a.ddsm", np.full((4, 3), 1.0))
        repo.write_matrix("iso/b.ddsm", np.full((4, 2), 2.0))
        repo.write_matrix("test/m.ddsm", np.ones((4, 2)))
        repo.write_matrix("test/m_roll.ddsm", np.array([[1.0, 0.0], [0.0, 1.0]]))

        frames, labels = repo.load_frames(manifest, ("train", "validation"))
        assert frames.shape == (5, 4)
        assert labels.tolist() == [0, 0, 0, 1, 1]
        only_one, _ = repo.load_frames(manifest, ("train", "validation"), source_id=1)
        assert np.all(only_one == 2.0)

        [sample] = repo.test_samples(manifest)
        spec, roll = repo.load_snippet(sample)
        assert spec.shape == (4, 2) and roll.tolist() == [[1.0, 0.0], [0.0, 1.0]]


class TestResultsRepository:
    @staticmethod
    def _result() -> DecompositionResult:
        return DecompositionResult(
            method=MethodKind.NMF,
            h_source=torch.tensor([[1.0, 0.0], [0.0, 2.0]]),
            h=torch.ones(3, 2),
            w_final=torch.ones(4, 3),
            s_hat=torch.ones(4, 2),
            objective_trace=[TraceRecord(step=0, objective=1.5, recon=1.5, mle=0.0, lr=1e-2)],
            steps_run=1,
        )

    def test_save_and_list(self, tmp_path):
        repo = ResultsRepository(tmp_path)
        repo.save_result("nmf", "mixture_00", self._result(), {"method": "nmf"})
        repo.save_result("dds3", "mixture_00", self._result())
        assert repo.list_runs() == [("dds3", "mixture_00"), ("nmf", "mixture_00")]
        document = repo.load_result("nmf", "mixture_00")
        assert document["final_objective"] == 1.5
        assert document["config"] == {"method": "nmf"}
        np.testing.assert_array_equal(repo.load_h_source("nmf", "mixture_00"), [[1.0, 0.0], [0.0, 2.0]])
        trace = (repo.run_dir("nmf", "mixture_00") / "objective_trace.csv").read_text().splitlines()
        assert trace[0] == "step,objective,recon,mle,lr"

    def test_metrics_appended(self, tmp_path):
        repo = ResultsRepository(tmp_path)
        repo.save_result("nmf", "mixture_00", self._result())
        repo.update_metrics("nmf", "mixture_00", MetricReport(psa=0.5, l0_eps=0.25, epsilon=0.05))
        document = json.loads((repo.run_dir("nmf", "mixture_00") / "result.json").read_text())
        assert document["metrics"]["psa"] == 0.5
        assert document["steps_run"] == 1

    def test_empty_root(self, tmp_path):
        assert ResultsRepository(tmp_path / "none").list_runs() == []
