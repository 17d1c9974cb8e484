"""
DDSF flow checkpoints.

Layout: header ``<4sIIII`` (magic ``DDSF``, kind tag, d, k_semantic, step count),
u32 layer count, then one record per layer: ``<III`` (layer tag, flags, tensor count)
followed by each tensor as a DDSM matrix. Values are stored as f32, so
save -> load -> save reproduces identical bytes.
"""
import csv
import io
import logging
import struct
from pathlib import Path
from typing import BinaryIO, List, Sequence, Union

import numpy as np
import torch

from app.core.flows.layers import MLP, ActNorm, AffineCoupling, FlowLayer, LUMixing, Permutation
from app.core.flows.model import FlowModel
from app.core.models.flow_models import ActivationKind, FlowArchitecture, FlowKind, MixingInit
from app.core.models.training_models import EpochRecord
from app.core.repositories.matrix_repository import encode_matrix, read_matrix_from
from app.shared.errors import StorageError

logger = logging.getLogger(__name__)

MAGIC = b"DDSF"
_HEADER = struct.Struct("<4sIIII")
_COUNT = struct.Struct("<I")
_RECORD = struct.Struct("<III")

_KIND_TAGS = {FlowKind.REALNVP_SINGLE_SOURCE: 0, FlowKind.GLOW_CONDITIONAL: 1}
_ACTIVATION_TAGS = {ActivationKind.SELU: 0, ActivationKind.LEAKY_RELU: 1, ActivationKind.IDENTITY: 2}

PERMUTATION, COUPLING, ACTNORM, LU_MIXING = 1, 2, 3, 4


def _reverse(mapping: dict) -> dict:
    return {tag: key for key, tag in mapping.items()}


def _layer_record(layer: FlowLayer):
    """(tag, flags, tensors) for one layer"""
    if isinstance(layer, Permutation):
        return PERMUTATION, 0, [layer.perm.to(torch.float64)]
    if isinstance(layer, AffineCoupling):
        flags = int(layer.flip) | (_ACTIVATION_TAGS[layer.mlp.activation_kind] << 1)
        tensors = [torch.tensor([layer.scale_clamp])]
        for linear in layer.mlp.layers:
            tensors.extend([linear.weight, linear.bias])
        return COUPLING, flags, tensors
    if isinstance(layer, ActNorm):
        return ACTNORM, int(bool(layer.initialized)), [layer.scale, layer.bias]
    if isinstance(layer, LUMixing):
        return LU_MIXING, 0, [layer.p, layer.sign_s, layer.lower, layer.upper, layer.log_s]
    raise StorageError(f"cannot serialise layer {type(layer).__name__}")


def encode_checkpoint(model: FlowModel) -> bytes:
    out = io.BytesIO()
    out.write(_HEADER.pack(MAGIC, _KIND_TAGS[model.kind], model.d, model.k_semantic, model.n_steps))
    out.write(_COUNT.pack(len(model.layers)))
    for layer in model.layers:
        tag, flags, tensors = _layer_record(layer)
        out.write(_RECORD.pack(tag, flags, len(tensors)))
        for tensor in tensors:
            out.write(encode_matrix(tensor.detach().cpu().numpy()))
    return out.getvalue()


def _read(stream: BinaryIO, layout: struct.Struct) -> tuple:
    data = stream.read(layout.size)
    if len(data) != layout.size:
        raise StorageError("invalid checkpoint file: truncated")
    return layout.unpack(data)


def _assign(target: torch.Tensor, values: np.ndarray) -> None:
    source = torch.from_numpy(values.copy()).reshape(target.shape).to(target.dtype)
    with torch.no_grad():
        target.copy_(source)


def _coupling_from(d: int, flags: int, tensors: List[np.ndarray]) -> AffineCoupling:
    scale_clamp = float(tensors[0].reshape(-1)[0])
    weights = tensors[1::2]
    biases = tensors[2::2]
    dense_layers = len(weights)
    hidden = weights[0].shape[0] if dense_layers > 1 else 1
    activation = _reverse(_ACTIVATION_TAGS)[flags >> 1]
    layer = AffineCoupling(d, hidden, dense_layers, activation, flip=bool(flags & 1), scale_clamp=scale_clamp)
    for linear, weight, bias in zip(layer.mlp.layers, weights, biases):
        if linear.weight.shape != weight.shape:
            raise StorageError(f"invalid checkpoint file: coupling weight shape {weight.shape}")
        _assign(linear.weight, weight)
        _assign(linear.bias, bias)
    return layer


def _layer_from(tag: int, flags: int, d: int, tensors: List[np.ndarray]) -> FlowLayer:
    if tag == PERMUTATION:
        layer = Permutation(d, seed=0)
        layer.set_permutation(torch.from_numpy(tensors[0].reshape(-1).astype(np.int64)))
        return layer
    if tag == COUPLING:
        return _coupling_from(d, flags, tensors)
    if tag == ACTNORM:
        layer = ActNorm(d)
        _assign(layer.scale, tensors[0])
        _assign(layer.bias, tensors[1])
        layer.initialized.fill_(bool(flags & 1))
        return layer
    if tag == LU_MIXING:
        layer = LUMixing(d, seed=0, init=MixingInit.IDENTITY)
        for target, values in zip((layer.p, layer.sign_s, layer.lower, layer.upper, layer.log_s), tensors):
            _assign(target, values)
        return layer
    raise StorageError(f"invalid checkpoint file: unknown layer tag {tag}")


def _architecture_of(layers: Sequence[FlowLayer], n_steps: int, d: int) -> FlowArchitecture:
    coupling = next(layer for layer in layers if isinstance(layer, AffineCoupling))
    mlp: MLP = coupling.mlp
    return FlowArchitecture(
        steps=n_steps,
        hidden=mlp.layers[0].out_features if len(mlp.layers) > 1 else d,
        dense_layers=len(mlp.layers),
        activation=mlp.activation_kind,
        scale_clamp=coupling.scale_clamp,
    )


def read_checkpoint_from(stream: BinaryIO, dtype: torch.dtype = torch.float32) -> FlowModel:
    magic, kind_tag, d, k_semantic, n_steps = _read(stream, _HEADER)
    if magic != MAGIC:
        raise StorageError(f"invalid checkpoint file: bad magic {magic!r}")
    kinds = _reverse(_KIND_TAGS)
    if kind_tag not in kinds:
        raise StorageError(f"invalid checkpoint file: unknown kind tag {kind_tag}")
    (n_layers,) = _read(stream, _COUNT)
    layers: List[FlowLayer] = []
    for _ in range(n_layers):
        tag, flags, n_tensors = _read(stream, _RECORD)
        tensors = [read_matrix_from(stream) for _ in range(n_tensors)]
        layers.append(_layer_from(tag, flags, d, tensors))
    model = FlowModel(
        kinds[kind_tag], layers, d, n_steps,
        k_semantic=k_semantic, architecture=_architecture_of(layers, n_steps, d),
    )
    return model.to(dtype)


def decode_checkpoint(data: bytes, dtype: torch.dtype = torch.float32) -> FlowModel:
    return read_checkpoint_from(io.BytesIO(data), dtype)


EPOCH_LOG_FIELDS = ["epoch", "train_loss", "val_loss", "lr", "wall_ms", "val_semantic_mse"]


class CheckpointRepository:
    """Checkpoints and their per-epoch training logs under one directory"""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    def path_for(self, name: str) -> Path:
        return self.root / f"{name}.ddsf"

    def exists(self, name: str) -> bool:
        return self.path_for(name).is_file()

    def save(self, name: str, model: FlowModel) -> Path:
        return self.save_bytes(name, encode_checkpoint(model))

    def save_bytes(self, name: str, data: bytes) -> Path:
        path = self.path_for(name)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(data)
        except OSError as e:
            raise StorageError(f"cannot write {path}: {e}") from e
        logger.info(f"Saved checkpoint {path}")
        return path

    def load(self, name: str, dtype: torch.dtype = torch.float32) -> FlowModel:
        path = self.path_for(name)
        try:
            with path.open("rb") as stream:
                return read_checkpoint_from(stream, dtype)
        except OSError as e:
            raise StorageError(f"cannot read {path}: {e}") from e

    def write_epoch_log(self, name: str, history: Sequence[EpochRecord]) -> Path:
        path = self.root / f"{name}_epochs.csv"
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with path.open("w", newline="", encoding="utf-8") as handle:
                writer = csv.DictWriter(handle, fieldnames=EPOCH_LOG_FIELDS)
                writer.writeheader()
                for record in history:
                    writer.writerow(record.model_dump())
        except OSError as e:
            raise StorageError(f"cannot write {path}: {e}") from e
        return path
