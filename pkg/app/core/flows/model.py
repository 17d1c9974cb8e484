"""
Normalizing-flow dictionary models.

A FlowModel maps data x (a spectral frame) to a latent code z. Dictionary
entries are generated through the exact inverse, and the change-of-variables
formula gives the likelihood of every entry.
"""
import math
from typing import List, Optional, Sequence, Tuple

import torch
from torch import nn

from app.core.flows.layers import ActNorm, AffineCoupling, FlowLayer, LUMixing, Permutation
from app.core.models.flow_models import (
    FlowArchitecture,
    FlowKind,
    default_glow_architecture,
    default_realnvp_architecture,
)
from app.shared.errors import InvalidInputError, NumericalError

LOG_2PI = math.log(2.0 * math.pi)


def _as_batch(x: torch.Tensor) -> Tuple[torch.Tensor, bool]:
    if x.dim() == 1:
        return x.unsqueeze(0), True
    return x, False


def _check_finite(*tensors: torch.Tensor) -> None:
    for tensor in tensors:
        if not torch.isfinite(tensor).all():
            raise NumericalError("numerical overflow in flow")


class FlowModel(nn.Module):
    def __init__(
        self,
        kind: FlowKind,
        layers: Sequence[FlowLayer],
        d: int,
        n_steps: int,
        k_semantic: int = 0,
        architecture: Optional[FlowArchitecture] = None,
    ):
        super().__init__()
        self.kind = FlowKind(kind)
        self.layers = nn.ModuleList(layers)
        self.d = d
        self.n_steps = n_steps
        self.k_semantic = k_semantic
        self.architecture = architecture
        if self.kind == FlowKind.GLOW_CONDITIONAL and not 0 < k_semantic < d:
            raise InvalidInputError(f"k_semantic must lie in (0, {d}), got {k_semantic}")

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Data -> latent with the summed log |det J| per item"""
        batch, single = _as_batch(x)
        _check_finite(batch)
        logdet = batch.new_zeros(batch.shape[0])
        for layer in self.layers:
            batch, layer_logdet = layer(batch)
            _check_finite(batch)
            logdet = logdet + layer_logdet
        _check_finite(logdet)
        if single:
            return batch[0], logdet[0]
        return batch, logdet

    def inverse_with_logdet(self, z: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Latent -> data; the log-det is that of the inverse map"""
        batch, single = _as_batch(z)
        _check_finite(batch)
        logdet = batch.new_zeros(batch.shape[0])
        for layer in reversed(self.layers):
            batch, layer_logdet = layer.inverse(batch)
            _check_finite(batch)
            logdet = logdet + layer_logdet
        _check_finite(logdet)
        if single:
            return batch[0], logdet[0]
        return batch, logdet

    def inverse(self, z: torch.Tensor) -> torch.Tensor:
        return self.inverse_with_logdet(z)[0]

    def nll(self, x: torch.Tensor) -> torch.Tensor:
        """-log p(x) under a standard-normal prior on every latent dimension"""
        if self.kind != FlowKind.REALNVP_SINGLE_SOURCE:
            raise InvalidInputError("nll is defined for single-source models; use conditional_loss")
        z, logdet = self.forward(x)
        return 0.5 * self.d * LOG_2PI + 0.5 * (z ** 2).sum(dim=-1) - logdet

    def onehot(self, labels: torch.Tensor) -> torch.Tensor:
        labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
        if labels.numel() and (labels.min() < 0 or labels.max() >= self.k_semantic):
            raise InvalidInputError(f"unknown source: labels must lie in [0, {self.k_semantic})")
        return nn.functional.one_hot(labels, self.k_semantic).to(self.dtype)

    def _nuisance_nll(self, z_n: torch.Tensor, logdet: torch.Tensor) -> torch.Tensor:
        return 0.5 * (self.d - self.k_semantic) * LOG_2PI + 0.5 * (z_n ** 2).sum(dim=-1) - logdet

    def conditional_loss(
        self,
        x: torch.Tensor,
        labels: torch.Tensor,
        weight: Optional[float] = None,
    ) -> Tuple[torch.Tensor, Tuple[torch.Tensor, torch.Tensor]]:
        """
        Per-item loss = weight * ||z_s - onehot||^2 / K + nuisance nll.

        ``weight`` defaults to K, i.e. the unnormalised squared error.
        """
        if self.kind != FlowKind.GLOW_CONDITIONAL:
            raise InvalidInputError("conditional_loss needs a conditional model")
        batch, single = _as_batch(x)
        targets = self.onehot(labels)
        z, logdet = self.forward(batch)
        z_s, z_n = z[:, : self.k_semantic], z[:, self.k_semantic:]
        semantic_mse = ((z_s - targets) ** 2).sum(dim=-1) / self.k_semantic
        nuisance_nll = self._nuisance_nll(z_n, logdet)
        alpha = float(self.k_semantic) if weight is None else weight
        loss = alpha * semantic_mse + nuisance_nll
        if single:
            return loss[0], (semantic_mse[0], nuisance_nll[0])
        return loss, (semantic_mse, nuisance_nll)

    def generate_conditional(self, labels: Sequence[int], z_n: torch.Tensor) -> torch.Tensor:
        """Decode one-hot semantics concatenated with nuisance codes"""
        if self.kind != FlowKind.GLOW_CONDITIONAL:
            raise InvalidInputError("generate_conditional needs a conditional model")
        batch, single = _as_batch(z_n)
        z = torch.cat([self.onehot(torch.as_tensor(labels)), batch], dim=1)
        x = self.inverse(z)
        return x[0] if single else x

    def entry_nll(self, z: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Decode latent codes and return (entries, -log p(entry)) in one inverse pass.

        Conditional models score the nuisance part only; the semantic part is fixed.
        """
        x, inv_logdet = self.inverse_with_logdet(z)
        batch, single = _as_batch(z)
        # log|det dF/dx| at x equals -inv_logdet
        if self.kind == FlowKind.GLOW_CONDITIONAL:
            nll = self._nuisance_nll(batch[:, self.k_semantic:], -inv_logdet)
        else:
            nll = 0.5 * self.d * LOG_2PI + 0.5 * (batch ** 2).sum(dim=-1) + inv_logdet
        return x, (nll[0] if single else nll)

    def actnorm_layers(self) -> List[ActNorm]:
        return [layer for layer in self.layers if isinstance(layer, ActNorm)]

    @torch.no_grad()
    def init_actnorm(self, batch: torch.Tensor) -> "FlowModel":
        """Set each uninitialised ActNorm so its output on ``batch`` is standardised"""
        if batch.dim() != 2 or batch.shape[0] < 2:
            raise InvalidInputError("actnorm initialisation needs a batch of at least 2 items")
        h = batch
        for layer in self.layers:
            if isinstance(layer, ActNorm) and not bool(layer.initialized):
                layer.initialize_from(h)
            h, _ = layer(h)
        return self


def _build(seed: int, fn):
    # nn.Linear draws from the global generator; isolate it
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return fn()


def build_realnvp(
    d: int,
    architecture: Optional[FlowArchitecture] = None,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> FlowModel:
    """Single-source model: steps of (fixed permutation, affine coupling)"""
    arch = architecture or default_realnvp_architecture()

    def make() -> FlowModel:
        layers: List[FlowLayer] = []
        for step in range(arch.steps):
            layers.append(Permutation(d, seed=seed * 1000 + step))
            layers.append(
                AffineCoupling(
                    d, arch.hidden, arch.dense_layers, arch.activation,
                    flip=bool(step % 2), scale_clamp=arch.scale_clamp,
                )
            )
        return FlowModel(FlowKind.REALNVP_SINGLE_SOURCE, layers, d, arch.steps, architecture=arch)

    return _build(seed, make).to(dtype)


def build_glow_conditional(
    d: int,
    k_semantic: int,
    architecture: Optional[FlowArchitecture] = None,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> FlowModel:
    """Conditional model: steps of (actnorm, LU mixing, affine coupling)"""
    arch = architecture or default_glow_architecture()

    def make() -> FlowModel:
        layers: List[FlowLayer] = []
        for step in range(arch.steps):
            layers.append(ActNorm(d))
            layers.append(LUMixing(d, seed=seed * 1000 + step, init=arch.mixing_init))
            layers.append(
                AffineCoupling(
                    d, arch.hidden, arch.dense_layers, arch.activation,
                    flip=bool(step % 2), scale_clamp=arch.scale_clamp,
                )
            )
        return FlowModel(
            FlowKind.GLOW_CONDITIONAL, layers, d, arch.steps,
            k_semantic=k_semantic, architecture=arch,
        )

    return _build(seed, make).to(dtype)


def freeze(models: Sequence[FlowModel]) -> None:
    """Mark trained models read-only for inference"""
    for model in models:
        model.eval()
        model.requires_grad_(False)
