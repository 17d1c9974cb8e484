"""
Invertible layers operating on batches of shape (n, d).

Every layer returns its output together with the per-item log |det J| of the
direction it was called in, so inverse passes can report likelihoods too.
"""
from typing import Tuple

import torch
from torch import nn

from app.core.models.flow_models import ActivationKind, MixingInit
from app.shared.errors import InvalidInputError

LEAKY_SLOPE = 0.2


def _activation(kind: ActivationKind) -> nn.Module:
    if kind == ActivationKind.SELU:
        return nn.SELU()
    if kind == ActivationKind.LEAKY_RELU:
        return nn.LeakyReLU(LEAKY_SLOPE)
    return nn.Identity()


def _seeded_permutation(d: int, seed: int) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    return torch.randperm(d, generator=generator)


class FlowLayer(nn.Module):
    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        raise NotImplementedError

    def inverse(self, y: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        raise NotImplementedError


class MLP(nn.Module):
    """Dense stack whose final layer starts at zero"""

    def __init__(self, d_in: int, d_out: int, hidden: int, dense_layers: int, activation: ActivationKind):
        super().__init__()
        self.activation_kind = ActivationKind(activation)
        widths = [d_in] + [hidden] * (dense_layers - 1) + [d_out]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))
        self.act = _activation(self.activation_kind)
        nn.init.zeros_(self.layers[-1].weight)
        nn.init.zeros_(self.layers[-1].bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers[:-1]:
            x = self.act(layer(x))
        return self.layers[-1](x)


class AffineCoupling(FlowLayer):
    """
    Scales and shifts one contiguous half using an MLP of the other half.

    ``flip`` False conditions the upper half on the lower one; True swaps roles.
    The log-scale is bounded as c * tanh(raw).
    """

    def __init__(
        self,
        d: int,
        hidden: int,
        dense_layers: int,
        activation: ActivationKind,
        flip: bool = False,
        scale_clamp: float = 2.0,
    ):
        super().__init__()
        self.d = d
        self.flip = flip
        self.scale_clamp = float(scale_clamp)
        half = d // 2
        self.d_cond = d - half if flip else half
        self.d_trans = d - self.d_cond
        self.mlp = MLP(self.d_cond, 2 * self.d_trans, hidden, dense_layers, activation)

    def _split(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if self.flip:
            return x[:, self.d_trans:], x[:, : self.d_trans]
        return x[:, : self.d_cond], x[:, self.d_cond:]

    def _join(self, cond: torch.Tensor, trans: torch.Tensor) -> torch.Tensor:
        if self.flip:
            return torch.cat([trans, cond], dim=1)
        return torch.cat([cond, trans], dim=1)

    def _scale_shift(self, cond: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        raw, shift = self.mlp(cond).chunk(2, dim=1)
        return self.scale_clamp * torch.tanh(raw), shift

    def forward(self, x):
        cond, trans = self._split(x)
        log_s, shift = self._scale_shift(cond)
        out = trans * torch.exp(log_s) + shift
        return self._join(cond, out), log_s.sum(dim=1)

    def inverse(self, y):
        cond, trans = self._split(y)
        log_s, shift = self._scale_shift(cond)
        out = (trans - shift) * torch.exp(-log_s)
        return self._join(cond, out), -log_s.sum(dim=1)


class Permutation(FlowLayer):
    """Fixed seeded shuffle of the d dimensions; log-det 0"""

    def __init__(self, d: int, seed: int):
        super().__init__()
        self.seed = seed
        self.register_buffer("perm", _seeded_permutation(d, seed))
        self.register_buffer("inv_perm", torch.argsort(self.perm))

    def set_permutation(self, perm: torch.Tensor) -> None:
        self.perm = perm.to(torch.long)
        self.inv_perm = torch.argsort(self.perm)

    def forward(self, x):
        return x[:, self.perm], x.new_zeros(x.shape[0])

    def inverse(self, y):
        return y[:, self.inv_perm], y.new_zeros(y.shape[0])


class ActNorm(FlowLayer):
    """Per-dimension affine map y = x * scale + bias with data-dependent init"""

    def __init__(self, d: int):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))
        self.register_buffer("initialized", torch.tensor(False))

    @torch.no_grad()
    def initialize_from(self, x: torch.Tensor, min_std: float = 1e-8) -> None:
        mean = x.mean(dim=0)
        std = x.std(dim=0, correction=0)
        if torch.any(std <= min_std):
            bad = torch.nonzero(std <= min_std).flatten().tolist()
            raise InvalidInputError(f"degenerate batch dimension: {bad}")
        self.scale.copy_(1.0 / std)
        self.bias.copy_(-mean / std)
        self.initialized.fill_(True)

    def _logdet(self, x: torch.Tensor) -> torch.Tensor:
        return torch.log(torch.abs(self.scale)).sum().expand(x.shape[0])

    def forward(self, x):
        return x * self.scale + self.bias, self._logdet(x)

    def inverse(self, y):
        return (y - self.bias) / self.scale, -self._logdet(y)


class LUMixing(FlowLayer):
    """
    Trainable mixing W = P L U with P fixed, L unit lower triangular and
    U = strict upper + diag(sign * exp(log_s)).
    """

    def __init__(self, d: int, seed: int, init: MixingInit = MixingInit.IDENTITY):
        super().__init__()
        self.d = d
        if MixingInit(init) == MixingInit.IDENTITY:
            p, lower, upper = torch.eye(d), torch.eye(d), torch.eye(d)
        else:
            generator = torch.Generator().manual_seed(seed)
            q, _ = torch.linalg.qr(torch.randn(d, d, generator=generator))
            p, lower, upper = torch.linalg.lu(q)
        diag = torch.diagonal(upper)
        self.register_buffer("p", p)
        self.register_buffer("sign_s", torch.sign(diag))
        self.lower = nn.Parameter(torch.tril(lower, diagonal=-1))
        self.upper = nn.Parameter(torch.triu(upper, diagonal=1))
        self.log_s = nn.Parameter(torch.log(torch.abs(diag)))

    def l_matrix(self) -> torch.Tensor:
        eye = torch.eye(self.d, dtype=self.lower.dtype, device=self.lower.device)
        return torch.tril(self.lower, diagonal=-1) + eye

    def u_matrix(self) -> torch.Tensor:
        return torch.triu(self.upper, diagonal=1) + torch.diag(self.sign_s * torch.exp(self.log_s))

    def weight(self) -> torch.Tensor:
        return self.p @ self.l_matrix() @ self.u_matrix()

    def _logdet(self, x: torch.Tensor) -> torch.Tensor:
        return self.log_s.sum().expand(x.shape[0])

    def forward(self, x):
        return x @ self.weight().T, self._logdet(x)

    def inverse(self, y):
        # W x = y  <=>  L U x = P^T y, solved with two triangular solves
        rhs = self.p.T @ y.T
        a = torch.linalg.solve_triangular(self.l_matrix(), rhs, upper=False, unitriangular=True)
        x = torch.linalg.solve_triangular(self.u_matrix(), a, upper=True)
        return x.T, -self._logdet(y)