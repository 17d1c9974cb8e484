"""Small flows and random-parameter utilities shared by the test modules"""
import torch
from torch import nn

from app.core.flows.layers import ActNorm
from app.core.flows.model import FlowModel, build_glow_conditional, build_realnvp
from app.core.models.flow_models import ActivationKind, FlowArchitecture, MixingInit


def small_realnvp_arch(steps: int = 2, hidden: int = 16) -> FlowArchitecture:
    return FlowArchitecture(steps=steps, hidden=hidden, dense_layers=2, activation=ActivationKind.SELU)


def small_glow_arch(steps: int = 2, hidden: int = 16, mixing: MixingInit = MixingInit.IDENTITY) -> FlowArchitecture:
    return FlowArchitecture(
        steps=steps,
        hidden=hidden,
        dense_layers=2,
        activation=ActivationKind.LEAKY_RELU,
        mixing_init=mixing,
    )


def randomize(model: FlowModel, scale: float = 0.2, seed: int = 0) -> FlowModel:
    """Perturb every parameter so no layer is the identity"""
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for parameter in model.parameters():
            noise = torch.randn(parameter.shape, generator=generator, dtype=torch.float64)
            parameter.add_(scale * noise.to(parameter.dtype))
        for layer in model.layers:
            if isinstance(layer, ActNorm):
                layer.initialized.fill_(True)
    return model


def random_realnvp(d: int, seed: int = 0, dtype=torch.float64, scale: float = 0.2) -> FlowModel:
    return randomize(build_realnvp(d, small_realnvp_arch(), seed=seed, dtype=dtype), scale, seed)


def random_glow(d: int, k: int, seed: int = 0, dtype=torch.float64, scale: float = 0.2) -> FlowModel:
    arch = small_glow_arch(mixing=MixingInit.ORTHOGONAL)
    return randomize(build_glow_conditional(d, k, arch, seed=seed, dtype=dtype), scale, seed)


class Objective(nn.Module):
    """Wraps a scalar function of a flow so torch.func.functional_call can swap its parameters"""

    def __init__(self, flow: FlowModel, fn):
        super().__init__()
        self.flow = flow
        self.fn = fn

    def forward(self, *args):
        return self.fn(self.flow, *args)


def parameter_loss(flow: FlowModel, fn, *args):
    """(loss over a parameter list, initial parameter list) for grad_check"""
    wrapper = Objective(flow, fn)
    names = [name for name, _ in wrapper.named_parameters()]
    initial = [p.detach().clone() for _, p in wrapper.named_parameters()]

    def loss(params):
        return torch.func.functional_call(wrapper, dict(zip(names, params)), args)

    return loss, initial
