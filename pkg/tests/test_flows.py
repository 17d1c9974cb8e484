import math

import pytest
import torch

from app.core.flows.layers import ActNorm, LUMixing, Permutation
from app.core.flows.model import build_glow_conditional, build_realnvp
from app.core.services.training_service import grad_check
from app.shared.errors import InvalidInputError, NumericalError
from tests.helpers import (
    parameter_loss,
    random_glow,
    random_realnvp,
    small_glow_arch,
    small_realnvp_arch,
)


def _numeric_jacobian(fn, x: torch.Tensor, h: float = 1e-6) -> torch.Tensor:
    columns = []
    for i in range(x.numel()):
        e = torch.zeros_like(x)
        e[i] = h
        columns.append((fn(x + e) - fn(x - e)) / (2 * h))
    return torch.stack(columns, dim=1)


class TestIdentityInitialisation:
    def test_realnvp_only_permutes(self):
        d = 8
        model = build_realnvp(d, small_realnvp_arch(), seed=3, dtype=torch.float64)
        x = torch.randn(5, d, dtype=torch.float64)
        z, logdet = model(x)
        expected = x
        for layer in model.layers:
            if isinstance(layer, Permutation):
                expected = expected[:, layer.perm]
        torch.testing.assert_close(z, expected)
        assert torch.all(logdet == 0)

    def test_nll_closed_form(self):
        model = build_realnvp(8, small_realnvp_arch(), dtype=torch.float64)
        zero = torch.zeros(8, dtype=torch.float64)
        assert float(model.nll(zero)) == pytest.approx(4 * math.log(2 * math.pi), abs=1e-12)
        x = torch.zeros(8, dtype=torch.float64)
        x[0] = 1.0
        x[3] = 1.0
        assert float(model.nll(x)) == pytest.approx(4 * math.log(2 * math.pi) + 1.0, abs=1e-12)

    def test_identity_glow_is_identity(self):
        model = build_glow_conditional(6, 2, small_glow_arch(), dtype=torch.float64)
        x = torch.randn(4, 6, dtype=torch.float64)
        z, logdet = model(x)
        torch.testing.assert_close(z, x)
        torch.testing.assert_close(logdet, torch.zeros(4, dtype=torch.float64))


class TestInvertibility:
    @pytest.mark.parametrize("kind", ["realnvp", "glow"])
    def test_round_trip(self, kind):
        d = 32
        model = (
            random_realnvp(d, dtype=torch.float32, scale=0.05)
            if kind == "realnvp"
            else random_glow(d, 4, dtype=torch.float32, scale=0.05)
        )
        x = torch.randn(100, d, generator=torch.Generator().manual_seed(0))
        z, logdet = model(x)
        x_back, inv_logdet = model.inverse_with_logdet(z)
        assert (x_back - x).abs().max() < 1e-4
        torch.testing.assert_close(logdet, -inv_logdet, atol=1e-3, rtol=1e-4)

    @pytest.mark.parametrize("kind", ["realnvp", "glow"])
    def test_logdet_matches_jacobian(self, kind):
        d = 6
        model = random_realnvp(d, scale=0.3) if kind == "realnvp" else random_glow(d, 2, scale=0.3)
        points = torch.randn(20, d, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
        with torch.no_grad():
            for x in points:
                _, logdet = model(x)
                jacobian = _numeric_jacobian(lambda v: model(v)[0], x)
                _, expected = torch.linalg.slogdet(jacobian)
                assert abs(float(logdet) - float(expected)) <= 1e-3 * max(1.0, abs(float(expected)))

    def test_batch_matches_items(self):
        model = random_glow(8, 2)
        x = torch.randn(5, 8, dtype=torch.float64)
        z, logdet = model(x)
        for i in range(5):
            zi, li = model(x[i])
            torch.testing.assert_close(zi, z[i])
            torch.testing.assert_close(li, logdet[i])

    def test_layer_logdets(self):
        mixing = LUMixing(4, seed=0)
        with torch.no_grad():
            mixing.log_s.add_(torch.tensor([0.1, -0.2, 0.3, 0.0]))
        x = torch.randn(3, 4)
        _, logdet = mixing(x)
        torch.testing.assert_close(logdet, mixing.log_s.sum().expand(3))
        _, logdet_w = torch.linalg.slogdet(mixing.weight())
        torch.testing.assert_close(logdet_w, mixing.log_s.sum(), atol=1e-5, rtol=1e-5)
        _, perm_logdet = Permutation(4, seed=1)(x)
        assert torch.all(perm_logdet == 0)

    def test_non_finite_input_rejected(self):
        model = random_realnvp(4)
        x = torch.tensor([0.0, float("inf"), 1.0, 2.0], dtype=torch.float64)
        with pytest.raises(NumericalError, match="numerical overflow in flow"):
            model(x)


class TestDensity:
    def test_density_integrates_to_one(self):
        model = random_realnvp(2, scale=0.1)
        axis = torch.linspace(-12.0, 12.0, 601, dtype=torch.float64)
        cell = float(axis[1] - axis[0]) ** 2
        grid = torch.cartesian_prod(axis, axis)
        with torch.no_grad():
            mass = float(torch.exp(-model.nll(grid)).sum()) * cell
        assert mass == pytest.approx(1.0, rel=0.05)

    def test_nll_only_for_single_source_models(self):
        with pytest.raises(InvalidInputError):
            random_glow(4, 2).nll(torch.zeros(4, dtype=torch.float64))


class TestConditional:
    def test_exact_onehot_has_zero_semantic_error(self):
        d, k = 6, 2
        model = build_glow_conditional(d, k, small_glow_arch(), dtype=torch.float64)
        x = torch.zeros(d, dtype=torch.float64)
        x[1] = 1.0
        loss, (mse, nuisance) = model.conditional_loss(x, torch.tensor(1))
        assert float(mse) == 0.0
        expected = 0.5 * (d - k) * math.log(2 * math.pi)
        assert float(nuisance) == pytest.approx(expected, abs=1e-12)
        assert float(loss) == pytest.approx(expected, abs=1e-12)

    def test_zero_semantic_code(self):
        model = build_glow_conditional(64, 60, small_glow_arch(), dtype=torch.float64)
        _, (mse, _) = model.conditional_loss(torch.zeros(64, dtype=torch.float64), torch.tensor(7))
        assert float(mse) == pytest.approx(1 / 60, abs=1e-12)

    def test_unknown_label(self):
        model = random_glow(6, 2)
        with pytest.raises(InvalidInputError, match="unknown source"):
            model.conditional_loss(torch.zeros(6, dtype=torch.float64), torch.tensor(2))

    def test_generate_with_identity_model(self):
        model = build_glow_conditional(6, 2, small_glow_arch(), dtype=torch.float64)
        z_n = torch.tensor([[0.5, -0.5, 1.0, 2.0]], dtype=torch.float64)
        x = model.generate_conditional([1], z_n)
        torch.testing.assert_close(x, torch.tensor([[0.0, 1.0, 0.5, -0.5, 1.0, 2.0]], dtype=torch.float64))

    def test_generate_round_trip(self):
        model = random_glow(8, 3)
        z_n = torch.randn(4, 5, dtype=torch.float64)
        with torch.no_grad():
            x = model.generate_conditional([0, 1, 2, 1], z_n)
            z, _ = model(x)
        torch.testing.assert_close(z[:, :3], model.onehot(torch.tensor([0, 1, 2, 1])), atol=1e-8, rtol=1e-8)
        torch.testing.assert_close(z[:, 3:], z_n, atol=1e-8, rtol=1e-8)


class TestActNormInit:
    def test_standardises_first_layer_output(self):
        model = build_glow_conditional(4, 2, small_glow_arch(), dtype=torch.float64)
        batch = 3.0 + 2.0 * torch.randn(64, 4, dtype=torch.float64)
        model.init_actnorm(batch)
        first = model.layers[0]
        out, _ = first(batch)
        torch.testing.assert_close(out.mean(dim=0), torch.zeros(4, dtype=torch.float64), atol=1e-6, rtol=0)
        torch.testing.assert_close(out.std(dim=0, correction=0), torch.ones(4, dtype=torch.float64), atol=1e-5, rtol=0)
        assert all(bool(layer.initialized) for layer in model.actnorm_layers())

    def test_standardised_batch_gives_identity(self):
        layer = ActNorm(3).double()
        batch = torch.randn(50, 3, dtype=torch.float64)
        batch = (batch - batch.mean(dim=0)) / batch.std(dim=0, correction=0)
        layer.initialize_from(batch)
        torch.testing.assert_close(layer.scale.detach(), torch.ones(3, dtype=torch.float64))
        torch.testing.assert_close(layer.bias.detach(), torch.zeros(3, dtype=torch.float64), atol=1e-12, rtol=0)

    def test_constant_shift_removed(self):
        layer = ActNorm(2).double()
        batch = torch.randn(40, 2, dtype=torch.float64) + 100.0
        layer.initialize_from(batch)
        out, _ = layer(batch)
        assert out.mean(dim=0).abs().max() < 1e-6

    def test_degenerate_dimension_rejected(self):
        layer = ActNorm(3)
        batch = torch.randn(10, 3)
        batch[:, 1] = 4.0
        with pytest.raises(InvalidInputError, match="degenerate batch dimension"):
            layer.initialize_from(batch)

    def test_single_item_batch_rejected(self):
        with pytest.raises(InvalidInputError):
            build_glow_conditional(4, 2, small_glow_arch()).init_actnorm(torch.randn(1, 4))


class TestGradients:
    def test_nll_parameter_gradients(self):
        model = random_realnvp(6, scale=0.3)
        x = torch.randn(8, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
        loss, params = parameter_loss(model, lambda flow, v: flow.nll(v).mean(), x)
        assert grad_check(loss, params) < 1e-4

    def test_nll_input_gradients(self):
        model = random_realnvp(6, scale=0.3)
        x = torch.randn(4, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(3))
        assert grad_check(lambda ps: model.nll(ps[0]).sum(), [x]) < 1e-4

    def test_conditional_loss_parameter_gradients(self):
        model = random_glow(6, 2, scale=0.3)
        x = torch.randn(8, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(4))
        labels = torch.tensor([0, 1, 0, 1, 1, 0, 0, 1])
        loss, params = parameter_loss(model, lambda flow, v, y: flow.conditional_loss(v, y)[0].mean(), x, labels)
        assert grad_check(loss, params) < 1e-4
