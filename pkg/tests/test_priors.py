import math

import numpy as np
import pytest
import torch

from incseg.errors import ConfigError, ShapeError
from incseg.priors import (
    area_downsample,
    ce_prior_loss,
    check_prior_config,
    fixed_prior_scores,
    localization_prior_loss,
)
from oracles import (
    central_difference_gradient,
    oracle_localization_prior_loss,
    relative_gradient_error,
)


class TestLocalizationPrior:
    def test_saturated_match_is_zero(self):
        z = torch.full((2, 3, 3), 60.0, dtype=torch.float64)
        omega = torch.ones(2, 3, 3, dtype=torch.float64)
        assert localization_prior_loss(z, omega).item() < 1e-12

    def test_entropy_floor_at_half(self):
        z = torch.zeros(3, 2, 2, dtype=torch.float64)
        omega = torch.full((2, 2, 2), 0.5, dtype=torch.float64)
        assert localization_prior_loss(z, omega).item() == pytest.approx(
            math.log(2.0), abs=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_scalar_oracle(self, seed):
        rng = np.random.default_rng(seed)
        c_old = int(rng.integers(1, 4))
        h, w = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        z = rng.normal(size=(c_old + 2, h, w))
        omega = rng.uniform(size=(c_old, h, w))
        got = localization_prior_loss(torch.tensor(z), torch.tensor(omega))
        want = oracle_localization_prior_loss(z[:c_old], omega)
        assert got.item() == pytest.approx(want, abs=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_matches_central_differences(self, seed):
        rng = np.random.default_rng(40 + seed)
        z0 = rng.normal(size=(2, 2, 2))
        omega = rng.uniform(size=(2, 2, 2))
        z = torch.tensor(z0, requires_grad=True)
        localization_prior_loss(z, torch.tensor(omega)).backward()

        def f(arr):
            return oracle_localization_prior_loss(arr, omega)

        numeric = central_difference_gradient(f, z0)
        assert relative_gradient_error(z.grad.numpy(), numeric) < 1e-4

    def test_no_gradient_reaches_the_target(self):
        z = torch.randn(2, 2, 2, dtype=torch.float64, requires_grad=True)
        omega = torch.rand(2, 2, 2, dtype=torch.float64, requires_grad=True)
        localization_prior_loss(z, omega).backward()
        assert z.grad is not None
        assert omega.grad is None

    def test_gradient_descent_converges_to_target(self):
        # the loss is minimized exactly where sigmoid(z) equals the target
        torch.manual_seed(0)
        omega = torch.rand(2, 2, 2, dtype=torch.float64) * 0.8 + 0.1
        z = torch.zeros(2, 2, 2, dtype=torch.float64, requires_grad=True)
        opt = torch.optim.SGD([z], lr=5.0)
        for _ in range(3000):
            opt.zero_grad()
            localization_prior_loss(z, omega).backward()
            opt.step()
        assert (torch.sigmoid(z) - omega).abs().max().item() < 1e-3

    def test_spatial_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            localization_prior_loss(torch.zeros(3, 4, 4), torch.zeros(2, 3, 3))
        with pytest.raises(ShapeError):
            localization_prior_loss(torch.zeros(2, 4, 4), torch.zeros(3, 4, 4))


class TestCePrior:
    def test_uncertain_target_still_forced_hard(self):
        # old model barely prefers class 0; CE still demands full mass on it
        omega = torch.tensor([[[0.51]], [[0.49]]], dtype=torch.float64)
        z = torch.zeros(2, 1, 1, dtype=torch.float64)
        want = -math.log(0.5)
        assert ce_prior_loss(z, omega).item() == pytest.approx(want, abs=1e-12)

    def test_target_is_argmax_of_old_output(self):
        omega = torch.tensor([[[0.2]], [[0.9]]], dtype=torch.float64)
        z = torch.tensor([[[3.0]], [[1.0]]], dtype=torch.float64)
        # cross-entropy of softmax([3, 1]) against class 1
        want = -math.log(math.exp(1.0) / (math.exp(3.0) + math.exp(1.0)))
        assert ce_prior_loss(z, omega).item() == pytest.approx(want, abs=1e-12)


class TestFixedPrior:
    def test_concatenates_frozen_old_channels(self):
        z = torch.randn(5, 3, 3)
        omega = torch.rand(3, 3, 3)
        zf = fixed_prior_scores(z, omega)
        assert zf.shape == (5, 3, 3)
        assert torch.equal(zf[:3], omega)
        assert torch.equal(zf[3:], z[3:])

    def test_old_channels_carry_no_gradient(self):
        z = torch.randn(4, 2, 2, requires_grad=True)
        omega = torch.rand(2, 2, 2)
        zf = fixed_prior_scores(z, omega)
        zf.sum().backward()
        assert torch.equal(z.grad[:2], torch.zeros(2, 2, 2))
        assert torch.equal(z.grad[2:], torch.ones(2, 2, 2))

    def test_needs_learned_new_channels(self):
        with pytest.raises(ShapeError):
            fixed_prior_scores(torch.zeros(3, 2, 2), torch.zeros(3, 2, 2))

    def test_rejected_with_all_classes_supervision(self):
        with pytest.raises(ConfigError):
            check_prior_config("fixed", "all-classes")
        check_prior_config("fixed", "new-only")
        check_prior_config("loc", "all-classes")
        with pytest.raises(ConfigError):
            check_prior_config("nonsense", "new-only")


class TestAreaDownsample:
    def test_preserves_mean_mass(self):
        x = torch.rand(2, 8, 8, dtype=torch.float64)
        down = area_downsample(x, (4, 4))
        assert down.shape == (2, 4, 4)
        assert down.mean().item() == pytest.approx(x.mean().item(), abs=1e-12)

    def test_exact_block_average(self):
        x = torch.arange(16, dtype=torch.float64).reshape(1, 4, 4)
        down = area_downsample(x, (2, 2))
        want = torch.tensor([[[2.5, 4.5], [10.5, 12.5]]], dtype=torch.float64)
        assert torch.allclose(down, want)
