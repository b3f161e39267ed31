import math

import numpy as np
import pytest
import torch

from incseg.pamr import (
    RefinedPseudoGT,
    compute_affinity,
    gather_neighbors,
    pamr_refine,
    pseudo_gt_from_refined,
    sss_loss,
)
from incseg.pooling import softmax_normalize
from oracles import (
    central_difference_gradient,
    oracle_softmax,
    oracle_sss_loss,
    relative_gradient_error,
)


def neighbor_slots(dilations):
    # documented slot layout: dilations outermost, 3x3 offsets (row-major,
    # center excluded) innermost
    offsets = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)]
    return [(dy * d, dx * d) for d in dilations for dy, dx in offsets]


def refine_once_oracle(m, field):
    """Scalar unroll of one refinement sweep given the affinity weights."""
    m = np.asarray(m, dtype=np.float64)
    w = field.weights[0].numpy().astype(np.float64)
    slots = neighbor_slots(field.dilations)
    c, h, wd = m.shape
    out = np.zeros_like(m)
    for k in range(c):
        for i in range(h):
            for j in range(wd):
                acc = 0.0
                for n, (dy, dx) in enumerate(slots):
                    y, x = i + dy, j + dx
                    if 0 <= y < h and 0 <= x < wd:
                        acc += w[n, i, j] * m[k, y, x]
                out[k, i, j] = acc
    return out


class TestAffinity:
    def test_constant_image_gives_uniform_valid_weights(self):
        image = torch.full((3, 4, 4), 0.5)
        field = compute_affinity(image, dilations=(1,))
        w = field.weights[0]
        # corner pixel has exactly 3 in-bounds neighbors
        corner = w[:, 0, 0]
        assert (corner > 0).sum().item() == 3
        assert corner[corner > 0].allclose(torch.tensor(1.0 / 3.0))
        # interior pixel has all 8
        interior = w[:, 1, 1]
        assert (interior > 0).sum().item() == 8
        assert interior[interior > 0].allclose(torch.tensor(0.125))

    def test_rows_sum_to_one(self):
        rng = torch.Generator().manual_seed(0)
        image = torch.rand(3, 9, 9, generator=rng)
        field = compute_affinity(image)
        sums = field.weights.sum(dim=1)
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)
        assert field.weights.min().item() >= 0

    def test_two_region_boundary_weights_lower_across(self):
        image = torch.zeros(3, 6, 6)
        image[:, :, 3:] = 1.0  # left dark, right bright
        field = compute_affinity(image, dilations=(1,))
        slots = neighbor_slots((1,))
        left_slot = slots.index((0, -1))
        right_slot = slots.index((0, 1))
        w = field.weights[0]
        # boundary pixel (2, 2): left neighbor same region, right crosses
        assert w[left_slot, 2, 2].item() > w[right_slot, 2, 2].item()
        # and symmetrically from the bright side
        assert w[right_slot, 2, 3].item() > w[left_slot, 2, 3].item()

    def test_out_of_bounds_neighbors_excluded(self):
        image = torch.rand(3, 5, 5)
        field = compute_affinity(image, dilations=(1, 4))
        slots = neighbor_slots((1, 4))
        for n, (dy, dx) in enumerate(slots):
            # any slot pointing outside must carry zero weight at the border
            if dy < 0:
                assert field.weights[0, n, 0, :].abs().max().item() == 0.0
            if dx > 0:
                assert field.weights[0, n, :, -1].abs().max().item() == 0.0


class TestRefine:
    def test_zero_iterations_is_identity(self):
        rng = torch.Generator().manual_seed(1)
        m = torch.softmax(torch.randn(3, 5, 5, generator=rng), dim=0)
        field = compute_affinity(torch.rand(3, 5, 5, generator=rng))
        assert torch.equal(pamr_refine(m, field, 0), m)

    def test_constant_map_unchanged(self):
        m = torch.full((4, 6, 6), 0.25)
        field = compute_affinity(torch.rand(3, 6, 6))
        out = pamr_refine(m, field, 10)
        assert torch.allclose(out, m, atol=1e-6)

    def test_single_sweep_matches_scalar_unroll(self):
        rng = torch.Generator().manual_seed(2)
        m = torch.softmax(torch.randn(2, 2, 2, generator=rng, dtype=torch.float64), dim=0)
        image = torch.rand(3, 2, 2, generator=rng, dtype=torch.float64)
        field = compute_affinity(image, dilations=(1,))
        got = pamr_refine(m, field, 1).numpy()
        want = refine_once_oracle(m.numpy(), field)
        np.testing.assert_allclose(got, want, atol=1e-6)

    def test_simplex_preserved_after_ten_iterations(self):
        for seed in range(5):
            rng = torch.Generator().manual_seed(seed)
            m = torch.softmax(torch.randn(3, 16, 16, generator=rng), dim=0)
            field = compute_affinity(torch.rand(3, 16, 16, generator=rng))
            out = pamr_refine(m, field, 10)
            assert torch.allclose(out.sum(0), torch.ones(16, 16), atol=1e-5)

    def test_max_change_non_increasing(self):
        for seed in range(5):
            rng = torch.Generator().manual_seed(100 + seed)
            m = torch.softmax(torch.randn(3, 16, 16, generator=rng), dim=0)
            field = compute_affinity(torch.rand(3, 16, 16, generator=rng))
            deltas = []
            prev = m
            for _ in range(10):
                cur = pamr_refine(prev, field, 1)
                deltas.append((cur - prev).abs().max().item())
                prev = cur
            assert all(deltas[i + 1] <= deltas[i] + 1e-9 for i in range(len(deltas) - 1))

    def test_output_detached(self):
        z = torch.randn(2, 4, 4, requires_grad=True)
        m = softmax_normalize(z)
        field = compute_affinity(torch.rand(3, 4, 4))
        assert not pamr_refine(m, field, 3).requires_grad


class TestPseudoGT:
    def test_uniform_single_class_all_labeled(self):
        # every pixel equals the spatial max, so every pixel is claimed
        m = torch.full((1, 3, 3), 1.0)
        gt = pseudo_gt_from_refined(m)
        assert (gt.labels == 0).all()

    def test_dominant_class_with_quiet_competitor(self):
        m = torch.zeros(2, 3, 3)
        m[1] = 0.9
        m[0] = 0.1
        m[0, 0, 0] = 0.6  # raise the background peak so other pixels fall below it
        m[1, 0, 0] = 0.4
        gt = pseudo_gt_from_refined(m)
        assert gt.labels[0, 0].item() == 0
        assert (gt.labels.view(-1)[1:] == 1).all()

    def test_clashing_pixels_ignored(self):
        # both classes above their confidence share one pixel
        m = torch.tensor([
            [[0.9, 0.1], [0.1, 0.9]],
            [[0.8, 0.2], [0.2, 0.1]],
        ])
        gt = pseudo_gt_from_refined(m, bg_confidence=0.7, fg_confidence=0.6)
        assert gt.labels[0, 0].item() == 255  # claimed by both
        assert gt.labels[1, 1].item() == 0    # background only

    def test_matches_brute_force_rule(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            m = rng.uniform(size=(2, 3, 3))
            m = m / m.sum(axis=0, keepdims=True)
            gt = pseudo_gt_from_refined(torch.tensor(m))
            thresholds = [0.7, 0.6]
            for i in range(3):
                for j in range(3):
                    claims = [c for c in range(2)
                              if m[c, i, j] > thresholds[c] * m[c].max()]
                    want = claims[0] if len(claims) == 1 else 255
                    assert gt.labels[i, j].item() == want

    def test_class_weights_formula(self):
        # |I| = 100, coverage 20 -> (100 - 20) / 101
        m = torch.zeros(2, 10, 10)
        m[0] = 0.2
        m[1] = 0.8
        gt = pseudo_gt_from_refined(m)
        assert gt.class_weights[0].item() == pytest.approx(80.0 / 101.0, abs=1e-6)
        assert gt.class_weights[1].item() == pytest.approx(20.0 / 101.0, abs=1e-6)

    def test_weights_in_unit_interval(self):
        rng = torch.Generator().manual_seed(3)
        m = torch.softmax(torch.randn(4, 8, 8, generator=rng), dim=0)
        gt = pseudo_gt_from_refined(m)
        assert (gt.class_weights > 0).all() and (gt.class_weights < 1).all()


class TestSssLoss:
    def test_all_ignore_is_zero(self):
        m = torch.softmax(torch.randn(2, 3, 3), dim=0)
        gt = RefinedPseudoGT(labels=torch.full((3, 3), 255, dtype=torch.long),
                             class_weights=torch.tensor([0.5, 0.5]))
        assert sss_loss(m, gt).item() == 0.0

    def test_saturated_match_vanishes(self):
        z = torch.zeros(2, 3, 3)
        z[0] = 50.0
        m = softmax_normalize(z)
        gt = RefinedPseudoGT(labels=torch.zeros(3, 3, dtype=torch.long),
                             class_weights=torch.tensor([0.5, 0.5]))
        assert sss_loss(m, gt).item() < 1e-12

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_scalar_oracle(self, seed):
        rng = np.random.default_rng(seed)
        c = int(rng.integers(2, 4))
        m = rng.uniform(0.05, 1.0, size=(c, 3, 3))
        m = m / m.sum(axis=0, keepdims=True)
        labels = rng.integers(0, c + 1, size=(3, 3))
        labels[labels == c] = 255
        weights = rng.uniform(0.1, 0.9, size=c)
        gt = RefinedPseudoGT(labels=torch.tensor(labels, dtype=torch.long),
                             class_weights=torch.tensor(weights))
        got = sss_loss(torch.tensor(m), gt)
        want = oracle_sss_loss(m, labels, weights, 255)
        assert got.item() == pytest.approx(want, abs=1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_matches_central_differences(self, seed):
        rng = np.random.default_rng(50 + seed)
        z0 = rng.normal(size=(2, 3, 3))
        labels = rng.integers(0, 2, size=(3, 3))
        labels[0, 0] = 255
        weights = rng.uniform(0.2, 0.8, size=2)
        gt = RefinedPseudoGT(labels=torch.tensor(labels, dtype=torch.long),
                             class_weights=torch.tensor(weights))
        z = torch.tensor(z0, requires_grad=True)
        sss_loss(softmax_normalize(z), gt).backward()

        def f(arr):
            return oracle_sss_loss(oracle_softmax(arr), labels, weights, 255)

        numeric = central_difference_gradient(f, z0)
        assert relative_gradient_error(z.grad.numpy(), numeric) < 1e-4


def test_gather_neighbors_layout():
    x = torch.arange(4.0).reshape(1, 1, 2, 2)
    values, valid = gather_neighbors(x, dilations=(1,))
    slots = neighbor_slots((1,))
    n_right = slots.index((0, 1))
    assert values[0, 0, n_right, 0, 0].item() == 1.0  # right neighbor of (0,0)
    assert valid[n_right, 0, 1].item() is False       # (0,1) has no right neighbor
    assert values[0, 0, n_right, 0, 1].item() == 0.0
