import math

import numpy as np
import pytest
import torch

from stereodistill.geometry import (
    CameraRig,
    DisparityLogitVolume,
    bilinear_sample,
    disparity_to_depth,
    quantize_disparities,
    refine,
    reproject_left,
    synthesize_right,
    volume_to_disparity,
)

from conftest import check_gradients, rand_t


class TestQuantize:
    def test_endpoints_exact(self):
        levels = quantize_disparities(2, 300, 49)
        assert levels.values[0].item() == 300.0
        assert levels.values[48].item() == 2.0

    def test_interior_value(self):
        # independent evaluation: 300 * (2/300)^(24/48) = sqrt(600)
        levels = quantize_disparities(2, 300, 49)
        assert levels.values[24].item() == pytest.approx(math.sqrt(600.0), rel=1e-12)

    def test_monotone_decreasing(self):
        levels = quantize_disparities(2, 300, 49)
        diffs = levels.values[1:] - levels.values[:-1]
        assert bool((diffs < 0).all())
        assert bool((levels.values >= 2).all()) and bool((levels.values <= 300).all())

    def test_degenerate_equal_range(self):
        levels = quantize_disparities(5, 5, 3)
        assert levels.values.tolist() == [5.0, 5.0, 5.0]

    def test_single_level(self):
        assert quantize_disparities(7, 7, 1).values.tolist() == [7.0]

    @pytest.mark.parametrize("args", [(0, 10, 5), (-1, 10, 5), (10, 2, 5), (2, 10, 0), (2, 10, 1)])
    def test_invalid_args(self, args):
        with pytest.raises(ValueError):
            quantize_disparities(*args)


class TestBilinearSample:
    def test_integer_grid_is_identity(self, rng):
        f = rand_t(rng, 2, 5, 7)
        ys, xs = torch.meshgrid(torch.arange(5.0), torch.arange(7.0), indexing="ij")
        coords = torch.stack([xs, ys]).double()
        out = bilinear_sample(f, coords)
        assert torch.equal(out, f)

    def test_center_of_2x2_patch(self):
        f = torch.tensor([[[0.0, 1.0], [2.0, 3.0]]])
        coords = torch.tensor([[[0.5]], [[0.5]]])
        assert bilinear_sample(f, coords).item() == pytest.approx(1.5)

    def test_out_of_range_clamps_to_border(self, rng):
        f = rand_t(rng, 1, 4, 6)
        coords = torch.tensor([[[-10.0, 15.0]], [[0.0, 3.0]]]).double()
        out = bilinear_sample(f, coords)
        assert out[0, 0, 0].item() == pytest.approx(f[0, 0, 0].item())
        assert out[0, 0, 1].item() == pytest.approx(f[0, 3, 5].item())

    def test_affine_exactness_interior(self, rng):
        # bilinear interpolation reproduces f(x, y) = a + b x + c y exactly
        a, b, c = 0.3, 0.7, -1.1
        ys, xs = torch.meshgrid(torch.arange(8.0), torch.arange(9.0), indexing="ij")
        f = (a + b * xs + c * ys).unsqueeze(0).double()
        qx = rand_t(rng, 4, 4, lo=0.0, hi=8.0)
        qy = rand_t(rng, 4, 4, lo=0.0, hi=7.0)
        out = bilinear_sample(f, torch.stack([qx, qy]))
        expected = a + b * qx + c * qy
        assert torch.allclose(out.squeeze(0), expected, atol=1e-12)

    def test_shape_mismatch(self, rng):
        f = rand_t(rng, 1, 4, 4)
        with pytest.raises(ValueError):
            bilinear_sample(f, torch.zeros(3, 4, 4))

    def test_batched_matches_unbatched(self, rng):
        f = rand_t(rng, 3, 2, 6, 5)
        coords = torch.stack([rand_t(rng, 3, 4, 4, hi=4.9), rand_t(rng, 3, 4, 4, hi=5.9)], dim=1)
        out = bilinear_sample(f, coords)
        for i in range(3):
            assert torch.allclose(out[i], bilinear_sample(f[i], coords[i]))


class TestRefine:
    def test_zero_offset_identity(self, rng):
        f = rand_t(rng, 3, 6, 8, dtype=torch.float32)
        out = refine(f, torch.zeros(2, 6, 8))
        assert (out - f).abs().max().item() <= 1e-6

    def test_integer_shift_matches_brute_force(self, rng):
        f = rand_t(rng, 2, 6, 10)
        delta = torch.zeros(2, 6, 10, dtype=torch.float64)
        delta[0] = 1.0  # sample at x+1
        out = refine(f, delta)
        assert torch.allclose(out[:, :, :-1], f[:, :, 1:], atol=1e-12)

    def test_half_pixel_shift_on_ramp(self):
        xs = torch.arange(8.0).repeat(5, 1).unsqueeze(0).double()
        delta = torch.zeros(2, 5, 8, dtype=torch.float64)
        delta[0] = 0.5
        out = refine(xs, delta)
        assert torch.allclose(out[:, :, :-1], xs[:, :, :-1] + 0.5, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            refine(torch.zeros(1, 4, 4), torch.zeros(2, 5, 4))


class TestVolumeToDisparity:
    def test_uniform_logits_give_mean_of_levels(self):
        levels = quantize_disparities(2.5, 10.0, 3)
        assert levels.values.tolist() == pytest.approx([10.0, 5.0, 2.5])
        vol = DisparityLogitVolume(torch.zeros(3, 4, 4), levels)
        d = volume_to_disparity(vol)
        assert torch.allclose(d, torch.full((1, 4, 4), 17.5 / 3), atol=1e-6)

    def test_saturated_logit_selects_level(self):
        levels = quantize_disparities(2.5, 10.0, 3)
        logits = torch.zeros(3, 2, 2)
        logits[1] = 50.0
        d = volume_to_disparity(DisparityLogitVolume(logits, levels))
        assert (d - 5.0).abs().max().item() < 1e-6

    def test_single_level_constant(self):
        levels = quantize_disparities(4.0, 4.0, 1)
        d = volume_to_disparity(DisparityLogitVolume(torch.randn(1, 3, 3), levels))
        assert torch.allclose(d, torch.full((1, 3, 3), 4.0))

    def test_output_in_range_and_probs_normalized(self, rng):
        levels = quantize_disparities(2, 40, 17)
        logits = rand_t(rng, 17, 6, 6, lo=-30, hi=30, dtype=torch.float32)
        vol = DisparityLogitVolume(logits, levels)
        probs = vol.probabilities()
        assert (probs.sum(dim=0) - 1).abs().max().item() < 1e-5
        d = volume_to_disparity(vol)
        assert bool((d >= 2).all()) and bool((d <= 40).all())

    def test_channel_count_must_match_levels(self):
        levels = quantize_disparities(2, 40, 17)
        with pytest.raises(ValueError):
            DisparityLogitVolume(torch.zeros(16, 4, 4), levels)


class TestDisparityToDepth:
    def test_unit_depth(self):
        rig = CameraRig(0.5, 200.0)
        d = torch.full((1, 3, 3), rig.bf)
        assert torch.allclose(disparity_to_depth(d, rig), torch.ones(1, 3, 3))

    def test_direct_arithmetic(self):
        rig = CameraRig(0.1, 1000.0)  # bf = 100
        out = disparity_to_depth(torch.full((1, 2, 2), 4.0), rig)
        assert torch.allclose(out, torch.full((1, 2, 2), 25.0))

    def test_min_depth_at_max_disparity(self):
        rig = CameraRig(0.1, 960.0)
        d = torch.full((1, 2, 2), 40.0)
        assert torch.allclose(disparity_to_depth(d, rig), torch.full((1, 2, 2), rig.bf / 40.0))

    def test_nonpositive_disparity_rejected(self):
        with pytest.raises(ValueError):
            disparity_to_depth(torch.zeros(1, 2, 2), CameraRig(0.1, 960.0))

    def test_bad_rig_rejected(self):
        with pytest.raises(ValueError):
            CameraRig(0.0, 100.0)


class TestSynthesizeRight:
    def test_constant_image_stays_constant(self, rng):
        levels = quantize_disparities(2, 20, 5)
        logits = rand_t(rng, 5, 6, 32, lo=-3, hi=3)
        left = torch.full((3, 6, 32), 0.42, dtype=torch.float64)
        out = synthesize_right(DisparityLogitVolume(logits, levels), left)
        assert torch.allclose(out, left, atol=1e-12)

    def test_one_hot_integer_shift_oracle(self, rng):
        # saturated logits at a level with integer disparity reproduce a pure
        # integer shift of the left image away from the right border band
        d_shift = 6
        levels = quantize_disparities(3, 12, 3)  # values [12, 6, 3]
        assert levels.values[1].item() == pytest.approx(6.0)
        logits = torch.zeros(3, 5, 40, dtype=torch.float64)
        logits[1] = 50.0
        left = rand_t(rng, 3, 5, 40)
        out = synthesize_right(DisparityLogitVolume(logits, levels), left)
        shifted = torch.empty_like(left)
        w = left.shape[-1]
        for x in range(w):  # brute-force shift with border clamp
            shifted[:, :, x] = left[:, :, min(x + d_shift, w - 1)]
        interior = out[:, :, : w - d_shift] - shifted[:, :, : w - d_shift]
        assert interior.abs().max().item() < 1e-9

    def test_near_zero_disparity_limit(self, rng):
        levels = quantize_disparities(1e-4, 1e-4, 1)
        logits = rand_t(rng, 1, 4, 8)
        left = rand_t(rng, 3, 4, 8)
        out = synthesize_right(DisparityLogitVolume(logits, levels), left)
        assert (out - left).abs().max().item() < 1e-3

    def test_shape_mismatch(self, rng):
        levels = quantize_disparities(2, 10, 3)
        with pytest.raises(ValueError):
            synthesize_right(DisparityLogitVolume(torch.zeros(3, 4, 8), levels),
                             torch.zeros(3, 4, 9))


class TestReprojectLeft:
    def test_huge_depth_is_identity(self, rng):
        right = rand_t(rng, 3, 5, 9)
        depth = torch.full((1, 5, 9), 1e9, dtype=torch.float64)
        out = reproject_left(right, depth, CameraRig(0.5, 100.0))
        assert torch.allclose(out, right, atol=1e-6)

    def test_constant_depth_integer_shift(self, rng):
        rig = CameraRig(0.1, 960.0)  # bf = 96
        right = rand_t(rng, 3, 4, 20)
        depth = torch.full((1, 4, 20), rig.bf / 3.0, dtype=torch.float64)
        out = reproject_left(right, depth, rig)
        assert torch.allclose(out[:, :, 3:], right[:, :, :-3], atol=1e-9)

    def test_nonpositive_depth_rejected(self):
        with pytest.raises(ValueError):
            reproject_left(torch.rand(3, 4, 4), torch.zeros(1, 4, 4), CameraRig(0.1, 960.0))


class TestGradients:
    """Analytic vs central finite-difference gradients, step 1e-3, rel < 1e-3."""

    def test_refine_grads(self, rng):
        f = rand_t(rng, 2, 8, 8)
        # offsets bounded away from the integer lattice where the kernel kinks
        delta = rand_t(rng, 2, 8, 8, lo=0.2, hi=0.8)
        weights = rand_t(rng, 2, 8, 8)
        check_gradients(lambda: (refine(f, delta) * weights).sum(),
                        {"feature": f, "delta": delta})

    def test_synthesize_right_grads(self, rng):
        levels = quantize_disparities(1.3, 4.7, 4)
        logits = rand_t(rng, 4, 8, 8, lo=-1, hi=1)
        left = rand_t(rng, 3, 8, 8)
        weights = rand_t(rng, 3, 8, 8)
        check_gradients(
            lambda: (synthesize_right(DisparityLogitVolume(logits, levels), left) * weights).sum(),
            {"logits": logits, "left": left})

    def test_reproject_left_grads(self, rng):
        rig = CameraRig(0.25, 10.0)  # bf = 2.5
        right = rand_t(rng, 3, 8, 8)
        disparity = rand_t(rng, 1, 8, 8, lo=1.2, hi=2.8)
        depth = rig.bf / disparity
        weights = rand_t(rng, 3, 8, 8)
        check_gradients(lambda: (reproject_left(right, depth, rig) * weights).sum(),
                        {"right": right, "depth": depth})
