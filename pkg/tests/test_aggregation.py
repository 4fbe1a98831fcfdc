import math

import pytest
import torch
import torch.nn.functional as F

from stereodistill.aggregation import (
    DISTILLED,
    RAW,
    OffsetFusionBlock,
    offset_norm_stats,
    switch_offset,
)

from conftest import rand_t


class TestSwitchOffset:
    def test_raw_selects_first(self, rng):
        a, b = rand_t(rng, 2, 4, 4), rand_t(rng, 2, 4, 4)
        assert torch.equal(switch_offset(a, b, RAW), a)

    def test_distilled_selects_second(self, rng):
        a, b = rand_t(rng, 2, 4, 4), rand_t(rng, 2, 4, 4)
        assert torch.equal(switch_offset(a, b, DISTILLED), b)

    def test_equal_inputs_either_path(self, rng):
        a = rand_t(rng, 2, 4, 4)
        assert torch.equal(switch_offset(a, a, RAW), switch_offset(a, a, DISTILLED))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            switch_offset(torch.zeros(2, 4, 4), torch.zeros(2, 4, 5), RAW)

    def test_bad_path(self):
        with pytest.raises(ValueError):
            switch_offset(torch.zeros(2, 4, 4), torch.zeros(2, 4, 4), "other")


def _zero_offsets(block):
    for branch in (block.branch_f, block.branch_c1, block.branch_c2):
        if branch is None:
            continue
        with torch.no_grad():
            branch[-1].weight.zero_()
            branch[-1].bias.zero_()


def _offset_free_reference(block, f_prev, c_skip):
    f = F.interpolate(F.elu(block.conv_prev(f_prev)), scale_factor=2,
                      mode="bilinear", align_corners=False)
    c = F.elu(block.bn_skip(block.conv_skip(c_skip)))
    return F.elu(block.fuse(c + f))


class TestOffsetFusionBlock:
    def test_zero_offsets_reduce_to_additive_aggregation(self, rng):
        torch.manual_seed(0)
        block = OffsetFusionBlock(prev_ch=8, skip_ch=12, width=16).eval()
        _zero_offsets(block)  # weight surgery: all branches emit zeros
        f_prev = torch.randn(1, 8, 6, 10)
        c_skip = torch.randn(1, 12, 12, 20)
        with torch.no_grad():
            out = block(f_prev, c_skip, RAW)
            ref = _offset_free_reference(block, f_prev, c_skip)
        assert (out - ref).abs().max().item() <= 1e-6

    def test_tied_branches_make_paths_identical(self):
        torch.manual_seed(1)
        block = OffsetFusionBlock(prev_ch=8, skip_ch=12, width=16).eval()
        block.branch_c2.load_state_dict(block.branch_c1.state_dict())
        f_prev = torch.randn(1, 8, 6, 10)
        c_skip = torch.randn(1, 12, 12, 20)
        with torch.no_grad():
            assert torch.equal(block(f_prev, c_skip, RAW), block(f_prev, c_skip, DISTILLED))

    def test_untied_branches_make_paths_differ(self):
        torch.manual_seed(2)
        block = OffsetFusionBlock(prev_ch=8, skip_ch=12, width=16).eval()
        # give the two skip branches genuinely different refinements
        with torch.no_grad():
            block.branch_c1[-1].weight.normal_(0, 0.05)
            block.branch_c2[-1].weight.normal_(0, 0.05)
        f_prev = torch.randn(1, 8, 6, 10)
        c_skip = torch.randn(1, 12, 12, 20)
        with torch.no_grad():
            assert not torch.equal(block(f_prev, c_skip, RAW), block(f_prev, c_skip, DISTILLED))

    def test_output_shape(self):
        block = OffsetFusionBlock(prev_ch=64, skip_ch=96, width=64).eval()
        out = block(torch.randn(1, 64, 12, 40), torch.randn(1, 96, 24, 80), RAW)
        assert out.shape == (1, 64, 24, 80)

    def test_spatial_contract_enforced(self):
        block = OffsetFusionBlock(prev_ch=8, skip_ch=8, width=8)
        with pytest.raises(ValueError):
            block(torch.randn(1, 8, 6, 10), torch.randn(1, 8, 13, 20), RAW)

    def test_gradients_reach_both_inputs(self):
        torch.manual_seed(3)
        block = OffsetFusionBlock(prev_ch=4, skip_ch=4, width=8)
        f_prev = torch.randn(1, 4, 4, 4, requires_grad=True)
        c_skip = torch.randn(1, 4, 8, 8, requires_grad=True)
        block(f_prev, c_skip, RAW).sum().backward()
        assert f_prev.grad is not None and f_prev.grad.abs().sum() > 0
        assert c_skip.grad is not None and c_skip.grad.abs().sum() > 0

    def test_offsets_collected(self):
        torch.manual_seed(4)
        block = OffsetFusionBlock(prev_ch=4, skip_ch=4, width=8).eval()
        got = {}
        block(torch.randn(1, 4, 4, 4), torch.randn(1, 4, 8, 8), RAW, collect=got)
        assert set(got) == {"delta_f", "delta_c1", "delta_c2"}
        assert got["delta_f"].shape == (1, 2, 8, 8)


class TestTwoBranchVariant:
    def test_zero_offsets_reduce_to_additive_aggregation(self):
        torch.manual_seed(5)
        block = OffsetFusionBlock(prev_ch=8, skip_ch=12, width=16, dual_skip=False).eval()
        _zero_offsets(block)
        f_prev = torch.randn(1, 8, 6, 10)
        c_skip = torch.randn(1, 12, 12, 20)
        with torch.no_grad():
            out = block(f_prev, c_skip, RAW)
            ref = _offset_free_reference(block, f_prev, c_skip)
        assert (out - ref).abs().max().item() <= 1e-6

    def test_equals_dual_raw_path_with_copied_weights(self):
        torch.manual_seed(6)
        dual = OffsetFusionBlock(prev_ch=8, skip_ch=12, width=16, dual_skip=True).eval()
        single = OffsetFusionBlock(prev_ch=8, skip_ch=12, width=16, dual_skip=False).eval()
        state = {k: v for k, v in dual.state_dict().items() if not k.startswith("branch_c2")}
        single.load_state_dict(state)
        f_prev = torch.randn(1, 8, 6, 10)
        c_skip = torch.randn(1, 12, 12, 20)
        with torch.no_grad():
            assert torch.equal(single(f_prev, c_skip, RAW), dual(f_prev, c_skip, RAW))

    def test_output_shape(self):
        block = OffsetFusionBlock(prev_ch=64, skip_ch=96, width=64, dual_skip=False).eval()
        out = block(torch.randn(1, 64, 12, 40), torch.randn(1, 96, 24, 80), RAW)
        assert out.shape == (1, 64, 24, 80)


class TestOffsetNormStats:
    def test_zero_offsets(self):
        assert offset_norm_stats([torch.zeros(2, 4, 4)]) == [0.0]

    def test_pythagorean(self):
        d = torch.empty(2, 3, 3)
        d[0] = 3.0
        d[1] = 4.0
        assert offset_norm_stats([d])[0] == pytest.approx(5.0)

    def test_matches_loop_oracle(self, rng):
        d = rand_t(rng, 2, 6, 7, lo=-3, hi=3, dtype=torch.float32)
        ours = offset_norm_stats([d])[0]
        acc = 0.0
        for y in range(6):
            for x in range(7):
                acc += math.sqrt(d[0, y, x] ** 2 + d[1, y, x] ** 2)
        assert ours == pytest.approx(acc / 42, abs=1e-6)

    def test_empty_list_rejected(self):
        with pytest.raises(ValueError):
            offset_norm_stats([])
