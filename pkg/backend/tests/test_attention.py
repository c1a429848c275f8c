from __future__ import annotations

import pytest
import torch

from pixmot.attention import (
    BlockKind,
    FullyMaskedRowError,
    MaskSpec,
    attend_blocked,
    attend_reference,
    build_block_plan,
    build_mask,
    dense_causal_skipped,
    parse_layout,
    row_cutoffs,
)
from pixmot.layout import LayoutError
from pixmot.numerics import RandomStream


def _qkv(n, d=8, seed=0):
    qkv, _ = RandomStream.from_seed(seed).normal_tensor((3, n, d))
    return qkv[0], qkv[1], qkv[2]


class TestMask:
    def test_text_rows_are_causal(self):
        allow = build_mask(parse_layout("T4")).allow
        assert torch.equal(allow, torch.tril(torch.ones(4, 4, dtype=torch.bool)))

    def test_image_block_is_bidirectional(self):
        allow = build_mask(parse_layout("T2,I1x3")).allow
        assert bool(allow[2:5, 0:5].all())

    def test_noise_is_hidden_from_every_other_row(self):
        layout = parse_layout("T2,N1x2,T1,I1x1")
        allow = build_mask(layout).allow
        noise = [2, 3]
        others = [0, 1, 4, 5]
        assert not bool(allow[others][:, noise].any())
        # noise rows still read the prefix and their own block
        assert bool(allow[2:4, 0:4].all())

    def test_row_cutoffs(self):
        assert row_cutoffs(parse_layout("T2,I1x2,T1")) == [1, 2, 4, 4, 5]


class TestReference:
    def test_first_row_copies_first_value(self):
        q, k, v = _qkv(4)
        out = attend_reference(q, k, v, build_mask(parse_layout("T4")), 0.5)
        assert torch.allclose(out[0], v[0])

    def test_fully_masked_row(self):
        allow = torch.ones(3, 3, dtype=torch.bool)
        allow[1] = False
        q, k, v = _qkv(3)
        with pytest.raises(FullyMaskedRowError) as info:
            attend_reference(q, k, v, MaskSpec(allow), 1.0)
        assert info.value.row == 1


class TestBlockPlan:
    def test_classes_and_extension(self):
        plan = build_block_plan(parse_layout("T6,I1x2"), block_size=4)
        assert plan.image_token_end == 8
        assert plan.kinds() == [BlockKind.CAUSAL, BlockKind.EXTENDED]
        assert [b.key_end for b in plan.blocks] == [4, 8]

    def test_early_image_extends_only_its_block(self):
        plan = build_block_plan(parse_layout("T2,I1x2,T6"), block_size=4)
        assert plan.kinds() == [BlockKind.EXTENDED, BlockKind.CAUSAL, BlockKind.CAUSAL]
        assert [b.key_end for b in plan.blocks] == [4, 8, 10]

    def test_rejects_noise_layouts_and_bad_sizes(self):
        with pytest.raises(LayoutError):
            build_block_plan(parse_layout("T2,N1x2"))
        with pytest.raises(LayoutError):
            build_block_plan(parse_layout("T2"), block_size=0)

    @pytest.mark.parametrize("text", ["T6,I1x2", "T3,I2x2,T5", "T1,I1x3,T2,I2x1,T4", "T9"])
    @pytest.mark.parametrize("block_size", [1, 3, 4])
    def test_blocked_matches_reference(self, text, block_size):
        layout = parse_layout(text)
        q, k, v = _qkv(layout.size, seed=block_size)
        ref = attend_reference(q, k, v, build_mask(layout), 0.35)
        out, counters = attend_blocked(q, k, v, build_block_plan(layout, block_size), row_cutoffs(layout), 0.35)
        assert torch.allclose(out, ref, atol=1e-12)
        assert counters.causal_blocks + counters.extended_blocks == len(build_block_plan(layout, block_size).blocks)

    def test_pure_text_skips_like_dense_causal(self):
        layout = parse_layout("T13")
        q, k, v = _qkv(13)
        _, counters = attend_blocked(q, k, v, build_block_plan(layout, 4), row_cutoffs(layout), 1.0)
        assert counters.key_blocks_skipped == dense_causal_skipped(13, 4) == 6

    def test_thread_pool_agrees(self):
        layout = parse_layout("T5,I2x2,T3")
        plan = build_block_plan(layout, 2)
        q, k, v = _qkv(layout.size)
        serial, _ = attend_blocked(q, k, v, plan, row_cutoffs(layout), 0.5)
        pooled, _ = attend_blocked(q, k, v, plan, row_cutoffs(layout), 0.5, workers=3)
        assert torch.equal(serial, pooled)

    def test_multihead_operands(self):
        layout = parse_layout("T3,I1x2")
        qkv, _ = RandomStream.from_seed(4).normal_tensor((3, 2, layout.size, 8))
        q, k, v = qkv
        ref = attend_reference(q, k, v, build_mask(layout), 0.3)
        out, _ = attend_blocked(q, k, v, build_block_plan(layout, 2), row_cutoffs(layout), 0.3)
        assert torch.allclose(out, ref, atol=1e-12)
