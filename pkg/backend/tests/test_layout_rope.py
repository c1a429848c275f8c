from __future__ import annotations

import pytest
import torch

from pixmot.layout import CleanImage, LayoutError, NoiseImage, SegmentLayout, Text, TokenType, parse_layout
from pixmot.numerics import DTYPE, RandomStream, ShapeError
from pixmot.rope import (
    THETA_SPATIAL,
    THETA_TEMPORAL,
    PositionTriple,
    RopeConfig,
    apply_rope,
    assign_positions,
    rope_config_for_head,
)


class TestLayout:
    def test_parse_and_describe(self):
        layout = parse_layout("T6, I1x2 ,N2x2p")
        assert layout.segments == (Text(6), CleanImage(1, 2), NoiseImage(2, 2, paired=True))
        assert layout.size == 12
        assert layout.has_noise
        assert layout.describe() == "T6,I1x2,N2x2p"

    def test_token_types(self):
        types = parse_layout("T2,I1x1,N1x2").token_types()
        assert types == [TokenType.TEXT] * 2 + [TokenType.CLEAN_IMAGE] + [TokenType.NOISE_IMAGE] * 2

    @pytest.mark.parametrize("text", ["", "T0", "X3", "I2", "N0x1"])
    def test_bad_layouts(self, text):
        with pytest.raises(LayoutError):
            parse_layout(text)

    def test_spans(self):
        spans = list(SegmentLayout((Text(3), CleanImage(2, 2))).spans())
        assert [(s.start, s.stop) for s in spans] == [(0, 3), (3, 7)]


class TestPositions:
    def test_text_then_image(self):
        pos = assign_positions(parse_layout("T3,I2x2,T1"))
        assert pos.tolist() == [
            [0, 0, 0],
            [1, 0, 0],
            [2, 0, 0],
            [3, 0, 0],
            [3, 0, 1],
            [3, 1, 0],
            [3, 1, 1],
            [4, 0, 0],
        ]

    def test_paired_noise_reuses_clean_positions(self):
        pos = assign_positions(parse_layout("T2,I1x2,N1x2p"))
        assert torch.equal(pos[2:4], pos[4:6])

    def test_unpaired_noise_gets_its_own_time(self):
        pos = assign_positions(parse_layout("T2,I1x2,N1x2"))
        assert int(pos[4, 0]) == int(pos[2, 0]) + 1

    def test_paired_noise_needs_matching_clean_grid(self):
        with pytest.raises(LayoutError):
            assign_positions(parse_layout("T2,I1x2,N2x2p"))


class TestRope:
    def test_config_split_and_thetas(self):
        cfg = rope_config_for_head(16)
        assert (cfg.dims_t, cfg.dims_h, cfg.dims_w) == (8, 4, 4)
        assert cfg.theta_t == THETA_TEMPORAL and cfg.theta_h == THETA_SPATIAL
        with pytest.raises(ShapeError):
            rope_config_for_head(12)
        with pytest.raises(ShapeError):
            RopeConfig(3, 2, 2)

    def test_zero_position_is_identity(self):
        cfg = rope_config_for_head(16)
        x, _ = RandomStream.from_seed(0).normal_tensor((16,))
        assert torch.allclose(apply_rope(x, PositionTriple(0, 0, 0), cfg), x, atol=1e-15)

    def test_norm_preserved(self):
        cfg = rope_config_for_head(16)
        x, _ = RandomStream.from_seed(1).normal_tensor((16,))
        y = apply_rope(x, PositionTriple(123, 4, 7), cfg)
        assert float(y.norm()) == pytest.approx(float(x.norm()), rel=1e-12)

    def test_scores_depend_on_offset_only(self):
        cfg = rope_config_for_head(16)
        rng = RandomStream.from_seed(2)
        q, rng = rng.normal_tensor((16,))
        k, _ = rng.normal_tensor((16,))

        def score(pq, pk):
            return float(apply_rope(q, pq, cfg) @ apply_rope(k, pk, cfg))

        a = score(PositionTriple(10, 3, 1), PositionTriple(4, 1, 0))
        b = score(PositionTriple(110, 5, 9), PositionTriple(104, 3, 8))
        assert a == pytest.approx(b, abs=1e-9)

    def test_axes_touch_their_own_slices(self):
        cfg = rope_config_for_head(16)
        x = torch.ones(16, dtype=DTYPE)
        moved = apply_rope(x, PositionTriple(0, 5, 0), cfg)
        assert torch.equal(moved[:8], x[:8])
        assert torch.equal(moved[12:], x[12:])
        assert not torch.allclose(moved[8:12], x[8:12])

    def test_batched_matches_single(self):
        cfg = rope_config_for_head(8)
        x, _ = RandomStream.from_seed(3).normal_tensor((3, 2, 8))
        pos = assign_positions(parse_layout("T1,I1x2"))
        out = apply_rope(x, pos, cfg)
        for i in range(3):
            for h in range(2):
                single = apply_rope(x[i, h], PositionTriple(*pos[i].tolist()), cfg)
                assert torch.allclose(out[i, h], single, atol=1e-14)

    def test_head_size_mismatch(self):
        with pytest.raises(ShapeError):
            apply_rope(torch.zeros(8, dtype=DTYPE), PositionTriple(0, 0, 0), rope_config_for_head(16))
