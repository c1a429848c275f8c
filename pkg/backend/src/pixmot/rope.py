from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch

from pixmot.layout import CleanImage, LayoutError, NoiseImage, SegmentLayout, Text
from pixmot.numerics import DTYPE, ShapeError, Tensor

THETA_TEMPORAL = 5_000_000.0
THETA_SPATIAL = 10_000.0


class PositionTriple(NamedTuple):
    t: int
    h: int
    w: int


@dataclass(frozen=True)
class RopeConfig:
    dims_t: int
    dims_h: int
    dims_w: int
    theta_t: float = THETA_TEMPORAL
    theta_h: float = THETA_SPATIAL
    theta_w: float = THETA_SPATIAL

    def __post_init__(self) -> None:
        for name in ("dims_t", "dims_h", "dims_w"):
            value = getattr(self, name)
            if value < 0 or value % 2:
                raise ShapeError(f"{name} must be a nonnegative even count, got {value}")
        if self.head_size <= 0:
            raise ShapeError("rotary head size must be positive")

    @property
    def head_size(self) -> int:
        return self.dims_t + self.dims_h + self.dims_w

    def frequencies(self) -> Tensor:
        """Per-pair angular frequencies, laid out [t pairs | h pairs | w pairs]."""
        parts = []
        for dims, theta in ((self.dims_t, self.theta_t), (self.dims_h, self.theta_h), (self.dims_w, self.theta_w)):
            i = torch.arange(dims // 2, dtype=DTYPE)
            parts.append(float(theta) ** (-2.0 * i / dims) if dims else i)
        return torch.cat(parts)


def rope_config_for_head(head_size: int) -> RopeConfig:
    # 2:1:1 split over (t, h, w), each slice an even count
    if head_size % 8:
        raise ShapeError(f"head size {head_size} must be divisible by 8 for a 2:1:1 rotary split")
    quarter = head_size // 4
    return RopeConfig(dims_t=2 * quarter, dims_h=quarter, dims_w=quarter)


def assign_positions(layout: SegmentLayout) -> Tensor:
    """Return an (n, 3) int64 tensor of (t, h, w) per token.

    Text advances t by one per token with h = w = 0. Every token of an image
    block shares one t; (h, w) walk its grid row-major. A paired noise block
    reuses the grid positions of the latest clean image of the same size.
    """
    if not layout.segments:
        raise LayoutError("cannot assign positions to an empty layout")
    rows: list[list[int]] = []
    t = 0
    last_clean: dict[tuple[int, int], int] = {}
    for seg in layout.segments:
        if isinstance(seg, Text):
            rows.extend([t + k, 0, 0] for k in range(seg.length))
            t += seg.length
            continue
        if isinstance(seg, NoiseImage) and seg.paired:
            key = (seg.rows, seg.cols)
            if key not in last_clean:
                raise LayoutError(f"paired noise block {seg.rows}x{seg.cols} has no clean image of the same grid")
            block_t = last_clean[key]
        else:
            block_t = t
            t += 1
        if isinstance(seg, CleanImage):
            last_clean[(seg.rows, seg.cols)] = block_t
        rows.extend([block_t, h, w] for h in range(seg.rows) for w in range(seg.cols))
    return torch.tensor(rows, dtype=torch.int64)


def rotation_angles(positions: Tensor, cfg: RopeConfig) -> Tensor:
    if positions.shape[-1] != 3:
        raise ShapeError(f"positions must end in a (t, h, w) triple, got shape {tuple(positions.shape)}")
    pos = positions.to(DTYPE)
    freqs = cfg.frequencies()
    n_t, n_h = cfg.dims_t // 2, cfg.dims_h // 2
    axis = torch.cat(
        [
            pos[..., 0:1].expand(*pos.shape[:-1], n_t),
            pos[..., 1:2].expand(*pos.shape[:-1], n_h),
            pos[..., 2:3].expand(*pos.shape[:-1], cfg.dims_w // 2),
        ],
        dim=-1,
    )
    return axis * freqs


def apply_rope(x: Tensor, positions: Tensor | PositionTriple, cfg: RopeConfig) -> Tensor:
    """Rotate interleaved (even, odd) pairs of ``x`` by the multi-axis angles of ``positions``.

    ``x`` is a single head vector ``(d,)`` with a ``(3,)`` position, or
    ``(n, heads, d)`` with ``(n, 3)`` positions.
    """
    if x.shape[-1] != cfg.head_size:
        raise ShapeError(f"head vector has length {x.shape[-1]}, rotary config expects {cfg.head_size}")
    if not isinstance(positions, torch.Tensor):
        positions = torch.tensor(tuple(positions), dtype=torch.int64)
    angles = rotation_angles(positions, cfg)
    if x.dim() == angles.dim() + 1:
        angles = angles.unsqueeze(-2)
    cos, sin = torch.cos(angles), torch.sin(angles)
    even, odd = x[..., 0::2], x[..., 1::2]
    rotated = torch.stack([even * cos - odd * sin, even * sin + odd * cos], dim=-1)
    return rotated.flatten(-2)
