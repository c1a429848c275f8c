from __future__ import annotations

import enum
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import torch

from pixmot.layout import LayoutError, SegmentLayout, TokenType, parse_layout
from pixmot.numerics import ShapeError, Tensor

__all__ = [
    "BlockKind",
    "BlockPlan",
    "BlockCounters",
    "FullyMaskedRowError",
    "MaskSpec",
    "attend_blocked",
    "attend_reference",
    "build_block_plan",
    "build_mask",
    "dense_causal_skipped",
    "parse_layout",
    "row_cutoffs",
]

logger = logging.getLogger(__name__)


class FullyMaskedRowError(ValueError):
    def __init__(self, row: int) -> None:
        super().__init__(f"attention row {row} has no allowed key column")
        self.row = row


@dataclass(frozen=True)
class MaskSpec:
    allow: Tensor  # (n, n) bool, [query row, key column]

    @property
    def size(self) -> int:
        return int(self.allow.shape[0])


class BlockKind(str, enum.Enum):
    CAUSAL = "causal-fast-path"
    EXTENDED = "image-extended"


@dataclass(frozen=True)
class QueryBlock:
    start: int
    stop: int
    key_end: int
    kind: BlockKind


@dataclass(frozen=True)
class BlockPlan:
    block_size: int
    n: int
    image_token_end: int
    blocks: tuple[QueryBlock, ...]

    def kinds(self) -> list[BlockKind]:
        return [b.kind for b in self.blocks]


@dataclass
class BlockCounters:
    key_blocks_visited: int = 0
    key_blocks_skipped: int = 0
    causal_blocks: int = 0
    extended_blocks: int = 0


def build_mask(layout: SegmentLayout) -> MaskSpec:
    n = layout.size
    allow = torch.zeros((n, n), dtype=torch.bool)
    types = torch.tensor([int(t) for t in layout.token_types()], dtype=torch.int64)
    not_noise = types != int(TokenType.NOISE_IMAGE)
    idx = torch.arange(n)
    for span in layout.spans():
        s, e = span.start, span.stop
        if span.token_type == TokenType.TEXT:
            allow[s:e] = (idx[None, :] <= idx[s:e, None]) & not_noise[None, :]
        else:
            # clean rows and noise rows both read earlier non-noise columns plus their own block
            allow[s:e, :s] = not_noise[:s]
            allow[s:e, s:e] = True
    return MaskSpec(allow)


def row_cutoffs(layout: SegmentLayout) -> list[int]:
    """Exclusive key cutoff per row: ``i + 1`` for text rows, the block end for image rows."""
    cutoffs: list[int] = []
    for span in layout.spans():
        if span.token_type == TokenType.TEXT:
            cutoffs.extend(range(span.start + 1, span.stop + 1))
        else:
            cutoffs.extend([span.stop] * (span.stop - span.start))
    return cutoffs


def build_block_plan(layout: SegmentLayout, block_size: int = 4) -> BlockPlan:
    if block_size < 1:
        raise LayoutError(f"block size must be positive, got {block_size}")
    if layout.has_noise:
        raise LayoutError(f"block plans cover clean prefill only; layout {layout.describe()} has a noise block")
    n = layout.size
    is_image = [t == TokenType.CLEAN_IMAGE for t in layout.token_types()]
    image_end = max((i + 1 for i, flag in enumerate(is_image) if flag), default=0)
    blocks = []
    for start in range(0, n, block_size):
        stop = min(start + block_size, n)
        if any(is_image[start:stop]):
            blocks.append(QueryBlock(start, stop, max(image_end, stop), BlockKind.EXTENDED))
        else:
            blocks.append(QueryBlock(start, stop, stop, BlockKind.CAUSAL))
    return BlockPlan(block_size=block_size, n=n, image_token_end=image_end, blocks=tuple(blocks))


def dense_causal_skipped(n: int, block_size: int) -> int:
    total = math.ceil(n / block_size)
    return sum(total - math.ceil(min(start + block_size, n) / block_size) for start in range(0, n, block_size))


def attend_reference(q: Tensor, k: Tensor, v: Tensor, mask: MaskSpec, scale: float) -> Tensor:
    """Dense masked scaled-dot-product attention over ``(..., n, d)`` operands."""
    n = q.shape[-2]
    if k.shape[-2] != n or v.shape[-2] != n or mask.size != n:
        raise ShapeError(f"attention operands disagree on length: q {q.shape[-2]}, k {k.shape[-2]}, v {v.shape[-2]}, mask {mask.size}")
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    empty = (~mask.allow.any(dim=-1)).nonzero()
    if empty.numel():
        raise FullyMaskedRowError(int(empty[0, 0]))
    logits = (q @ k.transpose(-1, -2)) * scale
    logits = logits.masked_fill(~mask.allow, float("-inf"))
    return torch.softmax(logits, dim=-1) @ v


def _attend_block(q: Tensor, k: Tensor, v: Tensor, block: QueryBlock, cutoffs: Tensor, scale: float) -> Tensor:
    keys = torch.arange(block.key_end)
    allow = keys[None, :] < cutoffs[block.start : block.stop, None]
    logits = (q[..., block.start : block.stop, :] @ k[..., : block.key_end, :].transpose(-1, -2)) * scale
    logits = logits.masked_fill(~allow, float("-inf"))
    return torch.softmax(logits, dim=-1) @ v[..., : block.key_end, :]


def attend_blocked(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    plan: BlockPlan,
    cutoffs: Sequence[int],
    scale: float,
    workers: int | None = None,
) -> tuple[Tensor, BlockCounters]:
    """M-block attention: each query block reads keys ``[0, key_end)`` and masks rows at their cutoff."""
    n = q.shape[-2]
    if plan.n != n or len(cutoffs) != n:
        raise ShapeError(f"plan covers {plan.n} rows and {len(cutoffs)} cutoffs, operands have {n}")
    cut = torch.as_tensor(list(cutoffs), dtype=torch.int64)
    counters = BlockCounters()
    total_key_blocks = math.ceil(n / plan.block_size)
    for block in plan.blocks:
        if int(cut[block.start : block.stop].max()) > block.key_end:
            raise LayoutError(f"row cutoffs exceed key range {block.key_end} of block at row {block.start}")
        if int(cut[block.start : block.stop].min()) < 1:
            raise FullyMaskedRowError(block.start + int(cut[block.start : block.stop].argmin()))
        visited = math.ceil(block.key_end / plan.block_size)
        counters.key_blocks_visited += visited
        counters.key_blocks_skipped += total_key_blocks - visited
        if block.kind == BlockKind.CAUSAL:
            counters.causal_blocks += 1
        else:
            counters.extended_blocks += 1

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda b: _attend_block(q, k, v, b, cut, scale), plan.blocks))
    else:
        parts = [_attend_block(q, k, v, b, cut, scale) for b in plan.blocks]
    out = torch.cat(parts, dim=-2) if parts else q.new_zeros(q.shape[:-1] + v.shape[-1:])
    logger.debug(
        "blocked attention n=%d blocks=%d skipped=%d", n, len(plan.blocks), counters.key_blocks_skipped
    )
    return out, counters
