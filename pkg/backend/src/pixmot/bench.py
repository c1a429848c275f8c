from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

from pixmot.attention import (
    attend_blocked,
    attend_reference,
    build_block_plan,
    build_mask,
    dense_causal_skipped,
    row_cutoffs,
)
from pixmot.layout import parse_layout
from pixmot.numerics import RandomStream


@dataclass(frozen=True)
class BenchRecord:
    layout: str
    n: int
    block_size: int
    image_token_end: int
    classes: tuple[str, ...]
    skipped: int
    dense_causal_skipped: int
    max_abs_diff: float
    reference_ms: float
    blocked_ms: float


def run_bench(
    layout_texts: Sequence[str],
    block_size: int = 4,
    head_dim: int = 16,
    repeats: int = 3,
    seed: int = 0,
) -> list[BenchRecord]:
    records = []
    rng = RandomStream.from_seed(seed).split("bench")
    for index, text in enumerate(layout_texts):
        layout = parse_layout(text)
        plan = build_block_plan(layout, block_size)
        n = layout.size
        qkv, _ = rng.split(index).normal_tensor((3, n, head_dim))
        q, k, v = qkv[0], qkv[1], qkv[2]
        mask, cutoffs, scale = build_mask(layout), row_cutoffs(layout), head_dim**-0.5

        ref_times, blocked_times = [], []
        for _ in range(max(1, repeats)):
            start = time.perf_counter()
            ref = attend_reference(q, k, v, mask, scale)
            ref_times.append(time.perf_counter() - start)
            start = time.perf_counter()
            out, counters = attend_blocked(q, k, v, plan, cutoffs, scale)
            blocked_times.append(time.perf_counter() - start)

        records.append(
            BenchRecord(
                layout=layout.describe(),
                n=n,
                block_size=block_size,
                image_token_end=plan.image_token_end,
                classes=tuple(kind.value for kind in plan.kinds()),
                skipped=counters.key_blocks_skipped,
                dense_causal_skipped=dense_causal_skipped(n, block_size),
                max_abs_diff=float((out - ref).abs().max()),
                reference_ms=1000 * min(ref_times),
                blocked_ms=1000 * min(blocked_times),
            )
        )
    return records


def format_bench_line(record: BenchRecord) -> str:
    classes = ",".join("C" if c == "causal-fast-path" else "E" for c in record.classes)
    return (
        f"layout={record.layout} n={record.n} bm={record.block_size} image_end={record.image_token_end} "
        f"blocks={classes} skipped={record.skipped} dense_causal_skipped={record.dense_causal_skipped} "
        f"max_diff={record.max_abs_diff:.3e} reference_ms={record.reference_ms:.3f} blocked_ms={record.blocked_ms:.3f}"
    )
