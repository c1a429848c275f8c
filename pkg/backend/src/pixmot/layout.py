from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Iterator, Union


class LayoutError(ValueError):
    pass


class TokenType(enum.IntEnum):
    TEXT = 0
    CLEAN_IMAGE = 1
    NOISE_IMAGE = 2


@dataclass(frozen=True)
class Text:
    length: int

    @property
    def size(self) -> int:
        return self.length

    def describe(self) -> str:
        return f"T{self.length}"


@dataclass(frozen=True)
class CleanImage:
    rows: int
    cols: int

    @property
    def size(self) -> int:
        return self.rows * self.cols

    def describe(self) -> str:
        return f"I{self.rows}x{self.cols}"


@dataclass(frozen=True)
class NoiseImage:
    rows: int
    cols: int
    paired: bool = False

    @property
    def size(self) -> int:
        return self.rows * self.cols

    def describe(self) -> str:
        return f"N{self.rows}x{self.cols}{'p' if self.paired else ''}"


Segment = Union[Text, CleanImage, NoiseImage]


@dataclass(frozen=True)
class Span:
    segment: Segment
    start: int
    stop: int

    @property
    def token_type(self) -> TokenType:
        return segment_type(self.segment)


def segment_type(segment: Segment) -> TokenType:
    if isinstance(segment, Text):
        return TokenType.TEXT
    if isinstance(segment, CleanImage):
        return TokenType.CLEAN_IMAGE
    return TokenType.NOISE_IMAGE


@dataclass(frozen=True)
class SegmentLayout:
    """Ordered text / clean-image / noise-image segments of one token sequence."""

    segments: tuple[Segment, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "segments", tuple(self.segments))
        for index, seg in enumerate(self.segments):
            if isinstance(seg, Text):
                if seg.length <= 0:
                    raise LayoutError(f"segment {index}: text length must be positive, got {seg.length}")
            elif isinstance(seg, (CleanImage, NoiseImage)):
                if seg.rows <= 0 or seg.cols <= 0:
                    raise LayoutError(f"segment {index}: image grid must be positive, got {seg.rows}x{seg.cols}")
            else:
                raise LayoutError(f"segment {index}: unknown segment {seg!r}")

    @property
    def size(self) -> int:
        return sum(seg.size for seg in self.segments)

    @property
    def has_noise(self) -> bool:
        return any(isinstance(seg, NoiseImage) for seg in self.segments)

    def spans(self) -> Iterator[Span]:
        offset = 0
        for seg in self.segments:
            yield Span(seg, offset, offset + seg.size)
            offset += seg.size

    def token_types(self) -> list[TokenType]:
        types: list[TokenType] = []
        for span in self.spans():
            types.extend([span.token_type] * span.segment.size)
        return types

    def describe(self) -> str:
        return ",".join(seg.describe() for seg in self.segments)


_TOKEN = re.compile(r"^(?:T(\d+)|I(\d+)x(\d+)|N(\d+)x(\d+)(p?))$")


def parse_layout(text: str) -> SegmentLayout:
    """Parse ``"T6,I1x2,N2x2p"`` style layouts (T text, I clean image, N noise image, ``p`` paired)."""
    segments: list[Segment] = []
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise LayoutError("empty layout")
    for part in parts:
        match = _TOKEN.match(part)
        if match is None:
            raise LayoutError(f"cannot parse layout segment {part!r}")
        text_len, i_rows, i_cols, n_rows, n_cols, paired = match.groups()
        if text_len is not None:
            segments.append(Text(int(text_len)))
        elif i_rows is not None:
            segments.append(CleanImage(int(i_rows), int(i_cols)))
        else:
            segments.append(NoiseImage(int(n_rows), int(n_cols), paired == "p"))
    return SegmentLayout(tuple(segments))
