from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

from pixmot.numerics import RandomStream, Tensor
from pixmot.patch_codec import InvalidImageError, token_grid

SPECIALS = ("<pad>", "<bos>", "<eos>", "at")
COLORS: dict[str, tuple[float, float, float]] = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
    "cyan": (-1.0, 1.0, 1.0),
    "magenta": (1.0, -1.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "orange": (1.0, 0.0, -1.0),
}
SHAPES = ("square", "circle", "bar")
POSITIONS = ("center", "left", "right", "top", "bottom")
EDIT_WORDS = ("recolor", "move", "to")
# edit words come last so plain captions keep their ids
VOCAB: tuple[str, ...] = SPECIALS + tuple(COLORS) + SHAPES + POSITIONS + EDIT_WORDS
BASE_VOCAB_SIZE = len(VOCAB) - len(EDIT_WORDS)
WORD_TO_ID = {word: i for i, word in enumerate(VOCAB)}
PAD_ID, BOS_ID, EOS_ID = 0, 1, 2
BACKGROUND = 0.0


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 0
    count: int = 256
    image_size: int = 64
    edit_fraction: float = 0.0

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ValueError(f"sample count must be positive, got {self.count}")
        if not 0.0 <= self.edit_fraction <= 1.0:
            raise ValueError(f"edit fraction must lie in [0, 1], got {self.edit_fraction}")
        token_grid(self.image_size, self.image_size)

    @property
    def vocab_size(self) -> int:
        return len(VOCAB) if self.edit_fraction > 0 else BASE_VOCAB_SIZE


@dataclass(frozen=True)
class Sample:
    """Caption plus target image; editing samples also carry the source image as ``context``."""

    caption: tuple[int, ...]
    image: Tensor
    color: str
    shape: str
    position: str
    context: Tensor | None = None

    @property
    def is_edit(self) -> bool:
        return self.context is not None


def encode_caption(text: str) -> list[int]:
    words = text.casefold().split()
    unknown = [w for w in words if w not in WORD_TO_ID]
    if unknown:
        raise ValueError(f"caption words not in vocabulary: {unknown}")
    return [BOS_ID] + [WORD_TO_ID[w] for w in words] + [EOS_ID]


def decode_caption(ids: Iterable[int]) -> str:
    return " ".join(VOCAB[i] for i in ids if i not in (PAD_ID, BOS_ID, EOS_ID))


def shape_center(position: str, size: int) -> tuple[float, float]:
    half, quarter = size / 2, size / 4
    return {
        "center": (half, half),
        "left": (half, quarter),
        "right": (half, 3 * quarter),
        "top": (quarter, half),
        "bottom": (3 * quarter, half),
    }[position]


def render_shape(color: str, shape: str, position: str, size: int) -> np.ndarray:
    extent = size * 3 / 16
    cy, cx = shape_center(position, size)
    yy, xx = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    dy, dx = np.abs(yy - cy), np.abs(xx - cx)
    if shape == "square":
        inside = (dy <= extent) & (dx <= extent)
    elif shape == "circle":
        inside = dy**2 + dx**2 <= extent**2
    else:
        inside = (dy <= extent / 2) & (dx <= extent)
    image = np.full((3, size, size), BACKGROUND, dtype=np.float64)
    image[:, inside] = np.asarray(COLORS[color], dtype=np.float64)[:, None]
    return image


def make_sample(color: str, shape: str, position: str, size: int = 64) -> Sample:
    caption = tuple(encode_caption(f"{color} {shape} at {position}"))
    image = torch.from_numpy(render_shape(color, shape, position, size))
    return Sample(caption=caption, image=image, color=color, shape=shape, position=position)


def edit_choices(source: Sample) -> list[tuple[str, str]]:
    recolors = [("recolor", c) for c in COLORS if c != source.color]
    moves = [("move", p) for p in POSITIONS if p != source.position]
    return recolors + moves


def make_edit_sample(source: Sample, kind: str, value: str) -> Sample:
    """Edit ``source`` by recoloring or moving its shape; the source image becomes the context."""
    size = int(source.image.shape[-1])
    if kind == "recolor" and value in COLORS:
        target = make_sample(value, source.shape, source.position, size)
    elif kind == "move" and value in POSITIONS:
        target = make_sample(source.color, source.shape, value, size)
    else:
        raise ValueError(f"unknown edit {kind!r} to {value!r}")
    return Sample(
        caption=tuple(encode_caption(f"{kind} to {value}")),
        image=target.image,
        color=target.color,
        shape=target.shape,
        position=target.position,
        context=source.image,
    )


def make_dataset(spec: SyntheticSpec) -> list[Sample]:
    if spec.image_size % 32:
        raise InvalidImageError(f"image size {spec.image_size} is not a multiple of 32")
    root = RandomStream.from_seed(spec.seed).split("dataset")
    colors = tuple(COLORS)
    samples = []
    for i in range(spec.count):
        stream = root.split(i)
        picks, _ = stream.integers(len(colors) * len(SHAPES) * len(POSITIONS))
        idx = int(picks)
        color = colors[idx % len(colors)]
        shape = SHAPES[(idx // len(colors)) % len(SHAPES)]
        position = POSITIONS[idx // (len(colors) * len(SHAPES))]
        sample = make_sample(color, shape, position, spec.image_size)
        if spec.edit_fraction > 0:
            u, edit_rng = stream.split("edit").uniform()
            if float(u) < spec.edit_fraction:
                choices = edit_choices(sample)
                pick, _ = edit_rng.integers(len(choices))
                sample = make_edit_sample(sample, *choices[int(pick)])
        samples.append(sample)
    return samples


def dataset_digest(samples: Sequence[Sample]) -> str:
    digest = hashlib.sha256()
    for sample in samples:
        digest.update(np.asarray(sample.caption, dtype="<i4").tobytes())
        digest.update(sample.image.numpy().astype("<f8").tobytes())
        if sample.context is not None:
            digest.update(sample.context.numpy().astype("<f8").tobytes())
    return digest.hexdigest()


def center_color(sample: Sample) -> tuple[float, float, float]:
    cy, cx = shape_center(sample.position, int(sample.image.shape[1]))
    pixel = sample.image[:, int(cy), int(cx)]
    return tuple(float(v) for v in pixel)
