from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from pixmot.numerics import DTYPE, RandomStream, ShapeError, Tensor, gelu

PATCH = 32
CONV1_STRIDE = 16
CONV2_STRIDE = 2
PATCH_VALUES = 3 * PATCH * PATCH


class InvalidImageError(ValueError):
    pass


@dataclass
class CodecParams:
    """Patch encoder (two patchify convs), patch decoder MLP and <img>/</img> embeddings."""

    conv1_w: Tensor  # (dim/2, 3, 16, 16)
    conv1_b: Tensor
    conv2_w: Tensor  # (dim, dim/2, 2, 2)
    conv2_b: Tensor
    dec_w1: Tensor  # (dim, 4*dim)
    dec_b1: Tensor
    dec_w2: Tensor  # (4*dim, 3072)
    dec_b2: Tensor
    img_open: Tensor
    img_close: Tensor

    @property
    def width(self) -> int:
        return int(self.conv2_w.shape[0])


@dataclass
class PatchGrid:
    rows: int
    cols: int
    embeddings: Tensor  # (rows*cols, dim), row-major over the grid

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[-1])

    @property
    def tokens(self) -> int:
        return self.rows * self.cols


def token_grid(height: int, width: int) -> tuple[int, int]:
    if height <= 0 or width <= 0 or height % PATCH or width % PATCH:
        raise InvalidImageError(f"image size {height}x{width} is not a positive multiple of {PATCH}")
    return height // PATCH, width // PATCH


def codec_shapes(width: int) -> dict[str, tuple[int, ...]]:
    if width % 4:
        raise ShapeError(f"model width {width} must be divisible by 4 for the 2-D positional encoding")
    half = width // 2
    return {
        "conv1_w": (half, 3, CONV1_STRIDE, CONV1_STRIDE),
        "conv1_b": (half,),
        "conv2_w": (width, half, CONV2_STRIDE, CONV2_STRIDE),
        "conv2_b": (width,),
        "dec_w1": (width, 4 * width),
        "dec_b1": (4 * width,),
        "dec_w2": (4 * width, PATCH_VALUES),
        "dec_b2": (PATCH_VALUES,),
        "img_open": (width,),
        "img_close": (width,),
    }


def init_codec_params(width: int, rng: RandomStream, std: float = 0.02) -> CodecParams:
    tensors = {}
    for name, shape in codec_shapes(width).items():
        if name.endswith(("_b", "_b1", "_b2")):
            tensors[name] = torch.zeros(shape, dtype=DTYPE)
        else:
            values, _ = rng.split(name).normal_tensor(shape)
            tensors[name] = values * std
    return CodecParams(**tensors)


def _axis_encoding(positions: Tensor, channels: int) -> Tensor:
    quarter = channels // 2
    freqs = 10000.0 ** (-torch.arange(quarter, dtype=DTYPE) / quarter)
    angles = positions.to(DTYPE)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


def sinusoidal_pe2d(rows: int, cols: int, dim: int) -> Tensor:
    """Row index in the first dim/2 channels, column index in the rest; sin block then cos block per half."""
    if dim <= 0 or dim % 4:
        raise ShapeError(f"2-D sinusoidal encoding needs dim divisible by 4, got {dim}")
    half = dim // 2
    r = torch.arange(rows).repeat_interleave(cols)
    c = torch.arange(cols).repeat(rows)
    return torch.cat([_axis_encoding(r, half), _axis_encoding(c, half)], dim=-1)


def encode_image(img: Tensor, params: CodecParams) -> PatchGrid:
    if img.dim() != 3 or img.shape[0] != 3:
        raise InvalidImageError(f"expected a (3, H, W) image, got shape {tuple(img.shape)}")
    rows, cols = token_grid(int(img.shape[1]), int(img.shape[2]))
    h = F.conv2d(img[None].to(DTYPE), params.conv1_w, params.conv1_b, stride=CONV1_STRIDE)
    h = gelu(h)
    h = F.conv2d(h, params.conv2_w, params.conv2_b, stride=CONV2_STRIDE)
    tokens = h[0].permute(1, 2, 0).reshape(rows * cols, params.width)
    return PatchGrid(rows=rows, cols=cols, embeddings=tokens + sinusoidal_pe2d(rows, cols, params.width))


def decode_patches(states: PatchGrid, params: CodecParams) -> Tensor:
    if states.dim != params.dec_w1.shape[0]:
        raise ShapeError(f"decoder expects width {params.dec_w1.shape[0]}, states have {states.dim}")
    if states.embeddings.shape[0] != states.tokens:
        raise ShapeError(f"grid {states.rows}x{states.cols} does not match {states.embeddings.shape[0]} states")
    hidden = gelu(states.embeddings @ params.dec_w1 + params.dec_b1)
    patches = hidden @ params.dec_w2 + params.dec_b2
    rows, cols = states.rows, states.cols
    tiles = patches.reshape(rows, cols, 3, PATCH, PATCH).permute(2, 0, 3, 1, 4)
    return tiles.reshape(3, rows * PATCH, cols * PATCH)


def check_image(img: Tensor) -> None:
    if img.dim() != 3 or img.shape[0] != 3:
        raise InvalidImageError(f"expected a (3, H, W) image, got shape {tuple(img.shape)}")
    token_grid(int(img.shape[1]), int(img.shape[2]))
    if img.numel() and (float(img.min()) < -1.0 or float(img.max()) > 1.0):
        raise InvalidImageError("pixel values must lie in [-1, 1]")


def bytes_to_pixels(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float64) / 127.5 - 1.0


def pixels_to_bytes(values: np.ndarray) -> np.ndarray:
    clipped = np.clip(values, -1.0, 1.0)
    return np.rint((clipped + 1.0) * 127.5).astype(np.uint8)


def _read_header_tokens(blob: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InvalidImageError("truncated PPM header")
        tokens.append(blob[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_ppm(path: str | os.PathLike[str]) -> Tensor:
    blob = Path(path).read_bytes()
    tokens, offset = _read_header_tokens(blob, 4)
    if tokens[0] != b"P6":
        raise InvalidImageError(f"{path}: not a binary P6 PPM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError as exc:
        raise InvalidImageError(f"{path}: non-numeric PPM header field") from exc
    if width < 1 or height < 1:
        raise InvalidImageError(f"{path}: image is {width}x{height}")
    if maxval != 255:
        raise InvalidImageError(f"{path}: only 8-bit PPM is supported, maxval={maxval}")
    expected = width * height * 3
    if len(blob) - offset < expected:
        raise InvalidImageError(f"{path}: raster holds {max(len(blob) - offset, 0)} bytes, header needs {expected}")
    raster = np.frombuffer(blob, dtype=np.uint8, count=expected, offset=offset)
    pixels = bytes_to_pixels(raster.reshape(height, width, 3)).transpose(2, 0, 1)
    return torch.from_numpy(np.ascontiguousarray(pixels))


def write_ppm(path: str | os.PathLike[str], img: Tensor) -> Path:
    if img.dim() != 3 or img.shape[0] != 3:
        raise InvalidImageError(f"expected a (3, H, W) image, got shape {tuple(img.shape)}")
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    raster = pixels_to_bytes(img.detach().cpu().numpy().transpose(1, 2, 0))
    header = f"P6\n{img.shape[2]} {img.shape[1]}\n255\n".encode("ascii")
    with tempfile.NamedTemporaryFile(dir=target.parent, delete=False) as tmp:
        tmp.write(header + raster.tobytes())
    os.replace(tmp.name, target)
    return target


def psnr(a: Tensor, b: Tensor, peak_to_peak: float = 2.0) -> float:
    mse = float(torch.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak_to_peak**2 / mse)
