from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

Tensor = torch.Tensor
DTYPE = torch.float64


class ShapeError(ValueError):
    pass


class NonFiniteLossError(ValueError):
    def __init__(self, message: str, coordinate: int | None = None) -> None:
        super().__init__(message)
        self.coordinate = coordinate


def as_tensor(values: object) -> Tensor:
    """Coerce numbers, nested lists or numpy arrays into a float64 tensor."""
    if isinstance(values, torch.Tensor):
        return values.to(DTYPE)
    if isinstance(values, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(values, dtype=np.float64))
    return torch.tensor(values, dtype=DTYPE)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() != 2 or b.dim() != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner extents differ: {a.shape[0]}x{a.shape[1]} @ {b.shape[0]}x{b.shape[1]}"
        )
    return a @ b


def gelu(x: Tensor) -> Tensor:
    # erf form, no tanh approximation
    return F.gelu(x, approximate="none")


def softmax_last(x: Tensor) -> Tensor:
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty last axis")
    return torch.softmax(x, dim=-1)


def rms_norm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    if gain.shape[-1] != x.shape[-1]:
        raise ShapeError(f"rms_norm gain extent {gain.shape[-1]} != last extent {x.shape[-1]}")
    mean_sq = x.pow(2).mean(dim=-1, keepdim=True)
    if eps == 0.0:
        # all-zero rows stay zero instead of producing 0/0
        scale = torch.where(mean_sq > 0, torch.rsqrt(torch.where(mean_sq > 0, mean_sq, 1.0)), 0.0)
    else:
        scale = torch.rsqrt(mean_sq + eps)
    return x * scale * gain


def flatten_tensors(tensors: Mapping[str, Tensor]) -> tuple[Tensor, list[tuple[str, torch.Size]]]:
    layout = [(name, t.shape) for name, t in tensors.items()]
    flat = torch.cat([t.reshape(-1) for t in tensors.values()]) if tensors else torch.zeros(0, dtype=DTYPE)
    return flat, layout


def unflatten_tensors(flat: Tensor, layout: Sequence[tuple[str, torch.Size]]) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    offset = 0
    for name, shape in layout:
        size = math.prod(shape)
        out[name] = flat[offset : offset + size].reshape(shape)
        offset += size
    if offset != flat.numel():
        raise ShapeError(f"flat vector has {flat.numel()} entries, layout needs {offset}")
    return out


@dataclass(frozen=True)
class RandomStream:
    """Immutable counter-based random stream on top of numpy's Philox generator.

    Draw number ``counter`` of a stream runs Philox with the stream key and the
    draw index in counter word 1, so every ``(key, counter)`` pair pins its
    values down independently of whatever was drawn before.
    """

    key: int
    counter: int = 0

    @classmethod
    def from_seed(cls, seed: int) -> "RandomStream":
        digest = hashlib.blake2b(f"pixmot-seed:{int(seed)}".encode("utf-8"), digest_size=16).digest()
        return cls(key=int.from_bytes(digest, "little"), counter=0)

    def split(self, label: str | int) -> "RandomStream":
        material = self.key.to_bytes(16, "little") + str(label).encode("utf-8")
        digest = hashlib.blake2b(material, digest_size=16).digest()
        return RandomStream(key=int.from_bytes(digest, "little"), counter=0)

    def advance(self, draws: int = 1) -> "RandomStream":
        return RandomStream(key=self.key, counter=self.counter + int(draws))

    def generator(self) -> np.random.Generator:
        bit_gen = np.random.Philox(key=self.key, counter=int(self.counter) << 64)
        return np.random.Generator(bit_gen)

    def normal(self, shape: int | Sequence[int] = ()) -> tuple[np.ndarray, "RandomStream"]:
        values = self.generator().standard_normal(shape)
        return np.asarray(values, dtype=np.float64), self.advance()

    def uniform(self, shape: int | Sequence[int] = ()) -> tuple[np.ndarray, "RandomStream"]:
        values = self.generator().random(shape)
        return np.asarray(values, dtype=np.float64), self.advance()

    def integers(self, high: int, shape: int | Sequence[int] = ()) -> tuple[np.ndarray, "RandomStream"]:
        values = self.generator().integers(0, high, size=shape)
        return np.asarray(values, dtype=np.int64), self.advance()

    def normal_tensor(self, shape: Sequence[int]) -> tuple[Tensor, "RandomStream"]:
        values, nxt = self.normal(tuple(shape))
        return torch.from_numpy(values), nxt

    def state(self) -> dict[str, int]:
        return {"key": self.key, "counter": self.counter}


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst_coordinate: int
    checked: int
    analytic: Tensor
    numeric: Tensor

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error < tolerance


def _loss_value(loss_fn: Callable[[Tensor], Tensor], params: Tensor, coordinate: int) -> float:
    with torch.no_grad():
        value = float(loss_fn(params))
    if not math.isfinite(value):
        raise NonFiniteLossError(f"non-finite loss {value} while perturbing coordinate {coordinate}", coordinate)
    return value


def analytic_gradient(loss_fn: Callable[[Tensor], Tensor], params: Tensor) -> Tensor:
    p = params.detach().clone().requires_grad_(True)
    loss = loss_fn(p)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss {float(loss)} at the expansion point")
    if not loss.requires_grad:
        return torch.zeros_like(p)
    (grad,) = torch.autograd.grad(loss, p, allow_unused=True)
    return torch.zeros_like(p) if grad is None else grad.detach()


def grad_check(
    loss_fn: Callable[[Tensor], Tensor],
    params: Tensor,
    step: float = 1e-5,
    *,
    grad: Tensor | None = None,
    coords: Iterable[int] | None = None,
) -> GradCheckReport:
    """Compare a gradient against central differences coordinate by coordinate.

    ``grad`` defaults to torch reverse-mode accumulation through ``loss_fn``.
    The relative error of a coordinate is ``|g - g_fd| / max(|g|, |g_fd|, 1e-8)``.
    """
    params = params.detach().to(DTYPE).reshape(-1)
    analytic = analytic_gradient(loss_fn, params) if grad is None else grad.detach().reshape(-1).to(DTYPE)
    if analytic.shape != params.shape:
        raise ShapeError(f"gradient has {analytic.numel()} entries, params have {params.numel()}")

    indices = list(range(params.numel())) if coords is None else [int(c) for c in coords]
    numeric = torch.zeros(len(indices), dtype=DTYPE)
    worst, worst_idx = 0.0, -1
    for slot, idx in enumerate(indices):
        bumped = params.clone()
        bumped[idx] = params[idx] + step
        f_plus = _loss_value(loss_fn, bumped, idx)
        bumped[idx] = params[idx] - step
        f_minus = _loss_value(loss_fn, bumped, idx)
        g_fd = (f_plus - f_minus) / (2.0 * step)
        numeric[slot] = g_fd
        g = float(analytic[idx])
        rel = abs(g - g_fd) / max(abs(g), abs(g_fd), 1e-8)
        if rel > worst or worst_idx < 0:
            worst, worst_idx = rel, idx
    return GradCheckReport(
        max_rel_error=worst,
        worst_coordinate=worst_idx,
        checked=len(indices),
        analytic=analytic[indices] if indices else analytic[:0],
        numeric=numeric,
    )
