from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from pixmot.numerics import RandomStream, ShapeError, Tensor
from pixmot.patch_codec import PATCH, token_grid

EPS_CLAMP = 1e-4


class SingularTimeError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseScaleConfig:
    sigma0: float = 1.0
    n0: int = 64
    sigma_max: float = 8.0

    def __post_init__(self) -> None:
        if not self.sigma0 > 0:
            raise ValueError(f"sigma0 must be positive, got {self.sigma0}")
        if self.n0 < 1:
            raise ValueError(f"n0 must be at least 1, got {self.n0}")
        if self.sigma_max < self.sigma0:
            raise ValueError(f"sigma_max {self.sigma_max} is below sigma0 {self.sigma0}")

    @classmethod
    def for_max_resolution(cls, height: int, width: int, sigma0: float = 1.0, n0: int = 64) -> "NoiseScaleConfig":
        peak = sigma0 * math.sqrt((height * width / PATCH**2) / n0)
        return cls(sigma0=sigma0, n0=n0, sigma_max=max(peak, sigma0))


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1
    lambda2: float = 1.0

    def __post_init__(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError(f"loss weights must be nonnegative, got ({self.lambda1}, {self.lambda2})")
        if self.lambda1 == 0 and self.lambda2 == 0:
            raise ValueError("loss weights cannot both be zero")


@dataclass(frozen=True)
class ConditionFlags:
    text_present: bool = True
    image_context_present: bool = True

    def __post_init__(self) -> None:
        if self.text_present and not self.image_context_present:
            raise ValueError("image context can only be dropped together with the text condition")


FULL = ConditionFlags(True, True)
IMAGE_ONLY = ConditionFlags(False, True)
UNCONDITIONAL = ConditionFlags(False, False)


@dataclass(frozen=True)
class FlowSample:
    x: Tensor
    eps: Tensor
    t: float
    sigma_r: float
    z_t: Tensor


def noise_scale(height: int, width: int, cfg: NoiseScaleConfig) -> float:
    rows, cols = token_grid(height, width)
    return cfg.sigma0 * math.sqrt((rows * cols) / cfg.n0)


def normalize_noise_scale(sigma_r: float, sigma_max: float) -> float:
    sigma_bar = sigma_r / sigma_max
    if not 0.0 <= sigma_bar <= 1.0:
        raise ValueError(f"noise scale {sigma_r} exceeds sigma_max {sigma_max}")
    return sigma_bar


def logistic(x: np.ndarray | float) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def sample_t(
    rng: RandomStream, mu: float = -0.8, sigma: float = 0.8, shape: int | tuple[int, ...] = ()
) -> tuple[np.ndarray, RandomStream]:
    """Logit-normal flow time: ``logistic(mu + sigma * n)`` with ``n`` standard normal."""
    if not sigma > 0:
        raise ValueError(f"logit-normal sigma must be positive, got {sigma}")
    n, rng = rng.normal(shape)
    return logistic(mu + sigma * n), rng


def interpolate(x: Tensor, eps: Tensor, t: float, sigma_r: float) -> Tensor:
    if x.shape != eps.shape:
        raise ShapeError(f"clean image {tuple(x.shape)} and noise {tuple(eps.shape)} differ in shape")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"flow time {t} outside [0, 1]")
    return t * x + ((1.0 - t) * sigma_r) * eps


def _check_time(t: float) -> None:
    if t > 1.0 - EPS_CLAMP:
        raise SingularTimeError(f"flow time {t} is within {EPS_CLAMP} of 1; velocity is singular")


def target_velocity(x: Tensor, z_t: Tensor, t: float) -> Tensor:
    _check_time(t)
    return (x - z_t) / (1.0 - t)


def xpred_to_velocity(x_hat: Tensor, z_t: Tensor, t: float) -> Tensor:
    _check_time(t)
    return (x_hat - z_t) / (1.0 - t)


def gen_loss(v_theta: Tensor, v_star: Tensor) -> Tensor:
    if v_theta.shape != v_star.shape:
        raise ShapeError(f"velocity shapes differ: {tuple(v_theta.shape)} vs {tuple(v_star.shape)}")
    return F.mse_loss(v_theta, v_star)


def block_gen_loss(v_thetas: Sequence[Tensor], v_stars: Sequence[Tensor]) -> Tensor:
    """Uniform mean of per-block velocity MSE; a small block weighs as much as a large one."""
    if not v_thetas or len(v_thetas) != len(v_stars):
        raise ShapeError(f"need one target per generated block, got {len(v_thetas)} and {len(v_stars)}")
    return torch.stack([gen_loss(v, target) for v, target in zip(v_thetas, v_stars)]).mean()


def text_loss(logits: Tensor, targets: Tensor) -> Tensor:
    targets = torch.as_tensor(targets, dtype=torch.int64)
    if logits.dim() != 2 or targets.shape != logits.shape[:1]:
        raise ShapeError(f"need one target per position: logits {tuple(logits.shape)}, targets {tuple(targets.shape)}")
    vocab = logits.shape[-1]
    bad = ((targets < 0) | (targets >= vocab)).nonzero()
    if bad.numel():
        i = int(bad[0, 0])
        raise ValueError(f"target {int(targets[i])} at position {i} is outside the vocabulary of {vocab}")
    return F.cross_entropy(logits, targets)


def total_loss(und: Tensor | float, gen: Tensor | float, weights: LossWeights) -> Tensor | float:
    return weights.lambda1 * und + weights.lambda2 * gen


def drop_conditions(rng: RandomStream, p_text: float = 0.1, p_all: float = 0.1) -> tuple[ConditionFlags, RandomStream]:
    if p_text < 0 or p_all < 0 or p_text + p_all > 1.0:
        raise ValueError(f"invalid dropout probabilities p_text={p_text}, p_all={p_all}")
    u, rng = rng.uniform()
    u = float(u)
    if u < p_all:
        return UNCONDITIONAL, rng
    if u < p_all + p_text:
        return IMAGE_ONLY, rng
    return FULL, rng


def draw_flow_sample(
    x: Tensor,
    rng: RandomStream,
    noise_cfg: NoiseScaleConfig,
    mu: float = -0.8,
    sigma: float = 0.8,
) -> tuple[FlowSample, RandomStream]:
    sigma_r = noise_scale(int(x.shape[-2]), int(x.shape[-1]), noise_cfg)
    t, rng = sample_t(rng, mu, sigma)
    t = min(float(t), 1.0 - EPS_CLAMP)
    eps, rng = rng.normal_tensor(tuple(x.shape))
    return FlowSample(x=x, eps=eps, t=t, sigma_r=sigma_r, z_t=interpolate(x, eps, t, sigma_r)), rng
