from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from pixmot.flow_matching import (
    FULL,
    IMAGE_ONLY,
    UNCONDITIONAL,
    ConditionFlags,
    NoiseScaleConfig,
    noise_scale,
    normalize_noise_scale,
    xpred_to_velocity,
)
from pixmot.mot_core import ModelParams, build_generation_sequence, model_forward
from pixmot.numerics import RandomStream, ShapeError, Tensor

logger = logging.getLogger(__name__)

Predictor = Callable[[Tensor, float, ConditionFlags], Tensor]


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 32
    shift: float = 3.0
    gamma: float = 4.0
    gamma_img: float = 1.0
    renorm: bool = True

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ScheduleError(f"steps must be at least 1, got {self.steps}")
        if self.shift < 1.0:
            raise ScheduleError(f"timestep shift must be >= 1, got {self.shift}")

    @property
    def trivial_guidance(self) -> bool:
        return self.gamma == 1.0 and self.gamma_img == 1.0


@dataclass(frozen=True)
class GuidanceTriple:
    v_full: Tensor
    v_img: Tensor
    v_unc: Tensor

    def __post_init__(self) -> None:
        if not (self.v_full.shape == self.v_img.shape == self.v_unc.shape):
            raise ShapeError("guidance velocities must share one shape")


def shifted_schedule(steps: int, shift: float) -> list[float]:
    if steps < 1:
        raise ScheduleError(f"steps must be at least 1, got {steps}")
    grid = []
    for k in range(steps + 1):
        u = k / steps
        grid.append(u / (shift - (shift - 1.0) * u))
    grid[0], grid[-1] = 0.0, 1.0
    return grid


def init_noise(height: int, width: int, rng: RandomStream, cfg: NoiseScaleConfig) -> tuple[Tensor, RandomStream]:
    sigma_r = noise_scale(height, width, cfg)
    eps, rng = rng.normal_tensor((3, height, width))
    return sigma_r * eps, rng


def guide(g: GuidanceTriple, gamma: float, gamma_img: float) -> Tensor:
    if gamma == 1.0 and gamma_img == 1.0:
        return g.v_full
    return gamma * (g.v_full - g.v_img) + gamma_img * (g.v_img - g.v_unc) + g.v_unc


def cfg_renorm(guided: Tensor, reference: Tensor) -> tuple[Tensor, bool]:
    """Rescale ``guided`` to the global L2 norm of ``reference``; the flag marks a zero-norm input."""
    if guided.shape != reference.shape:
        raise ShapeError(f"renorm shapes differ: {tuple(guided.shape)} vs {tuple(reference.shape)}")
    norm = torch.linalg.vector_norm(guided)
    if float(norm) == 0.0:
        logger.warning("guided velocity has zero norm; renormalisation skipped")
        return guided, True
    return guided * (torch.linalg.vector_norm(reference) / norm), False


def euler_step(z: Tensor, v: Tensor, t: float, t_next: float) -> Tensor:
    if not t_next > t:
        raise ScheduleError(f"Euler step needs increasing times, got {t} -> {t_next}")
    return z + (t_next - t) * v


def sample(
    predictor: Predictor,
    height: int,
    width: int,
    cfg: SamplerConfig,
    rng: RandomStream,
    noise_cfg: NoiseScaleConfig,
) -> Tensor:
    """Integrate the flow from scaled noise at t=0 to an image at t=1.

    With trivial guidance each step makes one conditional prediction and the
    last step lands on that prediction directly.
    """
    z, rng = init_noise(height, width, rng, noise_cfg)
    grid = shifted_schedule(cfg.steps, cfg.shift)
    for k in range(cfg.steps):
        t, t_next = grid[k], grid[k + 1]
        if cfg.trivial_guidance:
            x_full = predictor(z, t, FULL)
            if k == cfg.steps - 1:
                z = x_full
                continue
            v = xpred_to_velocity(x_full, z, t)
        else:
            triple = GuidanceTriple(
                v_full=xpred_to_velocity(predictor(z, t, FULL), z, t),
                v_img=xpred_to_velocity(predictor(z, t, IMAGE_ONLY), z, t),
                v_unc=xpred_to_velocity(predictor(z, t, UNCONDITIONAL), z, t),
            )
            v = guide(triple, cfg.gamma, cfg.gamma_img)
            if cfg.renorm:
                v, _ = cfg_renorm(v, triple.v_full)
        z = euler_step(z, v, t, t_next)
        logger.debug("sampler step %d/%d t=%.4f", k + 1, cfg.steps, t_next)
    return z.clamp(-1.0, 1.0)


def make_predictor(
    params: ModelParams,
    caption: Sequence[int],
    noise_cfg: NoiseScaleConfig,
    context_images: Sequence[Tensor] = (),
    paired: bool = False,
) -> Predictor:
    def predict(z: Tensor, t: float, flags: ConditionFlags) -> Tensor:
        sigma_bar = normalize_noise_scale(noise_scale(int(z.shape[1]), int(z.shape[2]), noise_cfg), noise_cfg.sigma_max)
        seq = build_generation_sequence(caption, z, t, sigma_bar, flags, context_images, paired)
        with torch.no_grad():
            return model_forward(seq, params).x_hat[-1]

    return predict
