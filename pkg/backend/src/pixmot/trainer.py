from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import torch

from pixmot.dataset import Sample
from pixmot.flow_matching import (
    FlowSample,
    NoiseScaleConfig,
    block_gen_loss,
    draw_flow_sample,
    drop_conditions,
    normalize_noise_scale,
    target_velocity,
    text_loss,
    total_loss,
    xpred_to_velocity,
)
from pixmot.mot_core import ModelParams, build_generation_sequence, init_model_params, is_generation_param, model_forward
from pixmot.numerics import DTYPE, RandomStream, ShapeError, Tensor
from pixmot.settings import TrainConfig

logger = logging.getLogger(__name__)


class TrainingDivergedError(ValueError):
    def __init__(self, step: int, detail: str) -> None:
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step


@dataclass
class StepMetrics:
    step: int
    ce: float | None  # None when every sample in the batch dropped its caption
    mse: float
    total: float
    grad_norm: float
    lr: float

    def to_json(self) -> dict[str, float | int | None]:
        return {
            "step": self.step,
            "ce": self.ce,
            "mse": self.mse,
            "total": self.total,
            "grad_norm": self.grad_norm,
            "lr": self.lr,
        }


@dataclass
class TrainResult:
    params: ModelParams
    ema: dict[str, Tensor]
    step: int
    rng: RandomStream
    metrics: list[StepMetrics] = field(default_factory=list)

    def ema_params(self) -> ModelParams:
        return ModelParams.from_named(self.params.config, self.ema)


def ema_update(shadow: Mapping[str, Tensor], params: Mapping[str, Tensor], ratio: float) -> dict[str, Tensor]:
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"EMA ratio must lie in [0, 1), got {ratio}")
    updated = {}
    with torch.no_grad():
        for name, value in shadow.items():
            current = params[name]
            if current.shape != value.shape:
                raise ShapeError(f"EMA shadow {name} has shape {tuple(value.shape)}, params {tuple(current.shape)}")
            updated[name] = ratio * value + (1.0 - ratio) * current.detach()
    return updated


def global_norm(grads: Sequence[Tensor | None]) -> float:
    total = sum(float(torch.sum(g.detach() ** 2)) for g in grads if g is not None)
    return math.sqrt(total)


def clip_grad_norm(grads: Sequence[Tensor | None], max_norm: float) -> tuple[list[Tensor | None], float]:
    """Scale gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm too."""
    if not max_norm > 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    norm = global_norm(grads)
    if norm <= max_norm:
        return list(grads), norm
    scale = max_norm / norm
    return [None if g is None else g * scale for g in grads], norm


def lr_multiplier(cfg: TrainConfig) -> Callable[[int], float]:
    floor = cfg.min_lr / cfg.lr

    def multiplier(step: int) -> float:
        if cfg.warmup_steps and step < cfg.warmup_steps:
            return (step + 1) / cfg.warmup_steps
        if cfg.lr_schedule == "constant":
            return 1.0
        span = max(1, cfg.steps - cfg.warmup_steps)
        progress = min(1.0, (step - cfg.warmup_steps) / span)
        return floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))

    return multiplier


def sequence_gen_loss(x_hats: Sequence[Tensor], flows: Sequence[FlowSample]) -> Tensor:
    """Velocity loss of every generated block in a sequence, averaged uniformly over blocks."""
    if len(x_hats) != len(flows):
        raise ShapeError(f"sequence has {len(x_hats)} generated blocks but {len(flows)} flow draws")
    v_thetas = [xpred_to_velocity(x_hat, f.z_t, f.t) for x_hat, f in zip(x_hats, flows)]
    v_stars = [target_velocity(f.x, f.z_t, f.t) for f in flows]
    return block_gen_loss(v_thetas, v_stars)


def sample_losses(
    params: ModelParams,
    sample: Sample,
    rng: RandomStream,
    cfg: TrainConfig,
    noise_cfg: NoiseScaleConfig,
) -> tuple[Tensor | None, Tensor]:
    flags, rng = drop_conditions(rng, cfg.p_drop_text, cfg.p_drop_all)
    flow, rng = draw_flow_sample(sample.image, rng, noise_cfg, cfg.t_mu, cfg.t_sigma)
    sigma_bar = normalize_noise_scale(flow.sigma_r, noise_cfg.sigma_max)
    context = [sample.context] if sample.context is not None else []
    seq = build_generation_sequence(sample.caption, flow.z_t, flow.t, sigma_bar, flags, context, paired=bool(context))
    out = model_forward(seq, params)
    mse = sequence_gen_loss(out.x_hat, [flow])
    if not flags.text_present:
        return None, mse
    n = len(sample.caption) - 1
    ce = text_loss(out.text_logits[:n], torch.tensor(sample.caption[1:], dtype=torch.int64))
    return ce, mse


def batch_loss(
    params: ModelParams,
    batch: Sequence[Sample],
    rng: RandomStream,
    cfg: TrainConfig,
    noise_cfg: NoiseScaleConfig,
) -> tuple[Tensor | None, Tensor, Tensor]:
    """Mean text CE over samples that kept their caption (``None`` if none did), mean velocity loss, total."""
    ces, mses = [], []
    for j, sample in enumerate(batch):
        ce, mse = sample_losses(params, sample, rng.split(f"sample:{j}"), cfg, noise_cfg)
        mses.append(mse)
        if ce is not None:
            ces.append(ce)
    ce_mean = torch.stack(ces).mean() if ces else None
    mse_mean = torch.stack(mses).mean()
    und = ce_mean if ce_mean is not None else torch.zeros((), dtype=DTYPE)
    return ce_mean, mse_mean, total_loss(und, mse_mean, cfg.loss_weights())


def mean_text_ce(metrics: Sequence[StepMetrics]) -> float:
    values = [m.ce for m in metrics if m.ce is not None]
    return sum(values) / len(values) if values else math.nan


def _write_metrics(path: Path, record: StepMetrics) -> None:
    with path.open("a", encoding="utf-8") as f:
        f.write(json.dumps(record.to_json()) + "\n")


def train(
    cfg: TrainConfig,
    data: Sequence[Sample],
    metrics_path: str | os.PathLike[str] | None = None,
    init: ModelParams | None = None,
) -> TrainResult:
    if not data:
        raise ValueError("training data is empty")
    noise_cfg = cfg.noise_config()
    root = RandomStream.from_seed(cfg.seed)
    params = init if init is not None else init_model_params(cfg.model, root.split("init"))
    named = {name: t.detach().clone() for name, t in params.named_tensors().items()}
    trainable = [n for n in named if not cfg.freeze_understanding or is_generation_param(n)]
    for name in trainable:
        named[name].requires_grad_(True)
    params = ModelParams.from_named(cfg.model, named)
    ema = {name: t.detach().clone() for name, t in named.items()}

    optimizer = torch.optim.AdamW(
        [named[n] for n in trainable],
        lr=cfg.lr,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lr_multiplier(cfg))

    train_rng = root.split("train")
    metrics: list[StepMetrics] = []
    out_path = Path(metrics_path) if metrics_path is not None else None
    if out_path is not None:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text("", encoding="utf-8")
    logger.info("training %d steps on %d samples (%d trainable tensors)", cfg.steps, len(data), len(trainable))

    for step in range(cfg.steps):
        step_rng = train_rng.split(step)
        picks, _ = step_rng.split("batch").integers(len(data), (cfg.batch_size,))
        batch = [data[int(i)] for i in picks]
        optimizer.zero_grad(set_to_none=True)
        ce, mse, loss = batch_loss(params, batch, step_rng, cfg, noise_cfg)
        ce_value = None if ce is None else float(ce)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(step, f"loss={float(loss)} ce={ce_value} mse={float(mse)}")
        loss.backward()
        tensors = [named[n] for n in trainable]
        clipped, norm = clip_grad_norm([t.grad for t in tensors], cfg.grad_clip)
        if not math.isfinite(norm):
            raise TrainingDivergedError(step, f"gradient norm {norm}")
        for tensor, grad in zip(tensors, clipped):
            tensor.grad = grad
        lr = optimizer.param_groups[0]["lr"]
        optimizer.step()
        scheduler.step()
        ema = ema_update(ema, named, cfg.ema_ratio)

        record = StepMetrics(step + 1, ce_value, float(mse), float(loss), norm, lr)
        metrics.append(record)
        if out_path is not None:
            _write_metrics(out_path, record)
        if (step + 1) % cfg.log_every == 0 or step == 0:
            logger.info(
                "step %d ce=%s mse=%.4f total=%.4f grad_norm=%.3f lr=%.2e",
                record.step, "n/a" if record.ce is None else f"{record.ce:.4f}",
                record.mse, record.total, record.grad_norm, record.lr,
            )

    final = {name: t.detach().clone() for name, t in named.items()}
    return TrainResult(
        params=ModelParams.from_named(cfg.model, final),
        ema=ema,
        step=cfg.steps,
        rng=train_rng.advance(cfg.steps),
        metrics=metrics,
    )
