"""Full-size toy runs. Deselect with ``-m 'not slow'``."""
from __future__ import annotations

import dataclasses
import math
from pathlib import Path

import pytest
import torch

from pixmot.checkpoint import checkpoint_from_named, decode_checkpoint, encode_checkpoint
from pixmot.dataset import make_dataset
from pixmot.flow_matching import FULL, LossWeights, gen_loss, target_velocity, text_loss, total_loss, xpred_to_velocity
from pixmot.mot_core import ModelParams, build_generation_sequence, init_model_params, model_forward
from pixmot.numerics import RandomStream, flatten_tensors, grad_check, unflatten_tensors
from pixmot.patch_codec import psnr
from pixmot.sampler import SamplerConfig, make_predictor, sample
from pixmot.settings import load_train_config, train_config_to_dict
from pixmot.trainer import mean_text_ce, train

CONFIGS = Path(__file__).resolve().parents[2] / "configs"

pytestmark = pytest.mark.slow


def test_full_model_gradient():
    cfg = load_train_config(CONFIGS / "toy.json")
    params = init_model_params(cfg.model, RandomStream.from_seed(0).split("init"))
    flat, layout = flatten_tensors(params.named_tensors())
    first = make_dataset(cfg.data)[0]
    eps, _ = RandomStream.from_seed(1).normal_tensor(tuple(first.image.shape))
    t, sigma_r = 0.3, 1.0
    z = t * first.image + (1 - t) * sigma_r * eps
    seq = build_generation_sequence(first.caption, z, t, 0.5, FULL)
    targets = torch.tensor(first.caption[1:], dtype=torch.int64)
    weights = LossWeights(0.1, 1.0)

    def loss(p):
        out = model_forward(seq, ModelParams.from_named(cfg.model, unflatten_tensors(p, layout)))
        ce = text_loss(out.text_logits[: len(targets)], targets)
        mse = gen_loss(xpred_to_velocity(out.x_hat[0], z, t), target_velocity(first.image, z, t))
        return total_loss(ce, mse, weights)

    p = flat.detach().clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(loss(p), p)
    strongest = torch.argsort(grad.abs(), descending=True)[:32]
    spread = torch.arange(0, flat.numel(), flat.numel() // 32)[:32]
    coords = sorted(set(strongest.tolist()) | set(spread.tolist()))
    report = grad_check(loss, flat, step=1e-5, grad=grad, coords=coords)
    assert report.max_rel_error < 1e-4, f"coordinate {report.worst_coordinate}"


def test_toy_training_converges():
    cfg = load_train_config(CONFIGS / "toy.json")
    result = train(cfg, make_dataset(cfg.data))
    tail = result.metrics[-100:]
    ce = mean_text_ce(tail)
    mse = sum(m.mse for m in tail) / len(tail)
    assert ce < 0.5 * math.log(cfg.model.vocab_size)
    assert mse < 0.5 * result.metrics[9].mse


def test_overfit_sample_reproduces_training_image():
    cfg = load_train_config(CONFIGS / "overfit.json")
    data = make_dataset(cfg.data)
    result = train(cfg, data)
    noise_cfg = cfg.noise_config()
    predictor = make_predictor(result.ema_params(), data[0].caption, noise_cfg)
    sampler_cfg = SamplerConfig(steps=32, shift=3.0, gamma=4.0, gamma_img=1.0)
    image = sample(predictor, 64, 64, sampler_cfg, RandomStream.from_seed(0), noise_cfg)
    assert psnr(image, data[0].image) > 25.0


def test_identical_runs_give_identical_checkpoints():
    cfg = load_train_config(CONFIGS / "toy.json")
    short = dataclasses.replace(cfg, steps=5)
    data = make_dataset(short.data)

    def run() -> bytes:
        result = train(short, data)
        ckpt = checkpoint_from_named(
            train_config_to_dict(short), result.params.named_tensors(), result.ema, result.rng, result.step
        )
        return encode_checkpoint(ckpt)

    blob = run()
    assert blob == run()

    restored = decode_checkpoint(blob).model_params(short.model)
    original = train(short, data).params
    seq = build_generation_sequence(data[0].caption, data[0].image, 0.5, 0.5, FULL)
    a, b = model_forward(seq, original), model_forward(seq, restored)
    assert torch.equal(a.text_logits, b.text_logits)
    assert torch.equal(a.x_hat[0], b.x_hat[0])
