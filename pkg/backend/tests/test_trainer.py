from __future__ import annotations

import dataclasses
import json
import math

import pytest
import torch

from pixmot.dataset import SyntheticSpec, make_dataset
from pixmot.flow_matching import (
    NoiseScaleConfig,
    block_gen_loss,
    draw_flow_sample,
    gen_loss,
    target_velocity,
    xpred_to_velocity,
)
from pixmot.layout import NoiseImage, SegmentLayout, Text
from pixmot.mot_core import (
    IMG_CLOSE,
    IMG_OPEN,
    ModelConfig,
    TokenSequence,
    init_model_params,
    is_generation_param,
    model_forward,
)
from pixmot.numerics import DTYPE, RandomStream, ShapeError, as_tensor
from pixmot.settings import TrainConfig
from pixmot.trainer import (
    StepMetrics,
    clip_grad_norm,
    ema_update,
    global_norm,
    lr_multiplier,
    mean_text_ce,
    sequence_gen_loss,
    train,
)

TINY = TrainConfig(
    model=ModelConfig(vocab_size=20, width=16, layers=1, head_size=8, freq_dim=8),
    data=SyntheticSpec(seed=0, count=4, image_size=32),
    steps=2,
    batch_size=2,
    max_resolution=64,
    log_every=1,
)


@pytest.fixture(scope="module")
def data():
    return make_dataset(TINY.data)


class TestEma:
    def test_update_formula(self):
        shadow = {"w": as_tensor([1.0, 1.0])}
        params = {"w": as_tensor([3.0, -1.0])}
        out = ema_update(shadow, params, 0.75)
        assert torch.allclose(out["w"], as_tensor([1.5, 0.5]))
        assert torch.equal(shadow["w"], as_tensor([1.0, 1.0]))

    def test_zero_ratio_copies_params(self):
        out = ema_update({"w": as_tensor([1.0])}, {"w": as_tensor([9.0])}, 0.0)
        assert float(out["w"][0]) == 9.0

    def test_bad_ratio(self):
        with pytest.raises(ValueError):
            ema_update({}, {}, 1.0)


class TestClip:
    def test_scales_to_max_norm(self):
        grads = [as_tensor([3.0, 0.0]), None, as_tensor([4.0])]
        clipped, norm = clip_grad_norm(grads, 1.0)
        assert norm == pytest.approx(5.0)
        assert clipped[1] is None
        assert global_norm(clipped) == pytest.approx(1.0)

    def test_small_gradients_untouched(self):
        grads = [as_tensor([0.1, 0.2])]
        clipped, norm = clip_grad_norm(grads, 1.0)
        assert clipped[0] is grads[0]
        assert norm == pytest.approx(math.sqrt(0.05))


class TestSchedule:
    def test_constant_with_warmup(self):
        cfg = TrainConfig(steps=10, warmup_steps=4)
        mult = lr_multiplier(cfg)
        assert [mult(s) for s in range(5)] == pytest.approx([0.25, 0.5, 0.75, 1.0, 1.0])

    def test_cosine_decays_to_floor(self):
        cfg = TrainConfig(steps=10, lr=1e-3, min_lr=1e-4, lr_schedule="cosine")
        mult = lr_multiplier(cfg)
        assert mult(0) == pytest.approx(1.0)
        assert mult(5) == pytest.approx(0.55)
        assert mult(10) == pytest.approx(0.1)


class TestTrain:
    def test_runs_and_logs(self, data, tmp_path):
        metrics_path = tmp_path / "run" / "metrics.jsonl"
        result = train(TINY, data, metrics_path=metrics_path)
        assert result.step == 2
        lines = [json.loads(line) for line in metrics_path.read_text().splitlines()]
        assert [line["step"] for line in lines] == [1, 2]
        assert set(lines[0]) == {"step", "ce", "mse", "total", "grad_norm", "lr"}
        assert all(math.isfinite(line["total"]) for line in lines)

    def test_is_deterministic(self, data):
        a = train(TINY, data)
        b = train(TINY, data)
        assert [m.to_json() for m in a.metrics] == [m.to_json() for m in b.metrics]
        for name, value in a.params.named_tensors().items():
            assert torch.equal(value, b.params.named_tensors()[name]), name

    def test_ema_lags_parameters(self, data):
        result = train(TINY, data)
        name = "blocks.0.gen.w1"
        moved = result.params.named_tensors()[name]
        shadow = result.ema[name]
        assert not torch.equal(moved, shadow)
        assert not shadow.requires_grad
        assert result.ema_params().config == TINY.model

    def test_freeze_understanding(self, data):
        cfg = dataclasses.replace(TINY, freeze_understanding=True)
        baseline = train(dataclasses.replace(TINY, steps=1), data)
        frozen = train(cfg, data, init=baseline.params)
        before = baseline.params.named_tensors()
        after = frozen.params.named_tensors()
        for name in before:
            if is_generation_param(name):
                continue
            assert torch.equal(before[name], after[name]), name
        assert not torch.equal(before["blocks.0.gen.w1"], after["blocks.0.gen.w1"])

    def test_empty_data(self):
        with pytest.raises(ValueError):
            train(TINY, [])


def test_dtype_is_float64(data):
    assert data[0].image.dtype == DTYPE


class TestGenerationLoss:
    def _flow(self, seed, height, width):
        cfg = NoiseScaleConfig(sigma0=1.0, n0=1, sigma_max=4.0)
        x, rng = RandomStream.from_seed(seed).normal_tensor((3, height, width))
        flow, _ = draw_flow_sample(x.clamp(-1, 1), rng, cfg)
        return flow

    def test_blocks_are_weighted_uniformly(self):
        flows = [self._flow(1, 32, 32), self._flow(2, 32, 96)]
        x_hats = [torch.zeros_like(f.x) for f in flows]
        per_block = [
            gen_loss(xpred_to_velocity(x, f.z_t, f.t), target_velocity(f.x, f.z_t, f.t)) for x, f in zip(x_hats, flows)
        ]
        loss = sequence_gen_loss(x_hats, flows)
        assert float(loss) == pytest.approx(0.5 * float(per_block[0] + per_block[1]), rel=1e-12)
        pooled = (per_block[0] * 1 + per_block[1] * 3) / 4
        assert float(loss) != pytest.approx(float(pooled), rel=1e-6)

    def test_two_noise_blocks_through_the_model(self):
        cfg = ModelConfig(vocab_size=20, width=16, layers=1, head_size=8, freq_dim=8)
        params = init_model_params(cfg, RandomStream.from_seed(4))
        flows = [self._flow(5, 32, 32), self._flow(6, 32, 64)]
        seq = TokenSequence(
            layout=SegmentLayout((Text(2), NoiseImage(1, 1), Text(3), NoiseImage(1, 2))),
            text_ids=[1, IMG_OPEN, IMG_CLOSE, 5, IMG_OPEN],
            noise_images=[f.z_t for f in flows],
            noise_cond=[(f.t, 0.5) for f in flows],
        )
        out = model_forward(seq, params)
        assert len(out.x_hat) == 2
        separate = [sequence_gen_loss([x], [f]) for x, f in zip(out.x_hat, flows)]
        together = sequence_gen_loss(out.x_hat, flows)
        assert float(together) == pytest.approx(float(separate[0] + separate[1]) / 2, rel=1e-12)

    def test_block_count_must_match(self):
        flow = self._flow(1, 32, 32)
        with pytest.raises(ShapeError):
            sequence_gen_loss([flow.x, flow.x], [flow])
        with pytest.raises(ShapeError):
            block_gen_loss([], [])


class TestTextMetric:
    def test_fully_dropped_batches_log_no_ce(self, data, tmp_path):
        cfg = dataclasses.replace(TINY, p_drop_text=0.0, p_drop_all=1.0)
        metrics_path = tmp_path / "metrics.jsonl"
        result = train(cfg, data, metrics_path=metrics_path)
        assert all(m.ce is None for m in result.metrics)
        assert all(m.total == m.mse for m in result.metrics)
        lines = [json.loads(line) for line in metrics_path.read_text().splitlines()]
        assert all(line["ce"] is None for line in lines)
        assert math.isnan(mean_text_ce(result.metrics))

    def test_mean_skips_missing_values(self):
        metrics = [StepMetrics(1, 2.0, 1.0, 1.2, 0.5, 1e-3), StepMetrics(2, None, 1.0, 1.0, 0.5, 1e-3)]
        assert mean_text_ce(metrics) == pytest.approx(2.0)


class TestEditTraining:
    @pytest.mark.parametrize("p_drop_text", [0.0, 1.0])
    def test_edit_samples_train_with_context(self, p_drop_text):
        cfg = dataclasses.replace(
            TINY,
            model=dataclasses.replace(TINY.model, vocab_size=24),
            data=dataclasses.replace(TINY.data, edit_fraction=1.0),
            p_drop_text=p_drop_text,
            p_drop_all=0.0,
        )
        data = make_dataset(cfg.data)
        assert all(s.is_edit for s in data)
        result = train(cfg, data)
        assert all(math.isfinite(m.total) for m in result.metrics)
        assert all((m.ce is None) == (p_drop_text == 1.0) for m in result.metrics)
