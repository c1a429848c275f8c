"""Executable invariant suite.

Each check measures one property of a module and reports the measured error
next to its tolerance. ``faults`` lets a caller inject a known defect so the
suite itself can be shown to catch it.
"""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Callable, Iterable, Mapping

import torch

from pixmot import attention, flow_matching, rl_rewards, sampler
from pixmot.dataset import SyntheticSpec, make_dataset
from pixmot.flow_matching import FULL
from pixmot.layout import CleanImage, NoiseImage, SegmentLayout, Text, TokenType
from pixmot.mot_core import (
    ModelConfig,
    ModelParams,
    TokenSequence,
    build_generation_sequence,
    init_model_params,
    model_forward,
)
from pixmot.numerics import (
    RandomStream,
    analytic_gradient,
    flatten_tensors,
    grad_check,
    rms_norm,
    softmax_last,
    unflatten_tensors,
)
from pixmot.patch_codec import CodecParams, PatchGrid, decode_patches, encode_image, init_codec_params, sinusoidal_pe2d
from pixmot.rope import apply_rope, rope_config_for_head
from pixmot.settings import TrainConfig
from pixmot.trainer import train

logger = logging.getLogger(__name__)

Faults = Mapping[str, float]


@dataclass(frozen=True)
class CheckResult:
    invariant: str
    module: str
    status: str
    measured: float
    tolerance: float
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.status == "pass"


@dataclass(frozen=True)
class Check:
    name: str
    module: str
    tolerance: float
    measure: Callable[[Faults], tuple[float, str]]
    # exact checks pass only at zero error
    inclusive: bool = False


REGISTRY: list[Check] = []


def invariant(name: str, module: str, tolerance: float, inclusive: bool = False):
    def register(fn: Callable[[Faults], tuple[float, str]]):
        REGISTRY.append(Check(name, module, tolerance, fn, inclusive))
        return fn

    return register


def _rng(label: str) -> RandomStream:
    return RandomStream.from_seed(20240501).split(label)


def _normal(rng: RandomStream, *shape: int) -> tuple[torch.Tensor, RandomStream]:
    return rng.normal_tensor(shape)


@invariant("softmax_rows_sum_to_one", "numerics", 1e-12)
def _softmax_rows(faults: Faults) -> tuple[float, str]:
    x, _ = _normal(_rng("softmax"), 1000, 17)
    err = float((softmax_last(x * 10).sum(-1) - 1).abs().max())
    return err, "1000 random rows"


@invariant("softmax_shift_invariance", "numerics", 1e-12)
def _softmax_shift(faults: Faults) -> tuple[float, str]:
    x, rng = _normal(_rng("softmax-shift"), 1000, 9)
    c, _ = _normal(rng, 1000, 1)
    return float((softmax_last(x) - softmax_last(x + 50 * c)).abs().max()), "per-row constant shifts"


@invariant("grad_check_quadratic", "numerics", 1e-9)
def _grad_quadratic(faults: Faults) -> tuple[float, str]:
    report = grad_check(lambda p: (p**2).sum(), torch.tensor([1.0, 2.0], dtype=torch.float64))
    return report.max_rel_error, "loss = sum p^2 at [1, 2]"


@invariant("rms_norm_unit_rms", "numerics", 1e-12)
def _rms_unit(faults: Faults) -> tuple[float, str]:
    x, _ = _normal(_rng("rms"), 64, 32)
    y = rms_norm(x, torch.ones(32, dtype=torch.float64), 0.0)
    return float((y.pow(2).mean(-1).sqrt() - 1).abs().max()), "gain 1, eps 0"


@invariant("decode_locality", "patch_codec", 0.0, inclusive=True)
def _locality(faults: Faults) -> tuple[float, str]:
    rng = _rng("locality")
    codec = init_codec_params(16, rng.split("codec"))
    states, rng = _normal(rng, 6, 16)
    base = decode_patches(PatchGrid(2, 3, states), codec)
    bumped = states.clone()
    bumped[4] += 1.0
    diff = (decode_patches(PatchGrid(2, 3, bumped), codec) - base).abs()
    diff[:, 32:64, 32:64] = 0.0
    return float(diff.max()), "perturb token (1,1) of a 2x3 grid"


@invariant("pe2d_constant_norm", "patch_codec", 1e-12)
def _pe_norm(faults: Faults) -> tuple[float, str]:
    pe = sinusoidal_pe2d(5, 7, 24)
    return float((pe.norm(dim=-1) - math.sqrt(12)).abs().max()), "5x7 grid, dim 24"


@invariant("token_count_matches_grid", "patch_codec", 0.0, inclusive=True)
def _token_count(faults: Faults) -> tuple[float, str]:
    rng = _rng("token-count")
    codec = init_codec_params(8, rng.split("codec"))
    sizes, _ = rng.integers(6, (40, 2))
    mismatches = 0
    for a, b in sizes:
        h, w = 32 * (int(a) + 1), 32 * (int(b) + 1)
        grid = encode_image(torch.zeros(3, h, w, dtype=torch.float64), codec)
        mismatches += int(grid.tokens != h * w // 32**2 or grid.embeddings.shape[0] != grid.tokens)
    return float(mismatches), "40 random sizes up to 192x192"


@invariant("codec_reconstruction_grad_check", "patch_codec", 1e-4)
def _codec_grad(faults: Faults) -> tuple[float, str]:
    rng = _rng("codec-grad")
    codec = init_codec_params(8, rng.split("codec"), std=0.2)
    img, _ = _normal(rng, 3, 32, 64)
    img = img.clamp(-1.0, 1.0)
    flat, layout = flatten_tensors({f.name: getattr(codec, f.name) for f in fields(codec)})

    def loss(p: torch.Tensor) -> torch.Tensor:
        params = CodecParams(**unflatten_tensors(p, layout))
        return ((decode_patches(encode_image(img, params), params) - img) ** 2).mean()

    grad = analytic_gradient(loss, flat)
    coords = torch.argsort(grad.abs(), descending=True)[:16].tolist()
    report = grad_check(loss, flat, grad=grad, coords=coords)
    return report.max_rel_error, f"reconstruction MSE, {report.checked} steepest coordinates"


@invariant("rope_relative_position", "rope", 1e-10)
def _rope_relative(faults: Faults) -> tuple[float, str]:
    cfg = rope_config_for_head(16)
    key_cfg = replace(cfg, theta_t=faults["rope_theta_t"]) if "rope_theta_t" in faults else cfg
    rng = _rng("rope-rel")
    q, rng = _normal(rng, 1000, 16)
    k, rng = _normal(rng, 1000, 16)
    pos, rng = rng.integers(64, (3, 1000, 3))
    p1, p2, shift = (torch.from_numpy(pos[i]) for i in range(3))
    before = (apply_rope(q, p1, cfg) * apply_rope(k, p2, key_cfg)).sum(-1)
    after = (apply_rope(q, p1 + shift, cfg) * apply_rope(k, p2 + shift, key_cfg)).sum(-1)
    return float((before - after).abs().max()), "1000 random (q, k, p1, p2, shift)"


@invariant("rope_norm_preserved", "rope", 1e-12)
def _rope_norm(faults: Faults) -> tuple[float, str]:
    cfg = rope_config_for_head(16)
    rng = _rng("rope-norm")
    v, rng = _normal(rng, 500, 16)
    pos, _ = rng.integers(1000, (500, 3))
    out = apply_rope(v, torch.from_numpy(pos), cfg)
    return float((out.norm(dim=-1) - v.norm(dim=-1)).abs().max()), "500 random vectors"


@invariant("rope_axis_separability", "rope", 0.0, inclusive=True)
def _rope_axes(faults: Faults) -> tuple[float, str]:
    cfg = rope_config_for_head(16)
    v, _ = _normal(_rng("rope-axes"), 16)
    a = apply_rope(v, torch.tensor([3, 5, 7]), cfg)
    b = apply_rope(v, torch.tensor([11, 5, 7]), cfg)
    return float((a[cfg.dims_t :] - b[cfg.dims_t :]).abs().max()), "t changes only"


def random_layout(rng: RandomStream, with_noise: bool, max_tokens: int = 64) -> tuple[SegmentLayout, RandomStream]:
    segments: list = []
    total = 0
    picks, rng = rng.integers(1 << 30, (12, 3))
    for kind, a, b in picks:
        if with_noise and segments and kind % 4 == 3:
            seg = NoiseImage(1 + int(a) % 3, 1 + int(b) % 3)
        elif kind % 2 == 0:
            seg = Text(1 + int(a) % 6)
        else:
            seg = CleanImage(1 + int(a) % 3, 1 + int(b) % 3)
        if total + seg.size > max_tokens:
            break
        segments.append(seg)
        total += seg.size
    if not segments:
        segments.append(Text(1))
    return SegmentLayout(tuple(segments)), rng


@invariant("noise_isolation", "attention", 0.0, inclusive=True)
def _noise_isolation(faults: Faults) -> tuple[float, str]:
    rng = _rng("noise-iso")
    leaks = 0
    for _ in range(100):
        layout, rng = random_layout(rng, with_noise=True)
        types = torch.tensor([int(t) for t in layout.token_types()])
        noise = types == int(TokenType.NOISE_IMAGE)
        allow = attention.build_mask(layout).allow
        leaks += int(allow[~noise][:, noise].sum())
    return float(leaks), "100 random layouts with noise blocks"


@invariant("blocked_matches_reference", "attention", 1e-10)
def _blocked(faults: Faults) -> tuple[float, str]:
    rng = _rng("blocked")
    worst = 0.0
    for _ in range(100):
        layout, rng = random_layout(rng, with_noise=False)
        n = layout.size
        qkv, rng = _normal(rng, 3, n, 8)
        ref = attention.attend_reference(qkv[0], qkv[1], qkv[2], attention.build_mask(layout), 8**-0.5)
        plan = attention.build_block_plan(layout, 4)
        out, _ = attention.attend_blocked(qkv[0], qkv[1], qkv[2], plan, attention.row_cutoffs(layout), 8**-0.5)
        worst = max(worst, float((out - ref).abs().max()))
    return worst, "100 random clean layouts"


@invariant("block_plan_containment", "attention", 0.0, inclusive=True)
def _containment(faults: Faults) -> tuple[float, str]:
    rng = _rng("containment")
    violations = 0
    for _ in range(100):
        layout, rng = random_layout(rng, with_noise=False)
        size, rng = rng.integers(6)
        plan = attention.build_block_plan(layout, int(size) + 1)
        allow = attention.build_mask(layout).allow
        cutoffs = attention.row_cutoffs(layout)
        for block in plan.blocks:
            for row in range(block.start, block.stop):
                cols = allow[row].nonzero().flatten().tolist()
                limit = min(block.key_end, cutoffs[row])
                violations += sum(1 for c in cols if c >= limit)
                if block.kind is attention.BlockKind.CAUSAL and limit > row + 1:
                    violations += 1
    return float(violations), "100 random clean layouts, block sizes 1 .. 6"


@invariant("text_mask_monotone", "attention", 0.0, inclusive=True)
def _text_monotone(faults: Faults) -> tuple[float, str]:
    rng = _rng("text-monotone")
    violations = 0
    for _ in range(100):
        layout, rng = random_layout(rng, with_noise=True)
        types = torch.tensor([int(t) for t in layout.token_types()])
        clean = types != int(TokenType.NOISE_IMAGE)
        allow = attention.build_mask(layout).allow & clean[None, :]
        rows = (types == int(TokenType.TEXT)).nonzero().flatten().tolist()
        for a, b in zip(rows, rows[1:]):
            violations += int((allow[a] & ~allow[b]).sum())
    return float(violations), "consecutive text rows of 100 random layouts"


@invariant("stream_isolation", "mot_core", 0.0, inclusive=True)
def _stream_isolation(faults: Faults) -> tuple[float, str]:
    cfg = ModelConfig(vocab_size=16, width=16, layers=1, head_size=8, freq_dim=8)
    params = init_model_params(cfg, _rng("iso"))
    zeroed = params.replace({k: torch.zeros_like(v) for k, v in params.named_tensors().items() if ".gen." in k})
    seq = TokenSequence(layout=SegmentLayout((Text(5),)), text_ids=[1, 4, 5, 6, 2])
    a = model_forward(seq, params).text_logits
    b = model_forward(seq, zeroed).text_logits
    return float((a - b).abs().max()), "text-only sequence, generation weights zeroed"


@invariant("conditioning_leaves_prefix_logits", "mot_core", 0.0, inclusive=True)
def _conditioning(faults: Faults) -> tuple[float, str]:
    cfg = ModelConfig(vocab_size=16, width=16, layers=1, head_size=8, freq_dim=8)
    params = init_model_params(cfg, _rng("cond"))
    z, _ = _normal(_rng("cond-z"), 3, 32, 32)
    one = model_forward(build_generation_sequence([1, 4, 5, 2], z, 0.2, 0.5, FULL), params)
    two = model_forward(build_generation_sequence([1, 4, 5, 2], z, 0.7, 0.9, FULL), params)
    changed = float((one.x_hat[0] - two.x_hat[0]).abs().max())
    detail = f"x_hat moved by {changed:.3g}"
    if changed == 0.0:
        return math.inf, "x_hat did not respond to conditioning"
    return float((one.text_logits - two.text_logits).abs().max()), detail


@invariant("end_to_end_grad_check", "mot_core", 1e-4)
def _model_grad(faults: Faults) -> tuple[float, str]:
    cfg = ModelConfig(vocab_size=12, width=8, layers=2, head_size=8, kv_ratio=1, ffn_mult=2, freq_dim=4, init_std=0.3)
    rng = _rng("model-grad")
    params = init_model_params(cfg, rng.split("init"))
    x, rng = _normal(rng, 3, 32, 32)
    eps, _ = _normal(rng, 3, 32, 32)
    t = 0.4
    z = flow_matching.interpolate(x, eps, t, 1.0)
    seq = build_generation_sequence([1, 3, 4, 2], z, t, 0.5, FULL)
    targets = torch.arange(len(seq.text_ids)) % cfg.vocab_size
    flat, layout = flatten_tensors(params.named_tensors())
    weights = flow_matching.LossWeights()

    def loss(p: torch.Tensor) -> torch.Tensor:
        out = model_forward(seq, ModelParams.from_named(cfg, unflatten_tensors(p, layout)))
        und = flow_matching.text_loss(out.text_logits, targets)
        v_theta = flow_matching.xpred_to_velocity(out.x_hat[0], z, t)
        gen = flow_matching.gen_loss(v_theta, flow_matching.target_velocity(x, z, t))
        return flow_matching.total_loss(und, gen, weights)

    grad = analytic_gradient(loss, flat)
    coords = torch.argsort(grad.abs(), descending=True)[:12].tolist()
    report = grad_check(loss, flat, grad=grad, coords=coords)
    return report.max_rel_error, f"total loss, width 8, 2 layers, {report.checked} steepest coordinates"


@invariant("interpolant_endpoints", "flow_matching", 0.0, inclusive=True)
def _endpoints(faults: Faults) -> tuple[float, str]:
    rng = _rng("endpoints")
    x, rng = _normal(rng, 3, 32, 32)
    eps, _ = _normal(rng, 3, 32, 32)
    e0 = (flow_matching.interpolate(x, eps, 0.0, 2.0) - 2.0 * eps).abs().max()
    e1 = (flow_matching.interpolate(x, eps, 1.0, 2.0) - x).abs().max()
    return float(max(e0, e1)), "t = 0 and t = 1"


@invariant("target_velocity_time_invariant", "flow_matching", 1e-9)
def _velocity(faults: Faults) -> tuple[float, str]:
    rng = _rng("velocity")
    x, rng = _normal(rng, 3, 32, 32)
    eps, _ = _normal(rng, 3, 32, 32)
    expected = x - 1.5 * eps
    worst = 0.0
    for k in range(1, 20):
        t = k * 0.05
        v = flow_matching.target_velocity(x, flow_matching.interpolate(x, eps, t, 1.5), t)
        worst = max(worst, float((v - expected).abs().max()))
    return worst, "t in 0.05 .. 0.95"


@invariant("noise_scale_sqrt_law", "flow_matching", 1e-12)
def _sqrt_law(faults: Faults) -> tuple[float, str]:
    cfg = flow_matching.NoiseScaleConfig()
    worst = 0.0
    for h in range(1, 11):
        for w in range(1, 6):
            small = flow_matching.noise_scale(32 * h, 32 * w, cfg)
            large = flow_matching.noise_scale(64 * h, 64 * w, cfg)
            worst = max(worst, abs(large - 2 * small))
    return worst, "50 grid sizes"


@invariant("perfect_prediction_zero_loss", "flow_matching", 0.0, inclusive=True)
def _zero_loss(faults: Faults) -> tuple[float, str]:
    rng = _rng("zero-loss")
    x, rng = _normal(rng, 3, 32, 32)
    eps, _ = _normal(rng, 3, 32, 32)
    worst = 0.0
    for k in range(20):
        t = k * 0.05
        z = flow_matching.interpolate(x, eps, t, 1.5)
        v_theta = flow_matching.xpred_to_velocity(x, z, t)
        worst = max(worst, float(flow_matching.gen_loss(v_theta, flow_matching.target_velocity(x, z, t))))
    return worst, "x_hat = x for t in 0 .. 0.95"


@invariant("text_loss_shift_invariance", "flow_matching", 1e-12)
def _ce_shift(faults: Faults) -> tuple[float, str]:
    rng = _rng("ce-shift")
    logits, rng = _normal(rng, 20, 11)
    shift, rng = _normal(rng, 20, 1)
    targets, _ = rng.integers(11, (20,))
    targets = torch.from_numpy(targets)
    base = flow_matching.text_loss(logits, targets)
    return float((flow_matching.text_loss(logits + 50 * shift, targets) - base).abs()), "per-position constant shifts"


@invariant("guide_telescoping", "sampler", 0.0, inclusive=True)
def _telescoping(faults: Faults) -> tuple[float, str]:
    rng = _rng("guide")
    parts, _ = _normal(rng, 3, 3, 8, 8)
    triple = sampler.GuidanceTriple(parts[0], parts[1], parts[2])
    return float((sampler.guide(triple, 1.0, 1.0) - parts[0]).abs().max()), "gamma = gamma_img = 1"


@invariant("renorm_matches_reference_norm", "sampler", 1e-12)
def _renorm(faults: Faults) -> tuple[float, str]:
    rng = _rng("renorm")
    parts, _ = _normal(rng, 2, 3, 16, 16)
    out, _ = sampler.cfg_renorm(parts[0] * 3.0, parts[1])
    return float(abs(out.norm() - parts[1].norm()) / parts[1].norm()), "relative norm error"


@invariant("guide_is_affine", "sampler", 1e-12)
def _guide_affine(faults: Faults) -> tuple[float, str]:
    parts, _ = _normal(_rng("guide-affine"), 3, 3, 8, 8)
    triple = sampler.GuidanceTriple(parts[0], parts[1], parts[2])
    scaled = sampler.GuidanceTriple(2.5 * parts[0], 2.5 * parts[1], 2.5 * parts[2])
    worst = 0.0
    for gamma, gamma_img in ((4.0, 1.5), (1.0, 1.0), (0.0, 2.0)):
        diff = sampler.guide(scaled, gamma, gamma_img) - 2.5 * sampler.guide(triple, gamma, gamma_img)
        worst = max(worst, float(diff.abs().max()))
    return worst, "scale 2.5 at three guidance settings"


@invariant("final_step_matches_euler", "sampler", 1e-12)
def _final_step(faults: Faults) -> tuple[float, str]:
    rng = _rng("final-step")
    z, rng = _normal(rng, 3, 32, 32)
    x_hat, _ = _normal(rng, 3, 32, 32)
    worst = 0.0
    for steps in (1, 4, 32):
        t = sampler.shifted_schedule(steps, 3.0)[-2]
        v = flow_matching.xpred_to_velocity(x_hat, z, t)
        worst = max(worst, float((sampler.euler_step(z, v, t, 1.0) - x_hat).abs().max()))
    return worst, "last grid point of 1, 4 and 32 step schedules"


@invariant("ocr_iou_symmetric_bounded", "rl_rewards", 0.0, inclusive=True)
def _iou(faults: Faults) -> tuple[float, str]:
    rng = _rng("iou")
    worst = 0.0
    for _ in range(200):
        picks, rng = rng.integers(5, (2, 6))
        a, b = Counter(picks[0].tolist()), Counter(picks[1].tolist())
        ab, ba = rl_rewards.ocr_iou(a, b), rl_rewards.ocr_iou(b, a)
        worst = max(worst, abs(ab - ba), abs(rl_rewards.ocr_iou(a, a) - 1.0), max(0.0, -ab, ab - 1.0))
    return worst, "200 random token multisets"


@invariant("warmup_gate_normalised", "rl_rewards", 1e-12)
def _gate(faults: Faults) -> tuple[float, str]:
    candidates = rl_rewards.build_resolution_candidates()
    worst = 0.0
    for epoch in range(0, 12):
        probs = rl_rewards.warmup_gate(candidates, epoch, 10, 0.3)
        worst = max(worst, abs(float(probs.sum()) - 1.0))
    return worst, "epochs 0 .. 11, E_warm 10"


@invariant("style_map_strictly_increasing", "rl_rewards", 0.0, inclusive=True)
def _style_increasing(faults: Faults) -> tuple[float, str]:
    values = [rl_rewards.style_score_map(s) for s in (1, 2, 3, 4)]
    violations = sum(1 for a, b in zip(values, values[1:]) if not b > a)
    return float(violations), f"mapped scores {values}"


@invariant("gate_monotone_in_epoch", "rl_rewards", 0.0, inclusive=True)
def _gate_monotone(faults: Faults) -> tuple[float, str]:
    difficulties = [c.difficulty for c in rl_rewards.build_resolution_candidates()]
    previous = rl_rewards.gate_values(difficulties, 0.0, 10, 0.3)
    worst = 0.0
    for k in range(1, 61):
        current = rl_rewards.gate_values(difficulties, k * 0.25, 10, 0.3)
        worst = max(worst, float((previous - current).max()))
        previous = current
    return worst, "epochs 0 .. 15 in quarter steps"


@invariant("gate_equals_base_after_warmup", "rl_rewards", 0.0, inclusive=True)
def _gate_base(faults: Faults) -> tuple[float, str]:
    candidates = rl_rewards.build_resolution_candidates()
    base = [c.probability for c in candidates]
    worst = 0.0
    for epoch in (10, 10.5, 11, 25):
        probs = rl_rewards.warmup_gate(candidates, epoch, 10, 0.3)
        worst = max(worst, max(abs(float(p) - b) for p, b in zip(probs, base)))
    return worst, "E_warm 10, epochs 10 .. 25"


def _harness_config(steps: int) -> TrainConfig:
    return TrainConfig(
        model=ModelConfig(vocab_size=20, width=16, layers=1, head_size=8, freq_dim=8),
        data=SyntheticSpec(seed=0, count=2, image_size=32),
        steps=steps,
        batch_size=1,
        max_resolution=32,
        log_every=steps,
    )


def _max_diff(a: Mapping[str, torch.Tensor], b: Mapping[str, torch.Tensor]) -> float:
    if a.keys() != b.keys():
        return math.inf
    return max((float((a[k] - b[k]).abs().max()) for k in a), default=0.0)


@invariant("training_is_deterministic", "harness", 0.0, inclusive=True)
def _train_determinism(faults: Faults) -> tuple[float, str]:
    cfg = _harness_config(2)
    data = make_dataset(cfg.data)
    one, two = train(cfg, data), train(cfg, data)
    if [m.to_json() for m in one.metrics] != [m.to_json() for m in two.metrics]:
        return math.inf, "metrics differ between runs"
    worst = max(
        _max_diff(one.params.named_tensors(), two.params.named_tensors()),
        _max_diff(one.ema, two.ema),
    )
    return worst, "two 2-step runs from one seed"


@invariant("ema_follows_recurrence", "harness", 1e-12)
def _ema_recurrence(faults: Faults) -> tuple[float, str]:
    cfg = replace(_harness_config(1), ema_ratio=0.9)
    result = train(cfg, make_dataset(cfg.data))
    if any(t.requires_grad for t in result.ema.values()):
        return math.inf, "EMA shadow holds trainable tensors"
    init = init_model_params(cfg.model, RandomStream.from_seed(cfg.seed).split("init")).named_tensors()
    trained = result.params.named_tensors()
    expected = {k: 0.9 * init[k] + 0.1 * trained[k] for k in init}
    return _max_diff(result.ema, expected), "one step, ratio 0.9"


def run_invariant_suite(module: str | None = None, faults: Faults | None = None) -> list[CheckResult]:
    faults = dict(faults or {})
    results = []
    for check in REGISTRY:
        if module and check.module != module:
            continue
        try:
            measured, detail = check.measure(faults)
        except Exception as exc:  # a crashing check is a failing check
            logger.exception("invariant %s raised", check.name)
            measured, detail = math.inf, f"{type(exc).__name__}: {exc}"
        ok = measured <= check.tolerance if check.inclusive else measured < check.tolerance
        results.append(CheckResult(check.name, check.module, "pass" if ok else "fail", measured, check.tolerance, detail))
        logger.debug("%s/%s measured=%g tolerance=%g", check.module, check.name, measured, check.tolerance)
    return results


def format_report(results: Iterable[CheckResult]) -> str:
    lines = []
    for r in results:
        record = asdict(r)
        if math.isinf(record["measured"]):
            record["measured"] = "inf"
        lines.append(json.dumps(record, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")


def parse_report(text: str) -> list[CheckResult]:
    results = []
    for line in text.splitlines():
        if not line.strip():
            continue
        raw: dict[str, Any] = json.loads(line)
        results.append(
            CheckResult(
                invariant=raw["invariant"],
                module=raw["module"],
                status=raw["status"],
                measured=float(raw["measured"]),
                tolerance=float(raw["tolerance"]),
                detail=raw.get("detail", ""),
            )
        )
    return results


def modules() -> list[str]:
    return sorted({c.module for c in REGISTRY})
