from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, fields, is_dataclass
from typing import Callable, Iterator, Mapping, Sequence

import torch
import torch.nn.functional as F

from pixmot.attention import MaskSpec, attend_reference, build_mask
from pixmot.flow_matching import ConditionFlags
from pixmot.layout import CleanImage, NoiseImage, SegmentLayout, Text, TokenType
from pixmot.numerics import DTYPE, RandomStream, ShapeError, Tensor, gelu, rms_norm
from pixmot.patch_codec import CodecParams, PatchGrid, codec_shapes, decode_patches, encode_image, token_grid
from pixmot.rope import RopeConfig, apply_rope, assign_positions, rope_config_for_head

IMG_OPEN = -1
IMG_CLOSE = -2
TIME_SCALE = 1000.0


class MalformedSequenceError(ValueError):
    pass


class ConditioningError(ValueError):
    pass


class Stream(enum.Enum):
    UND = "und"
    GEN = "gen"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    width: int = 64
    layers: int = 2
    head_size: int = 16
    kv_ratio: int = 4
    ffn_mult: int = 4
    freq_dim: int = 64
    norm_eps: float = 1e-6
    init_std: float = 0.02

    def __post_init__(self) -> None:
        for name in ("vocab_size", "width", "layers", "head_size", "kv_ratio", "ffn_mult", "freq_dim"):
            if getattr(self, name) < 1:
                raise ShapeError(f"model config field {name} must be positive, got {getattr(self, name)}")
        if self.width % self.head_size:
            raise ShapeError(f"width {self.width} is not a multiple of head size {self.head_size}")
        if self.width % 4 or self.freq_dim % 2:
            raise ShapeError("width must be divisible by 4 and freq_dim must be even")
        rope_config_for_head(self.head_size)

    @property
    def n_heads(self) -> int:
        return self.width // self.head_size

    @property
    def n_kv_heads(self) -> int:
        return max(1, self.n_heads // self.kv_ratio)

    @property
    def rope(self) -> RopeConfig:
        return rope_config_for_head(self.head_size)


@dataclass
class StreamParams:
    attn_norm: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    q_norm: Tensor
    k_norm: Tensor
    ffn_norm: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class MoTBlock:
    und: StreamParams
    gen: StreamParams


@dataclass
class EmbedderParams:
    w1: Tensor  # (freq_dim, width)
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class ModelParams:
    config: ModelConfig
    embed: Tensor
    codec: CodecParams
    blocks: list[MoTBlock]
    und_out_norm: Tensor
    gen_out_norm: Tensor
    text_head: Tensor
    time_embed: EmbedderParams
    noise_embed: EmbedderParams

    def named_tensors(self) -> dict[str, Tensor]:
        return dict(_walk("", self))

    @classmethod
    def from_named(cls, config: ModelConfig, tensors: Mapping[str, Tensor]) -> "ModelParams":
        missing = set(param_shapes(config)) - set(tensors)
        if missing:
            raise ShapeError(f"missing parameter arrays: {sorted(missing)[:5]}")

        def lookup(name: str, shape: tuple[int, ...]) -> Tensor:
            value = tensors[name]
            if tuple(value.shape) != shape:
                raise ShapeError(f"parameter {name} has shape {tuple(value.shape)}, expected {shape}")
            return value

        return _assemble(config, lookup)

    def replace(self, overrides: Mapping[str, Tensor]) -> "ModelParams":
        named = self.named_tensors()
        named.update(overrides)
        return ModelParams.from_named(self.config, named)


def _walk(prefix: str, node: object) -> Iterator[tuple[str, Tensor]]:
    if isinstance(node, torch.Tensor):
        yield prefix.rstrip("."), node
    elif isinstance(node, list):
        for i, item in enumerate(node):
            yield from _walk(f"{prefix}{i}.", item)
    elif is_dataclass(node) and not isinstance(node, ModelConfig):
        for f in fields(node):
            yield from _walk(f"{prefix}{f.name}.", getattr(node, f.name))


def _stream_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    hd, width, ffn = cfg.head_size, cfg.width, cfg.ffn_mult * cfg.width
    return {
        "attn_norm": (width,),
        "wq": (width, cfg.n_heads * hd),
        "wk": (width, cfg.n_kv_heads * hd),
        "wv": (width, cfg.n_kv_heads * hd),
        "wo": (cfg.n_heads * hd, width),
        "q_norm": (hd,),
        "k_norm": (hd,),
        "ffn_norm": (width,),
        "w1": (width, ffn),
        "b1": (ffn,),
        "w2": (ffn, width),
        "b2": (width,),
    }


def _embedder_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {
        "w1": (cfg.freq_dim, cfg.width),
        "b1": (cfg.width,),
        "w2": (cfg.width, cfg.width),
        "b2": (cfg.width,),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {"embed": (cfg.vocab_size, cfg.width)}
    shapes.update({f"codec.{k}": v for k, v in codec_shapes(cfg.width).items()})
    for layer in range(cfg.layers):
        for stream in ("und", "gen"):
            shapes.update({f"blocks.{layer}.{stream}.{k}": v for k, v in _stream_shapes(cfg).items()})
    shapes["und_out_norm"] = (cfg.width,)
    shapes["gen_out_norm"] = (cfg.width,)
    shapes["text_head"] = (cfg.width, cfg.vocab_size)
    for emb in ("time_embed", "noise_embed"):
        shapes.update({f"{emb}.{k}": v for k, v in _embedder_shapes(cfg).items()})
    return shapes


def _assemble(cfg: ModelConfig, make: Callable[[str, tuple[int, ...]], Tensor]) -> ModelParams:
    def group(prefix: str, shapes: Mapping[str, tuple[int, ...]]) -> dict[str, Tensor]:
        return {k: make(f"{prefix}{k}", s) for k, s in shapes.items()}

    return ModelParams(
        config=cfg,
        embed=make("embed", (cfg.vocab_size, cfg.width)),
        codec=CodecParams(**group("codec.", codec_shapes(cfg.width))),
        blocks=[
            MoTBlock(
                und=StreamParams(**group(f"blocks.{i}.und.", _stream_shapes(cfg))),
                gen=StreamParams(**group(f"blocks.{i}.gen.", _stream_shapes(cfg))),
            )
            for i in range(cfg.layers)
        ],
        und_out_norm=make("und_out_norm", (cfg.width,)),
        gen_out_norm=make("gen_out_norm", (cfg.width,)),
        text_head=make("text_head", (cfg.width, cfg.vocab_size)),
        time_embed=EmbedderParams(**group("time_embed.", _embedder_shapes(cfg))),
        noise_embed=EmbedderParams(**group("noise_embed.", _embedder_shapes(cfg))),
    )


def initial_kind(name: str) -> str:
    leaf = name.rsplit(".", 1)[-1]
    if leaf.endswith("norm"):
        return "ones"
    if leaf in ("b1", "b2") or leaf.endswith(("_b", "_b1", "_b2")):
        return "zeros"
    return "normal"


def init_model_params(cfg: ModelConfig, rng: RandomStream) -> ModelParams:
    def make(name: str, shape: tuple[int, ...]) -> Tensor:
        kind = initial_kind(name)
        if kind == "ones":
            return torch.ones(shape, dtype=DTYPE)
        if kind == "zeros":
            return torch.zeros(shape, dtype=DTYPE)
        values, _ = rng.split(name).normal_tensor(shape)
        return values * cfg.init_std

    return _assemble(cfg, make)


def is_generation_param(name: str) -> bool:
    return ".gen." in name or name.startswith(("gen_out_norm", "time_embed.", "noise_embed.", "codec.conv", "codec.dec_"))


def route(types: Sequence[TokenType]) -> list[Stream]:
    return [Stream.GEN if t == TokenType.NOISE_IMAGE else Stream.UND for t in types]


@dataclass(frozen=True)
class Routing:
    und_idx: Tensor
    gen_idx: Tensor

    @classmethod
    def from_types(cls, types: Sequence[TokenType]) -> "Routing":
        streams = route(types)
        und = [i for i, s in enumerate(streams) if s is Stream.UND]
        gen = [i for i, s in enumerate(streams) if s is Stream.GEN]
        return cls(torch.tensor(und, dtype=torch.int64), torch.tensor(gen, dtype=torch.int64))

    def apply(self, x: Tensor, block: MoTBlock, fn: Callable[[StreamParams, Tensor], Tensor]) -> Tensor:
        """Run ``fn`` per stream on that stream's rows only and scatter the results back in order."""
        out_und = fn(block.und, x.index_select(0, self.und_idx))
        out_gen = fn(block.gen, x.index_select(0, self.gen_idx))
        out = x.new_zeros((x.shape[0],) + tuple(out_und.shape[1:]))
        return out.index_copy(0, self.und_idx, out_und).index_copy(0, self.gen_idx, out_gen)


def _sinusoid(value: float, dim: int) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=DTYPE) / half)
    args = (value * TIME_SCALE) * freqs
    return torch.cat([torch.cos(args), torch.sin(args)])


def _embed_scalar(value: float | Tensor, params: EmbedderParams) -> Tensor:
    feats = _sinusoid(value, params.w1.shape[0])
    hidden = F.silu(feats @ params.w1 + params.b1)
    return hidden @ params.w2 + params.b2


def _check_unit(name: str, value: float | Tensor) -> None:
    if not 0.0 <= float(value) <= 1.0:
        raise ConditioningError(f"{name} must lie in [0, 1], got {float(value)}")


def timestep_embed(t: float | Tensor, params: EmbedderParams) -> Tensor:
    _check_unit("t", t)
    return _embed_scalar(t, params)


def ns_embed(sigma_bar: float | Tensor, params: EmbedderParams) -> Tensor:
    _check_unit("sigma_bar", sigma_bar)
    return _embed_scalar(sigma_bar, params)


def conditioning_embed(t: float | Tensor, sigma_bar: float | Tensor, params: ModelParams) -> Tensor:
    return timestep_embed(t, params.time_embed) + ns_embed(sigma_bar, params.noise_embed)


def mot_block_forward(
    hidden: Tensor,
    routing: Routing,
    positions: Tensor,
    mask: MaskSpec,
    block: MoTBlock,
    cfg: ModelConfig,
    rope_cfg: RopeConfig | None = None,
) -> Tensor:
    n = hidden.shape[0]
    hd, heads, kv_heads = cfg.head_size, cfg.n_heads, cfg.n_kv_heads
    rope_cfg = rope_cfg or cfg.rope

    def project(p: StreamParams, x: Tensor) -> Tensor:
        h = rms_norm(x, p.attn_norm, cfg.norm_eps)
        q = rms_norm((h @ p.wq).reshape(x.shape[0], heads, hd), p.q_norm, cfg.norm_eps)
        k = rms_norm((h @ p.wk).reshape(x.shape[0], kv_heads, hd), p.k_norm, cfg.norm_eps)
        v = h @ p.wv
        return torch.cat([q.flatten(1), k.flatten(1), v], dim=-1)

    qkv = routing.apply(hidden, block, project)
    q, k, v = torch.split(qkv, [heads * hd, kv_heads * hd, kv_heads * hd], dim=-1)
    q = apply_rope(q.reshape(n, heads, hd), positions, rope_cfg)
    k = apply_rope(k.reshape(n, kv_heads, hd), positions, rope_cfg)
    v = v.reshape(n, kv_heads, hd)
    group = heads // kv_heads
    k = k.repeat_interleave(group, dim=1)
    v = v.repeat_interleave(group, dim=1)
    att = attend_reference(q.transpose(0, 1), k.transpose(0, 1), v.transpose(0, 1), mask, hd**-0.5)
    att = att.transpose(0, 1).reshape(n, heads * hd)

    hidden = hidden + routing.apply(att, block, lambda p, a: a @ p.wo)

    def feed_forward(p: StreamParams, x: Tensor) -> Tensor:
        h = rms_norm(x, p.ffn_norm, cfg.norm_eps)
        return gelu(h @ p.w1 + p.b1) @ p.w2 + p.b2

    return hidden + routing.apply(hidden, block, feed_forward)


@dataclass
class TokenSequence:
    """Mixed text / clean-image / noise-image sequence ready for ``model_forward``.

    ``text_ids`` holds one id per text token in order; ``IMG_OPEN`` and
    ``IMG_CLOSE`` mark image boundaries. Each noise block carries its noisy
    state ``z_t`` and the ``(t, sigma_bar)`` it was drawn at.
    """

    layout: SegmentLayout
    text_ids: list[int]
    clean_images: list[Tensor] = field(default_factory=list)
    noise_images: list[Tensor] = field(default_factory=list)
    noise_cond: list[tuple[float, float]] = field(default_factory=list)
    positions: Tensor | None = None

    def __post_init__(self) -> None:
        if self.positions is None:
            self.positions = assign_positions(self.layout)

    def validate(self, vocab_size: int) -> None:
        segs = self.layout.segments
        n_text = sum(s.length for s in segs if isinstance(s, Text))
        if len(self.text_ids) != n_text:
            raise MalformedSequenceError(f"layout has {n_text} text tokens, got {len(self.text_ids)} ids")
        for i, tok in enumerate(self.text_ids):
            if tok not in (IMG_OPEN, IMG_CLOSE) and not 0 <= tok < vocab_size:
                raise MalformedSequenceError(f"text token {i} has id {tok} outside vocabulary {vocab_size}")
        clean = [s for s in segs if isinstance(s, CleanImage)]
        noise = [s for s in segs if isinstance(s, NoiseImage)]
        if len(clean) != len(self.clean_images):
            raise MalformedSequenceError(f"layout has {len(clean)} clean images, got {len(self.clean_images)}")
        if len(noise) != len(self.noise_images) or len(noise) != len(self.noise_cond):
            raise MalformedSequenceError(
                f"layout has {len(noise)} noise blocks, got {len(self.noise_images)} states "
                f"and {len(self.noise_cond)} conditioning pairs"
            )
        for kind, segments, images in (("clean", clean, self.clean_images), ("noise", noise, self.noise_images)):
            for j, (seg, img) in enumerate(zip(segments, images)):
                if img.dim() != 3 or token_grid(int(img.shape[1]), int(img.shape[2])) != (seg.rows, seg.cols):
                    raise MalformedSequenceError(
                        f"{kind} image {j} has shape {tuple(img.shape)}, layout grid is {seg.rows}x{seg.cols}"
                    )
        if self.positions is None or tuple(self.positions.shape) != (self.layout.size, 3):
            raise MalformedSequenceError("position triples do not cover the layout")


@dataclass
class ForwardOutput:
    text_logits: Tensor  # (num text tokens, vocab)
    x_hat: list[Tensor]  # one (3, H, W) prediction per noise block


def _embed_text(ids: Sequence[int], params: ModelParams) -> Tensor:
    rows = []
    for tok in ids:
        if tok == IMG_OPEN:
            rows.append(params.codec.img_open)
        elif tok == IMG_CLOSE:
            rows.append(params.codec.img_close)
        else:
            rows.append(params.embed[tok])
    return torch.stack(rows)


def embed_sequence(seq: TokenSequence, params: ModelParams) -> Tensor:
    parts = []
    text_pos = clean_pos = noise_pos = 0
    for seg in seq.layout.segments:
        if isinstance(seg, Text):
            parts.append(_embed_text(seq.text_ids[text_pos : text_pos + seg.length], params))
            text_pos += seg.length
        elif isinstance(seg, CleanImage):
            parts.append(encode_image(seq.clean_images[clean_pos], params.codec).embeddings)
            clean_pos += 1
        else:
            t, sigma_bar = seq.noise_cond[noise_pos]
            grid = encode_image(seq.noise_images[noise_pos], params.codec)
            parts.append(grid.embeddings + conditioning_embed(t, sigma_bar, params))
            noise_pos += 1
    return torch.cat(parts, dim=0)


def model_forward(seq: TokenSequence, params: ModelParams, rope_cfg: RopeConfig | None = None) -> ForwardOutput:
    cfg = params.config
    seq.validate(cfg.vocab_size)
    types = seq.layout.token_types()
    routing = Routing.from_types(types)
    mask = build_mask(seq.layout)
    hidden = embed_sequence(seq, params)
    for block in params.blocks:
        hidden = mot_block_forward(hidden, routing, seq.positions, mask, block, cfg, rope_cfg)

    text_idx = torch.tensor([i for i, t in enumerate(types) if t == TokenType.TEXT], dtype=torch.int64)
    text_states = rms_norm(hidden.index_select(0, text_idx), params.und_out_norm, cfg.norm_eps)
    logits = text_states @ params.text_head

    x_hat = []
    for span in seq.layout.spans():
        if isinstance(span.segment, NoiseImage):
            states = rms_norm(hidden[span.start : span.stop], params.gen_out_norm, cfg.norm_eps)
            grid = PatchGrid(span.segment.rows, span.segment.cols, states)
            x_hat.append(decode_patches(grid, params.codec))
    return ForwardOutput(text_logits=logits, x_hat=x_hat)


def build_generation_sequence(
    caption: Sequence[int],
    z_t: Tensor,
    t: float,
    sigma_bar: float,
    flags: ConditionFlags,
    context_images: Sequence[Tensor] = (),
    paired: bool = False,
) -> TokenSequence:
    """Assemble ``[caption | <img> clean </img> ... | <img> noise]``.

    Dropping text keeps only the leading ``<bos>``; dropping image context
    keeps the boundary markers and removes the image content.
    """
    if not caption:
        raise MalformedSequenceError("caption must hold at least the <bos> token")
    pending = list(caption) if flags.text_present else [caption[0]]
    segments: list = []
    text_ids: list[int] = []
    clean: list[Tensor] = []
    for img in context_images:
        pending.append(IMG_OPEN)
        if flags.image_context_present:
            segments.append(Text(len(pending)))
            text_ids.extend(pending)
            pending = []
            segments.append(CleanImage(*token_grid(int(img.shape[1]), int(img.shape[2]))))
            clean.append(img)
        pending.append(IMG_CLOSE)
    pending.append(IMG_OPEN)
    segments.append(Text(len(pending)))
    text_ids.extend(pending)
    rows, cols = token_grid(int(z_t.shape[1]), int(z_t.shape[2]))
    segments.append(NoiseImage(rows, cols, paired=paired and flags.image_context_present and bool(clean)))
    return TokenSequence(
        layout=SegmentLayout(tuple(segments)),
        text_ids=text_ids,
        clean_images=clean,
        noise_images=[z_t],
        noise_cond=[(t, sigma_bar)],
    )
